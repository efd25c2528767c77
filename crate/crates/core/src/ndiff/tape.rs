use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use super::Scalar;
use crate::error::{shape, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalisation mode.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalise with the statistics of the current rows.
    Train { eps: f64 },
    /// Normalise with stored running statistics.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
        eps: f64,
    },
}

/// Per-channel statistics of a training-mode batch normalisation, for the
/// caller to fold into its running averages. `var` is unbiased.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GumbelMode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<u32>,
    },
    Gather {
        x: Var,
        index: Vec<u32>,
    },
    WeightedGather {
        x: Var,
        index: Vec<u32>,
        weight: Vec<T>,
    },
    Concat(Vec<Var>),
    Column(Var, usize),
    Mean(Var),
    StraightThrough {
        logits: Var,
        soft: Option<Vec<T>>,
        inv_tau: T,
    },
    FocalLoss {
        logits: Var,
        dlogits: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn t<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is kept after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.expect_rank2(op)
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(shape("matmul", format!("[{m}, {k}] · [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), needs))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * c).collect()).unwrap();
        let needs = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), needs)
    }

    fn row_operand(&self, x: Var, r: Var, op: &'static str) -> Result<(usize, usize)> {
        let (n, c) = self.mat(x, op)?;
        if self.value(r).len() != c {
            return Err(shape(
                op,
                format!("row operand of {} values against {c} columns", self.value(r).len()),
            ));
        }
        Ok((n, c))
    }

    /// Add a per-column vector to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c) = self.row_operand(x, b, "add_row")?;
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c.max(1)).take(n) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let needs = self.needs(&[x, b]);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::AddRow(x, b), needs))
    }

    /// Multiply every row by a per-column vector (a depthwise 1×1 convolution).
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, c) = self.row_operand(x, w, "mul_row")?;
        let wv = self.value(w).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c.max(1)).take(n) {
            for (o, &ww) in row.iter_mut().zip(wv) {
                *o *= ww;
            }
        }
        let needs = self.needs(&[x, w]);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::MulRow(x, w), needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect(),
        )
        .unwrap();
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| sigmoid(a)).collect()).unwrap();
        let needs = self.needs(&[x]);
        self.push(out, Op::Sigmoid(x), needs)
    }

    /// Per-column batch normalisation of `[n, c]` rows followed by the
    /// affine map `gamma * xhat + beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c) = self.row_operand(x, gamma, "batch_norm")?;
        self.row_operand(x, beta, "batch_norm")?;
        if n == 0 {
            return Err(shape("batch_norm", "no rows"));
        }
        let xv = self.value(x).data();
        let (mean, var, stats, train, eps) = match mode {
            BnMode::Train { eps } => {
                let mut mean = vec![0.0f64; c];
                for row in xv.chunks_exact(c) {
                    for (m, &a) in mean.iter_mut().zip(row) {
                        *m += a.as_f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0f64; c];
                for row in xv.chunks_exact(c) {
                    for ((s, &a), m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = a.as_f64() - m;
                        *s += d * d;
                    }
                }
                let unbiased: Vec<f64> = var
                    .iter()
                    .map(|s| if n > 1 { s / (n - 1) as f64 } else { *s / n as f64 })
                    .collect();
                var.iter_mut().for_each(|s| *s /= n as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats), true, eps)
            }
            BnMode::Eval {
                running_mean,
                running_var,
                eps,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(shape("batch_norm", "running statistics width"));
                }
                (
                    running_mean.iter().map(|v| v.as_f64()).collect(),
                    running_var.iter().map(|v| v.as_f64()).collect(),
                    None,
                    false,
                    eps,
                )
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| t(1.0 / libm::sqrt(v + eps))).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| t(m)).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for row in xv.chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean_t[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        let var = self.push(
            Tensor::matrix(n, c, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            needs,
        );
        Ok((var, stats))
    }

    /// Column-wise maximum over consecutive row segments
    /// `offsets[s]..offsets[s + 1]`. Gradient flows to the arg-max rows only
    /// (first maximum on ties).
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let (n, c) = self.mat(x, "segment_max")?;
        if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != n {
            return Err(shape("segment_max", format!("offsets do not span {n} rows")));
        }
        let s = offsets.len() - 1;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); s * c];
        let mut argmax = vec![0u32; s * c];
        for seg in 0..s {
            let (lo, hi) = (offsets[seg], offsets[seg + 1]);
            if hi <= lo {
                return Err(shape("segment_max", format!("segment {seg} is empty")));
            }
            let orow = &mut out[seg * c..(seg + 1) * c];
            let arow = &mut argmax[seg * c..(seg + 1) * c];
            orow.copy_from_slice(&xv[lo * c..(lo + 1) * c]);
            arow.iter_mut().for_each(|a| *a = lo as u32);
            for r in lo + 1..hi {
                let row = &xv[r * c..(r + 1) * c];
                for j in 0..c {
                    if row[j] > orow[j] {
                        orow[j] = row[j];
                        arow[j] = r as u32;
                    }
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::matrix(s, c, out)?, Op::SegmentMax { x, argmax }, needs))
    }

    /// Max over fixed-size groups of `group` consecutive rows (a neighbour axis).
    pub fn max_pool_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, _) = self.mat(x, "max_pool_groups")?;
        if group == 0 || n % group != 0 {
            return Err(shape("max_pool_groups", format!("{n} rows in groups of {group}")));
        }
        let offsets: Vec<usize> = (0..=n / group).map(|s| s * group).collect();
        self.segment_max(x, &offsets)
    }

    /// Rows of `x` selected by an index table.
    pub fn gather_rows(&mut self, x: Var, index: Vec<u32>) -> Result<Var> {
        let (n, c) = self.mat(x, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= n) {
            return Err(shape("gather_rows", format!("index {bad} out of {n} rows")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(&xv[i as usize * c..(i as usize + 1) * c]);
        }
        let rows = index.len();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::matrix(rows, c, out)?, Op::Gather { x, index }, needs))
    }

    /// `out[r] = Σ_j weight[r k + j] · x[index[r k + j]]` for groups of `k`.
    pub fn weighted_gather(&mut self, x: Var, index: Vec<u32>, weight: Vec<T>, k: usize) -> Result<Var> {
        let (n, c) = self.mat(x, "weighted_gather")?;
        if k == 0 || index.len() % k != 0 || index.len() != weight.len() {
            return Err(shape("weighted_gather", "index/weight tables disagree"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= n) {
            return Err(shape("weighted_gather", format!("index {bad} out of {n} rows")));
        }
        let rows = index.len() / k;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let orow = &mut out[r * c..(r + 1) * c];
            for j in 0..k {
                let i = index[r * k + j] as usize;
                let w = weight[r * k + j];
                for (o, &a) in orow.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                    *o += w * a;
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::matrix(rows, c, out)?,
            Op::WeightedGather { x, index, weight },
            needs,
        ))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape("concat_cols", "nothing to concatenate"));
        }
        let n = self.mat(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat(p, "concat_cols")?;
            if r != n {
                return Err(shape("concat_cols", format!("row counts {n} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(Tensor::matrix(n, total, out)?, Op::Concat(parts.to_vec()), needs))
    }

    /// Single column of a matrix as `[n, 1]`.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let (n, c) = self.mat(x, "column")?;
        if col >= c {
            return Err(shape("column", format!("column {col} of {c}")));
        }
        let out = self.value(x).data().iter().skip(col).step_by(c).copied().collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::matrix(n, 1, out)?, Op::Column(x, col), needs))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(shape("mean", "empty tensor"));
        }
        let s: f64 = v.data().iter().map(|a| a.as_f64()).sum::<f64>() / v.len() as f64;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(t(s)), Op::Mean(x), needs))
    }

    /// Gumbel-softmax with a straight-through hard sample.
    ///
    /// `logits` is `[b, c]`. In training mode `noise` holds one Gumbel(0, 1)
    /// draw per logit; the forward value is the one-hot arg-max of
    /// `(logits + noise) / temperature` while the backward pass uses the
    /// gradient of the soft sample. In evaluation mode the output is the
    /// one-hot arg-max of the logits and no gradient flows.
    pub fn gumbel_softmax(
        &mut self,
        logits: Var,
        noise: Option<&[T]>,
        temperature: f64,
        mode: GumbelMode,
    ) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gumbel_softmax: temperature {temperature} must be positive"
            )));
        }
        let (b, c) = self.mat(logits, "gumbel_softmax")?;
        let lv = self.value(logits).data();
        let inv_tau: T = t(1.0 / temperature);
        let mut out = vec![T::zero(); b * c];
        let soft = match mode {
            GumbelMode::Eval => {
                for r in 0..b {
                    out[r * c + argmax(&lv[r * c..(r + 1) * c])] = T::one();
                }
                None
            }
            GumbelMode::Train => {
                let noise = noise.ok_or_else(|| {
                    Error::InvalidArgument("gumbel_softmax: training mode needs noise".into())
                })?;
                if noise.len() != b * c {
                    return Err(shape("gumbel_softmax", "noise length"));
                }
                let mut soft = vec![T::zero(); b * c];
                for r in 0..b {
                    let z: Vec<T> = (0..c)
                        .map(|j| (lv[r * c + j] + noise[r * c + j]) * inv_tau)
                        .collect();
                    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
                    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
                    let s = e.iter().copied().fold(T::zero(), |a, v| a + v);
                    for j in 0..c {
                        soft[r * c + j] = e[j] / s;
                    }
                    out[r * c + argmax(&z)] = T::one();
                }
                Some(soft)
            }
        };
        let needs = self.needs(&[logits]) && soft.is_some();
        Ok(self.push(
            Tensor::matrix(b, c, out)?,
            Op::StraightThrough {
                logits,
                soft,
                inv_tau,
            },
            needs,
        ))
    }

    /// Weighted focal loss on logits `[n, 1]` against (possibly smoothed)
    /// targets in [0, 1]: `Σ w_i L_i / Σ w_i` with
    /// `L = -[y (1-p)^γ ln p + (1-y) p^γ ln(1-p)]`, `p = sigmoid(z)` clamped
    /// to `[1e-7, 1 - 1e-7]`.
    pub fn focal_loss(&mut self, logits: Var, targets: &[T], weights: &[T], gamma: f64) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.len();
        if n == 0 || targets.len() != n || weights.len() != n {
            return Err(shape(
                "focal_loss",
                format!("{} logits, {} targets, {} weights", n, targets.len(), weights.len()),
            ));
        }
        let wsum: f64 = weights.iter().map(|w| w.as_f64()).sum();
        if !(wsum > 0.0) {
            return Err(Error::InvalidArgument("focal_loss: weights sum to zero".into()));
        }
        let mut total = 0.0f64;
        let mut dlogits = Vec::with_capacity(n);
        for i in 0..n {
            let z = lv.data()[i].as_f64();
            let y = targets[i].as_f64();
            let w = weights[i].as_f64() / wsum;
            let (l, dl_dp, clamped) = focal_point(sigmoid_f64(z), y, gamma);
            let p = clamp_prob(sigmoid_f64(z));
            total += w * l;
            let dp_dz = if clamped { 0.0 } else { p * (1.0 - p) };
            dlogits.push(t(w * dl_dp * dp_dz));
        }
        let needs = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(t(total)), Op::FocalLoss { logits, dlogits }, needs))
    }

    /// Hash of the data-dependent branches taken so far: ReLU masks, max
    /// arg-max rows and hard gate choices. Two recordings of the same graph
    /// with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .for_each(|v| feed((*v > T::zero()) as u64)),
                Op::SegmentMax { argmax, .. } => argmax.iter().for_each(|&a| feed(a as u64)),
                Op::StraightThrough { .. } => node
                    .value
                    .data()
                    .iter()
                    .for_each(|v| feed((*v > T::zero()) as u64)),
                _ => {}
            }
        }
        h
    }

    /// Reverse pass from a one-element output. Parameter leaves keep their
    /// gradients; intermediate gradients are released as they are consumed.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(shape("backward", "output must hold a single value"));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let shape_out = self.value(output).shape().to_vec();
        self.nodes[output.0].grad = Some(Tensor::filled(&shape_out, T::one()));
        for i in (0..=output.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            backprop(before, node, &g);
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

fn sigmoid_f64(a: f64) -> f64 {
    sigmoid(a)
}

pub(crate) const PROB_EPS: f64 = 1e-7;

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Focal loss of one point and its derivative with respect to `p`; the flag
/// reports whether `p` hit the clamp.
pub(crate) fn focal_point(p_raw: f64, y: f64, gamma: f64) -> (f64, f64, bool) {
    let p = clamp_prob(p_raw);
    let clamped = p != p_raw;
    let q = 1.0 - p;
    let lp = libm::log(p);
    let lq = libm::log(q);
    let qg = libm::pow(q, gamma);
    let pg = libm::pow(p, gamma);
    let loss = -(y * qg * lp + (1.0 - y) * pg * lq);
    let dqg = if gamma == 0.0 { 0.0 } else { gamma * libm::pow(q, gamma - 1.0) };
    let dpg = if gamma == 0.0 { 0.0 } else { gamma * libm::pow(p, gamma - 1.0) };
    let dl_dp = -(y * (-dqg * lp + qg / p) + (1.0 - y) * (dpg * lq - pg / q));
    (loss, dl_dp, clamped)
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for j in 1..v.len() {
        if v[j] > v[best] {
            best = j;
        }
    }
    best
}

/// Add `g` into the gradient slot of `v`, creating it when absent.
fn accumulate<T: Scalar>(nodes: &mut [Node<T>], v: Var, g: Tensor<T>) {
    let node = &mut nodes[v.0];
    if !node.needs_grad {
        return;
    }
    match &mut node.grad {
        Some(existing) => existing.add_assign(&g),
        None => node.grad = Some(g),
    }
}

/// Mutable gradient buffer of `v`, zero-initialised on first use; `None`
/// when `v` does not need a gradient.
fn grad_buf<T: Scalar>(nodes: &mut [Node<T>], v: Var) -> Option<&mut Tensor<T>> {
    let node = &mut nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    if node.grad.is_none() {
        node.grad = Some(Tensor::zeros(node.value.shape()));
    }
    node.grad.as_mut()
}

fn backprop<T: Scalar>(nodes: &mut [Node<T>], node: &Node<T>, g: &Tensor<T>) {
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let n = nodes[b.0].value.cols();
            // dA = dC · Bᵀ, dB = Aᵀ · dC
            if a.0 == b.0 {
                let v = nodes[a.0].value.clone();
                if let Some(buf) = grad_buf(nodes, *a) {
                    T::gemm(m, n, k, gd, false, v.data(), true, buf.data_mut(), true);
                    T::gemm(k, m, n, v.data(), true, gd, false, buf.data_mut(), true);
                }
            } else {
                let (na, nb) = pair_mut(nodes, a.0, b.0);
                if na.needs_grad {
                    let fresh = na.grad.is_none();
                    let buf = na.grad.get_or_insert_with(|| Tensor::zeros(&[m, k]));
                    T::gemm(m, n, k, gd, false, nb.value.data(), true, buf.data_mut(), !fresh);
                }
                if nb.needs_grad {
                    let fresh = nb.grad.is_none();
                    let buf = nb.grad.get_or_insert_with(|| Tensor::zeros(&[k, n]));
                    T::gemm(k, m, n, na.value.data(), true, gd, false, buf.data_mut(), !fresh);
                }
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, g.clone());
            accumulate(nodes, *b, g.clone());
        }
        Op::Mul(a, b) => {
            if nodes[a.0].needs_grad {
                let d = zip(gd, nodes[b.0].value.data(), |x, y| x * y);
                let sh = nodes[a.0].value.shape().to_vec();
                accumulate(nodes, *a, Tensor::new(sh, d).unwrap());
            }
            if nodes[b.0].needs_grad {
                let d = zip(gd, nodes[a.0].value.data(), |x, y| x * y);
                let sh = nodes[b.0].value.shape().to_vec();
                accumulate(nodes, *b, Tensor::new(sh, d).unwrap());
            }
        }
        Op::Scale(x, c) => {
            let d = gd.iter().map(|&v| v * *c).collect();
            let sh = nodes[x.0].value.shape().to_vec();
            accumulate(nodes, *x, Tensor::new(sh, d).unwrap());
        }
        Op::AddRow(x, b) => {
            accumulate(nodes, *x, g.clone());
            if nodes[b.0].needs_grad {
                let c = g.cols();
                let sums = column_sums(gd, c);
                let sh = nodes[b.0].value.shape().to_vec();
                accumulate(nodes, *b, Tensor::new(sh, sums).unwrap());
            }
        }
        Op::MulRow(x, w) => {
            let c = g.cols();
            if nodes[x.0].needs_grad {
                let wv = nodes[w.0].value.data();
                let mut d = Vec::with_capacity(gd.len());
                for row in gd.chunks_exact(c.max(1)) {
                    d.extend(row.iter().zip(wv).map(|(&v, &w)| v * w));
                }
                accumulate(nodes, *x, Tensor::matrix(g.rows(), c, d).unwrap());
            }
            if nodes[w.0].needs_grad {
                let xv = nodes[x.0].value.data();
                let sums = column_dot(gd, xv, c);
                let sh = nodes[w.0].value.shape().to_vec();
                accumulate(nodes, *w, Tensor::new(sh, sums).unwrap());
            }
        }
        Op::Relu(x) => {
            let d = zip(gd, node.value.data(), |gv, y| if y > T::zero() { gv } else { T::zero() });
            accumulate(nodes, *x, Tensor::new(g.shape().to_vec(), d).unwrap());
        }
        Op::Sigmoid(x) => {
            let d = zip(gd, node.value.data(), |gv, y| gv * y * (T::one() - y));
            accumulate(nodes, *x, Tensor::new(g.shape().to_vec(), d).unwrap());
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let c = g.cols();
            let n = g.rows();
            let dbeta = column_sums(gd, c);
            let dgamma = column_dot(gd, xhat, c);
            if nodes[x.0].needs_grad {
                let gam = nodes[gamma.0].value.data();
                let mut dx = Vec::with_capacity(n * c);
                if *train {
                    // dx = γ σ⁻¹ (g - mean(g) - x̂ mean(g x̂))
                    let nf = n as f64;
                    let scale: Vec<T> = (0..c).map(|j| t(gam[j].as_f64() * inv_std[j].as_f64())).collect();
                    let gmean: Vec<T> = dbeta.iter().map(|v| t(v.as_f64() / nf)).collect();
                    let xmean: Vec<T> = dgamma.iter().map(|v| t(v.as_f64() / nf)).collect();
                    for (row, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dx.push(scale[j] * (row[j] - gmean[j] - hrow[j] * xmean[j]));
                        }
                    }
                } else {
                    let k: Vec<T> = (0..c).map(|j| gam[j] * inv_std[j]).collect();
                    for row in gd.chunks_exact(c) {
                        dx.extend(row.iter().zip(&k).map(|(&v, &s)| v * s));
                    }
                }
                accumulate(nodes, *x, Tensor::matrix(n, c, dx).unwrap());
            }
            let gsh = nodes[gamma.0].value.shape().to_vec();
            accumulate(nodes, *gamma, Tensor::new(gsh, dgamma).unwrap());
            let bsh = nodes[beta.0].value.shape().to_vec();
            accumulate(nodes, *beta, Tensor::new(bsh, dbeta).unwrap());
        }
        Op::SegmentMax { x, argmax } => {
            let c = g.cols();
            if let Some(buf) = grad_buf(nodes, *x) {
                let bd = buf.data_mut();
                for (arow, grow) in argmax.chunks_exact(c).zip(gd.chunks_exact(c)) {
                    for (j, (&r, &v)) in arow.iter().zip(grow).enumerate() {
                        bd[r as usize * c + j] += v;
                    }
                }
            }
        }
        Op::Gather { x, index } => {
            let c = g.cols();
            if let Some(buf) = grad_buf(nodes, *x) {
                let bd = buf.data_mut();
                for (r, &i) in index.iter().enumerate() {
                    let dst = &mut bd[i as usize * c..(i as usize + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                        *d += v;
                    }
                }
            }
        }
        Op::WeightedGather { x, index, weight } => {
            let c = g.cols();
            let k = index.len() / g.rows().max(1);
            if let Some(buf) = grad_buf(nodes, *x) {
                let bd = buf.data_mut();
                for (e, (&i, &w)) in index.iter().zip(weight).enumerate() {
                    let r = e / k;
                    let dst = &mut bd[i as usize * c..(i as usize + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                        *d += w * v;
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let n = g.rows();
            let total = g.cols();
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].value.cols();
                if nodes[p.0].needs_grad {
                    let mut d = Vec::with_capacity(n * w);
                    for r in 0..n {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(nodes, *p, Tensor::matrix(n, w, d).unwrap());
                }
                offset += w;
            }
        }
        Op::Column(x, col) => {
            let c = nodes[x.0].value.cols();
            if let Some(buf) = grad_buf(nodes, *x) {
                let bd = buf.data_mut();
                for (r, &v) in gd.iter().enumerate() {
                    bd[r * c + col] += v;
                }
            }
        }
        Op::Mean(x) => {
            let len = nodes[x.0].value.len();
            let v = gd[0] / t(len as f64);
            let sh = nodes[x.0].value.shape().to_vec();
            accumulate(nodes, *x, Tensor::filled(&sh, v));
        }
        Op::StraightThrough {
            logits,
            soft,
            inv_tau,
        } => {
            if let Some(y) = soft {
                let c = g.cols();
                let mut d = vec![T::zero(); gd.len()];
                for r in 0..g.rows() {
                    let gr = &gd[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    for j in 0..c {
                        d[r * c + j] = *inv_tau * yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(nodes, *logits, Tensor::matrix(g.rows(), c, d).unwrap());
            }
        }
        Op::FocalLoss { logits, dlogits } => {
            let d = dlogits.iter().map(|&v| v * gd[0]).collect();
            let sh = nodes[logits.0].value.shape().to_vec();
            accumulate(nodes, *logits, Tensor::new(sh, d).unwrap());
        }
    }
}

fn pair_mut<T>(nodes: &mut [Node<T>], i: usize, j: usize) -> (&mut Node<T>, &mut Node<T>) {
    debug_assert_ne!(i, j);
    if i < j {
        let (lo, hi) = nodes.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

fn zip<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Per-column sums of the rows of `g`, accumulated in f64.
fn column_sums<T: Scalar>(g: &[T], c: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; c];
    for row in g.chunks_exact(c.max(1)) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    acc.into_iter().map(t).collect()
}

/// Per-column sums of `g ⊙ x`, accumulated in f64.
fn column_dot<T: Scalar>(g: &[T], x: &[T], c: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; c];
    for (row, xr) in g.chunks_exact(c.max(1)).zip(x.chunks_exact(c.max(1))) {
        for ((a, &v), &w) in acc.iter_mut().zip(row).zip(xr) {
            *a += (v * w).as_f64();
        }
    }
    acc.into_iter().map(t).collect()
}
