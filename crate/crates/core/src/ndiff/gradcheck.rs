//! Central finite-difference oracle for every differentiable primitive.
//!
//! Each case builds a scalar `mean(output ⊙ R)` for a fixed random `R`,
//! differentiates it on the tape and compares against
//! `(f(x + h) - f(x - h)) / 2h` with `h = 1e-3`, in double precision.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{BnMode, GumbelMode, Tape, Tensor, Var};
use crate::rng::{rng_from_seed, Rng};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over the whole gradient; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Report {
    /// Worst norm-wise relative error over the inputs.
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose ±h evaluations crossed a ReLU or arg-max boundary,
    /// where the derivative is not defined at this step size.
    pub skipped: usize,
}

/// Run `build` on the given inputs and return the worst relative error over
/// inputs that need gradients. Every coordinate must stay on one smooth piece.
pub fn check<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let report = check_detailed(inputs, seed, build);
    assert_eq!(report.skipped, 0, "a perturbation crossed a kink");
    report.worst
}

/// As [`check`], excluding coordinates whose perturbations change the
/// branch signature of the recording.
pub fn check_detailed<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> Report
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut projection: Option<Tensor<f64>> = None;
    let mut eval = |xs: &[Tensor<f64>], want_grads: bool| -> (f64, u64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let r = projection
            .get_or_insert_with(|| {
                let mut rng = rng_from_seed(seed ^ 0xABCD);
                let shape = tape.value(out).shape().to_vec();
                let n = tape.value(out).len();
                Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
            })
            .clone();
        let signature = tape.branch_signature();
        let rv = tape.constant(r);
        let prod = tape.mul(out, rv).unwrap();
        let loss = tape.mean(prod).unwrap();
        let value = tape.value(loss).data()[0];
        let mut grads = Vec::new();
        if want_grads {
            tape.backward(loss).unwrap();
            for (v, x) in vars.iter().zip(xs) {
                grads.push(
                    tape.grad(*v)
                        .map(|g| g.data().to_vec())
                        .unwrap_or_else(|| vec![0.0; x.len()]),
                );
            }
        }
        (value, signature, grads)
    };
    let (_, base_signature, analytic) = eval(inputs, true);
    let mut report = Report {
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (which, x) in inputs.iter().enumerate() {
        let mut a = Vec::with_capacity(x.len());
        let mut numeric = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= STEP;
            let (fp, sp, _) = eval(&plus, false);
            let (fm, sm, _) = eval(&minus, false);
            if sp != base_signature || sm != base_signature {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            a.push(analytic[which][i]);
            numeric.push((fp - fm) / (2.0 * STEP));
        }
        report.worst = report.worst.max(relative_error(&a, &numeric));
    }
    report
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks are never straddled.
pub fn away_from_zero(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let m = 0.05 + rng.random::<f64>();
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
    .unwrap()
}

/// Distinct values at least 0.01 apart, so no arg-max flips within ±h.
pub fn well_separated(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let n = rows * cols;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::matrix(rows, cols, order.iter().map(|&o| o as f64 * 0.01 - 0.3).collect()).unwrap()
}

pub const SEEDS: u64 = 50;

/// A family of randomised checks; `run(seed)` draws and checks one instance.
#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    pub run: fn(u64) -> Report,
    /// Share of coordinates allowed to straddle a kink.
    pub max_skipped: f64,
}

/// Aggregate of one case over many seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub name: &'static str,
    pub seeds: u64,
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
    pub max_skipped: f64,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst < TOLERANCE && self.skipped as f64 <= self.max_skipped * (self.checked + self.skipped) as f64
    }
}

pub fn run_case(case: &Case, seeds: u64) -> Summary {
    let mut s = Summary {
        name: case.name,
        seeds,
        worst: 0.0,
        checked: 0,
        skipped: 0,
        max_skipped: case.max_skipped,
    };
    for seed in 0..seeds {
        let r = (case.run)(seed);
        s.worst = s.worst.max(r.worst);
        s.checked += r.checked;
        s.skipped += r.skipped;
    }
    s
}

fn dims(rng: &mut Rng) -> (usize, usize, usize) {
    (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6))
}

const fn smooth(name: &'static str, run: fn(u64) -> Report) -> Case {
    Case { name, run, max_skipped: 0.0 }
}

/// One case per differentiable tape primitive.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        smooth("matmul", |seed| {
            let mut rng = rng_from_seed(seed);
            let (m, k, n) = dims(&mut rng);
            let a = random_matrix(&mut rng, m, k);
            let b = random_matrix(&mut rng, k, n);
            check_detailed(&[a, b], seed, |t, v| t.matmul(v[0], v[1]).unwrap())
        }),
        smooth("matmul shared operand", |seed| {
            let mut rng = rng_from_seed(seed);
            let n = rng.random_range(1..5);
            let a = random_matrix(&mut rng, n, n);
            check_detailed(&[a], seed, |t, v| t.matmul(v[0], v[0]).unwrap())
        }),
        smooth("add/mul/scale", |seed| {
            let mut rng = rng_from_seed(seed);
            let (m, n, _) = dims(&mut rng);
            let a = random_matrix(&mut rng, m, n);
            let b = random_matrix(&mut rng, m, n);
            check_detailed(&[a, b], seed, |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let p = t.mul(s, v[1]).unwrap();
                t.scale(p, 1.7)
            })
        }),
        smooth("add_row/mul_row", |seed| {
            let mut rng = rng_from_seed(seed);
            let (m, n, _) = dims(&mut rng);
            let x = random_matrix(&mut rng, m, n);
            let w = random_matrix(&mut rng, 1, n);
            let b = random_matrix(&mut rng, 1, n);
            check_detailed(&[x, w, b], seed, |t, v| {
                let y = t.mul_row(v[0], v[1]).unwrap();
                t.add_row(y, v[2]).unwrap()
            })
        }),
        smooth("relu", |seed| {
            let mut rng = rng_from_seed(seed);
            let (m, n, _) = dims(&mut rng);
            check_detailed(&[away_from_zero(&mut rng, m, n)], seed, |t, v| t.relu(v[0]))
        }),
        smooth("sigmoid", |seed| {
            let mut rng = rng_from_seed(seed);
            let (m, n, _) = dims(&mut rng);
            let x = random_matrix(&mut rng, m, n);
            check_detailed(&[x], seed, |t, v| t.sigmoid(v[0]))
        }),
        smooth("batch_norm train", |seed| {
            let mut rng = rng_from_seed(seed);
            let rows = rng.random_range(3..9);
            let cols = rng.random_range(1..5);
            let x = random_matrix(&mut rng, rows, cols);
            let g = random_matrix(&mut rng, 1, cols);
            let b = random_matrix(&mut rng, 1, cols);
            check_detailed(&[x, g, b], seed, |t, v| {
                t.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 }).unwrap().0
            })
        }),
        smooth("batch_norm eval", |seed| {
            let mut rng = rng_from_seed(seed);
            let rows = rng.random_range(1..6);
            let cols = rng.random_range(1..5);
            let x = random_matrix(&mut rng, rows, cols);
            let g = random_matrix(&mut rng, 1, cols);
            let b = random_matrix(&mut rng, 1, cols);
            let rm: Vec<f64> = (0..cols).map(|_| rng.random::<f64>()).collect();
            let rv: Vec<f64> = (0..cols).map(|_| 0.5 + rng.random::<f64>()).collect();
            check_detailed(&[x, g, b], seed, move |t, v| {
                let mode = BnMode::Eval {
                    running_mean: &rm,
                    running_var: &rv,
                    eps: 1e-5,
                };
                t.batch_norm(v[0], v[1], v[2], mode).unwrap().0
            })
        }),
        smooth("max_pool_groups", |seed| {
            let mut rng = rng_from_seed(seed);
            let groups = rng.random_range(1..5);
            let k = rng.random_range(1..5);
            let cols = rng.random_range(1..4);
            let x = well_separated(&mut rng, groups * k, cols);
            check_detailed(&[x], seed, move |t, v| t.max_pool_groups(v[0], k).unwrap())
        }),
        smooth("segment_max ragged", |seed| {
            let mut rng = rng_from_seed(seed);
            let mut offsets = vec![0usize];
            for _ in 0..rng.random_range(1..5) {
                let last = *offsets.last().unwrap();
                offsets.push(last + rng.random_range(1..5));
            }
            let x = well_separated(&mut rng, *offsets.last().unwrap(), 2);
            check_detailed(&[x], seed, move |t, v| t.segment_max(v[0], &offsets).unwrap())
        }),
        smooth("gather_rows", |seed| {
            let mut rng = rng_from_seed(seed);
            let (n, c, m) = dims(&mut rng);
            let x = random_matrix(&mut rng, n, c);
            let idx: Vec<u32> = (0..m + 3).map(|_| rng.random_range(0..n as u32)).collect();
            check_detailed(&[x], seed, move |t, v| t.gather_rows(v[0], idx.clone()).unwrap())
        }),
        smooth("weighted_gather", |seed| {
            let mut rng = rng_from_seed(seed);
            let (n, c, m) = dims(&mut rng);
            let k = 3;
            let x = random_matrix(&mut rng, n, c);
            let idx: Vec<u32> = (0..m * k).map(|_| rng.random_range(0..n as u32)).collect();
            let w: Vec<f64> = (0..m * k).map(|_| rng.random::<f64>()).collect();
            check_detailed(&[x], seed, move |t, v| t.weighted_gather(v[0], idx.clone(), w.clone(), k).unwrap())
        }),
        smooth("concat_cols/column", |seed| {
            let mut rng = rng_from_seed(seed);
            let (n, a, b) = dims(&mut rng);
            let x = random_matrix(&mut rng, n, a);
            let y = random_matrix(&mut rng, n, b);
            check_detailed(&[x, y], seed, move |t, v| {
                let c = t.concat_cols(&[v[0], v[1], v[0]]).unwrap();
                let col = t.column(c, a).unwrap();
                t.concat_cols(&[c, col]).unwrap()
            })
        }),
        smooth("mean", |seed| {
            let mut rng = rng_from_seed(seed);
            let (m, n, _) = dims(&mut rng);
            let x = random_matrix(&mut rng, m, n);
            check_detailed(&[x], seed, |t, v| t.mean(v[0]).unwrap())
        }),
        smooth("focal_loss", |seed| {
            let mut rng = rng_from_seed(seed);
            let n = rng.random_range(1..12);
            let z = Tensor::matrix(n, 1, (0..n).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect()).unwrap();
            let y: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 0.95 } else { 0.05 }).collect();
            let w: Vec<f64> = (0..n).map(|_| 0.2 + rng.random::<f64>()).collect();
            let gamma = [0.0, 1.0, 2.0, 2.5][seed as usize % 4];
            check_detailed(&[z], seed, move |t, v| t.focal_loss(v[0], &y, &w, gamma).unwrap())
        }),
        smooth("gumbel_softmax straight-through", gumbel_straight_through),
    ]
}

/// The straight-through gradient is checked against finite differences of
/// the relaxed (soft) Gumbel-softmax sample it stands in for.
fn gumbel_straight_through(seed: u64) -> Report {
    let mut rng = rng_from_seed(seed);
    let b = rng.random_range(1..5);
    let tau = 0.5 + rng.random::<f64>();
    let z = random_matrix(&mut rng, b, 2);
    let noise: Vec<f64> = (0..2 * b).map(|_| rng.random::<f64>() - 0.5).collect();
    let r: Vec<f64> = (0..2 * b).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();

    let mut tape = Tape::new();
    let zv = tape.param(z.clone());
    let y = tape.gumbel_softmax(zv, Some(&noise), tau, GumbelMode::Train).unwrap();
    let rv = tape.constant(Tensor::matrix(b, 2, r.clone()).unwrap());
    let p = tape.mul(y, rv).unwrap();
    let l = tape.mean(p).unwrap();
    tape.backward(l).unwrap();
    let analytic = tape.grad(zv).unwrap().data().to_vec();

    let soft_loss = |zz: &[f64]| -> f64 {
        let mut s = 0.0;
        for row in 0..b {
            let a = (zz[2 * row] + noise[2 * row]) / tau;
            let c = (zz[2 * row + 1] + noise[2 * row + 1]) / tau;
            let m = a.max(c);
            let (ea, ec) = (libm::exp(a - m), libm::exp(c - m));
            s += r[2 * row] * ea / (ea + ec) + r[2 * row + 1] * ec / (ea + ec);
        }
        s / (2 * b) as f64
    };
    let numeric: Vec<f64> = (0..2 * b)
        .map(|i| {
            let mut plus = z.data().to_vec();
            plus[i] += STEP;
            let mut minus = z.data().to_vec();
            minus[i] -= STEP;
            (soft_loss(&plus) - soft_loss(&minus)) / (2.0 * STEP)
        })
        .collect();
    Report {
        worst: relative_error(&analytic, &numeric),
        checked: 2 * b,
        skipped: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for case in primitive_cases() {
            let s = run_case(&case, SEEDS);
            assert!(s.passed(), "{s:?}");
        }
    }

    #[test]
    fn kinks_are_detected() {
        let x = Tensor::matrix(1, 2, vec![0.0005, 0.7]).unwrap();
        let r = check_detailed(&[x], 0, |t, v| t.relu(v[0]));
        assert_eq!((r.checked, r.skipped), (1, 1));
    }
    #[test]
    fn gumbel_frequencies_are_balanced_for_equal_logits() {
        let mut rng = rng_from_seed(2024);
        let draws = 10_000;
        let mut first = 0;
        for _ in 0..draws {
            let mut tape = Tape::<f64>::new();
            let z = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
            let noise = [super::super::gumbel_noise(&mut rng), super::super::gumbel_noise(&mut rng)];
            let y = tape.gumbel_softmax(z, Some(&noise), 1.0, GumbelMode::Train).unwrap();
            if tape.value(y).data()[0] == 1.0 {
                first += 1;
            }
        }
        let frac = first as f64 / draws as f64;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }
}
