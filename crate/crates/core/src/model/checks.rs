//! Finite-difference cases for the composite network stages, in the form
//! used by [`crate::ndiff::gradcheck`].

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{stage, ForwardOptions, Geometry, Mode, Model, NetworkConfig, SampleView};
use crate::ndiff::gradcheck::{check_detailed, random_matrix, relative_error, Case, Report, STEP};
use crate::ndiff::{Tape, Tensor};
use crate::rng::rng_from_seed;

/// Composite stages can straddle a ReLU or max-pool boundary for a few
/// coordinates; those are counted and excluded.
const MAX_SKIPPED: f64 = 0.25;

/// Two stages with a handful of channels.
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        stages: vec![stage(0.4, Some(0.5), 4), stage(0.8, None, 6)],
        fp_channels: vec![5, 4],
        head_hidden: 3,
        gate_hidden: 3,
        ..NetworkConfig::reduced()
    }
}

fn random_local(rng: &mut crate::rng::Rng, rows: usize) -> Vec<[f64; 3]> {
    (0..rows)
        .map(|_| core::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect()
}

fn sa_stage_inner(seed: u64) -> Report {
    let model: Model<f64> = Model::new(tiny_config(), 3).unwrap();
    let mut rng = rng_from_seed(100 + seed);
    let n = 12;
    let feats = random_matrix(&mut rng, n, 4);
    let refl = random_matrix(&mut rng, n, 1);
    let nbrs: Vec<u32> = (0..2 * 32).map(|_| rng.random_range(0..n as u32)).collect();
    let local = random_local(&mut rng, 2 * 32);
    check_detailed(&[feats, refl], seed, |tape, vars| {
        let mut g = model.graph(tape, Mode::Train, false);
        g.sa_stage(tape, 1, &local, Some(vars[0]), vars[1], &nbrs).unwrap()
    })
}

fn sa_stage_first(seed: u64) -> Report {
    let model: Model<f64> = Model::new(tiny_config(), 4).unwrap();
    let mut rng = rng_from_seed(200 + seed);
    let n = 64;
    let refl = random_matrix(&mut rng, n, 1);
    let nbrs: Vec<u32> = (0..3 * 32).map(|_| rng.random_range(0..n as u32)).collect();
    let local = random_local(&mut rng, 3 * 32);
    check_detailed(&[refl], seed, |tape, vars| {
        let mut g = model.graph(tape, Mode::Train, false);
        g.sa_stage(tape, 0, &local, None, vars[0], &nbrs).unwrap()
    })
}

fn fp_stage(seed: u64) -> Report {
    let model: Model<f64> = Model::new(tiny_config(), 5).unwrap();
    let mut rng = rng_from_seed(300 + seed);
    // A single coarse row reaches every fine row identically and batch norm
    // cancels it, leaving nothing to compare.
    let (coarse_rows, fine_rows) = (rng.random_range(2..5), rng.random_range(3..9));
    let coarse = random_matrix(&mut rng, coarse_rows, 12);
    let skip = random_matrix(&mut rng, fine_rows, 4);
    let index: Vec<u32> = (0..fine_rows * 3).map(|_| rng.random_range(0..coarse_rows as u32)).collect();
    let mut weight: Vec<f64> = (0..fine_rows * 3).map(|_| 0.1 + rng.random::<f64>()).collect();
    for row in weight.chunks_mut(3) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= s);
    }
    check_detailed(&[coarse, skip], seed, |tape, vars| {
        let mut g = model.graph(tape, Mode::Train, false);
        g.fp_stage(tape, 1, vars[0], vars[1], &index, &weight).unwrap()
    })
}

fn gated_reflectance(seed: u64) -> Report {
    let model: Model<f64> = Model::new(tiny_config(), 6).unwrap();
    let mut rng = rng_from_seed(400 + seed);
    let (batch, n) = (rng.random_range(1..4), rng.random_range(1..12));
    let refl = random_matrix(&mut rng, n, 1);
    let on = random_matrix(&mut rng, batch, 1);
    let sample_of: Vec<u32> = (0..n).map(|_| rng.random_range(0..batch as u32)).collect();
    check_detailed(&[refl, on], seed, |tape, vars| {
        let mut g = model.graph(tape, Mode::Train, false);
        g.gated_reflectance(tape, vars[0], vars[1], &sample_of).unwrap()
    })
}

/// Coordinates checked per seed in the whole-network case.
const NETWORK_COORDS: usize = 24;

/// Focal loss of a training-mode forward pass on two small samples, against
/// the network weights. Gate logits are fixed, so the hard gate decisions
/// are constant; the gate weights themselves are not checked here.
fn network(seed: u64) -> Report {
    let mut rng = rng_from_seed(500 + seed);
    let model: Model<f64> = Model::new(tiny_config(), seed).unwrap();
    let data: Vec<(Vec<[f32; 3]>, Vec<f32>)> = (0..2)
        .map(|_| {
            let n = rng.random_range(10..20);
            (
                (0..n)
                    .map(|_| core::array::from_fn(|_| rng.random_range(-1.0f32..1.0)))
                    .collect(),
                (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            )
        })
        .collect();
    let views: Vec<SampleView<'_>> = data
        .iter()
        .map(|(p, r)| SampleView {
            positions: p,
            reflectance: r,
        })
        .collect();
    let geom = Geometry::build(&views, model.config(), Mode::Train, seed).unwrap();
    let n0 = geom.levels[0].len();
    let targets: Vec<f64> = (0..n0).map(|_| if rng.random::<bool>() { 0.95 } else { 0.05 }).collect();
    let weights: Vec<f64> = (0..n0).map(|_| 0.5 + rng.random::<f64>()).collect();
    let opts = ForwardOptions {
        gate_logits: Some([1.0, -1.0]),
    };
    let eval = |m: &Model<f64>, want: Option<&[(usize, usize)]>| -> (f64, u64, Vec<f64>) {
        let mut tape = Tape::new();
        let fwd = m.forward(&mut tape, &views, &geom, Mode::Train, seed, &opts).unwrap();
        let loss = tape.focal_loss(fwd.logits, &targets, &weights, 2.0).unwrap();
        let signature = tape.branch_signature();
        let value = tape.value(loss).data()[0];
        let mut grads = Vec::new();
        if let Some(coords) = want {
            tape.backward(loss).unwrap();
            for &(slot, i) in coords {
                grads.push(tape.grad(fwd.params[slot]).map_or(0.0, |g: &Tensor<f64>| g.data()[i]));
            }
        }
        (value, signature, grads)
    };
    let slots: Vec<usize> = model
        .weights()
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable && !e.name.starts_with("gate"))
        .map(|(s, _)| s)
        .collect();
    let coords: Vec<(usize, usize)> = (0..NETWORK_COORDS)
        .map(|_| {
            let slot = slots[rng.random_range(0..slots.len())];
            (slot, rng.random_range(0..model.weights().value(slot).len()))
        })
        .collect();
    let (_, base_signature, analytic) = eval(&model, Some(&coords));
    let mut report = Report {
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    let (mut a, mut numeric) = (Vec::new(), Vec::new());
    for (c, &(slot, i)) in coords.iter().enumerate() {
        let shifted = |delta: f64| {
            let mut m = model.clone();
            m.weights_mut().value_mut(slot).data_mut()[i] += delta;
            eval(&m, None)
        };
        let (fp, sp, _) = shifted(STEP);
        let (fm, sm, _) = shifted(-STEP);
        if sp != base_signature || sm != base_signature {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        a.push(analytic[c]);
        numeric.push((fp - fm) / (2.0 * STEP));
    }
    report.worst = relative_error(&a, &numeric);
    report
}

/// One case per composite stage plus the whole network under its loss.
pub fn composite_cases() -> Vec<Case> {
    let case = |name, run| Case {
        name,
        run,
        max_skipped: MAX_SKIPPED,
    };
    vec![
        case("set abstraction, first stage", sa_stage_first),
        case("set abstraction, inner stage", sa_stage_inner),
        case("feature propagation", fp_stage),
        case("gated reflectance", gated_reflectance),
        Case {
            name: "network + focal loss",
            run: network,
            max_skipped: 0.5,
        },
    ]
}

