//! Finite-difference gradient checks for every differentiable op, in f64.
//!
//! Each check draws random inputs, contracts the op output with a fixed random
//! weight tensor so every output position carries a distinct upstream
//! gradient, and compares the analytic input gradients against central
//! differences on every input entry.

#![allow(dead_code)]

use cdnz_core::ops::Mode;
use cdnz_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
pub const TRIALS: usize = 20;
const ABS_FLOOR: f64 = 1e-7;

/// Largest relative deviation seen by one op over all of its trials.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub entries: usize,
    pub worst: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs()) + ABS_FLOOR / REL_TOL)
}

fn contracted<F>(inputs: &[Tensor<f64>], weights: &Tensor<f64>, f: &F) -> f64
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let y = f(&vars).expect("op forward");
    y.mul(tape.input(weights.clone())).expect("weights match").sum().item()
}

/// Checks every entry of every input; returns the worst relative error.
pub fn check_op<F>(inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, f: F) -> std::result::Result<(usize, f64), String>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let y = f(&vars).map_err(|e| e.to_string())?;
    let weights = Tensor::randn(&y.shape(), 1.0, rng);
    let loss = y.mul(tape.input(weights.clone())).map_err(|e| e.to_string())?.sum();
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;

    let mut worst = 0.0f64;
    let mut entries = 0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (contracted(&plus, &weights, &f) - contracted(&minus, &weights, &f)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let err = rel_err(a, numeric);
            if err > REL_TOL {
                return Err(format!("input {k} entry {i}: analytic {a:.9e} numeric {numeric:.9e}"));
            }
            worst = worst.max(err);
            entries += 1;
        }
    }
    Ok((entries, worst))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Standard normal entries kept at least `gap` away from zero.
fn randn_away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap - v.abs() } else { gap + v.abs() };
        }
    }
    t
}

/// Distinct values within each 2x2 window, spaced well beyond the step.
fn randn_no_pool_ties(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    loop {
        let t = randn(shape, rng);
        let (h, w) = (shape[2], shape[3]);
        let ok = t.data().chunks(h * w).all(|plane| {
            (0..h / 2).all(|by| {
                (0..w / 2).all(|bx| {
                    let mut v: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| plane[(2 * by + dy) * w + 2 * bx + dx])
                        .collect();
                    v.sort_by(f64::total_cmp);
                    v.windows(2).all(|p| p[1] - p[0] > 1e-3)
                })
            })
        });
        if ok {
            return t;
        }
    }
}

fn dims(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(2..=5),
        rng.random_range(2..=5),
    ]
}

pub const OPS: [&str; 18] = [
    "conv2d",
    "conv_transpose2d",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "max_pool2",
    "add",
    "mul",
    "scale",
    "concat_channels",
    "sum",
    "mse_loss",
    "cross_entropy",
    "global_avg_pool",
    "linear",
    "reflect_pad",
    "crop",
    "shift_channels",
];

/// One randomized trial of the named op.
pub fn trial(op: &str, rng: &mut ChaCha8Rng) -> std::result::Result<(usize, f64), String> {
    match op {
        "conv2d" => {
            let (n, cin, cout) = (
                rng.random_range(1..=2),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            );
            let k = if rng.random_bool(0.5) { 1 } else { 3 };
            let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=k / 2));
            let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
            let inputs = [
                randn(&[n, cin, h, w], rng),
                randn(&[cout, cin, k, k], rng),
                randn(&[cout], rng),
            ];
            check_op(&inputs, rng, |v| v[0].conv2d(v[1], Some(v[2]), stride, pad))
        }
        "conv_transpose2d" => {
            let (n, cin, cout) = (
                rng.random_range(1..=2),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            );
            let k = rng.random_range(2..=4);
            let (stride, crop) = (rng.random_range(1..=2), rng.random_range(0..=(k - 1) / 2));
            let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
            let inputs = [
                randn(&[n, cin, h, w], rng),
                randn(&[cin, cout, k, k], rng),
                randn(&[cout], rng),
            ];
            check_op(&inputs, rng, |v| v[0].conv_transpose2d(v[1], Some(v[2]), stride, crop))
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let [n, c, h, w] = dims(rng);
            let n = n.max(2);
            let mode = if op == "batch_norm_train" {
                Mode::Train
            } else {
                Mode::Eval
            };
            let mean = randn(&[c], rng);
            let var = Tensor::rand_uniform(&[c], 0.5, 2.0, rng);
            let inputs = [randn(&[n, c, h, w], rng), randn(&[c], rng), randn(&[c], rng)];
            check_op(&inputs, rng, move |v| {
                let (mut m, mut s) = (mean.clone(), var.clone());
                v[0].batch_norm(v[1], v[2], &mut m, &mut s, mode)
            })
        }
        "relu" => {
            let inputs = [randn_away_from_zero(&dims(rng), 1e-2, rng)];
            check_op(&inputs, rng, |v| Ok(v[0].relu()))
        }
        "max_pool2" => {
            let [n, c, h, w] = dims(rng);
            let inputs = [randn_no_pool_ties(&[n, c, 2 * h, 2 * w], rng)];
            check_op(&inputs, rng, |v| v[0].max_pool2())
        }
        "add" | "mul" | "mse_loss" => {
            let shape = dims(rng);
            let inputs = [randn(&shape, rng), randn(&shape, rng)];
            match op {
                "add" => check_op(&inputs, rng, |v| v[0].add(v[1])),
                "mul" => check_op(&inputs, rng, |v| v[0].mul(v[1])),
                _ => check_op(&inputs, rng, |v| v[0].mse_loss(v[1])),
            }
        }
        "scale" => {
            let factor = rng.random_range(-2.0..2.0);
            let inputs = [randn(&dims(rng), rng)];
            check_op(&inputs, rng, move |v| Ok(v[0].scale(factor)))
        }
        "concat_channels" => {
            let [n, c, h, w] = dims(rng);
            let c2 = rng.random_range(1..=3);
            let inputs = [randn(&[n, c, h, w], rng), randn(&[n, c2, h, w], rng)];
            check_op(&inputs, rng, |v| v[0].concat_channels(v[1]))
        }
        "sum" => {
            let inputs = [randn(&dims(rng), rng)];
            check_op(&inputs, rng, |v| Ok(v[0].sum()))
        }
        "cross_entropy" => {
            let k = rng.random_range(2..=4);
            let n = rng.random_range(1..=3);
            let spatial = rng.random_bool(0.5);
            let (shape, positions) = if spatial {
                let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
                (vec![n, k, h, w], n * h * w)
            } else {
                (vec![n, k], n)
            };
            let ignore = k + 1;
            let mut labels: Vec<usize> = (0..positions).map(|_| rng.random_range(0..k)).collect();
            if positions > 1 && spatial {
                labels[rng.random_range(0..positions)] = ignore;
            }
            let inputs = [Tensor::randn(&shape, 2.0, rng)];
            check_op(&inputs, rng, move |v| v[0].cross_entropy(&labels, Some(ignore)))
        }
        "global_avg_pool" => {
            let inputs = [randn(&dims(rng), rng)];
            check_op(&inputs, rng, |v| v[0].global_avg_pool())
        }
        "linear" => {
            let (n, fi, fo) = (
                rng.random_range(1..=3),
                rng.random_range(1..=5),
                rng.random_range(1..=4),
            );
            let inputs = [randn(&[n, fi], rng), randn(&[fo, fi], rng), randn(&[fo], rng)];
            check_op(&inputs, rng, |v| v[0].linear(v[1], Some(v[2])))
        }
        "reflect_pad" => {
            let [n, c, h, w] = dims(rng);
            let (bottom, right) = (rng.random_range(0..h), rng.random_range(0..w));
            let inputs = [randn(&[n, c, h, w], rng)];
            check_op(&inputs, rng, move |v| v[0].reflect_pad(bottom, right))
        }
        "crop" => {
            let [n, c, h, w] = dims(rng);
            let (ch, cw) = (rng.random_range(1..=h), rng.random_range(1..=w));
            let inputs = [randn(&[n, c, h, w], rng)];
            check_op(&inputs, rng, move |v| v[0].crop(ch, cw))
        }
        "shift_channels" => {
            let [n, c, h, w] = dims(rng);
            let offsets: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let inputs = [randn(&[n, c, h, w], rng)];
            check_op(&inputs, rng, move |v| v[0].shift_channels(&offsets))
        }
        other => Err(format!("unknown op {other}")),
    }
}

/// Runs [`TRIALS`] trials of one op with a seed derived from `seed`.
pub fn run_op(op: &'static str, seed: u64) -> std::result::Result<OpReport, String> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ op.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64)));
    let mut report = OpReport {
        op,
        entries: 0,
        worst: 0.0,
    };
    for t in 0..TRIALS {
        let (entries, worst) = trial(op, &mut rng).map_err(|e| format!("{op} trial {t}: {e}"))?;
        report.entries += entries;
        report.worst = report.worst.max(worst);
    }
    Ok(report)
}

fn denoiser_loss(net: &mut cdnz_core::denoiser::DenoiserNet<f64>, x: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let tape = Tape::new();
    let y = net.forward(&tape, tape.input(x.clone()), Mode::Train).expect("forward");
    y.mse_loss(tape.input(target.clone())).expect("loss").item()
}

/// Central differences through a two-scale, width-4 denoiser on a `1x3x8x8`
/// input: every input entry and `per_param` entries of each parameter. The
/// projection is randomized so gradients reach the inner layers.
pub fn denoiser_check(
    fusion: cdnz_core::denoiser::Fusion,
    seed: u64,
    per_param: usize,
) -> std::result::Result<f64, String> {
    use cdnz_core::denoiser::{DenoiserConfig, DenoiserNet};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DenoiserConfig {
        scales: 2,
        width: 4,
        fusion,
        ..DenoiserConfig::default()
    };
    let mut net = DenoiserNet::<f64>::build(&cfg, seed).map_err(|e| e.to_string())?;
    for name in ["proj.weight", "proj.bias"] {
        let p = net.store.find_mut(name).ok_or("projection missing")?;
        let shape = p.value.shape().to_vec();
        p.value = Tensor::randn(&shape, 0.3, &mut rng);
    }
    let x = randn(&[1, 3, 8, 8], &mut rng);
    let target = randn(&[1, 3, 8, 8], &mut rng);

    let tape = Tape::new();
    let xv = tape.variable(x.clone());
    let y = net.forward(&tape, xv, Mode::Train).map_err(|e| e.to_string())?;
    let l = y.mse_loss(tape.input(target.clone())).map_err(|e| e.to_string())?;
    let grads = tape.backward(l).map_err(|e| e.to_string())?;
    let gx = grads.get(xv).ok_or("no input gradient")?.clone();
    net.store.accumulate(&grads);

    let mut worst = 0.0f64;
    let mut compare = |a: f64, n: f64, what: &str| {
        let err = rel_err(a, n);
        worst = worst.max(err);
        if err > REL_TOL {
            Err(format!("{what}: analytic {a:.9e} numeric {n:.9e}"))
        } else {
            Ok(())
        }
    };
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += STEP;
        xm.data_mut()[i] -= STEP;
        let n = (denoiser_loss(&mut net, &xp, &target) - denoiser_loss(&mut net, &xm, &target)) / (2.0 * STEP);
        compare(gx.data()[i], n, &format!("input[{i}]"))?;
    }
    for p in 0..net.store.params().len() {
        let analytic = net.store.params()[p].grad.clone().ok_or("parameter without gradient")?;
        let name = net.store.params()[p].name.clone();
        for _ in 0..per_param {
            let i = rng.random_range(0..analytic.len());
            let orig = net.store.params()[p].value.data()[i];
            net.store.params_mut()[p].value.data_mut()[i] = orig + STEP;
            let lp = denoiser_loss(&mut net, &x, &target);
            net.store.params_mut()[p].value.data_mut()[i] = orig - STEP;
            let lm = denoiser_loss(&mut net, &x, &target);
            net.store.params_mut()[p].value.data_mut()[i] = orig;
            compare(analytic.data()[i], (lp - lm) / (2.0 * STEP), &format!("{name}[{i}]"))?;
        }
    }
    Ok(worst)
}
