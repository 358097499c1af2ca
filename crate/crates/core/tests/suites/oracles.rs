//! Brute-force reference implementations compared against the engine.

#![allow(dead_code, clippy::needless_range_loop)]

use cdnz_core::data::Image;
use cdnz_core::metrics;
use cdnz_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 100;
pub const OP_TOL: f64 = 1e-5;
pub const METRIC_TOL: f64 = 1e-9;

type Outcome = std::result::Result<f64, String>;

fn max_dev(a: &[f64], b: &[f64]) -> Outcome {
    if a.len() != b.len() {
        return Err(format!("length {} vs {}", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn conv2d_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let s = x.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let ws = w.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for i in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((i * cin + ci) * h + y as usize) * wd + xx as usize];
                                acc += xv * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Scatter form: every input pixel stamps the kernel onto the output grid.
fn conv_transpose2d_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, crop: usize) -> Vec<f64> {
    let s = x.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let ws = w.shape();
    let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
    let full_h = (h - 1) * stride + kh;
    let full_w = (wd - 1) * stride + kw;
    let (oh, ow) = (full_h - 2 * crop, full_w - 2 * crop);
    let mut full = vec![0.0; n * cout * full_h * full_w];
    for i in 0..n {
        for ci in 0..cin {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.data()[((i * cin + ci) * h + y) * wd + xx];
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = w.data()[((ci * cout + co) * kh + ky) * kw + kx];
                                full[((i * cout + co) * full_h + y * stride + ky) * full_w + xx * stride + kx] +=
                                    v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..n {
        for co in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    out.push(full[((i * cout + co) * full_h + y + crop) * full_w + xx + crop] + b[co]);
                }
            }
        }
    }
    out
}

fn max_pool2_ref(x: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = Vec::new();
    for p in 0..planes {
        for y in (0..h).step_by(2) {
            for xx in (0..w).step_by(2) {
                let at = |dy: usize, dx: usize| x.data()[(p * h + y + dy) * w + xx + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

pub fn conv2d(rng: &mut ChaCha8Rng) -> Outcome {
    let (n, cin, cout) = (
        rng.random_range(1..=2),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    );
    let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=kh.min(kw) - 1);
    let (h, w) = (rng.random_range(kh..=7), rng.random_range(kw..=7));
    let x = randn(&[n, cin, h, w], rng);
    let wt = randn(&[cout, cin, kh, kw], rng);
    let b = randn(&[cout], rng);
    let tape = Tape::new();
    let y = tape
        .input(x.clone())
        .conv2d(tape.input(wt.clone()), Some(tape.input(b.clone())), stride, pad)
        .map_err(|e| e.to_string())?;
    let dev = max_dev(y.value().data(), &conv2d_ref(&x, &wt, b.data(), stride, pad));
    dev
}

pub fn conv_transpose2d(rng: &mut ChaCha8Rng) -> Outcome {
    let (n, cin, cout) = (
        rng.random_range(1..=2),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    );
    let k = rng.random_range(1..=4);
    let stride = rng.random_range(1..=3);
    let crop = rng.random_range(0..=(k - 1) / 2);
    let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
    if (h - 1) * stride + k <= 2 * crop || (w - 1) * stride + k <= 2 * crop {
        return conv_transpose2d(rng);
    }
    let x = randn(&[n, cin, h, w], rng);
    let wt = randn(&[cin, cout, k, k], rng);
    let b = randn(&[cout], rng);
    let tape = Tape::new();
    let y = tape
        .input(x.clone())
        .conv_transpose2d(tape.input(wt.clone()), Some(tape.input(b.clone())), stride, crop)
        .map_err(|e| e.to_string())?;
    let dev = max_dev(y.value().data(), &conv_transpose2d_ref(&x, &wt, b.data(), stride, crop));
    dev
}

pub fn max_pool2(rng: &mut ChaCha8Rng) -> Outcome {
    let shape = [
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        2 * rng.random_range(1..=4),
        2 * rng.random_range(1..=4),
    ];
    let x = randn(&shape, rng);
    let tape = Tape::new();
    let y = tape.input(x.clone()).max_pool2().map_err(|e| e.to_string())?;
    let dev = max_dev(y.value().data(), &max_pool2_ref(&x));
    dev
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let data = (0..3 * h * w).map(|_| rng.random_range(-0.1f32..1.1)).collect();
    Image::new(h, w, data).unwrap()
}

fn psnr_ref(a: &[f32], b: &[f32]) -> f64 {
    let mut sq = 0.0;
    for (x, y) in a.iter().zip(b) {
        sq += (*x as f64 - *y as f64).powi(2);
    }
    let mse = sq / a.len() as f64;
    if mse == 0.0 {
        metrics::PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(metrics::PSNR_CAP_DB)
    }
}

fn quantize_ref(v: f32) -> f32 {
    let level = (v.clamp(0.0, 1.0) as f64 * 255.0).round();
    (level / 255.0) as f32
}

pub fn psnr(rng: &mut ChaCha8Rng) -> Outcome {
    let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
    let a = random_image(h, w, rng);
    let b = if rng.random_bool(0.05) {
        a.clone()
    } else {
        random_image(h, w, rng)
    };
    let got = metrics::psnr(&a, &b).map_err(|e| e.to_string())?;
    let quant: Vec<f32> = a.data.iter().map(|&v| quantize_ref(v)).collect();
    let got_q = metrics::psnr_quantized(&a, &b).map_err(|e| e.to_string())?;
    max_dev(&[got, got_q], &[psnr_ref(&a.data, &b.data), psnr_ref(&quant, &b.data)])
}

/// Rank of the label counted directly: rows beating it by score, plus earlier ties.
fn topk_ref(scores: &[f64], classes: usize, labels: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &scores[i * classes..(i + 1) * classes];
        let ahead = (0..classes)
            .filter(|&c| row[c] > row[label] || (row[c] == row[label] && c < label))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

pub fn topk(rng: &mut ChaCha8Rng) -> Outcome {
    let classes = rng.random_range(1..=8);
    let n = rng.random_range(1..=30);
    let k = rng.random_range(1..=classes);
    // coarse scores so ties occur
    let scores: Vec<f64> = (0..n * classes).map(|_| rng.random_range(0..4) as f64).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let got = metrics::topk_accuracy(&scores, classes, &labels, k).map_err(|e| e.to_string())?;
    max_dev(&[got], &[topk_ref(&scores, classes, &labels, k)])
}

fn miou_ref(pred: &[usize], truth: &[usize], classes: usize, ignore: Option<usize>) -> Option<f64> {
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..classes {
        let (mut inter, mut union) = (0, 0);
        for (&p, &t) in pred.iter().zip(truth) {
            if Some(t) == ignore {
                continue;
            }
            if p == c && t == c {
                inter += 1;
            }
            if p == c || t == c {
                union += 1;
            }
        }
        if union > 0 {
            sum += inter as f64 / union as f64;
            present += 1;
        }
    }
    (present > 0).then(|| sum / present as f64)
}

pub fn mean_iou(rng: &mut ChaCha8Rng) -> Outcome {
    let classes = rng.random_range(1..=6);
    let len = rng.random_range(1..=60);
    let ignore = classes + 2;
    let pred: Vec<usize> = (0..len).map(|_| rng.random_range(0..classes)).collect();
    let truth: Vec<usize> = (0..len)
        .map(|_| {
            if rng.random_bool(0.1) {
                ignore
            } else {
                rng.random_range(0..classes)
            }
        })
        .collect();
    let got = metrics::mean_iou(&pred, &truth, classes, Some(ignore));
    match (got, miou_ref(&pred, &truth, classes, Some(ignore))) {
        (Ok(g), Some(r)) => max_dev(&[g], &[r]),
        (Err(_), None) => Ok(0.0),
        (g, r) => Err(format!("engine {g:?} vs reference {r:?}")),
    }
}

pub type Oracle = fn(&mut ChaCha8Rng) -> Outcome;

pub const ORACLES: [(&str, Oracle, f64); 6] = [
    ("conv2d", conv2d, OP_TOL),
    ("conv_transpose2d", conv_transpose2d, OP_TOL),
    ("max_pool2", max_pool2, OP_TOL),
    ("psnr", psnr, METRIC_TOL),
    ("topk_accuracy", topk, METRIC_TOL),
    ("mean_iou", mean_iou, METRIC_TOL),
];

/// Runs [`INSTANCES`] random instances; returns the worst deviation.
pub fn run(name: &str, oracle: Oracle, tol: f64, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let dev = oracle(&mut rng).map_err(|e| format!("{name} instance {i}: {e}"))?;
        if dev > tol {
            return Err(format!("{name} instance {i}: deviation {dev:e} above {tol:e}"));
        }
        worst = worst.max(dev);
    }
    Ok(worst)
}
