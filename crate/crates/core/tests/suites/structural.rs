//! Structural invariants of the denoiser and cascade, plus the joint-loss
//! decomposition and noise statistics checks.

#![allow(dead_code)]

use cdnz_core::cascade::{Cascade, CascadeConfig};
use cdnz_core::data::{add_noise, Image, LabeledStream, NoiseModel, NoiseSampling, Sample};
use cdnz_core::denoiser::{DenoiserConfig, DenoiserNet};
use cdnz_core::highlevel::HighLevelHead;
use cdnz_core::ops::Mode;
use cdnz_core::optim::OptimizerSchedule;
use cdnz_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<(), String>;

pub const SHAPES: [(usize, usize); 3] = [(48, 48), (50, 46), (33, 97)];

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// With a zero projection the output equals the input bit for bit, in both modes.
pub fn skip_identity(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DenoiserNet::<f32>::build(&DenoiserConfig::desk(), seed).map_err(err)?;
    net.zero_projection();
    for (h, w) in [(32, 32), (50, 46)] {
        let x = Tensor::<f32>::rand_uniform(&[2, 3, h, w], 0.0, 1.0, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let tape = Tape::new();
            let y = net.forward(&tape, tape.input(x.clone()), mode).map_err(err)?;
            let same = y
                .value()
                .data()
                .iter()
                .zip(x.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(format!("{h}x{w} {mode:?}: output differs from input"));
            }
        }
    }
    Ok(())
}

/// Output extents equal input extents, including sizes not divisible by the scale factor.
pub fn output_shapes(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DenoiserNet::<f32>::build(&DenoiserConfig::desk(), seed).map_err(err)?;
    for (h, w) in SHAPES {
        let x = Tensor::<f32>::rand_uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let tape = Tape::new();
            let y = net.forward(&tape, tape.input(x.clone()), mode).map_err(err)?;
            if y.shape() != x.shape() {
                return Err(format!("{h}x{w} {mode:?}: output shape {:?}", y.shape()));
            }
        }
    }
    Ok(())
}

fn short_schedule(iterations: usize) -> OptimizerSchedule {
    let mut s = OptimizerSchedule::desk_joint();
    s.iterations = iterations;
    s.decay_every = iterations;
    s
}

fn cascade(head: &HighLevelHead<f32>, lambda: f64, iterations: usize, seed: u64) -> Result<Cascade<f32>, String> {
    let config = CascadeConfig {
        lambda,
        sigma: 25.0,
        task: head.kind().task(),
        schedule: short_schedule(iterations),
        seed,
        warm_start: false,
        noise: NoiseSampling::Fresh,
    };
    let net = DenoiserNet::<f32>::build(&DenoiserConfig::desk(), seed).map_err(err)?;
    Cascade::new(net, head.clone(), config).map_err(err)
}

/// A frozen pretrained head is bit-identical after `steps` joint-loss steps,
/// while the denoiser does move.
pub fn frozen_head(head: &HighLevelHead<f32>, samples: &[Sample], steps: usize, seed: u64) -> Check {
    let mut c = cascade(head, 0.5, steps, seed)?;
    let before_head: Vec<Vec<u32>> = c.head.store.params().iter().map(|p| bits(&p.value)).collect();
    let before_net: Vec<Vec<u32>> = c.denoiser.store.params().iter().map(|p| bits(&p.value)).collect();
    let mut stream = LabeledStream::new(samples.to_vec(), 4, 25.0, seed, NoiseSampling::Fresh).map_err(err)?;
    let log = c.train(&mut stream).map_err(err)?;
    if log.len() != steps {
        return Err(format!("ran {} of {steps} steps", log.len()));
    }
    let after_head: Vec<Vec<u32>> = c.head.store.params().iter().map(|p| bits(&p.value)).collect();
    if after_head != before_head {
        return Err("head parameters changed".into());
    }
    let after_net: Vec<Vec<u32>> = c.denoiser.store.params().iter().map(|p| bits(&p.value)).collect();
    if after_net == before_net {
        return Err("denoiser parameters did not change".into());
    }
    Ok(())
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Worst relative gap between the logged total and `recon + lambda * task`.
pub fn decomposition(
    head: &HighLevelHead<f32>,
    samples: &[Sample],
    lambda: f64,
    steps: usize,
    seed: u64,
) -> Result<f64, String> {
    let mut c = cascade(head, lambda, steps, seed)?;
    let mut stream = LabeledStream::new(samples.to_vec(), 4, 25.0, seed, NoiseSampling::Fresh).map_err(err)?;
    let log = c.train(&mut stream).map_err(err)?;
    if log.len() != steps {
        return Err(format!("ran {} of {steps} steps", log.len()));
    }
    let mut worst = 0.0f64;
    for e in &log.entries {
        let (recon, task) = match (e.recon, e.task) {
            (Some(r), Some(t)) => (r, t),
            _ => return Err(format!("iteration {} lacks loss components", e.iteration)),
        };
        let rel = (e.loss - (recon + lambda * task)).abs() / e.loss.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Empirical `(mean, std)` of the noise added to a constant image with at
/// least `samples` values.
pub fn noise_moments(sigma: f64, samples: usize, seed: u64) -> Result<(f64, f64, usize), String> {
    let side = ((samples as f64 / 3.0).sqrt().ceil()) as usize;
    let clean = Image::filled(side, side, 0.5);
    let noisy = add_noise(&clean, &NoiseModel::new(sigma, seed).map_err(err)?);
    let d: Vec<f64> = noisy
        .data
        .iter()
        .zip(&clean.data)
        .map(|(a, b)| *a as f64 - *b as f64)
        .collect();
    let n = d.len();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, var.sqrt(), n))
}

/// Std within 3% of `sigma / 255` and `|mean|` within three standard errors.
pub fn noise_statistics(sigma: f64, samples: usize, seed: u64) -> Check {
    let (mean, std, n) = noise_moments(sigma, samples, seed)?;
    let target = sigma / 255.0;
    if (std - target).abs() > 0.03 * target {
        return Err(format!("sigma {sigma}: std {std:.6} vs {target:.6}"));
    }
    let se = target / (n as f64).sqrt();
    if mean.abs() > 3.0 * se {
        return Err(format!("sigma {sigma}: mean {mean:.3e} beyond 3 SE ({se:.3e})"));
    }
    Ok(())
}
