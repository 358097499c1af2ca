//! Denoiser training loop and per-iteration loss logs.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::PatchStream;
use crate::denoiser::DenoiserNet;
use crate::ops::Mode;
use crate::optim::{OptimizerSchedule, Sgd};
use crate::{Error, Result, Scalar, Tape};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub lr: f64,
    /// Total objective minimised at this step.
    pub loss: f64,
    /// Reconstruction (MSE) component, when there is one.
    pub recon: Option<f64>,
    /// High-level task (cross-entropy) component, when there is one.
    pub task: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, iteration: usize, lr: f64, loss: f64, recon: Option<f64>, task: Option<f64>) {
        self.entries.push(LogEntry {
            iteration,
            lr,
            loss,
            recon,
            task,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    /// Means of consecutive non-overlapping windows of `window` losses
    /// (a trailing partial window is dropped).
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        if window == 0 {
            return Vec::new();
        }
        self.entries
            .chunks_exact(window)
            .map(|c| c.iter().map(|e| e.loss).sum::<f64>() / window as f64)
            .collect()
    }

    /// Tab-separated `iteration lr loss recon task`; absent components are `-`.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.9e}"));
        let mut out = String::from("iteration\tlr\tloss\trecon\ttask\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{:e}\t{:.9e}\t{}\t{}",
                e.iteration,
                e.lr,
                e.loss,
                opt(e.recon),
                opt(e.task)
            );
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Trains `net` on MSE between its output and the clean patches for
/// `schedule.iterations` steps, continuing from `net.info.iteration`.
/// Batch and patch sizes come from `stream`.
pub fn train_denoiser<T: Scalar>(
    net: &mut DenoiserNet<T>,
    stream: &mut PatchStream,
    schedule: &OptimizerSchedule,
) -> Result<TrainingLog> {
    train_denoiser_with(net, stream, schedule, |_, _| {})
}

/// [`train_denoiser`] with a callback after every step, given the iteration and its loss.
pub fn train_denoiser_with<T: Scalar>(
    net: &mut DenoiserNet<T>,
    stream: &mut PatchStream,
    schedule: &OptimizerSchedule,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainingLog> {
    schedule.validate()?;
    net.set_output_lr_scale(schedule.output_lr_scale);
    let mut opt = Sgd::from_schedule(schedule);
    let mut log = TrainingLog::new();
    let start = net.info.iteration;
    for it in start..start + schedule.iterations {
        let (noisy, clean) = stream.next_batch()?;
        let tape = Tape::new();
        let x = tape.input(noisy.cast::<T>());
        let target = tape.input(clean.cast::<T>());
        let out = net.forward(&tape, x, Mode::Train)?;
        let loss = out.mse_loss(target)?;
        let value = loss.item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Training(format!("denoiser loss diverged at iteration {it}")));
        }
        let grads = tape.backward(loss)?;
        net.store.accumulate(&grads);
        let lr = schedule.lr_at(it);
        opt.step(&mut net.store, lr)?;
        net.info.iteration = it + 1;
        log.push(it, lr, value, Some(value), None);
        on_step(it, value);
    }
    Ok(log)
}
