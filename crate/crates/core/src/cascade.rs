//! Denoiser feeding a frozen high-level head.
//!
//! The joint objective is `L = L_D + lambda * L_H`, where `L_D` is the MSE
//! between the denoiser output and the clean image and `L_H` is the head's
//! cross-entropy on the denoiser output. Only denoiser parameters are updated;
//! task gradients pass through the frozen head into the denoiser.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{perturb, Image, LabeledStream, Labels, NoiseSampling, Sample, Target, ToyKind};
use crate::denoiser::DenoiserNet;
use crate::highlevel::HighLevelHead;
use crate::metrics::PsnrMode;
use crate::ops::Mode;
use crate::optim::{OptimizerSchedule, Sgd};
use crate::report::MetricsReport;
use crate::train::TrainingLog;
use crate::{Error, Result, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    /// Weight of the task loss; 0 reduces to plain denoiser training.
    pub lambda: f64,
    /// Training noise level on the 0-255 scale.
    pub sigma: f64,
    pub task: ToyKind,
    pub schedule: OptimizerSchedule,
    pub seed: u64,
    /// Start from a denoiser trained on MSE alone rather than from scratch.
    pub warm_start: bool,
    pub noise: NoiseSampling,
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        self.schedule.validate()
    }
}

/// Loss values recorded on the tape for one batch.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub recon: Var<'t, T>,
    pub task: Var<'t, T>,
}

pub struct Cascade<T: Scalar = f32> {
    pub denoiser: DenoiserNet<T>,
    pub head: HighLevelHead<T>,
    pub config: CascadeConfig,
    pub warnings: Vec<String>,
}

impl<T: Scalar> Cascade<T> {
    pub fn new(denoiser: DenoiserNet<T>, head: HighLevelHead<T>, config: CascadeConfig) -> Result<Self> {
        config.validate()?;
        if head.kind().task() != config.task {
            return Err(Error::Incompatible(format!(
                "{} head cannot serve the {} task",
                head.kind(),
                config.task
            )));
        }
        Ok(Cascade {
            denoiser,
            head,
            config,
            warnings: Vec::new(),
        })
    }

    /// `(L, L_D, L_H)` for one batch. The denoiser runs in `mode`; the head has
    /// no batch statistics, so it behaves identically in both modes.
    pub fn joint_loss<'t>(
        &mut self,
        tape: &'t Tape<T>,
        noisy: Var<'t, T>,
        clean: Var<'t, T>,
        labels: &Labels,
        mode: Mode,
    ) -> Result<JointLoss<'t, T>> {
        if !self.head.is_frozen() {
            return Err(Error::Training("the high-level head must be frozen".into()));
        }
        if noisy.shape() != clean.shape() {
            return Err(Error::shape(format!(
                "noisy {:?} and clean {:?} batches differ",
                noisy.shape(),
                clean.shape()
            )));
        }
        let restored = self.denoiser.forward(tape, noisy, mode)?;
        let recon = restored.mse_loss(clean)?;
        let task = self.head.loss(tape, restored, labels)?;
        let total = recon.add(task.scale(T::from_f64_lossy(self.config.lambda)))?;
        Ok(JointLoss { total, recon, task })
    }

    /// Runs `config.schedule.iterations` joint-loss SGD steps on batches from
    /// `stream`, updating only the denoiser. The learning-rate schedule starts
    /// over at this call, even for a warm-started denoiser.
    pub fn train(&mut self, stream: &mut LabeledStream) -> Result<TrainingLog> {
        self.train_with(stream, |_, _| {})
    }

    pub fn train_with(
        &mut self,
        stream: &mut LabeledStream,
        mut on_step: impl FnMut(usize, f64),
    ) -> Result<TrainingLog> {
        if !self.head.is_frozen() {
            return Err(Error::Training("the high-level head must be frozen".into()));
        }
        if !self.head.is_pretrained() {
            return Err(Error::Training(format!(
                "the {} head has not passed its clean-data pretraining gate",
                self.head.kind()
            )));
        }
        let schedule = self.config.schedule.clone();
        self.denoiser.set_output_lr_scale(schedule.output_lr_scale);
        let mut opt = Sgd::from_schedule(&schedule);
        let mut log = TrainingLog::new();
        let start = self.denoiser.info.iteration;
        for it in start..start + schedule.iterations {
            let (noisy, clean, labels) = stream.next_batch()?;
            let tape = Tape::new();
            let x = tape.input(noisy.cast::<T>());
            let y = tape.input(clean.cast::<T>());
            let loss = self.joint_loss(&tape, x, y, &labels, Mode::Train)?;
            let total = loss.total.item().to_f64_lossy();
            if !total.is_finite() {
                return Err(Error::Training(format!("joint loss diverged at iteration {it}")));
            }
            let grads = tape.backward(loss.total)?;
            self.denoiser.store.accumulate(&grads);
            let lr = schedule.lr_at(it - start);
            opt.step(&mut self.denoiser.store, lr)?;
            self.denoiser.info.iteration = it + 1;
            log.push(
                it,
                lr,
                total,
                Some(loss.recon.item().to_f64_lossy()),
                Some(loss.task.item().to_f64_lossy()),
            );
            on_step(it, total);
        }
        let info = &mut self.denoiser.info;
        info.sigma = Some(self.config.sigma);
        info.lambda = self.config.lambda;
        info.trained_with = (self.config.lambda > 0.0).then(|| self.config.task.to_string());
        Ok(log)
    }

    /// Head metric on denoised versions of `noisy`.
    pub fn evaluate(&mut self, noisy: &[Image], targets: &[&Target]) -> Result<f64> {
        let restored = denoise_images(&mut self.denoiser, noisy)?;
        self.head.evaluate(&restored, targets)
    }
}

/// Trains the cascade; see [`Cascade::train`].
pub fn train_cascade<T: Scalar>(cascade: &mut Cascade<T>, stream: &mut LabeledStream) -> Result<TrainingLog> {
    cascade.train(stream)
}

/// Reuses a denoiser checkpoint with a different frozen head, without any
/// training. A noise-level mismatch is recorded as a warning.
pub fn plug_cross_task<T: Scalar>(
    denoiser_ckpt: &Checkpoint,
    head: HighLevelHead<T>,
    config: CascadeConfig,
) -> Result<Cascade<T>> {
    if !head.is_frozen() || !head.is_pretrained() {
        return Err(Error::Training(
            "cross-task plug-in needs a pretrained, frozen head".into(),
        ));
    }
    let denoiser = DenoiserNet::from_checkpoint(denoiser_ckpt)?;
    let trained_sigma = denoiser.info.sigma;
    let mut cascade = Cascade::new(denoiser, head, config)?;
    if let Some(s) = trained_sigma {
        if s != cascade.config.sigma {
            cascade.warnings.push(format!(
                "denoiser trained at sigma {s} is evaluated at sigma {}",
                cascade.config.sigma
            ));
        }
    }
    Ok(cascade)
}

/// Eval-mode denoising of a list of images, 32 at a time.
pub fn denoise_images<T: Scalar>(net: &mut DenoiserNet<T>, images: &[Image]) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let same_size = chunk
            .iter()
            .all(|i| (i.height, i.width) == (chunk[0].height, chunk[0].width));
        if same_size {
            let refs: Vec<&Image> = chunk.iter().collect();
            let y = net.denoise(&Image::batch_to_tensor::<T>(&refs)?)?;
            for n in 0..chunk.len() {
                out.push(Image::from_tensor(&y, n)?);
            }
        } else {
            for img in chunk {
                let y = net.denoise(&img.to_tensor())?;
                out.push(Image::from_tensor(&y, 0)?);
            }
        }
    }
    Ok(out)
}

/// A labelled test set with one fixed noisy copy per image.
#[derive(Clone, Debug)]
pub struct NoisyTestSet {
    pub sigma: f64,
    pub samples: Vec<Sample>,
    pub noisy: Vec<Image>,
}

impl NoisyTestSet {
    pub fn new(samples: Vec<Sample>, sigma: f64, seed: u64) -> Result<Self> {
        crate::data::NoiseModel::new(sigma, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noisy = samples
            .iter()
            .map(|s| {
                let mut n = s.image.clone();
                perturb(&mut n.data, sigma, &mut rng);
                n
            })
            .collect();
        Ok(NoisyTestSet { sigma, samples, noisy })
    }

    pub fn targets(&self) -> Vec<&Target> {
        self.samples.iter().map(|s| &s.target).collect()
    }

    pub fn clean(&self) -> Vec<&Image> {
        self.samples.iter().map(|s| &s.image).collect()
    }
}

/// Evaluation pipelines compared on one noisy test set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Noisy images straight into the head.
    Vgg,
    /// MSE-only denoiser, then the head.
    Separate,
    /// Denoiser trained jointly with this task's head.
    Joint,
    /// Denoiser trained jointly with the other task's head.
    CrossTask,
}

crate::denoiser::text_enum!(Variant { Vgg => "vgg", Separate => "separate", Joint => "joint", CrossTask => "cross" });

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vgg, Variant::Separate, Variant::Joint, Variant::CrossTask];
}

/// Denoiser checkpoints available to [`run_pipeline`].
#[derive(Clone, Copy, Debug, Default)]
pub struct PipelineCheckpoints<'a> {
    pub separate: Option<&'a Checkpoint>,
    pub joint: Option<&'a Checkpoint>,
    pub cross: Option<&'a Checkpoint>,
}

/// Runs one pipeline variant on `testset` and reports the head metric and the
/// PSNR of the images the head sees. The head must be pretrained and frozen.
pub fn run_pipeline<T: Scalar>(
    variant: Variant,
    head: &HighLevelHead<T>,
    checkpoints: PipelineCheckpoints<'_>,
    testset: &NoisyTestSet,
    psnr_mode: PsnrMode,
) -> Result<MetricsReport> {
    if !head.is_frozen() || !head.is_pretrained() {
        return Err(Error::Training(format!(
            "variant {variant} needs a pretrained, frozen head"
        )));
    }
    let mut report = MetricsReport::new();
    let (ckpt, what) = match variant {
        Variant::Vgg => (None, ""),
        Variant::Separate => (checkpoints.separate, "separately trained denoiser"),
        Variant::Joint => (checkpoints.joint, "jointly trained denoiser"),
        Variant::CrossTask => (checkpoints.cross, "cross-task denoiser"),
    };
    let seen = match variant {
        Variant::Vgg => testset.noisy.clone(),
        _ => {
            let ckpt = ckpt.ok_or_else(|| Error::MissingCheckpoint {
                variant: variant.to_string(),
                what: what.to_string(),
            })?;
            let mut net = DenoiserNet::<T>::from_checkpoint(ckpt)?;
            if let Some(s) = net.info.sigma {
                if s != testset.sigma {
                    report.warn(format!(
                        "{variant}: denoiser trained at sigma {s}, test noise sigma {}",
                        testset.sigma
                    ));
                }
            }
            let task = head.kind().task().to_string();
            match (variant, net.info.trained_with.as_deref()) {
                (Variant::Joint, Some(t)) if t != task => {
                    return Err(Error::Incompatible(format!(
                        "joint variant needs a denoiser trained with the {task} head, got {t}"
                    )))
                }
                (Variant::CrossTask, Some(t)) if t == task => {
                    return Err(Error::Incompatible(format!(
                        "cross variant needs a denoiser trained with a different head than {task}"
                    )))
                }
                _ => {}
            }
            denoise_images(&mut net, &testset.noisy)?
        }
    };
    let name = variant.to_string();
    let metric = head.evaluate(&seen, &testset.targets())?;
    report.push(&name, testset.sigma, head.kind().metric_name(), metric);
    let mut psnr = 0.0;
    for (s, c) in seen.iter().zip(testset.clean()) {
        psnr += psnr_mode.measure(s, c)?;
    }
    report.push(&name, testset.sigma, "psnr", psnr / seen.len() as f64);
    Ok(report)
}
