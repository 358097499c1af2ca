//! Small classification and segmentation networks that consume denoiser output.
//!
//! Both heads subtract per-channel dataset means from their input, then apply
//! three 3x3 conv + ReLU stages with 16, 32 and 64 channels. The classifier
//! halves the resolution after each stage and finishes with global average
//! pooling and a linear layer; the segmenter keeps full resolution and ends
//! with a 1x1 convolution to per-pixel logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{Image, LabeledStream, Labels, NoiseSampling, Sample, Target, ToyKind, IGNORE_LABEL};
use crate::layers::{Conv2d, Linear};
use crate::metrics::{argmax_channels, Confusion};
use crate::optim::{OptimizerSchedule, Sgd};
use crate::param::ParamStore;
use crate::train::TrainingLog;
use crate::{Error, Result, Scalar, Tape, Tensor, Var};

pub const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Classifier,
    Segmenter,
}

crate::denoiser::text_enum!(HeadKind { Classifier => "classifier", Segmenter => "segmenter" });

impl HeadKind {
    pub fn for_task(task: ToyKind) -> Self {
        match task {
            ToyKind::Classification => HeadKind::Classifier,
            ToyKind::Segmentation => HeadKind::Segmenter,
        }
    }

    pub fn task(self) -> ToyKind {
        match self {
            HeadKind::Classifier => ToyKind::Classification,
            HeadKind::Segmenter => ToyKind::Segmentation,
        }
    }

    /// Name of the quality metric: top-1 accuracy or mean IoU.
    pub fn metric_name(self) -> &'static str {
        match self {
            HeadKind::Classifier => "top1",
            HeadKind::Segmenter => "miou",
        }
    }
}

#[derive(Clone, Debug)]
enum Output {
    Linear(Linear),
    PixelConv(Conv2d),
}

/// Held-out clean metric reached during pretraining and the target it was held to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gate {
    pub metric: f64,
    pub target: f64,
}

impl Gate {
    pub fn passed(&self) -> bool {
        self.metric >= self.target
    }
}

#[derive(Clone, Debug)]
pub struct HighLevelHead<T: Scalar = f32> {
    kind: HeadKind,
    classes: usize,
    means: [f64; 3],
    pub store: ParamStore<T>,
    stages: Vec<Conv2d>,
    output: Output,
    frozen: bool,
    gate: Option<Gate>,
}

impl<T: Scalar> HighLevelHead<T> {
    pub fn new(kind: HeadKind, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!(
                "a head needs at least 2 classes, got {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(STAGE_CHANNELS.len());
        let mut cin = Image::CHANNELS;
        for (i, &cout) in STAGE_CHANNELS.iter().enumerate() {
            stages.push(Conv2d::same(&mut store, &mut rng, &format!("stage{i}"), cin, cout, 3)?);
            cin = cout;
        }
        let output = match kind {
            HeadKind::Classifier => Output::Linear(Linear::new(&mut store, &mut rng, "fc", cin, classes)?),
            HeadKind::Segmenter => Output::PixelConv(Conv2d::same(&mut store, &mut rng, "logits", cin, classes, 1)?),
        };
        Ok(HighLevelHead {
            kind,
            classes,
            means: [0.0; 3],
            store,
            stages,
            output,
            frozen: false,
            gate: None,
        })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn means(&self) -> [f64; 3] {
        self.means
    }

    pub fn set_means(&mut self, means: [f64; 3]) {
        self.means = means;
    }

    pub fn gate(&self) -> Option<Gate> {
        self.gate
    }

    pub fn set_gate(&mut self, gate: Option<Gate>) {
        self.gate = gate;
    }

    pub fn is_pretrained(&self) -> bool {
        self.gate.is_some_and(|g| g.passed())
    }

    pub fn freeze(&mut self) {
        self.store.set_trainable(false);
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.store.set_trainable(true);
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Logits: `N x K` for the classifier, `N x K x H x W` for the segmenter.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let offsets: Vec<T> = self.means.iter().map(|&m| T::from_f64_lossy(-m)).collect();
        let mut h = x.shift_channels(&offsets)?;
        for conv in &self.stages {
            h = conv.forward(tape, &self.store, h)?.relu();
            if self.kind == HeadKind::Classifier {
                // Odd extents drop their last row/column before pooling.
                let shape = h.shape();
                let (ht, wd) = (shape[2], shape[3]);
                if ht < 2 || wd < 2 {
                    return Err(Error::shape(format!("classifier input too small at {ht}x{wd}")));
                }
                if ht % 2 == 1 || wd % 2 == 1 {
                    h = h.crop(ht - ht % 2, wd - wd % 2)?;
                }
                h = h.max_pool2()?;
            }
        }
        match &self.output {
            Output::Linear(fc) => fc.forward(tape, &self.store, h.global_avg_pool()?),
            Output::PixelConv(conv) => conv.forward(tape, &self.store, h),
        }
    }

    /// Cross-entropy of the head's logits; segmentation pixels labelled
    /// [`IGNORE_LABEL`] do not contribute.
    pub fn loss<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, labels: &Labels) -> Result<Var<'t, T>> {
        let logits = self.forward(tape, x)?;
        match (self.kind, labels) {
            (HeadKind::Classifier, Labels::PerImage(l)) => logits.cross_entropy(l, None),
            (HeadKind::Segmenter, Labels::PerPixel(l)) => logits.cross_entropy(l, Some(IGNORE_LABEL)),
            (kind, _) => Err(Error::Incompatible(format!(
                "{kind} head cannot be trained with {} labels",
                match labels {
                    Labels::PerImage(_) => "per-image",
                    Labels::PerPixel(_) => "per-pixel",
                }
            ))),
        }
    }

    /// Logits for a batch without gradient tracking.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let input = tape.input(x.clone());
        Ok(self.forward(&tape, input)?.to_tensor())
    }

    /// Class per image (classifier) or per pixel (segmenter), lowest index on ties.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        match self.kind {
            HeadKind::Classifier => Ok(logits
                .data()
                .chunks_exact(self.classes)
                .map(|row| {
                    let row: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
                    crate::metrics::argmax(&row)
                })
                .collect()),
            HeadKind::Segmenter => argmax_channels(&logits),
        }
    }

    /// Top-1 accuracy or mean IoU of predictions on `inputs` against `targets`.
    pub fn evaluate(&self, inputs: &[Image], targets: &[&Target]) -> Result<f64> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::invalid("evaluation needs one target per input image"));
        }
        const CHUNK: usize = 64;
        let mut hits = 0usize;
        let mut confusion = Confusion::new(self.classes);
        for (imgs, tgts) in inputs.chunks(CHUNK).zip(targets.chunks(CHUNK)) {
            let refs: Vec<&Image> = imgs.iter().collect();
            let batch = Image::batch_to_tensor::<T>(&refs)?;
            let pred = self.predict(&batch)?;
            match (self.kind, Labels::collect(tgts.iter().copied())?) {
                (HeadKind::Classifier, Labels::PerImage(l)) => {
                    hits += pred.iter().zip(&l).filter(|(p, t)| p == t).count();
                }
                (HeadKind::Segmenter, Labels::PerPixel(l)) => {
                    confusion.add(&pred, &l, Some(IGNORE_LABEL))?;
                }
                (kind, _) => {
                    return Err(Error::Incompatible(format!("targets do not match a {kind} head")));
                }
            }
        }
        match self.kind {
            HeadKind::Classifier => Ok(hits as f64 / inputs.len() as f64),
            HeadKind::Segmenter => confusion.mean_iou(),
        }
    }

    pub fn evaluate_samples(&self, samples: &[Sample]) -> Result<f64> {
        let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
        let targets: Vec<&Target> = samples.iter().map(|s| &s.target).collect();
        self.evaluate(&images, &targets)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("kind", "head");
        ckpt.set_meta("head.kind", self.kind);
        ckpt.set_meta("head.classes", self.classes);
        for (c, m) in self.means.iter().enumerate() {
            ckpt.set_meta(&format!("head.mean{c}"), format!("{m:?}"));
        }
        if let Some(g) = self.gate {
            ckpt.set_meta("head.metric", format!("{:?}", g.metric));
            ckpt.set_meta("head.target", format!("{:?}", g.target));
        }
        ckpt.push_store(&self.store);
        ckpt
    }

    /// Restores a head; it comes back frozen, as it is only ever reused for inference.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.meta("kind") {
            Some("head") => {}
            other => {
                return Err(Error::Incompatible(format!(
                    "expected a head checkpoint, found kind {other:?}"
                )))
            }
        }
        let kind: HeadKind = ckpt.require_meta("head.kind")?.parse()?;
        let mut head = Self::new(kind, ckpt.parse_meta("head.classes")?, 0)?;
        ckpt.load_into(&mut head.store)?;
        for c in 0..3 {
            head.means[c] = ckpt.parse_meta(&format!("head.mean{c}"))?;
        }
        head.gate = match (ckpt.meta("head.metric"), ckpt.meta("head.target")) {
            (Some(_), Some(_)) => Some(Gate {
                metric: ckpt.parse_meta("head.metric")?,
                target: ckpt.parse_meta("head.target")?,
            }),
            _ => None,
        };
        head.freeze();
        Ok(head)
    }
}

/// Settings for clean-data pretraining of a head.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub schedule: OptimizerSchedule,
    /// Minimum held-out clean metric (top-1 or mean IoU) for the head to be usable.
    pub target: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn desk(kind: HeadKind) -> Self {
        let (iterations, target) = match kind {
            HeadKind::Classifier => (1500, 0.95),
            HeadKind::Segmenter => (1500, 0.80),
        };
        PretrainConfig {
            schedule: OptimizerSchedule {
                batch_size: 16,
                patch_size: crate::data::TOY_SIZE,
                lr0: 0.02,
                decay_every: 1000,
                iterations,
                momentum: 0.9,
                output_lr_scale: 1.0,
                weight_decay: 5e-4,
            },
            target,
            seed: 0,
        }
    }
}

/// Trains an unfrozen head on clean `train` samples, then measures the clean
/// metric on `heldout` and records it as the head's gate. Per-channel means are
/// taken from `train`. The head is left unfrozen; check [`Gate::passed`].
pub fn pretrain_head<T: Scalar>(
    head: &mut HighLevelHead<T>,
    train: &[Sample],
    heldout: &[Sample],
    config: &PretrainConfig,
) -> Result<(TrainingLog, Gate)> {
    if head.is_frozen() {
        return Err(Error::Training("cannot pretrain a frozen head".into()));
    }
    config.schedule.validate()?;
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::invalid("pretraining needs training and held-out samples"));
    }
    head.set_means(crate::data::channel_means(train.iter().map(|s| &s.image)));
    let mut stream = LabeledStream::new(
        train.to_vec(),
        config.schedule.batch_size,
        0.0,
        config.seed,
        NoiseSampling::Fresh,
    )?;
    let mut opt = Sgd::from_schedule(&config.schedule);
    let mut log = TrainingLog::new();
    for it in 0..config.schedule.iterations {
        let (x, _, labels) = stream.next_batch()?;
        let tape = Tape::new();
        let input = tape.input(x.cast::<T>());
        let loss = head.loss(&tape, input, &labels)?;
        let value = loss.item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Training(format!("head loss diverged at iteration {it}")));
        }
        let grads = tape.backward(loss)?;
        head.store.accumulate(&grads);
        let lr = config.schedule.lr_at(it);
        opt.step(&mut head.store, lr)?;
        log.push(it, lr, value, None, Some(value));
    }
    let gate = Gate {
        metric: head.evaluate_samples(heldout)?,
        target: config.target,
    };
    head.gate = Some(gate);
    Ok((log, gate))
}
