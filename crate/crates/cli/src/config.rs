//! Experiment configuration files.
//!
//! A config is a TOML document. Every section is optional and falls back to
//! the desk-scale defaults; unknown keys are rejected. The fully resolved
//! config (defaults filled in, command-line overrides applied) is written
//! next to every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cdnz_core::data::{NoiseSampling, PatchSampling, ToyKind};
use cdnz_core::denoiser::{DenoiserConfig, Downsample, Fusion, SkipNorm};
use cdnz_core::highlevel::{HeadKind, PretrainConfig};
use cdnz_core::metrics::PsnrMode;
use cdnz_core::optim::OptimizerSchedule;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config key {key}: {message}")]
    Value { key: String, message: String },
}

fn bad(key: &str, message: impl ToString) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        message: message.to_string(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub denoiser: DenoiserSection,
    pub train: ScheduleSection,
    pub head: HeadSection,
    pub cascade: CascadeSection,
    pub eval: EvalSection,
    pub checkpoints: CheckpointSection,
}

/// Training and test images, either from manifests or generated toy sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Task the labels belong to: "classification" or "segmentation".
    pub task: String,
    pub train_manifest: Option<PathBuf>,
    pub heldout_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Sizes of the generated toy splits when a manifest is absent.
    pub toy_train: usize,
    pub toy_heldout: usize,
    pub toy_test: usize,
    pub toy_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            task: "classification".into(),
            train_manifest: None,
            heldout_manifest: None,
            test_manifest: None,
            toy_train: 600,
            toy_heldout: 100,
            toy_test: 200,
            toy_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSection {
    pub scales: usize,
    pub fusion: String,
    pub downsample: String,
    pub width: usize,
    pub skip_norm: String,
    pub input_channels: usize,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let d = DenoiserConfig::desk();
        DenoiserSection {
            scales: d.scales,
            fusion: d.fusion.to_string(),
            downsample: d.downsample.to_string(),
            width: d.width,
            skip_norm: d.skip_norm.to_string(),
            input_channels: d.input_channels,
        }
    }
}

/// Optimizer settings. Absent keys are filled from the section's defaults
/// when the config is parsed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub batch_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub decay_every: Option<usize>,
    pub iterations: Option<usize>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub output_lr_scale: Option<f64>,
    /// Training noise level on the 0-255 scale.
    pub sigma: Option<f64>,
    /// "fresh" noise per batch or "fixed" noisy copies.
    pub noise: Option<String>,
    /// 0 samples random crops every batch; N > 0 draws from N crops fixed up front.
    pub pre_extracted: Option<usize>,
}

impl ScheduleSection {
    fn fill(&mut self, d: &OptimizerSchedule, sigma: f64) {
        self.batch_size.get_or_insert(d.batch_size);
        self.patch_size.get_or_insert(d.patch_size);
        self.lr0.get_or_insert(d.lr0);
        self.decay_every.get_or_insert(d.decay_every);
        self.iterations.get_or_insert(d.iterations);
        self.momentum.get_or_insert(d.momentum);
        self.weight_decay.get_or_insert(d.weight_decay);
        self.output_lr_scale.get_or_insert(d.output_lr_scale);
        self.sigma.get_or_insert(sigma);
        self.noise.get_or_insert_with(|| "fresh".into());
        self.pre_extracted.get_or_insert(0);
    }

    pub fn schedule(&self, section: &str) -> Result<OptimizerSchedule, ConfigError> {
        let s = OptimizerSchedule {
            batch_size: self.batch_size.unwrap_or_default(),
            patch_size: self.patch_size.unwrap_or_default(),
            lr0: self.lr0.unwrap_or_default(),
            decay_every: self.decay_every.unwrap_or_default(),
            iterations: self.iterations.unwrap_or_default(),
            momentum: self.momentum.unwrap_or_default(),
            weight_decay: self.weight_decay.unwrap_or_default(),
            output_lr_scale: self.output_lr_scale.unwrap_or_default(),
        };
        s.validate().map_err(|e| bad(section, e))?;
        Ok(s)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma.unwrap_or_default()
    }

    pub fn noise_sampling(&self, section: &str) -> Result<NoiseSampling, ConfigError> {
        match self.noise.as_deref().unwrap_or("fresh") {
            "fresh" => Ok(NoiseSampling::Fresh),
            "fixed" => Ok(NoiseSampling::Fixed),
            other => Err(bad(
                &format!("{section}.noise"),
                format!("expected fresh or fixed, got {other:?}"),
            )),
        }
    }

    pub fn patch_sampling(&self) -> PatchSampling {
        match self.pre_extracted.unwrap_or(0) {
            0 => PatchSampling::Random,
            count => PatchSampling::PreExtracted { count },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    /// Minimum held-out clean metric; defaults per head kind.
    pub target: Option<f64>,
    pub schedule: ScheduleSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeSection {
    /// Task-loss weight; defaults to 0.25 for classification, 0.5 for segmentation.
    pub lambda: Option<f64>,
    pub warm_start: bool,
    pub schedule: ScheduleSection,
}

impl Default for CascadeSection {
    fn default() -> Self {
        CascadeSection {
            lambda: None,
            warm_start: true,
            schedule: ScheduleSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub sigmas: Vec<f64>,
    /// "quantized" (8-bit, clamped) or "float".
    pub psnr: String,
    pub noise_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            sigmas: vec![15.0, 30.0, 45.0, 60.0],
            psnr: "quantized".into(),
            noise_seed: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointSection {
    /// Starting denoiser for cascade training (warm start).
    pub denoiser: Option<PathBuf>,
    pub head: Option<PathBuf>,
    pub separate: Option<PathBuf>,
    pub joint: Option<PathBuf>,
    pub cross: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, String), LoadError> {
        let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        Ok((config, text))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<config>"),
            message: e.message().to_string(),
        })?;
        config.fill_defaults()?;
        config.validate()?;
        Ok(config)
    }

    /// Replaces every absent optional value with its default.
    pub fn fill_defaults(&mut self) -> Result<(), ConfigError> {
        let task = self.task()?;
        self.train.fill(&OptimizerSchedule::desk_scale(), 25.0);
        let pretrain = PretrainConfig::desk(HeadKind::for_task(task));
        self.head.schedule.fill(&pretrain.schedule, 0.0);
        self.head.target.get_or_insert(pretrain.target);
        self.cascade.schedule.fill(&OptimizerSchedule::desk_joint(), 25.0);
        self.cascade.lambda.get_or_insert(match task {
            ToyKind::Classification => 0.25,
            ToyKind::Segmentation => 0.5,
        });
        Ok(())
    }

    /// Resolved config as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every typed value once so commands can unwrap the conversions.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.task()?;
        self.denoiser_config()?;
        self.train.schedule("train")?;
        self.train.noise_sampling("train")?;
        self.cascade.schedule.schedule("cascade.schedule")?;
        self.cascade.schedule.noise_sampling("cascade.schedule")?;
        self.head.schedule.schedule("head.schedule")?;
        if let Some(l) = self.cascade.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(bad("cascade.lambda", format!("must be >= 0, got {l}")));
            }
        }
        for (key, s) in [
            ("train.sigma", self.train.sigma()),
            ("cascade.schedule.sigma", self.cascade.schedule.sigma()),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(bad(key, format!("must be >= 0, got {s}")));
            }
        }
        self.psnr_mode()?;
        if self.data.toy_train == 0 || self.data.toy_heldout == 0 || self.data.toy_test == 0 {
            return Err(bad("data", "toy split sizes must be positive"));
        }
        Ok(())
    }

    pub fn task(&self) -> Result<ToyKind, ConfigError> {
        self.data.task.parse().map_err(|e| bad("data.task", e))
    }

    pub fn head_kind(&self) -> Result<HeadKind, ConfigError> {
        Ok(HeadKind::for_task(self.task()?))
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig, ConfigError> {
        let d = &self.denoiser;
        let fusion: Fusion = d.fusion.parse().map_err(|e| bad("denoiser.fusion", e))?;
        let downsample: Downsample = d.downsample.parse().map_err(|e| bad("denoiser.downsample", e))?;
        let skip_norm: SkipNorm = d.skip_norm.parse().map_err(|e| bad("denoiser.skip_norm", e))?;
        let config = DenoiserConfig {
            scales: d.scales,
            fusion,
            downsample,
            input_channels: d.input_channels,
            width: d.width,
            skip_norm,
        };
        config.validate().map_err(|e| bad("denoiser", e))?;
        Ok(config)
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig, ConfigError> {
        let mut cfg = PretrainConfig::desk(self.head_kind()?);
        cfg.schedule = self.head.schedule.schedule("head.schedule")?;
        if let Some(t) = self.head.target {
            cfg.target = t;
        }
        cfg.seed = self.seed;
        Ok(cfg)
    }

    pub fn lambda(&self) -> Result<f64, ConfigError> {
        Ok(self.cascade.lambda.unwrap_or(match self.task()? {
            ToyKind::Classification => 0.25,
            ToyKind::Segmentation => 0.5,
        }))
    }

    pub fn psnr_mode(&self) -> Result<PsnrMode, ConfigError> {
        self.eval.psnr.parse().map_err(|e| bad("eval.psnr", e))
    }

    /// Makes relative manifest and checkpoint paths relative to `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.data.train_manifest);
        fix(&mut self.data.heldout_manifest);
        fix(&mut self.data.test_manifest);
        let c = &mut self.checkpoints;
        for p in [
            &mut c.denoiser,
            &mut c.head,
            &mut c.separate,
            &mut c.joint,
            &mut c.cross,
        ] {
            fix(p);
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_desk_scale() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.denoiser_config().unwrap(), DenoiserConfig::desk());
        assert_eq!(c.train.schedule("train").unwrap(), OptimizerSchedule::desk_scale());
        assert_eq!(
            c.cascade.schedule.schedule("cascade").unwrap(),
            OptimizerSchedule::desk_joint()
        );
        assert_eq!(c.lambda().unwrap(), 0.25);
    }

    #[test]
    fn partial_sections_keep_their_own_defaults() {
        let c = ExperimentConfig::parse("[cascade.schedule]\niterations = 10\n").unwrap();
        let s = c.cascade.schedule.schedule("cascade").unwrap();
        assert_eq!(s.iterations, 10);
        assert_eq!(s.lr0, OptimizerSchedule::desk_joint().lr0);
        let c = ExperimentConfig::parse("[data]\ntask = \"segmentation\"\n").unwrap();
        assert_eq!(c.lambda().unwrap(), 0.5);
        assert_eq!(c.head.target, Some(PretrainConfig::desk(HeadKind::Segmenter).target));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = ExperimentConfig::parse("colour = 1\n").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn bad_values_name_their_key() {
        let err = ExperimentConfig::parse("[denoiser]\nfusion = \"max\"\n").unwrap_err();
        assert!(err.to_string().contains("denoiser.fusion"), "{err}");
        let err = ExperimentConfig::parse("[data]\ntask = \"detection\"\n").unwrap_err();
        assert!(err.to_string().contains("data.task"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = ExperimentConfig::parse("seed = 7\n[data]\ntask = \"segmentation\"\n").unwrap();
        c.cascade.lambda = Some(0.5);
        let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.lambda().unwrap(), 0.5);
    }
}
