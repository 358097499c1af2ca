//! Multi-scale residual denoising network.
//!
//! Wiring for `S` scales (scale 0 is full resolution):
//!
//! ```text
//! e0 = Enc0(x)
//! e_s = Enc_s(Down_s(e_{s-1}))                       s = 1 .. S-1
//! f = e_{S-1}
//! f = Dec_s(fuse(e_s, Up_s(f)))                      s = S-2 .. 0
//! y = x + Proj(f)
//! ```
//!
//! `fuse` is channel concatenation (default) or an element-wise sum, in which
//! case a 1x1 adapter first maps the upsampled features to the encoder width.
//! Encoders output `width` channels and decoders `2 * width` (128 and 256 at
//! full size). The coarsest scale only encodes; decoding happens on the way up.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::layers::{BatchNorm2d, Conv2d, ConvBn, Upsample2x};
use crate::ops::Mode;
use crate::param::ParamStore;
use crate::{Error, Result, Scalar, Tape, Tensor, Var};

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = $crate::Error;

            fn from_str(s: &str) -> $crate::Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err($crate::Error::invalid(format!(
                        concat!("unknown ", stringify!($name), " {:?}"),
                        other
                    ))),
                }
            }
        }
    };
}
pub(crate) use text_enum;

/// How two adjacent scales are merged before decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fusion {
    #[default]
    Concat,
    Sum,
}
text_enum!(Fusion { Concat => "concat", Sum => "sum" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Downsample {
    #[default]
    StridedConv,
    MaxPool,
}
text_enum!(Downsample { StridedConv => "strided_conv", MaxPool => "max_pool" });

/// Where the fourth convolution's batch-norm + ReLU sit relative to the inner skip sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SkipNorm {
    /// `out = h1 + relu(bn(conv4(h)))`
    #[default]
    BeforeSum,
    /// `out = relu(bn(conv4(h) + h1))`
    AfterSum,
}
text_enum!(SkipNorm { BeforeSum => "before_sum", AfterSum => "after_sum" });

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub scales: usize,
    pub fusion: Fusion,
    pub downsample: Downsample,
    pub input_channels: usize,
    /// Encoder output channels; decoders use twice this. 128 at full size.
    pub width: usize,
    pub skip_norm: SkipNorm,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            scales: 3,
            fusion: Fusion::Concat,
            downsample: Downsample::StridedConv,
            input_channels: 3,
            width: 128,
            skip_norm: SkipNorm::BeforeSum,
        }
    }
}

impl DenoiserConfig {
    /// Same topology with every channel count divided by 16.
    pub fn desk() -> Self {
        DenoiserConfig {
            width: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(Error::invalid(format!(
                "denoiser needs at least 2 scales, got {}",
                self.scales
            )));
        }
        if self.width < 4 || !self.width.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "width must be a positive multiple of 4, got {}",
                self.width
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::invalid("input_channels must be positive"));
        }
        Ok(())
    }

    /// Spatial extents handled without padding are multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.scales - 1)
    }

    fn write_meta(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("denoiser.scales", self.scales);
        ckpt.set_meta("denoiser.fusion", self.fusion);
        ckpt.set_meta("denoiser.downsample", self.downsample);
        ckpt.set_meta("denoiser.input_channels", self.input_channels);
        ckpt.set_meta("denoiser.width", self.width);
        ckpt.set_meta("denoiser.skip_norm", self.skip_norm);
    }

    fn read_meta(ckpt: &Checkpoint) -> Result<Self> {
        Ok(DenoiserConfig {
            scales: ckpt.parse_meta("denoiser.scales")?,
            fusion: ckpt.require_meta("denoiser.fusion")?.parse()?,
            downsample: ckpt.require_meta("denoiser.downsample")?.parse()?,
            input_channels: ckpt.parse_meta("denoiser.input_channels")?,
            width: ckpt.parse_meta("denoiser.width")?,
            skip_norm: ckpt.require_meta("denoiser.skip_norm")?.parse()?,
        })
    }
}

/// Four convolutions (3x3, 1x1, 3x3, 1x1) with batch-norm + ReLU and a skip
/// from the first layer's output to the last layer's output.
///
/// Encoding blocks use `(w, w/4, w/4, w)` channels, decoding blocks `(2w, w/2, w/2, 2w)`.
#[derive(Clone, Debug)]
pub struct FeatureBlock {
    layers: [ConvBn; 4],
    skip_norm: SkipNorm,
    out_channels: usize,
}

impl FeatureBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        outer: usize,
        inner: usize,
        skip_norm: SkipNorm,
    ) -> Result<Self> {
        Ok(FeatureBlock {
            layers: [
                ConvBn::new(store, rng, &format!("{name}.c1"), cin, outer, 3)?,
                ConvBn::new(store, rng, &format!("{name}.c2"), outer, inner, 1)?,
                ConvBn::new(store, rng, &format!("{name}.c3"), inner, inner, 3)?,
                ConvBn::new(store, rng, &format!("{name}.c4"), inner, outer, 1)?,
            ],
            skip_norm,
            out_channels: outer,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &mut ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<Var<'t, T>> {
        let [l1, l2, l3, l4] = &self.layers;
        let h1 = l1.forward_relu(tape, store, x, mode)?;
        let h = l2.forward_relu(tape, store, h1, mode)?;
        let h = l3.forward_relu(tape, store, h, mode)?;
        match self.skip_norm {
            SkipNorm::BeforeSum => {
                let h4 = l4.forward_relu(tape, store, h, mode)?;
                h1.add(h4)
            }
            SkipNorm::AfterSum => {
                let s = l4.conv.forward(tape, store, h)?.add(h1)?;
                Ok(l4.bn.forward(tape, store, s, mode)?.relu())
            }
        }
    }
}

#[derive(Clone, Debug)]
enum DownOp {
    Conv(Conv2d),
    MaxPool,
}

/// Training provenance carried in checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenoiserInfo {
    /// Noise level (0-255 scale) the network was trained for.
    pub sigma: Option<f64>,
    pub iteration: usize,
    /// High-level task used for joint training, if any.
    pub trained_with: Option<String>,
    pub lambda: f64,
    /// Resolved experiment description, stored verbatim.
    pub config_text: Option<String>,
}

#[derive(Clone, Debug)]
pub struct DenoiserNet<T: Scalar = f32> {
    config: DenoiserConfig,
    pub store: ParamStore<T>,
    encoders: Vec<FeatureBlock>,
    downs: Vec<DownOp>,
    ups: Vec<Upsample2x>,
    adapters: Vec<Option<Conv2d>>,
    decoders: Vec<FeatureBlock>,
    projection: Conv2d,
    pub info: DenoiserInfo,
}

impl<T: Scalar> DenoiserNet<T> {
    /// Builds the network with parameters drawn from `seed`. The output
    /// projection starts at zero, so a fresh network is the identity map.
    pub fn build(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s_count = config.scales;
        let w = config.width;
        let mut encoders = Vec::with_capacity(s_count);
        let mut downs = Vec::with_capacity(s_count - 1);
        for s in 0..s_count {
            let cin = if s == 0 { config.input_channels } else { w };
            if s > 0 {
                downs.push(match config.downsample {
                    Downsample::StridedConv => {
                        DownOp::Conv(Conv2d::new(&mut store, &mut rng, &format!("down{s}"), w, w, 3, 2, 1)?)
                    }
                    Downsample::MaxPool => DownOp::MaxPool,
                });
            }
            encoders.push(FeatureBlock::new(
                &mut store,
                &mut rng,
                &format!("enc{s}"),
                cin,
                w,
                w / 4,
                config.skip_norm,
            )?);
        }
        let mut ups = Vec::with_capacity(s_count - 1);
        let mut adapters = Vec::with_capacity(s_count - 1);
        let mut decoders = Vec::with_capacity(s_count - 1);
        let mut coarse_channels = w;
        for s in (0..s_count - 1).rev() {
            ups.push(Upsample2x::new(
                &mut store,
                &mut rng,
                &format!("up{s}"),
                coarse_channels,
                coarse_channels,
            )?);
            let (adapter, fused) = match config.fusion {
                Fusion::Concat => (None, w + coarse_channels),
                Fusion::Sum if coarse_channels == w => (None, w),
                Fusion::Sum => (
                    Some(Conv2d::same(
                        &mut store,
                        &mut rng,
                        &format!("adapt{s}"),
                        coarse_channels,
                        w,
                        1,
                    )?),
                    w,
                ),
            };
            adapters.push(adapter);
            let dec = FeatureBlock::new(
                &mut store,
                &mut rng,
                &format!("dec{s}"),
                fused,
                2 * w,
                w / 2,
                config.skip_norm,
            )?;
            coarse_channels = dec.out_channels();
            decoders.push(dec);
        }
        // Stored coarse-to-fine; reverse so index s refers to scale s.
        ups.reverse();
        adapters.reverse();
        decoders.reverse();
        let projection = Conv2d::same(&mut store, &mut rng, "proj", 2 * w, config.input_channels, 3)?;
        let mut net = DenoiserNet {
            config: config.clone(),
            store,
            encoders,
            downs,
            ups,
            adapters,
            decoders,
            projection,
            info: DenoiserInfo::default(),
        };
        net.zero_projection();
        Ok(net)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Number of scalar parameters (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Number of downsample / upsample pairs.
    pub fn resampling_pairs(&self) -> (usize, usize) {
        (self.downs.len(), self.ups.len())
    }

    /// Zeroes the final projection, turning the network into the identity map.
    pub fn zero_projection(&mut self) {
        for id in [self.projection.weight, self.projection.bias] {
            let v = &mut self.store.get_mut(id).value;
            v.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Sets the learning-rate multiplier of the output projection.
    pub fn set_output_lr_scale(&mut self, scale: f64) {
        for id in [self.projection.weight, self.projection.bias] {
            self.store.get_mut(id).lr_scale = scale;
        }
    }

    /// Freezes or unfreezes batch-norm scale/shift parameters.
    pub fn set_bn_affine_trainable(&mut self, trainable: bool) {
        let mut bns: Vec<&BatchNorm2d> = Vec::new();
        for b in self.encoders.iter().chain(&self.decoders) {
            bns.extend(b.layers.iter().map(|l| &l.bn));
        }
        let ids: Vec<_> = bns.iter().flat_map(|bn| [bn.gamma, bn.beta]).collect();
        for id in ids {
            self.store.get_mut(id).trainable = trainable;
        }
    }

    /// Records the network on `tape`. Inputs whose height or width is not a
    /// multiple of `2^(scales-1)` are reflection-padded on the bottom/right and
    /// the output is cropped back, so the output shape always equals the input shape.
    pub fn forward<'t>(&mut self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let &[_, c, h, w] = shape.as_slice() else {
            return Err(Error::shape(format!(
                "denoiser input must be N x C x H x W, got {shape:?}"
            )));
        };
        if c != self.config.input_channels {
            return Err(Error::shape(format!(
                "denoiser expects {} channels, got {c}",
                self.config.input_channels
            )));
        }
        let m = self.config.size_multiple();
        if h < m || w < m {
            return Err(Error::shape(format!(
                "input {h}x{w} smaller than the minimum {m}x{m} for {} scales",
                self.config.scales
            )));
        }
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        if ph == 0 && pw == 0 {
            return self.forward_aligned(tape, x, mode);
        }
        let padded = x.reflect_pad(ph, pw)?;
        self.forward_aligned(tape, padded, mode)?.crop(h, w)
    }

    fn forward_aligned<'t>(&mut self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let store = &mut self.store;
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = x;
        for (s, enc) in self.encoders.iter().enumerate() {
            if s > 0 {
                h = match &self.downs[s - 1] {
                    DownOp::Conv(conv) => conv.forward(tape, store, h)?,
                    DownOp::MaxPool => h.max_pool2()?,
                };
            }
            h = enc.forward(tape, store, h, mode)?;
            skips.push(h);
        }
        let mut f = skips.pop().expect("at least two scales");
        for s in (0..self.decoders.len()).rev() {
            let up = self.ups[s].forward(tape, store, f)?;
            let skip = skips[s];
            let fused = match (&self.config.fusion, &self.adapters[s]) {
                (Fusion::Concat, _) => skip.concat_channels(up)?,
                (Fusion::Sum, Some(adapter)) => skip.add(adapter.forward(tape, store, up)?)?,
                (Fusion::Sum, None) => skip.add(up)?,
            };
            f = self.decoders[s].forward(tape, store, fused, mode)?;
        }
        let residual = self.projection.forward(tape, store, f)?;
        residual.add(x)
    }

    /// Eval-mode inference on a batch without gradient tracking.
    pub fn denoise(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let input = tape.input(x.clone());
        Ok(self.forward(&tape, input, Mode::Eval)?.to_tensor())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("kind", "denoiser");
        self.config.write_meta(&mut ckpt);
        if let Some(sigma) = self.info.sigma {
            ckpt.set_meta("sigma", sigma);
        }
        ckpt.set_meta("iteration", self.info.iteration);
        ckpt.set_meta("lambda", self.info.lambda);
        ckpt.set_meta("trained_with", self.info.trained_with.as_deref().unwrap_or("none"));
        if let Some(text) = &self.info.config_text {
            ckpt.set_meta("config", text);
        }
        ckpt.push_store(&self.store);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.meta("kind") {
            Some("denoiser") => {}
            other => {
                return Err(Error::Incompatible(format!(
                    "expected a denoiser checkpoint, found kind {other:?}"
                )))
            }
        }
        let config = DenoiserConfig::read_meta(ckpt)?;
        let mut net = Self::build(&config, 0)?;
        ckpt.load_into(&mut net.store)?;
        net.info = DenoiserInfo {
            sigma: ckpt.meta("sigma").map(|_| ckpt.parse_meta("sigma")).transpose()?,
            iteration: ckpt.parse_meta("iteration")?,
            trained_with: match ckpt.require_meta("trained_with")? {
                "none" => None,
                t => Some(t.to_string()),
            },
            lambda: ckpt.parse_meta("lambda")?,
            config_text: ckpt.meta("config").map(str::to_string),
        };
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small(scales: usize, fusion: Fusion, downsample: Downsample) -> DenoiserConfig {
        DenoiserConfig {
            scales,
            fusion,
            downsample,
            input_channels: 3,
            width: 4,
            skip_norm: SkipNorm::BeforeSum,
        }
    }

    #[test]
    fn default_config_structure() {
        let net = DenoiserNet::<f32>::build(&DenoiserConfig::default(), 1).unwrap();
        assert!(net.store.params().len() >= 20);
        assert!(net.store.params().iter().all(|p| p.trainable));
        assert_eq!(net.resampling_pairs(), (2, 2));
        let names: Vec<&str> = net.store.params().iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"enc0.c1.conv.weight"));
        assert_eq!(
            net.store.find("enc0.c1.conv.weight").unwrap().value.shape(),
            &[128, 3, 3, 3]
        );
        assert_eq!(
            net.store.find("enc0.c2.conv.weight").unwrap().value.shape(),
            &[32, 128, 1, 1]
        );
        assert_eq!(
            net.store.find("enc0.c3.conv.weight").unwrap().value.shape(),
            &[32, 32, 3, 3]
        );
        assert_eq!(
            net.store.find("enc0.c4.conv.weight").unwrap().value.shape(),
            &[128, 32, 1, 1]
        );
        assert_eq!(
            net.store.find("dec0.c1.conv.weight").unwrap().value.shape(),
            &[256, 384, 3, 3]
        );
        assert_eq!(
            net.store.find("dec1.c1.conv.weight").unwrap().value.shape(),
            &[256, 256, 3, 3]
        );
        assert_eq!(
            net.store.find("dec0.c2.conv.weight").unwrap().value.shape(),
            &[64, 256, 1, 1]
        );
        assert_eq!(
            net.store.find("dec0.c4.conv.weight").unwrap().value.shape(),
            &[256, 64, 1, 1]
        );
        assert_eq!(net.store.find("up0.weight").unwrap().value.shape(), &[256, 256, 4, 4]);
        assert_eq!(net.store.find("proj.weight").unwrap().value.shape(), &[3, 256, 3, 3]);
    }

    #[test]
    fn two_scale_has_one_resampling_pair() {
        let net = DenoiserNet::<f32>::build(&small(2, Fusion::Concat, Downsample::StridedConv), 0).unwrap();
        assert_eq!(net.resampling_pairs(), (1, 1));
        assert!(DenoiserNet::<f32>::build(&small(1, Fusion::Concat, Downsample::StridedConv), 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = small(3, Fusion::Concat, Downsample::StridedConv);
        let a = DenoiserNet::<f32>::build(&cfg, 42).unwrap();
        let b = DenoiserNet::<f32>::build(&cfg, 42).unwrap();
        let c = DenoiserNet::<f32>::build(&cfg, 43).unwrap();
        assert!(a.store.bit_identical(&b.store));
        assert!(!a.store.bit_identical(&c.store));
    }

    #[test]
    fn sum_fusion_uses_adapters_only_where_needed() {
        let net = DenoiserNet::<f32>::build(&small(3, Fusion::Sum, Downsample::MaxPool), 0).unwrap();
        assert!(net.store.find("adapt0.weight").is_some());
        assert!(net.store.find("adapt1.weight").is_none());
        assert!(net.store.find("down1.weight").is_none());
    }

    #[test]
    fn shapes_preserved_for_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for fusion in [Fusion::Concat, Fusion::Sum] {
            for down in [Downsample::StridedConv, Downsample::MaxPool] {
                let mut net = DenoiserNet::<f32>::build(&small(3, fusion, down), 0).unwrap();
                for (h, w) in [(8, 8), (10, 6), (9, 13)] {
                    let x = Tensor::randn(&[2, 3, h, w], 1.0, &mut rng);
                    let y = net.denoise(&x).unwrap();
                    assert_eq!(y.shape(), x.shape());
                    assert!(y.all_finite());
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut net = DenoiserNet::<f32>::build(&small(3, Fusion::Concat, Downsample::StridedConv), 0).unwrap();
        assert!(net.denoise(&Tensor::zeros(&[1, 1, 8, 8])).is_err());
        assert!(net.denoise(&Tensor::zeros(&[1, 3, 3, 8])).is_err());
    }

    #[test]
    fn zero_projection_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = DenoiserNet::<f32>::build(&small(3, Fusion::Concat, Downsample::StridedConv), 9).unwrap();
        net.zero_projection();
        let x = Tensor::randn(&[2, 3, 12, 10], 1.0, &mut rng);
        let tape = Tape::new();
        let y = net.forward(&tape, tape.input(x.clone()), Mode::Train).unwrap();
        assert_eq!(y.to_tensor(), x);
        assert_eq!(net.denoise(&x).unwrap(), x);
    }

    #[test]
    fn frozen_bn_affine_still_runs() {
        let mut net = DenoiserNet::<f32>::build(&small(2, Fusion::Concat, Downsample::StridedConv), 0).unwrap();
        net.set_bn_affine_trainable(false);
        let y = net.denoise(&Tensor::ones(&[1, 3, 8, 8])).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 8]);
        assert!(net.store.find("enc0.c1.bn.gamma").map(|p| !p.trainable).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = DenoiserNet::<f32>::build(&small(2, Fusion::Sum, Downsample::StridedConv), 4).unwrap();
        net.info.sigma = Some(25.0);
        net.info.iteration = 17;
        let bytes = net.to_checkpoint().encode().unwrap();
        let back = DenoiserNet::<f32>::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert!(back.store.bit_identical(&net.store));
        assert_eq!(back.info, net.info);
        assert_eq!(back.to_checkpoint().encode().unwrap(), bytes);
    }
}
