//! Parameterized building blocks shared by the denoiser and the heads.
//!
//! Layers only hold [`ParamId`]s; values live in the network's [`ParamStore`].
//! Conv and deconv weights use fan-in scaled Gaussians (`std = sqrt(2 / fan_in)`),
//! biases start at zero, batch-norm at `gamma = 1`, `beta = 0`.

use rand::Rng;

use crate::ops::Mode;
use crate::param::{BufferId, ParamId, ParamStore};
use crate::{Result, Scalar, Tape, Tensor, Var};

pub fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let w = he_normal(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        Ok(Conv2d {
            weight: store.add_param(format!("{name}.weight"), w)?,
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
            stride,
            pad,
        })
    }

    /// `kernel x kernel` convolution with "same" zero padding at stride 1.
    pub fn same<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::new(store, rng, name, cin, cout, kernel, 1, kernel / 2)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        x.conv2d(w, Some(b), self.stride, self.pad)
    }
}

/// 4x4, stride-2 transposed convolution cropping one pixel per border, so the
/// output is exactly twice the input size.
#[derive(Clone, Debug)]
pub struct Upsample2x {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsample2x {
    pub const KERNEL: usize = 4;
    pub const STRIDE: usize = 2;
    pub const CROP: usize = 1;

    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let k = Self::KERNEL;
        // Each output pixel receives (k / stride)^2 taps per input channel.
        let fan_in = cin * (k / Self::STRIDE) * (k / Self::STRIDE);
        let w = he_normal(&[cin, cout, k, k], fan_in, rng);
        Ok(Upsample2x {
            weight: store.add_param(format!("{name}.weight"), w)?,
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        x.conv_transpose2d(w, Some(b), Self::STRIDE, Self::CROP)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]))?,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &mut ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<Var<'t, T>> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let (mean, var) = store.buffer_pair_mut(self.running_mean, self.running_var);
        x.batch_norm(g, b, mean, var, mode)
    }
}

/// Convolution followed by batch-norm, with an optional trailing ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2d::same(store, rng, &format!("{name}.conv"), cin, cout, kernel)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &mut ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<Var<'t, T>> {
        let y = self.conv.forward(tape, store, x)?;
        self.bn.forward(tape, store, y, mode)
    }

    pub fn forward_relu<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &mut ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<Var<'t, T>> {
        Ok(self.forward(tape, store, x, mode)?.relu())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fin: usize,
        fout: usize,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.add_param(format!("{name}.weight"), he_normal(&[fout, fin], fin, rng))?,
            bias: store.add_param(format!("{name}.bias"), Tensor::zeros(&[fout]))?,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        x.linear(w, Some(b))
    }
}
