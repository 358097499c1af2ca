//! Differentiable operations on [`Var`]s.

use crate::kernels::{self, ConvGeom};
use crate::tape::Node;
use crate::{Error, Result, Scalar, Tensor, Var};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum: `new = momentum * old + (1 - momentum) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Whether batch-norm uses batch statistics (and updates running ones) or running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        cout: usize,
    },
    /// `geom` describes the forward convolution whose adjoint this is: its
    /// "image" is our output and its output grid is our input grid.
    ConvTranspose2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        cin: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        input: usize,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    Concat {
        a: usize,
        b: usize,
        a_len: usize,
        b_len: usize,
    },
    Sum {
        input: usize,
    },
    Mse {
        pred: usize,
        target: usize,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<usize>,
        ignore: Option<usize>,
        classes: usize,
        plane: usize,
        count: usize,
    },
    GlobalAvgPool {
        input: usize,
        plane: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        in_features: usize,
        out_features: usize,
    },
    ReflectPad {
        input: usize,
        index: Vec<usize>,
    },
    Crop {
        input: usize,
        index: Vec<usize>,
    },
    Identity {
        input: usize,
    },
}

fn zeros_like<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::zeros(t.shape())
}

impl<T: Scalar> Op<T> {
    /// Gradients for the inputs that need them, given the output gradient.
    pub(crate) fn backward(
        &self,
        nodes: &[Node<T>],
        out: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &dyn Fn(usize) -> bool,
    ) -> Vec<(usize, Tensor<T>)> {
        let val = |i: usize| &nodes[i].value;
        let mut res = Vec::new();
        match self {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cout,
            } => {
                if needs(*input) {
                    let mut gx = zeros_like(val(*input));
                    kernels::conv_backward_input(geom, grad.data(), val(*weight).data(), *cout, gx.data_mut());
                    res.push((*input, gx));
                }
                if needs(*weight) {
                    let mut gw = zeros_like(val(*weight));
                    kernels::conv_backward_weight(geom, val(*input).data(), grad.data(), *cout, gw.data_mut());
                    res.push((*weight, gw));
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    let mut gb = zeros_like(val(b));
                    kernels::channel_sums(grad.data(), *cout, geom.positions(), gb.data_mut());
                    res.push((b, gb));
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                cin,
            } => {
                if needs(*input) {
                    let mut gx = zeros_like(val(*input));
                    kernels::conv_forward(geom, grad.data(), val(*weight).data(), None, *cin, gx.data_mut());
                    res.push((*input, gx));
                }
                if needs(*weight) {
                    let mut gw = zeros_like(val(*weight));
                    kernels::conv_backward_weight(geom, grad.data(), val(*input).data(), *cin, gw.data_mut());
                    res.push((*weight, gw));
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    let mut gb = zeros_like(val(b));
                    kernels::channel_sums(grad.data(), geom.channels, geom.height * geom.width, gb.data_mut());
                    res.push((b, gb));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (_, c, h, w) = out.dims4().expect("rank 4");
                let plane = h * w;
                let count = T::from_usize(grad.len() / c).unwrap();
                let gamma_v = val(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (item, xitem) in grad.data().chunks(c * plane).zip(xhat.chunks(c * plane)) {
                    for ch in 0..c {
                        let dy = &item[ch * plane..(ch + 1) * plane];
                        let xh = &xitem[ch * plane..(ch + 1) * plane];
                        sum_dy[ch] = sum_dy[ch] + kernels::lane_sum(dy);
                        sum_dy_xhat[ch] = sum_dy_xhat[ch] + kernels::lane_dot(dy, xh);
                    }
                }
                if needs(*input) {
                    let mut gx = zeros_like(out);
                    for ((gitem, dyitem), xitem) in gx
                        .data_mut()
                        .chunks_mut(c * plane)
                        .zip(grad.data().chunks(c * plane))
                        .zip(xhat.chunks(c * plane))
                    {
                        for ch in 0..c {
                            let scale = gamma_v[ch] * inv_std[ch];
                            let range = ch * plane..(ch + 1) * plane;
                            let g = &mut gitem[range.clone()];
                            let dy = &dyitem[range.clone()];
                            let xh = &xitem[range];
                            if *train {
                                let mean_dy = sum_dy[ch] / count;
                                let mean_dyx = sum_dy_xhat[ch] / count;
                                for ((gv, &d), &x) in g.iter_mut().zip(dy).zip(xh) {
                                    *gv = scale * (d - mean_dy - x * mean_dyx);
                                }
                            } else {
                                for (gv, &d) in g.iter_mut().zip(dy) {
                                    *gv = scale * d;
                                }
                            }
                        }
                    }
                    res.push((*input, gx));
                }
                if needs(*gamma) {
                    res.push((*gamma, Tensor::new(vec![c], sum_dy_xhat.clone()).unwrap()));
                }
                if needs(*beta) {
                    res.push((*beta, Tensor::new(vec![c], sum_dy).unwrap()));
                }
            }
            Op::Relu { input } => {
                let x = val(*input);
                let mut gx = grad.clone();
                for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                }
                res.push((*input, gx));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gx = zeros_like(val(*input));
                let d = gx.data_mut();
                for (&idx, &g) in argmax.iter().zip(grad.data()) {
                    d[idx] = d[idx] + g;
                }
                res.push((*input, gx));
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    res.push((*a, grad.clone()));
                }
                if needs(*b) {
                    res.push((*b, grad.clone()));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                if needs(*a) {
                    let data = grad.data().iter().zip(vb.data()).map(|(&g, &y)| g * y);
                    res.push((*a, Tensor::new(va.shape().to_vec(), data.collect()).unwrap()));
                }
                if needs(*b) {
                    let data = grad.data().iter().zip(va.data()).map(|(&g, &x)| g * x);
                    res.push((*b, Tensor::new(vb.shape().to_vec(), data.collect()).unwrap()));
                }
            }
            Op::Scale { input, factor } => {
                res.push((*input, grad.map(|g| g * *factor)));
            }
            Op::Concat { a, b, a_len, b_len } => {
                let chunk = a_len + b_len;
                let batch = grad.len() / chunk;
                let mut ga = Vec::with_capacity(batch * a_len);
                let mut gb = Vec::with_capacity(batch * b_len);
                for item in grad.data().chunks(chunk) {
                    ga.extend_from_slice(&item[..*a_len]);
                    gb.extend_from_slice(&item[*a_len..]);
                }
                if needs(*a) {
                    res.push((*a, Tensor::new(val(*a).shape().to_vec(), ga).unwrap()));
                }
                if needs(*b) {
                    res.push((*b, Tensor::new(val(*b).shape().to_vec(), gb).unwrap()));
                }
            }
            Op::Sum { input } => {
                res.push((*input, Tensor::full(val(*input).shape(), grad.data()[0])));
            }
            Op::Mse { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let scale = grad.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(p.len()).unwrap();
                let diff: Vec<T> = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * scale).collect();
                if needs(*target) {
                    let neg = diff.iter().map(|&v| -v).collect();
                    res.push((*target, Tensor::new(t.shape().to_vec(), neg).unwrap()));
                }
                if needs(*pred) {
                    res.push((*pred, Tensor::new(p.shape().to_vec(), diff).unwrap()));
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                ignore,
                classes,
                plane,
                count,
            } => {
                let mut gx = zeros_like(val(*logits));
                if *count > 0 {
                    let scale = grad.data()[0] / T::from_usize(*count).unwrap();
                    let d = gx.data_mut();
                    for (pos, &label) in labels.iter().enumerate() {
                        if Some(label) == *ignore {
                            continue;
                        }
                        let (n, s) = (pos / plane, pos % plane);
                        for k in 0..*classes {
                            let idx = (n * classes + k) * plane + s;
                            let target = if k == label { T::one() } else { T::zero() };
                            d[idx] = (probs[idx] - target) * scale;
                        }
                    }
                }
                res.push((*logits, gx));
            }
            Op::GlobalAvgPool { input, plane } => {
                let x = val(*input);
                let inv = T::one() / T::from_usize(*plane).unwrap();
                let mut gx = zeros_like(x);
                for (chunk, &g) in gx.data_mut().chunks_mut(*plane).zip(grad.data()) {
                    chunk.iter_mut().for_each(|v| *v = g * inv);
                }
                res.push((*input, gx));
            }
            Op::Linear {
                input,
                weight,
                bias,
                in_features,
                out_features,
            } => {
                let (fi, fo) = (*in_features, *out_features);
                let batch = grad.len() / fo;
                if needs(*input) {
                    let mut gx = zeros_like(val(*input));
                    kernels::gemm(
                        batch,
                        fo,
                        fi,
                        grad.data(),
                        (fo, 1),
                        val(*weight).data(),
                        (fi, 1),
                        gx.data_mut(),
                        false,
                    );
                    res.push((*input, gx));
                }
                if needs(*weight) {
                    let mut gw = zeros_like(val(*weight));
                    kernels::gemm(
                        fo,
                        batch,
                        fi,
                        grad.data(),
                        (1, fo),
                        val(*input).data(),
                        (fi, 1),
                        gw.data_mut(),
                        false,
                    );
                    res.push((*weight, gw));
                }
                if let Some(b) = bias.filter(|&b| needs(b)) {
                    let mut gb = zeros_like(val(b));
                    kernels::channel_sums(grad.data(), fo, 1, gb.data_mut());
                    res.push((b, gb));
                }
            }
            Op::ReflectPad { input, index } | Op::Crop { input, index } => {
                let mut gx = zeros_like(val(*input));
                let d = gx.data_mut();
                for (&src, &g) in index.iter().zip(grad.data()) {
                    d[src] = d[src] + g;
                }
                res.push((*input, gx));
            }
            Op::Identity { input } => res.push((*input, grad.clone())),
        }
        res
    }
}

fn same_tape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::invalid("operands recorded on different tapes"))
    }
}

/// Flat source indices for a spatial remap of an `N x C x H x W` tensor.
fn spatial_index(
    (n, c, h, w): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    map_y: impl Fn(usize) -> usize,
    map_x: impl Fn(usize) -> usize,
) -> Vec<usize> {
    let mut index = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            let sy = map_y(y);
            for x in 0..ow {
                index.push((plane * h + sy) * w + map_x(x));
            }
        }
    }
    index
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg, None)
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `input` is `N x Cin x H x W`, `weight` is `Cout x Cin x kH x kW`, `bias` is `Cout`.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        same_tape(&self, &weight)?;
        let (value, geom, cout, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let w = &nodes[weight.id].value;
            let (n, cin, h, wd) = x.dims4()?;
            let (cout, wcin, kh, kw) = w.dims4()?;
            if wcin != cin {
                return Err(Error::shape(format!(
                    "conv2d: input has {cin} channels but weight {:?} expects {wcin}",
                    w.shape()
                )));
            }
            let geom = ConvGeom::new(cin, (h, wd), (kh, kw), stride, pad)?;
            let b = match bias {
                Some(b) => {
                    same_tape(&self, &b)?;
                    let bv = &nodes[b.id].value;
                    if bv.shape() != [cout] {
                        return Err(Error::shape(format!(
                            "conv2d: bias shape {:?}, expected [{cout}]",
                            bv.shape()
                        )));
                    }
                    Some(bv.data())
                }
                None => None,
            };
            let mut out = Tensor::zeros(&[n, cout, geom.out_h, geom.out_w]);
            kernels::conv_forward(&geom, x.data(), w.data(), b, cout, out.data_mut());
            let rg = nodes[self.id].requires_grad
                || nodes[weight.id].requires_grad
                || bias.is_some_and(|b| nodes[b.id].requires_grad);
            (out, geom, cout, rg)
        };
        let op = Op::Conv2d {
            input: self.id,
            weight: weight.id,
            bias: bias.map(|b| b.id),
            geom,
            cout,
        };
        Ok(self.tape.push(value, op, rg, None))
    }

    /// Transposed convolution (fractionally strided), the adjoint of
    /// [`conv2d`](Self::conv2d) with the same kernel, stride and `crop` as padding.
    ///
    /// `input` is `N x C x H x W`, `weight` is `C x Cout x kH x kW`; the output is
    /// `N x Cout x ((H-1)*stride + kH - 2*crop) x ((W-1)*stride + kW - 2*crop)`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        crop: usize,
    ) -> Result<Var<'t, T>> {
        same_tape(&self, &weight)?;
        let (value, geom, cin, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let w = &nodes[weight.id].value;
            let (n, cin, h, wd) = x.dims4()?;
            let (wcin, cout, kh, kw) = w.dims4()?;
            if wcin != cin {
                return Err(Error::shape(format!(
                    "conv_transpose2d: input has {cin} channels but weight {:?} expects {wcin}",
                    w.shape()
                )));
            }
            if stride == 0 {
                return Err(Error::invalid("conv_transpose2d: stride must be positive"));
            }
            let oh = ((h - 1) * stride + kh).saturating_sub(2 * crop);
            let ow = ((wd - 1) * stride + kw).saturating_sub(2 * crop);
            if oh == 0 || ow == 0 {
                return Err(Error::shape(format!(
                    "conv_transpose2d: crop {crop} leaves no output for a {h}x{wd} input"
                )));
            }
            let geom = ConvGeom::new(cout, (oh, ow), (kh, kw), stride, crop)?;
            debug_assert_eq!((geom.out_h, geom.out_w), (h, wd));
            let mut out = Tensor::zeros(&[n, cout, oh, ow]);
            kernels::conv_backward_input(&geom, x.data(), w.data(), cin, out.data_mut());
            let mut rg = nodes[self.id].requires_grad || nodes[weight.id].requires_grad;
            if let Some(b) = bias {
                same_tape(&self, &b)?;
                let bv = &nodes[b.id].value;
                if bv.shape() != [cout] {
                    return Err(Error::shape(format!(
                        "conv_transpose2d: bias shape {:?}, expected [{cout}]",
                        bv.shape()
                    )));
                }
                let plane = oh * ow;
                for item in out.data_mut().chunks_mut(cout * plane) {
                    for (co, row) in item.chunks_mut(plane).enumerate() {
                        let bias = bv.data()[co];
                        row.iter_mut().for_each(|v| *v = *v + bias);
                    }
                }
                rg |= nodes[b.id].requires_grad;
            }
            (out, geom, cin, rg)
        };
        let op = Op::ConvTranspose2d {
            input: self.id,
            weight: weight.id,
            bias: bias.map(|b| b.id),
            geom,
            cin,
        };
        Ok(self.tape.push(value, op, rg, None))
    }

    /// Spatial batch normalization over `(N, H, W)` per channel.
    ///
    /// In [`Mode::Train`] batch statistics normalize the input and the running
    /// statistics are updated in place (`running = 0.9 * running + 0.1 * batch`,
    /// biased batch variance). In [`Mode::Eval`] the running statistics are used.
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        mode: Mode,
    ) -> Result<Var<'t, T>> {
        same_tape(&self, &gamma)?;
        same_tape(&self, &beta)?;
        let (value, xhat, inv_std, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let (n, c, h, w) = x.dims4()?;
            for (what, t) in [
                ("gamma", &nodes[gamma.id].value),
                ("beta", &nodes[beta.id].value),
                ("running_mean", &*running_mean),
                ("running_var", &*running_var),
            ] {
                if t.shape() != [c] {
                    return Err(Error::shape(format!(
                        "batch_norm: {what} shape {:?}, expected [{c}]",
                        t.shape()
                    )));
                }
            }
            let plane = h * w;
            let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
                Mode::Train => {
                    if n * plane < 2 {
                        return Err(Error::shape(
                            "batch_norm: training needs at least two values per channel",
                        ));
                    }
                    let (m, v) = kernels::channel_moments(x.data(), n, c, plane);
                    let keep = BN_MOMENTUM;
                    for ch in 0..c {
                        let rm = running_mean.data()[ch].to_f64_lossy();
                        let rv = running_var.data()[ch].to_f64_lossy();
                        running_mean.data_mut()[ch] = T::from_f64_lossy(keep * rm + (1.0 - keep) * m[ch]);
                        running_var.data_mut()[ch] = T::from_f64_lossy(keep * rv + (1.0 - keep) * v[ch]);
                    }
                    (m, v)
                }
                Mode::Eval => (
                    running_mean.data().iter().map(|v| v.to_f64_lossy()).collect(),
                    running_var.data().iter().map(|v| v.to_f64_lossy()).collect(),
                ),
            };
            let inv_std: Vec<T> = var
                .iter()
                .map(|&v| T::from_f64_lossy(1.0 / (v.max(0.0) + BN_EPS).sqrt()))
                .collect();
            let mean: Vec<T> = mean.into_iter().map(T::from_f64_lossy).collect();
            let g = nodes[gamma.id].value.data();
            let b = nodes[beta.id].value.data();
            let mut xhat = vec![T::zero(); x.len()];
            let mut out = Tensor::zeros(x.shape());
            for ((xi, hi), oi) in x
                .data()
                .chunks(c * plane)
                .zip(xhat.chunks_mut(c * plane))
                .zip(out.data_mut().chunks_mut(c * plane))
            {
                for ch in 0..c {
                    let r = ch * plane..(ch + 1) * plane;
                    for ((&xv, hv), ov) in xi[r.clone()].iter().zip(&mut hi[r.clone()]).zip(&mut oi[r]) {
                        *hv = (xv - mean[ch]) * inv_std[ch];
                        *ov = g[ch] * *hv + b[ch];
                    }
                }
            }
            let rg = nodes[self.id].requires_grad || nodes[gamma.id].requires_grad || nodes[beta.id].requires_grad;
            (out, xhat, inv_std, rg)
        };
        let op = Op::BatchNorm {
            input: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            train: mode == Mode::Train,
        };
        Ok(self.tape.push(value, op, rg, None))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Var<'t, T> {
        let value = self.value().map(|v| if v > T::zero() { v } else { T::zero() });
        self.unary(value, Op::Relu { input: self.id })
    }

    /// Non-overlapping 2x2 max pooling. Both spatial extents must be even.
    pub fn max_pool2(self) -> Result<Var<'t, T>> {
        let (value, argmax) = {
            let x = self.value();
            let (n, c, h, w) = x.dims4()?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!("max_pool2 needs even extents, got {h}x{w}")));
            }
            let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]);
            let argmax = kernels::max_pool2_forward(x.data(), n * c, h, w, out.data_mut());
            (out, argmax)
        };
        Ok(self.unary(value, Op::MaxPool2 { input: self.id, argmax }))
    }

    fn binary_same_shape(self, other: Var<'t, T>, what: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        same_tape(&self, &other)?;
        let nodes = self.tape.nodes();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        a.check_same_shape(b, what)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        Ok((Tensor::new(a.shape().to_vec(), data)?, rg))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (value, rg) = self.binary_same_shape(other, "add", |x, y| x + y)?;
        let op = Op::Add {
            a: self.id,
            b: other.id,
        };
        Ok(self.tape.push(value, op, rg, None))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (value, rg) = self.binary_same_shape(other, "mul", |x, y| x * y)?;
        let op = Op::Mul {
            a: self.id,
            b: other.id,
        };
        Ok(self.tape.push(value, op, rg, None))
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let value = self.value().map(|v| v * factor);
        self.unary(value, Op::Scale { input: self.id, factor })
    }

    /// Stacks `other`'s channels after `self`'s.
    pub fn concat_channels(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other)?;
        let (value, a_len, b_len, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (n, ca, h, w) = a.dims4()?;
            let (nb, cb, hb, wb) = b.dims4()?;
            if (n, h, w) != (nb, hb, wb) {
                return Err(Error::shape(format!(
                    "concat_channels: {:?} and {:?} differ outside the channel axis",
                    a.shape(),
                    b.shape()
                )));
            }
            let (a_len, b_len) = (ca * h * w, cb * h * w);
            let mut data = Vec::with_capacity(a.len() + b.len());
            for (ia, ib) in a.data().chunks(a_len).zip(b.data().chunks(b_len)) {
                data.extend_from_slice(ia);
                data.extend_from_slice(ib);
            }
            let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
            (Tensor::new(vec![n, ca + cb, h, w], data)?, a_len, b_len, rg)
        };
        let op = Op::Concat {
            a: self.id,
            b: other.id,
            a_len,
            b_len,
        };
        Ok(self.tape.push(value, op, rg, None))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(self) -> Var<'t, T> {
        let value = Tensor::scalar(self.value().sum());
        self.unary(value, Op::Sum { input: self.id })
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &target)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (p, t) = (&nodes[self.id].value, &nodes[target.id].value);
            p.check_same_shape(t, "mse_loss")?;
            let sq: f64 = p
                .data()
                .iter()
                .zip(t.data())
                .map(|(&a, &b)| {
                    let d = a.to_f64_lossy() - b.to_f64_lossy();
                    d * d
                })
                .sum();
            let rg = nodes[self.id].requires_grad || nodes[target.id].requires_grad;
            (Tensor::scalar(T::from_f64_lossy(sq / p.len() as f64)), rg)
        };
        let op = Op::Mse {
            pred: self.id,
            target: target.id,
        };
        Ok(self.tape.push(value, op, rg, None))
    }

    /// Mean softmax cross-entropy.
    ///
    /// `self` holds logits of shape `N x K` (one label per row) or `N x K x H x W`
    /// (one label per pixel, row-major over `N, H, W`). Positions labelled
    /// `ignore` are skipped; if every position is ignored the loss is 0.
    pub fn cross_entropy(self, labels: &[usize], ignore: Option<usize>) -> Result<Var<'t, T>> {
        let (value, probs, classes, plane, count) = {
            let x = self.value();
            let (n, classes, plane) = match *x.shape() {
                [n, k] => (n, k, 1),
                [n, k, h, w] => (n, k, h * w),
                _ => {
                    return Err(Error::shape(format!(
                        "cross_entropy: logits must be rank 2 or 4, got {:?}",
                        x.shape()
                    )))
                }
            };
            if labels.len() != n * plane {
                return Err(Error::shape(format!(
                    "cross_entropy: {} labels for {} positions",
                    labels.len(),
                    n * plane
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes && Some(l) != ignore) {
                return Err(Error::invalid(format!(
                    "cross_entropy: label {bad} outside [0, {classes})"
                )));
            }
            let d = x.data();
            let mut probs = vec![T::zero(); d.len()];
            let mut total = 0.0f64;
            let mut count = 0usize;
            for (pos, &label) in labels.iter().enumerate() {
                let (item, s) = (pos / plane, pos % plane);
                let idx = |k: usize| (item * classes + k) * plane + s;
                let max = (0..classes).map(|k| d[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for k in 0..classes {
                    let e = (d[idx(k)] - max).exp();
                    probs[idx(k)] = e;
                    denom = denom + e;
                }
                for k in 0..classes {
                    probs[idx(k)] = probs[idx(k)] / denom;
                }
                if Some(label) == ignore {
                    continue;
                }
                let nll = denom.ln() + max - d[idx(label)];
                total += nll.to_f64_lossy();
                count += 1;
            }
            let loss = if count == 0 { 0.0 } else { total / count as f64 };
            (Tensor::scalar(T::from_f64_lossy(loss)), probs, classes, plane, count)
        };
        let op = Op::CrossEntropy {
            logits: self.id,
            probs,
            labels: labels.to_vec(),
            ignore,
            classes,
            plane,
            count,
        };
        Ok(self.unary(value, op))
    }

    /// `N x C x H x W -> N x C` spatial mean.
    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let (value, plane) = {
            let x = self.value();
            let (n, c, h, w) = x.dims4()?;
            let plane = h * w;
            let inv = T::one() / T::from_usize(plane).unwrap();
            let data = x.data().chunks(plane).map(|p| kernels::lane_sum(p) * inv);
            (Tensor::new(vec![n, c], data.collect())?, plane)
        };
        Ok(self.unary(value, Op::GlobalAvgPool { input: self.id, plane }))
    }

    /// `y = x W^T + b` for `x: N x in`, `W: out x in`, `b: out`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        same_tape(&self, &weight)?;
        let (value, fi, fo, rg) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let w = &nodes[weight.id].value;
            let (&[n, fi], &[fo, wfi]) = (x.shape(), w.shape()) else {
                return Err(Error::shape(format!(
                    "linear: expected N x in and out x in, got {:?} and {:?}",
                    x.shape(),
                    w.shape()
                )));
            };
            if fi != wfi {
                return Err(Error::shape(format!(
                    "linear: {fi} input features but weight expects {wfi}"
                )));
            }
            let mut out = Tensor::zeros(&[n, fo]);
            kernels::gemm(n, fi, fo, x.data(), (fi, 1), w.data(), (1, fi), out.data_mut(), false);
            let mut rg = nodes[self.id].requires_grad || nodes[weight.id].requires_grad;
            if let Some(b) = bias {
                same_tape(&self, &b)?;
                let bv = &nodes[b.id].value;
                if bv.shape() != [fo] {
                    return Err(Error::shape(format!(
                        "linear: bias shape {:?}, expected [{fo}]",
                        bv.shape()
                    )));
                }
                for row in out.data_mut().chunks_mut(fo) {
                    for (v, &bb) in row.iter_mut().zip(bv.data()) {
                        *v = *v + bb;
                    }
                }
                rg |= nodes[b.id].requires_grad;
            }
            (out, fi, fo, rg)
        };
        let op = Op::Linear {
            input: self.id,
            weight: weight.id,
            bias: bias.map(|b| b.id),
            in_features: fi,
            out_features: fo,
        };
        Ok(self.tape.push(value, op, rg, None))
    }

    /// Reflection padding on the bottom and right borders (edge not repeated).
    pub fn reflect_pad(self, bottom: usize, right: usize) -> Result<Var<'t, T>> {
        let (value, index) = {
            let x = self.value();
            let (n, c, h, w) = x.dims4()?;
            if bottom >= h || right >= w {
                return Err(Error::shape(format!(
                    "reflect_pad: padding ({bottom}, {right}) needs extents larger than {h}x{w}"
                )));
            }
            let (oh, ow) = (h + bottom, w + right);
            let reflect = |i: usize, len: usize| if i < len { i } else { 2 * (len - 1) - i };
            let index = spatial_index((n, c, h, w), (oh, ow), |y| reflect(y, h), |x| reflect(x, w));
            let data = index.iter().map(|&i| x.data()[i]).collect();
            (Tensor::new(vec![n, c, oh, ow], data)?, index)
        };
        Ok(self.unary(value, Op::ReflectPad { input: self.id, index }))
    }

    /// Keeps the top-left `height x width` window.
    pub fn crop(self, height: usize, width: usize) -> Result<Var<'t, T>> {
        let (value, index) = {
            let x = self.value();
            let (n, c, h, w) = x.dims4()?;
            if height == 0 || width == 0 || height > h || width > w {
                return Err(Error::shape(format!(
                    "crop: {height}x{width} window does not fit {h}x{w}"
                )));
            }
            let index = spatial_index((n, c, h, w), (height, width), |y| y, |x| x);
            let data = index.iter().map(|&i| x.data()[i]).collect();
            (Tensor::new(vec![n, c, height, width], data)?, index)
        };
        Ok(self.unary(value, Op::Crop { input: self.id, index }))
    }

    /// Adds a constant per channel (e.g. negative dataset means).
    pub fn shift_channels(self, offsets: &[T]) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            let (_, c, h, w) = x.dims4()?;
            if offsets.len() != c {
                return Err(Error::shape(format!(
                    "shift_channels: {} offsets for {c} channels",
                    offsets.len()
                )));
            }
            let mut out = x.clone();
            for item in out.data_mut().chunks_mut(c * h * w) {
                for (row, &o) in item.chunks_mut(h * w).zip(offsets) {
                    row.iter_mut().for_each(|v| *v = *v + o);
                }
            }
            out
        };
        Ok(self.unary(value, Op::Identity { input: self.id }))
    }
}
