//! Raw numeric kernels on flat slices.
//!
//! Convolutions lower to `im2col` + GEMM. Transposed convolution is computed as
//! the adjoint of a strided convolution, so both share the same three kernels:
//! forward, input-gradient and weight-gradient.

use rayon::prelude::*;

use crate::{Error, Result, Scalar};

/// Safe strided GEMM: `c = a * b (+ c when accumulate)`.
///
/// `a` is `m x k` with strides `(rsa, csa)`, `b` is `k x n` with `(rsb, csb)`,
/// `c` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (usize, usize),
    b: &[T],
    b_strides: (usize, usize),
    c: &mut [T],
    accumulate: bool,
) {
    gemm_ldc(m, k, n, a, a_strides, b, b_strides, c, n, accumulate);
}

/// [`gemm`] writing rows of `c` that are `ldc` elements apart.
#[allow(clippy::too_many_arguments)]
pub fn gemm_ldc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n, "gemm: output too small");
    if k == 0 {
        if !accumulate {
            for row in c.chunks_mut(ldc).take(m) {
                row[..n].fill(T::zero());
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every element the kernel can touch.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution applied to one `C x H x W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        (height, width): (usize, usize),
        (kernel_h, kernel_w): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        if channels == 0 || height == 0 || width == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::shape("convolution extents must be positive"));
        }
        if height + 2 * pad < kernel_h || width + 2 * pad < kernel_w {
            return Err(Error::shape(format!(
                "kernel {kernel_h}x{kernel_w} larger than padded input {}x{}",
                height + 2 * pad,
                width + 2 * pad
            )));
        }
        Ok(ConvGeom {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel_h) / stride + 1,
            out_w: (width + 2 * pad - kernel_w) / stride + 1,
        })
    }

    /// Rows of the unfolded matrix: `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the unfolded matrix: `out_h * out_w`.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// True when the unfolded matrix is the image itself (1x1, stride 1, no padding).
    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k).checked_sub(self.pad)?;
        (pos < extent).then_some(pos)
    }

    /// Output columns `lo..hi` whose tap `kj` lands inside the input row.
    #[inline]
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(s) } else { 0 };
        let hi = if self.width + self.pad > kj {
            ((self.width - 1 + self.pad - kj) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds one image into a `patch_len x positions` matrix.
pub fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], col: &mut [T]) {
    im2col_rows(g, image, 0..g.out_h, col);
}

/// [`im2col`] restricted to output rows `rows`; `col` is `patch_len x (rows.len() * out_w)`.
pub fn im2col_rows<T: Scalar>(g: &ConvGeom, image: &[T], rows: std::ops::Range<usize>, col: &mut [T]) {
    let p = rows.len() * g.out_w;
    let s = g.stride;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kj);
                for (r, oy) in rows.clone().enumerate() {
                    let line = &mut dst[r * g.out_w..(r + 1) * g.out_w];
                    let Some(iy) = g.source(oy, ki, g.height) else {
                        line.fill(T::zero());
                        continue;
                    };
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    let first = lo * s + kj - g.pad;
                    if s == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, &x) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                            *v = x;
                        }
                    }
                }
            }
        }
    }
}

/// Folds a `patch_len x positions` matrix back, accumulating into `image`.
pub fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], image: &mut [T]) {
    col2im_rows(g, col, 0..g.out_h, image);
}

/// [`col2im`] for the output rows `rows` only.
pub fn col2im_rows<T: Scalar>(g: &ConvGeom, col: &[T], rows: std::ops::Range<usize>, image: &mut [T]) {
    let p = rows.len() * g.out_w;
    let s = g.stride;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kj);
                if lo == hi {
                    continue;
                }
                let first = lo * s + kj - g.pad;
                for (r, oy) in rows.clone().enumerate() {
                    let Some(iy) = g.source(oy, ki, g.height) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let line = &src[r * g.out_w + lo..r * g.out_w + hi];
                    if s == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(s).zip(line) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Applies `f` to matching chunks of `out` and `input`, across the rayon pool
/// when it has more than one thread and inline otherwise.
fn for_each_item<T: Scalar, S: Send>(
    out: &mut [T],
    out_len: usize,
    input: &[T],
    in_len: usize,
    init: impl Fn() -> S + Sync + Send,
    f: impl Fn(&mut S, &mut [T], &[T]) + Sync + Send,
) {
    if rayon::current_num_threads() > 1 {
        out.par_chunks_mut(out_len)
            .zip(input.par_chunks(in_len))
            .for_each_init(init, |s, (d, x)| f(s, d, x));
    } else {
        let mut s = init();
        for (d, x) in out.chunks_mut(out_len).zip(input.chunks(in_len)) {
            f(&mut s, d, x);
        }
    }
}

/// Maps matching chunks of `a` and `b` to values, keeping batch order.
fn map_items<T: Scalar, S: Send, R: Send>(
    a: &[T],
    a_len: usize,
    b: &[T],
    b_len: usize,
    init: impl Fn() -> S + Sync + Send,
    f: impl Fn(&mut S, &[T], &[T]) -> R + Sync + Send,
) -> Vec<R> {
    if rayon::current_num_threads() > 1 {
        a.par_chunks(a_len)
            .zip(b.par_chunks(b_len))
            .map_init(init, |s, (x, y)| f(s, x, y))
            .collect()
    } else {
        let mut s = init();
        a.chunks(a_len)
            .zip(b.chunks(b_len))
            .map(|(x, y)| f(&mut s, x, y))
            .collect()
    }
}

/// Output rows per unfolded tile, sized so a tile stays cache resident.
fn tile_rows(g: &ConvGeom) -> usize {
    const TILE_ELEMS: usize = 24 * 1024;
    (TILE_ELEMS / (g.patch_len() * g.out_w).max(1)).clamp(1, g.out_h)
}

fn row_tiles(g: &ConvGeom) -> impl Iterator<Item = std::ops::Range<usize>> {
    let step = tile_rows(g);
    let out_h = g.out_h;
    (0..out_h).step_by(step).map(move |r| r..(r + step).min(out_h))
}

/// Strided convolution over a batch. `weight` is `cout x patch_len`,
/// `out` is `batch x cout x positions` and is overwritten.
pub fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    out: &mut [T],
) {
    let k = g.patch_len();
    let p = g.positions();
    let tile = tile_rows(g) * g.out_w;
    for_each_item(
        out,
        cout * p,
        input,
        g.image_len(),
        || vec![T::zero(); if g.is_pointwise() { 0 } else { k * tile }],
        |col, dst, src| {
            if g.is_pointwise() {
                gemm(cout, k, p, weight, (k, 1), src, (p, 1), dst, false);
            } else {
                for rows in row_tiles(g) {
                    let n = rows.len() * g.out_w;
                    let off = rows.start * g.out_w;
                    im2col_rows(g, src, rows, col);
                    gemm_ldc(cout, k, n, weight, (k, 1), col, (n, 1), &mut dst[off..], p, false);
                }
            }
            if let Some(b) = bias {
                for (co, row) in dst.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = *v + b[co]);
                }
            }
        },
    );
}

/// Gradient of [`conv_forward`] with respect to its input; `grad_input` is overwritten.
pub fn conv_backward_input<T: Scalar>(g: &ConvGeom, grad_out: &[T], weight: &[T], cout: usize, grad_input: &mut [T]) {
    let k = g.patch_len();
    let p = g.positions();
    let tile = tile_rows(g) * g.out_w;
    for_each_item(
        grad_input,
        g.image_len(),
        grad_out,
        cout * p,
        || vec![T::zero(); if g.is_pointwise() { 0 } else { k * tile }],
        |col, dst, dy| {
            if g.is_pointwise() {
                gemm(k, cout, p, weight, (1, k), dy, (p, 1), dst, false);
                return;
            }
            dst.fill(T::zero());
            for rows in row_tiles(g) {
                let n = rows.len() * g.out_w;
                let off = rows.start * g.out_w;
                gemm(k, cout, n, weight, (1, k), &dy[off..], (p, 1), col, false);
                col2im_rows(g, col, rows, dst);
            }
        },
    );
}

/// Gradient of [`conv_forward`] with respect to the weight, accumulated into
/// `grad_weight` (`cout x patch_len`). Per-item partials are summed in batch order.
pub fn conv_backward_weight<T: Scalar>(g: &ConvGeom, input: &[T], grad_out: &[T], cout: usize, grad_weight: &mut [T]) {
    let k = g.patch_len();
    let p = g.positions();
    let tile = tile_rows(g) * g.out_w;
    let partials: Vec<Vec<T>> = map_items(
        input,
        g.image_len(),
        grad_out,
        cout * p,
        || vec![T::zero(); if g.is_pointwise() { 0 } else { k * tile }],
        |col, src, dy| {
            let mut part = vec![T::zero(); cout * k];
            if g.is_pointwise() {
                gemm(cout, p, k, dy, (p, 1), src, (1, p), &mut part, false);
                return part;
            }
            for (i, rows) in row_tiles(g).enumerate() {
                let n = rows.len() * g.out_w;
                let off = rows.start * g.out_w;
                im2col_rows(g, src, rows, col);
                gemm(cout, n, k, &dy[off..], (p, 1), col, (1, n), &mut part, i > 0);
            }
            part
        },
    );
    for part in &partials {
        for (acc, v) in grad_weight.iter_mut().zip(part) {
            *acc = *acc + *v;
        }
    }
}

const LANES: usize = 8;

/// Sum with eight interleaved accumulators (fixed order, so deterministic).
pub fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for ch in chunks {
        for (a, &x) in acc.iter_mut().zip(ch) {
            *a = *a + x;
        }
    }
    tail.iter().fold(acc.iter().copied().sum::<T>(), |s, &x| s + x)
}

/// Dot product with eight interleaved accumulators.
pub fn lane_dot<T: Scalar>(xs: &[T], ys: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let n = xs.len().min(ys.len());
    let split = n - n % LANES;
    for (cx, cy) in xs[..split].chunks_exact(LANES).zip(ys[..split].chunks_exact(LANES)) {
        for i in 0..LANES {
            acc[i] = acc[i] + cx[i] * cy[i];
        }
    }
    xs[split..n]
        .iter()
        .zip(&ys[split..n])
        .fold(acc.iter().copied().sum::<T>(), |s, (&x, &y)| s + x * y)
}

/// `(sum(x), sum((x - shift)^2))` in f64 with interleaved accumulators.
fn lane_moments_f64<T: Scalar>(xs: &[T], shift: f64) -> (f64, f64) {
    let mut s = [0.0f64; LANES];
    let mut q = [0.0f64; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for ch in chunks {
        for i in 0..LANES {
            let v = ch[i].to_f64_lossy();
            let d = v - shift;
            s[i] += v;
            q[i] += d * d;
        }
    }
    let (mut st, mut qt) = (s.iter().sum::<f64>(), q.iter().sum::<f64>());
    for x in tail {
        let v = x.to_f64_lossy();
        st += v;
        qt += (v - shift) * (v - shift);
    }
    (st, qt)
}

/// Per-channel sums of a `batch x channels x plane` buffer, accumulated into `sums`.
pub fn channel_sums<T: Scalar>(data: &[T], channels: usize, plane: usize, sums: &mut [T]) {
    for item in data.chunks(channels * plane) {
        for (c, row) in item.chunks(plane).enumerate() {
            sums[c] = sums[c] + lane_sum(row);
        }
    }
}

/// 2x2 stride-2 max pooling. Returns flat argmax indices into `input`;
/// ties resolve to the first element in row-major window order.
pub fn max_pool2_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize, out: &mut [T]) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut argmax = vec![0usize; planes * oh * ow];
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = (pl * oh + oy) * ow + ox;
                out[o] = input[best];
                argmax[o] = best;
            }
        }
    }
    argmax
}

/// Batch statistics `(mean, biased variance)` per channel, accumulated in `f64`.
pub fn channel_moments<T: Scalar>(data: &[T], batch: usize, channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * plane) as f64;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for item in data.chunks(channels * plane) {
        for (c, row) in item.chunks(plane).enumerate() {
            mean[c] += lane_moments_f64(row, 0.0).0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for item in data.chunks(channels * plane) {
        for (c, row) in item.chunks(plane).enumerate() {
            var[c] += lane_moments_f64(row, mean[c]).1;
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}
