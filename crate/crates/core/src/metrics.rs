//! Image quality and task metrics.

use crate::data::Image;
use crate::{Error, Result, Scalar, Tensor};

/// PSNR ceiling returned for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Mean squared error over two equally sized value slices, accumulated in f64.
pub fn mse(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!(
            "mse needs equal non-empty inputs, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(1 / MSE)` for peak value 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(estimate: &Image, reference: &Image) -> Result<f64> {
    same_size(estimate, reference)?;
    Ok(psnr_from_mse(mse(&estimate.data, &reference.data)?))
}

/// PSNR after clamping the estimate to `[0, 1]` and rounding to 8 bits.
pub fn psnr_quantized(estimate: &Image, reference: &Image) -> Result<f64> {
    psnr(&estimate.quantized(), reference)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP_DB)
}

fn same_size(a: &Image, b: &Image) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Whether PSNR is measured on raw network outputs or on 8-bit quantized ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PsnrMode {
    #[default]
    Quantized,
    Float,
}

crate::denoiser::text_enum!(PsnrMode { Quantized => "quantized", Float => "float" });

impl PsnrMode {
    pub fn measure(self, estimate: &Image, reference: &Image) -> Result<f64> {
        match self {
            PsnrMode::Quantized => psnr_quantized(estimate, reference),
            PsnrMode::Float => psnr(estimate, reference),
        }
    }
}

/// Class ranking for one score row: descending score, ties broken by the lower index.
fn ranked(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose label is among the `k` highest scores.
/// `scores` is `N x K`, row-major.
pub fn topk_accuracy(scores: &[f64], classes: usize, labels: &[usize], k: usize) -> Result<f64> {
    if classes == 0 || k == 0 || k > classes {
        return Err(Error::invalid(format!("top-{k} accuracy with {classes} classes")));
    }
    if scores.len() != labels.len() * classes || labels.is_empty() {
        return Err(Error::shape(format!(
            "{} scores do not match {} labels x {classes} classes",
            scores.len(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    for (row, &label) in scores.chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::invalid(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        if ranked(row)[..k].contains(&label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-class confusion counts accumulated across images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    /// `counts[truth * classes + predicted]`
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Adds one label map; pixels whose truth equals `ignore` are skipped.
    pub fn add(&mut self, predicted: &[usize], truth: &[usize], ignore: Option<usize>) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, truth {}",
                predicted.len(),
                truth.len()
            )));
        }
        for (&p, &t) in predicted.iter().zip(truth) {
            if Some(t) == ignore {
                continue;
            }
            if t >= self.classes || p >= self.classes {
                return Err(Error::invalid(format!(
                    "label {} out of range for {} classes",
                    t.max(p),
                    self.classes
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Mean over classes of `TP / (TP + FP + FN)`, skipping classes absent
    /// from both truth and prediction. Errors if every class is absent.
    pub fn mean_iou(&self) -> Result<f64> {
        let k = self.classes;
        let mut total = 0.0;
        let mut present = 0usize;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let truth: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
            let pred: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
            let union = truth + pred - tp;
            if union == 0 {
                continue;
            }
            total += tp as f64 / union as f64;
            present += 1;
        }
        if present == 0 {
            return Err(Error::invalid("mean IoU undefined: no labelled pixels"));
        }
        Ok(total / present as f64)
    }
}

pub fn mean_iou(predicted: &[usize], truth: &[usize], classes: usize, ignore: Option<usize>) -> Result<f64> {
    let mut conf = Confusion::new(classes);
    conf.add(predicted, truth, ignore)?;
    conf.mean_iou()
}

/// Per-pixel argmax over channels of an `N x K x H x W` score tensor,
/// returned as `N` row-major label maps concatenated.
pub fn argmax_channels<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, k, h, w) = scores.dims4()?;
    let plane = h * w;
    let data = scores.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let base = b * k * plane;
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = data[base + p];
            for c in 1..k {
                let v = data[base + c * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_known_error() {
        let a = Image::filled(2, 2, 0.5);
        let b = Image::filled(2, 2, 0.6);
        // MSE 0.01 -> 20 dB
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&a, &Image::filled(2, 3, 0.0)).is_err());
    }

    #[test]
    fn quantized_psnr_clamps() {
        let est = Image::filled(1, 1, 1.7);
        let truth = Image::filled(1, 1, 1.0);
        assert_eq!(psnr_quantized(&est, &truth).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&est, &truth).unwrap() < 10.0);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let scores = [1.0, 1.0, 0.0, 0.0, 0.0, 2.0];
        assert_eq!(topk_accuracy(&scores, 3, &[0, 2], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&scores, 3, &[1, 2], 1).unwrap(), 0.5);
        assert_eq!(topk_accuracy(&scores, 3, &[1, 0], 2).unwrap(), 1.0);
        assert_eq!(argmax(&[3.0, 5.0, 5.0]), 1);
    }

    #[test]
    fn miou_skips_absent_classes_and_ignored_pixels() {
        let truth = [0, 0, 1, 1, 255];
        let pred = [0, 1, 1, 1, 2];
        // class 0: 1/2, class 1: 2/3, class 2 absent after ignoring.
        let m = mean_iou(&pred, &truth, 3, Some(255)).unwrap();
        assert!((m - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!(mean_iou(&[0], &[255], 3, Some(255)).is_err());
    }
}
