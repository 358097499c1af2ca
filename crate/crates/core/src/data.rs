//! Images, noise synthesis, patch sampling and synthetic toy datasets.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result, Scalar, Tensor};

/// Segmentation label excluded from losses and metrics.
pub const IGNORE_LABEL: usize = 255;

/// RGB image, planar (`C x H x W`), values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != Self::CHANNELS * height * width {
            return Err(Error::shape(format!(
                "image {height}x{width} needs {} values, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            data: vec![value; Self::CHANNELS * height * width],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    /// `1 x 3 x H x W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, Self::CHANNELS, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
        .expect("consistent image")
    }

    /// Item `n` of an `N x 3 x H x W` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        if c != Self::CHANNELS {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let item = t.batch_item(n)?;
        Image::new(h, w, item.data().iter().map(|v| v.to_f64_lossy() as f32).collect())
    }

    pub fn batch_to_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
        let items: Vec<Tensor<T>> = images.iter().map(|i| i.to_tensor()).collect();
        Tensor::stack(&items)
    }

    /// Values clamped to `[0, 1]` and rounded to the nearest of 256 levels.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_byte(v) as f32 / 255.0).collect(),
        }
    }

    /// Copy of the `size x size` window at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for y in top..top + height {
                let start = self.index(c, y, left);
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Image::new(height, width, data)
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Netpbm header parser shared by P6 (RGB) and P5 (grey) files.
/// Returns `(width, height, maxval, payload offset)`.
fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(
            path,
            0,
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format_err(path, pos, "header ended early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, start, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| format_err(path, start, "header field out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err(path, pos, "missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval > 255 {
        return Err(format_err(
            path,
            pos,
            format!("only 8-bit files are supported (maxval {maxval})"),
        ));
    }
    Ok((width, height, maxval, pos))
}

/// Decodes a binary PPM (P6).
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let (width, height, maxval, start) = parse_pnm_header(bytes, b"P6", path)?;
    let len = 3 * width * height;
    if bytes.len() < start + len {
        return Err(format_err(
            path,
            bytes.len(),
            format!("payload truncated: need {len} bytes after offset {start}"),
        ));
    }
    let payload = &bytes[start..start + len];
    let mut data = vec![0.0f32; len];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            if px[c] as usize > maxval {
                return Err(format_err(path, start + 3 * i + c, "sample exceeds maxval"));
            }
            data[c * width * height + i] = px[c] as f32 / maxval as f32;
        }
    }
    Image::new(height, width, data)
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.width * img.height;
    for i in 0..plane {
        for c in 0..3 {
            out.push(to_byte(img.data[c * plane + i]));
        }
    }
    out
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err(path, 0, format!("png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err(path, 0, format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let step = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Indexed => {
            return Err(format_err(path, 0, "unexpanded palette image"));
        }
    };
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in buf[..info.buffer_size()].chunks_exact(step).enumerate() {
        for c in 0..3 {
            let v = if step < 3 { px[0] } else { px[c] };
            data[c * w * h + i] = v as f32 / 255.0;
        }
    }
    Image::new(h, w, data)
}

fn encode_png(img: &Image, path: &Path) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| format_err(path, 0, format!("png: {e}")))?;
        let plane = img.width * img.height;
        let mut raw = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                raw.push(to_byte(img.data[c * plane + i]));
            }
        }
        writer
            .write_image_data(&raw)
            .map_err(|e| format_err(path, 0, format!("png: {e}")))?;
    }
    Ok(out)
}

/// Reads an 8-bit binary PPM or an 8-bit PNG, chosen by content.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes, path)
    } else {
        decode_ppm(&bytes, path)
    }
}

/// Writes PNG when the extension is `.png`, PPM otherwise. Values are clamped to `[0, 1]`.
pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png {
        encode_png(img, path)?
    } else {
        encode_ppm(img)
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Label map stored as a binary PGM (P5); each byte is a class index or [`IGNORE_LABEL`].
pub fn read_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<usize>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, _, start) = parse_pnm_header(&bytes, b"P5", path)?;
    if bytes.len() < start + w * h {
        return Err(format_err(path, bytes.len(), "mask payload truncated"));
    }
    Ok((h, w, bytes[start..start + w * h].iter().map(|&b| b as usize).collect()))
}

pub fn write_mask(height: usize, width: usize, labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if labels.len() != height * width || labels.iter().any(|&l| l > 255) {
        return Err(Error::invalid("mask labels must be bytes covering the image"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(labels.iter().map(|&l| l as u8));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Additive i.i.d. zero-mean Gaussian noise; `sigma` is on the 0-255 scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(NoiseModel { sigma, seed })
    }

    /// Standard deviation in the `[0, 1]` intensity domain.
    pub fn unit_std(&self) -> f64 {
        self.sigma / 255.0
    }
}

/// Adds `N(0, sigma_unit^2)` to every value in place, drawing from `rng`.
/// The result is not clamped.
pub fn perturb<R: Rng + ?Sized>(values: &mut [f32], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let std = sigma / 255.0;
    for v in values {
        let z: f64 = StandardNormal.sample(rng);
        *v = (*v as f64 + std * z) as f32;
    }
}

/// `img + N(0, (sigma/255)^2)` per element, not clamped, deterministic in `model.seed`.
pub fn add_noise(img: &Image, model: &NoiseModel) -> Image {
    let mut out = img.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    perturb(&mut out.data, model.sigma, &mut rng);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseSampling {
    /// A new noise field for every draw.
    #[default]
    Fresh,
    /// One noisy copy per source image, drawn once.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PatchSampling {
    /// Uniformly random window for every draw.
    #[default]
    Random,
    /// A fixed pool of windows drawn once; batches sample from the pool.
    PreExtracted { count: usize },
}

/// Random `patch x patch` crops from a set of clean images, paired with noisy copies.
pub struct PatchStream {
    images: Vec<Image>,
    noisy: Option<Vec<Image>>,
    pool: Option<Vec<(usize, usize, usize)>>,
    patch: usize,
    batch: usize,
    sigma: f64,
    rng: ChaCha8Rng,
}

impl PatchStream {
    /// `sources` pairs a display name (used in errors) with each image.
    pub fn new(sources: Vec<(String, Image)>, patch: usize, batch: usize, sigma: f64, seed: u64) -> Result<Self> {
        Self::with_sampling(
            sources,
            patch,
            batch,
            sigma,
            seed,
            NoiseSampling::Fresh,
            PatchSampling::Random,
        )
    }

    pub fn with_sampling(
        sources: Vec<(String, Image)>,
        patch: usize,
        batch: usize,
        sigma: f64,
        seed: u64,
        noise: NoiseSampling,
        patches: PatchSampling,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::invalid("patch stream needs at least one image"));
        }
        if patch == 0 || batch == 0 {
            return Err(Error::invalid("patch and batch size must be positive"));
        }
        NoiseModel::new(sigma, seed)?;
        for (name, img) in &sources {
            if img.height < patch || img.width < patch {
                return Err(Error::invalid(format!(
                    "image {name} is {}x{}, smaller than the {patch}x{patch} patch",
                    img.height, img.width
                )));
            }
        }
        let images: Vec<Image> = sources.into_iter().map(|(_, i)| i).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noisy = match noise {
            NoiseSampling::Fresh => None,
            NoiseSampling::Fixed => Some(
                images
                    .iter()
                    .map(|img| {
                        let mut n = img.clone();
                        perturb(&mut n.data, sigma, &mut rng);
                        n
                    })
                    .collect(),
            ),
        };
        let mut stream = PatchStream {
            images,
            noisy,
            pool: None,
            patch,
            batch,
            sigma,
            rng,
        };
        if let PatchSampling::PreExtracted { count } = patches {
            if count == 0 {
                return Err(Error::invalid("pre-extracted pool must be non-empty"));
            }
            let pool = (0..count).map(|_| stream.random_window()).collect();
            stream.pool = Some(pool);
        }
        Ok(stream)
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    fn random_window(&mut self) -> (usize, usize, usize) {
        let i = self.rng.random_range(0..self.images.len());
        let img = &self.images[i];
        let top = self.rng.random_range(0..=img.height - self.patch);
        let left = self.rng.random_range(0..=img.width - self.patch);
        (i, top, left)
    }

    /// Next window `(image index, top, left)`; always fully inside its image.
    pub fn next_window(&mut self) -> (usize, usize, usize) {
        match &self.pool {
            Some(pool) => {
                let k = self.rng.random_range(0..pool.len());
                pool[k]
            }
            None => self.random_window(),
        }
    }

    /// `(noisy, clean)` batches of shape `batch x 3 x patch x patch`.
    pub fn next_batch(&mut self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let p = self.patch;
        let mut clean = Vec::with_capacity(self.batch * 3 * p * p);
        let mut noisy = Vec::with_capacity(self.batch * 3 * p * p);
        for _ in 0..self.batch {
            let (i, top, left) = self.next_window();
            let c = self.images[i].crop(top, left, p, p)?;
            let n = match &self.noisy {
                Some(fixed) => fixed[i].crop(top, left, p, p)?.data,
                None => {
                    let mut n = c.data.clone();
                    perturb(&mut n, self.sigma, &mut self.rng);
                    n
                }
            };
            clean.extend_from_slice(&c.data);
            noisy.extend(n);
        }
        let shape = vec![self.batch, 3, p, p];
        Ok((Tensor::new(shape.clone(), noisy)?, Tensor::new(shape, clean)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    Classification,
    Segmentation,
}

crate::denoiser::text_enum!(ToyKind { Classification => "classification", Segmentation => "segmentation" });

impl ToyKind {
    pub fn classes(self) -> usize {
        match self {
            ToyKind::Classification => 2,
            ToyKind::Segmentation => 3,
        }
    }

    pub fn other(self) -> Self {
        match self {
            ToyKind::Classification => ToyKind::Segmentation,
            ToyKind::Segmentation => ToyKind::Classification,
        }
    }
}

/// Ground truth for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    /// Row-major per-pixel labels.
    Mask(Vec<usize>),
}

/// Labels for a batch: one class per image, or row-major per-pixel maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    PerImage(Vec<usize>),
    PerPixel(Vec<usize>),
}

impl Labels {
    pub fn values(&self) -> &[usize] {
        match self {
            Labels::PerImage(v) | Labels::PerPixel(v) => v,
        }
    }

    /// Concatenates the targets of `samples`; they must all be of one kind.
    pub fn collect<'a>(targets: impl IntoIterator<Item = &'a Target>) -> Result<Labels> {
        let mut per_image = Vec::new();
        let mut per_pixel = Vec::new();
        for t in targets {
            match t {
                Target::Class(l) => per_image.push(*l),
                Target::Mask(m) => per_pixel.extend_from_slice(m),
            }
        }
        match (per_image.is_empty(), per_pixel.is_empty()) {
            (false, true) => Ok(Labels::PerImage(per_image)),
            (true, false) => Ok(Labels::PerPixel(per_pixel)),
            (true, true) => Err(Error::invalid("no labels")),
            (false, false) => Err(Error::invalid("mixed per-image and per-pixel labels")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub target: Target,
}

/// Synthetic desk-scale datasets.
///
/// Both tasks draw a smooth background with one circle or rectangle per
/// quadrant. A shape is flat-colored or carries a fine texture: a one-pixel
/// checkerboard or 2-pixel stripes of random orientation.
///
/// - Classification (K = 2): class 0 has four flat shapes; class 1 replaces one
///   of them with a textured shape. Labels alternate, so any contiguous run is
///   balanced.
/// - Segmentation (K = 3): one checker shape (1), one striped shape (2) and two
///   flat shapes that count as background (0).
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub kind: ToyKind,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

pub const TOY_SIZE: usize = 32;

#[derive(Clone, Copy)]
enum Texture {
    Flat,
    Checker,
    Stripes { vertical: bool },
}

impl Texture {
    fn offset(self, y: usize, x: usize, amp: f32) -> f32 {
        let on = match self {
            Texture::Flat => return 0.0,
            Texture::Checker => (x + y).is_multiple_of(2),
            Texture::Stripes { vertical: false } => (y / 2).is_multiple_of(2),
            Texture::Stripes { vertical: true } => (x / 2).is_multiple_of(2),
        };
        if on {
            amp
        } else {
            -amp
        }
    }
}

/// Std of the unstructured grain in clean toy images.
const GRAIN: f32 = 0.03;

struct Canvas {
    size: usize,
    img: Image,
    mask: Vec<usize>,
}

impl Canvas {
    fn smooth_background(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut img = Image::filled(size, size, 0.0);
        for c in 0..3 {
            let base: f32 = rng.random_range(0.25..0.75);
            let gy: f32 = rng.random_range(-0.3..0.3);
            let gx: f32 = rng.random_range(-0.3..0.3);
            for y in 0..size {
                for x in 0..size {
                    let fy = y as f32 / (size - 1) as f32 - 0.5;
                    let fx = x as f32 / (size - 1) as f32 - 0.5;
                    let i = img.index(c, y, x);
                    img.data[i] = (base + gy * fy + gx * fx).clamp(0.0, 1.0);
                }
            }
        }
        Canvas {
            size,
            img,
            mask: vec![0; size * size],
        }
    }

    fn paint(&mut self, inside: impl Fn(usize, usize) -> bool, texture: Texture, label: usize, rng: &mut ChaCha8Rng) {
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
        let amp: f32 = rng.random_range(0.05..0.12);
        self.fill(inside, label, |c, y, x, _| color[c] + texture.offset(y, x, amp));
    }

    /// Adds the same white luminance grain to all three channels.
    fn grain(&mut self, std: f32, rng: &mut ChaCha8Rng) {
        for y in 0..self.size {
            for x in 0..self.size {
                let g: f32 = StandardNormal.sample(rng);
                for c in 0..3 {
                    let i = self.img.index(c, y, x);
                    self.img.data[i] = (self.img.data[i] + std * g).clamp(0.0, 1.0);
                }
            }
        }
    }

    fn fill(
        &mut self,
        inside: impl Fn(usize, usize) -> bool,
        label: usize,
        value: impl Fn(usize, usize, usize, f32) -> f32,
    ) {
        for y in 0..self.size {
            for x in 0..self.size {
                if !inside(y, x) {
                    continue;
                }
                for c in 0..3 {
                    let i = self.img.index(c, y, x);
                    self.img.data[i] = value(c, y, x, self.img.data[i]).clamp(0.0, 1.0);
                }
                self.mask[y * self.size + x] = label;
            }
        }
    }
}

/// Axis-aligned region `[top, top+h) x [left, left+w)` to place a shape into.
#[derive(Clone, Copy)]
struct Region {
    top: usize,
    left: usize,
    h: usize,
    w: usize,
}

fn circle_in(r: Region, rng: &mut ChaCha8Rng) -> impl Fn(usize, usize) -> bool {
    let max_radius = (r.h.min(r.w) as f32 / 2.0 - 1.0).max(3.0);
    let radius: f32 = rng.random_range((max_radius * 0.6)..=max_radius);
    let slack_y = (r.h as f32 - 2.0 * radius).max(0.0);
    let slack_x = (r.w as f32 - 2.0 * radius).max(0.0);
    let cy = r.top as f32 + radius + rng.random_range(0.0..=slack_y) - 0.5;
    let cx = r.left as f32 + radius + rng.random_range(0.0..=slack_x) - 0.5;
    move |y, x| {
        let (dy, dx) = (y as f32 - cy, x as f32 - cx);
        dy * dy + dx * dx <= radius * radius
    }
}

fn rect_in(r: Region, rng: &mut ChaCha8Rng) -> impl Fn(usize, usize) -> bool {
    let h = rng.random_range((r.h * 3 / 5).max(4)..=r.h);
    let w = rng.random_range((r.w * 3 / 5).max(4)..=r.w);
    let top = r.top + rng.random_range(0..=r.h - h);
    let left = r.left + rng.random_range(0..=r.w - w);
    move |y, x| y >= top && y < top + h && x >= left && x < left + w
}

impl ToyDataset {
    /// `count` samples of `TOY_SIZE x TOY_SIZE` images.
    pub fn generate(kind: ToyKind, count: usize, seed: u64) -> Result<Self> {
        Self::generate_sized(kind, count, TOY_SIZE, seed)
    }

    pub fn generate_sized(kind: ToyKind, count: usize, size: usize, seed: u64) -> Result<Self> {
        let classes = kind.classes();
        if count < 2 * classes {
            return Err(Error::invalid(format!(
                "toy dataset needs at least {} samples, got {count}",
                2 * classes
            )));
        }
        if size < 16 {
            return Err(Error::invalid("toy images must be at least 16x16"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..count)
            .map(|i| match kind {
                ToyKind::Classification => classification_sample(i % 2, size, &mut rng),
                ToyKind::Segmentation => segmentation_sample(size, &mut rng),
            })
            .collect();
        Ok(ToyDataset { kind, classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `test` samples as a held-out set.
    pub fn split(mut self, test: usize) -> Result<(ToyDataset, ToyDataset)> {
        if test == 0 || test >= self.samples.len() {
            return Err(Error::invalid(format!(
                "cannot hold out {test} of {} samples",
                self.samples.len()
            )));
        }
        let held = self.samples.split_off(self.samples.len() - test);
        let test_set = ToyDataset {
            kind: self.kind,
            classes: self.classes,
            samples: held,
        };
        Ok((self, test_set))
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.samples.iter().map(|s| &s.image)
    }

    /// Per-channel mean over every pixel of every image.
    pub fn channel_means(&self) -> [f64; 3] {
        channel_means(self.images())
    }
}

pub fn channel_means<'a>(images: impl Iterator<Item = &'a Image>) -> [f64; 3] {
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for img in images {
        let plane = img.height * img.width;
        for (c, s) in sums.iter_mut().enumerate() {
            *s += img.data[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        count += plane;
    }
    sums.map(|s| if count == 0 { 0.0 } else { s / count as f64 })
}

fn classification_sample(label: usize, size: usize, rng: &mut ChaCha8Rng) -> Sample {
    let mut shapes = [0, 0, 0, 0];
    if label == 1 {
        shapes[0] = rng.random_range(1..=2);
        shapes.shuffle(rng);
    }
    Sample {
        image: quadrant_shapes(size, shapes, rng).img,
        target: Target::Class(label),
    }
}

fn segmentation_sample(size: usize, rng: &mut ChaCha8Rng) -> Sample {
    let mut shapes = [1, 2, 0, 0];
    shapes.shuffle(rng);
    let canvas = quadrant_shapes(size, shapes, rng);
    Sample {
        image: canvas.img,
        target: Target::Mask(canvas.mask),
    }
}

/// One circle or rectangle per quadrant: 0 flat, 1 checker, 2 stripes.
fn quadrant_shapes(size: usize, shapes: [usize; 4], rng: &mut ChaCha8Rng) -> Canvas {
    let mut canvas = Canvas::smooth_background(size, rng);
    let half = size / 2;
    let margin = 1;
    for (q, &label) in shapes.iter().enumerate() {
        let region = Region {
            top: (q / 2) * half + margin,
            left: (q % 2) * half + margin,
            h: half - 2 * margin,
            w: half - 2 * margin,
        };
        let texture = match label {
            1 => Texture::Checker,
            2 => Texture::Stripes {
                vertical: rng.random_bool(0.5),
            },
            _ => Texture::Flat,
        };
        if rng.random_bool(0.5) {
            let shape = circle_in(region, rng);
            canvas.paint(shape, texture, label, rng);
        } else {
            let shape = rect_in(region, rng);
            canvas.paint(shape, texture, label, rng);
        }
    }
    canvas.grain(GRAIN, rng);
    canvas
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub target: Option<ManifestTarget>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ManifestTarget {
    Label(usize),
    Mask(PathBuf),
}

/// Parses `<relative-path><TAB><label-or-maskpath>` lines; `#` starts a comment.
/// Paths are resolved against `base`. The second column is optional.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let image = cols.next().unwrap_or("").trim();
        if image.is_empty() {
            return Err(Error::invalid(format!("manifest line {}: empty path", lineno + 1)));
        }
        let target = cols
            .next()
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|t| match t.parse::<usize>() {
                Ok(label) => ManifestTarget::Label(label),
                Err(_) => ManifestTarget::Mask(base.join(t)),
            });
        if cols.next().is_some() {
            return Err(Error::invalid(format!(
                "manifest line {}: expected at most two tab-separated columns",
                lineno + 1
            )));
        }
        entries.push(ManifestEntry {
            image: base.join(image),
            target,
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Loads every manifest entry into memory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, Sample)>> {
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let image = read_image(&e.image)?;
            let target = match e.target {
                None => Target::Class(0),
                Some(ManifestTarget::Label(l)) => Target::Class(l),
                Some(ManifestTarget::Mask(m)) => {
                    let (h, w, labels) = read_mask(&m)?;
                    if (h, w) != (image.height, image.width) {
                        return Err(Error::shape(format!(
                            "mask {} is {h}x{w} but image is {}x{}",
                            m.display(),
                            image.height,
                            image.width
                        )));
                    }
                    Target::Mask(labels)
                }
            };
            Ok((e.image.display().to_string(), Sample { image, target }))
        })
        .collect()
}

/// Writes a dataset as images, masks and a manifest under `dir`.
pub fn write_dataset(samples: &[Sample], dir: impl AsRef<Path>, manifest_name: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# image\tlabel-or-mask\n");
    for (i, s) in samples.iter().enumerate() {
        let name = format!("img_{i:05}.ppm");
        write_image(&s.image, dir.join(&name))?;
        match &s.target {
            Target::Class(l) => manifest.push_str(&format!("{name}\t{l}\n")),
            Target::Mask(m) => {
                let mask_name = format!("mask_{i:05}.pgm");
                write_mask(s.image.height, s.image.width, m, dir.join(&mask_name))?;
                manifest.push_str(&format!("{name}\t{mask_name}\n"));
            }
        }
    }
    let path = dir.join(manifest_name);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Batches of `(noisy, clean, labels)` drawn from labelled samples with fresh
/// (or fixed) noise. Per-image labels give one entry per image, masks one per pixel.
pub struct LabeledStream {
    samples: Vec<Sample>,
    noisy: Option<Vec<Image>>,
    batch: usize,
    sigma: f64,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl LabeledStream {
    pub fn new(samples: Vec<Sample>, batch: usize, sigma: f64, seed: u64, noise: NoiseSampling) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("labelled stream needs at least one sample"));
        }
        if batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        NoiseModel::new(sigma, seed)?;
        let (h, w) = (samples[0].image.height, samples[0].image.width);
        if samples.iter().any(|s| (s.image.height, s.image.width) != (h, w)) {
            return Err(Error::shape("labelled stream needs equally sized images"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noisy = (noise == NoiseSampling::Fixed).then(|| {
            samples
                .iter()
                .map(|s| {
                    let mut n = s.image.clone();
                    perturb(&mut n.data, sigma, &mut rng);
                    n
                })
                .collect()
        });
        let order = (0..samples.len()).collect();
        Ok(LabeledStream {
            samples,
            noisy,
            batch,
            sigma,
            rng,
            order,
            cursor: usize::MAX,
        })
    }

    /// Index of the next sample; epochs are reshuffled permutations.
    fn next_index(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn next_batch(&mut self) -> Result<(Tensor<f32>, Tensor<f32>, Labels)> {
        let mut clean = Vec::new();
        let mut noisy = Vec::new();
        let mut picked = Vec::with_capacity(self.batch);
        let (h, w) = (self.samples[0].image.height, self.samples[0].image.width);
        for _ in 0..self.batch {
            let i = self.next_index();
            let s = &self.samples[i];
            clean.extend_from_slice(&s.image.data);
            match &self.noisy {
                Some(fixed) => noisy.extend_from_slice(&fixed[i].data),
                None => {
                    let mut n = s.image.data.clone();
                    perturb(&mut n, self.sigma, &mut self.rng);
                    noisy.extend(n);
                }
            }
            picked.push(i);
        }
        let labels = Labels::collect(picked.iter().map(|&i| &self.samples[i].target))?;
        let shape = vec![self.batch, 3, h, w];
        Ok((Tensor::new(shape.clone(), noisy)?, Tensor::new(shape, clean)?, labels))
    }
}
