//! Images, unpaired dataset ingestion, preprocessing and augmentation.

use std::fmt;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Image domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    /// Nighttime thermal infrared.
    A,
    /// Daytime color.
    B,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

/// Raster with values in `[0, 1]`, stored as a c×h×w tensor.
///
/// Domain-A sources are single channel; they are replicated to three
/// channels on ingest so both generators share one architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub pixels: Tensor<T>,
    pub domain: Domain,
    pub id: String,
}

impl<T: Scalar> Image<T> {
    pub fn new(pixels: Tensor<T>, domain: Domain, id: impl Into<String>) -> Self {
        let (c, _, _) = pixels.chw();
        assert!(c == 1 || c == 3, "images have 1 or 3 channels, got {c}");
        Self { pixels, domain, id: id.into() }
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Three-channel copy; single-channel images are replicated.
    pub fn to_rgb(&self) -> Self {
        if self.channels() == 3 {
            return self.clone();
        }
        let plane = self.pixels.data();
        let mut data = Vec::with_capacity(plane.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(plane);
        }
        Self::new(Tensor::from_vec(&[3, self.height(), self.width()], data), self.domain, self.id.clone())
    }

    /// Decodes an 8-bit raster. Domain-A images are read as luminance and
    /// replicated to RGB; the returned `u8` is the raw maximum intensity.
    pub fn from_dynamic(img: &DynamicImage, domain: Domain, id: impl Into<String>) -> (Self, u8) {
        let scale = T::of(1.0 / 255.0);
        match domain {
            Domain::A => {
                let gray = img.to_luma8();
                let (w, h) = gray.dimensions();
                let raw_max = gray.as_raw().iter().copied().max().unwrap_or(0);
                let plane = Tensor::from_vec(
                    &[1, h as usize, w as usize],
                    gray.as_raw().iter().map(|&v| T::of(v as f64) * scale).collect(),
                );
                (Self::new(plane, domain, id).to_rgb(), raw_max)
            }
            Domain::B => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                let (w, h) = (w as usize, h as usize);
                let raw = rgb.as_raw();
                let raw_max = raw.iter().copied().max().unwrap_or(0);
                let pixels = Tensor::from_fn(&[3, h, w], |i| {
                    let c = i / (h * w);
                    let p = i % (h * w);
                    T::of(raw[p * 3 + c] as f64) * scale
                });
                (Self::new(pixels, domain, id), raw_max)
            }
        }
    }

    /// Quantizes to 8 bits: grayscale for one channel, RGB otherwise.
    pub fn to_dynamic(&self) -> DynamicImage {
        to_dynamic(&self.pixels)
    }
}

/// Quantizes a c×h×w tensor in `[0, 1]` to an 8-bit image.
pub fn to_dynamic<T: Scalar>(pixels: &Tensor<T>) -> DynamicImage {
    let (c, h, w) = pixels.chw();
    let q = |v: T| (v.to_f64c().clamp(0.0, 1.0) * 255.0).round() as u8;
    if c == 1 {
        let buf = pixels.data().iter().map(|&v| q(v)).collect();
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer size"))
    } else {
        let mut buf = Vec::with_capacity(h * w * 3);
        for p in 0..h * w {
            for ch in 0..3 {
                buf.push(q(pixels.data()[ch * h * w + p]));
            }
        }
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size"))
    }
}

/// Two unpaired image collections.
#[derive(Clone, Debug)]
pub struct UnpairedDataset<T> {
    pub domain_a: Vec<Image<T>>,
    pub domain_b: Vec<Image<T>>,
    /// Maximum raw (0–255) intensity over all domain-A source pixels.
    pub i_max: f64,
}

impl<T: Scalar> UnpairedDataset<T> {
    pub fn new(domain_a: Vec<Image<T>>, domain_b: Vec<Image<T>>, i_max: f64) -> Result<Self> {
        if domain_a.is_empty() {
            return Err(Error::EmptyDomain("domain A"));
        }
        if domain_b.is_empty() {
            return Err(Error::EmptyDomain("domain B"));
        }
        if !(i_max > 0.0) {
            return Err(Error::ZeroIntensityRange);
        }
        if i_max > 255.0 {
            return Err(Error::InvalidIntensity(i_max));
        }
        Ok(Self { domain_a, domain_b, i_max })
    }

    pub fn map_images(&self, f: impl Fn(&Image<T>) -> Image<T>) -> Self {
        Self {
            domain_a: self.domain_a.iter().map(&f).collect(),
            domain_b: self.domain_b.iter().map(&f).collect(),
            i_max: self.i_max,
        }
    }
}

/// Image files (png/jpg/jpeg) in `dir`, sorted lexicographically.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_id(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Loads every image of one domain. Returns the images and the raw maximum
/// intensity over all of them.
pub fn load_domain<T: Scalar>(dir: &Path, domain: Domain, skip_undecodable: bool) -> Result<(Vec<Image<T>>, u8)> {
    let files = list_images(dir)?;
    let mut images = Vec::with_capacity(files.len());
    let mut raw_max = 0u8;
    for path in files {
        match image::open(&path) {
            Ok(img) => {
                let (im, m) = Image::from_dynamic(&img, domain, file_id(&path));
                raw_max = raw_max.max(m);
                images.push(im);
            }
            Err(e) if skip_undecodable => warn!("skipping {}: {e}", path.display()),
            Err(e) => return Err(Error::Decode { path, reason: e.to_string() }),
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyDirectory(dir.to_path_buf()));
    }
    Ok((images, raw_max))
}

/// Reads both domain directories.
pub fn load_dataset<T: Scalar>(dir_a: &Path, dir_b: &Path, skip_undecodable: bool) -> Result<UnpairedDataset<T>> {
    let (a, i_max) = load_domain(dir_a, Domain::A, skip_undecodable)?;
    let (b, _) = load_domain(dir_b, Domain::B, skip_undecodable)?;
    UnpairedDataset::new(a, b, i_max as f64)
}

/// Resize/crop geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessConfig {
    /// `(width, height)` after resizing.
    pub resize: (usize, usize),
    /// `(width, height)` of the centered crop.
    pub crop: (usize, usize),
    /// Side of the random square training crop.
    pub train_crop: usize,
    pub hflip_prob: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { resize: (500, 400), crop: (360, 288), train_crop: 256, hflip_prob: 0.5 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (rw, rh) = self.resize;
        let (cw, ch) = self.crop;
        if cw > rw || ch > rh {
            return Err(Error::Config(format!("crop {cw}×{ch} exceeds resize {rw}×{rh}")));
        }
        if self.train_crop > cw || self.train_crop > ch {
            return Err(Error::Config(format!("train crop {} exceeds crop {cw}×{ch}", self.train_crop)));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        Ok(())
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear<T: Scalar>(src: &Tensor<T>, out_w: usize, out_h: usize) -> Tensor<T> {
    let (c, h, w) = src.chw();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, T)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, T::of(pos - i0 as f64))
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let d = src.data();
    Tensor::from_fn(&[c, out_h, out_w], |i| {
        let ch = i / (out_h * out_w);
        let (y0, y1, ty) = ys[(i / out_w) % out_h];
        let (x0, x1, tx) = xs[i % out_w];
        let at = |y: usize, x: usize| d[(ch * h + y) * w + x];
        let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * tx;
        let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * tx;
        top + (bottom - top) * ty
    })
}

/// Copies the window `[top, top+h) × [left, left+w)`.
pub fn crop_tensor<T: Scalar>(src: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Tensor<T> {
    let (c, hi, wi) = src.chw();
    assert!(top + h <= hi && left + w <= wi, "crop out of bounds");
    let d = src.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * hi + top + y) * wi + left;
            out.extend_from_slice(&d[row..row + w]);
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

pub fn flip_horizontal<T: Scalar>(src: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = src.chw();
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        src.data()[i - x + (w - 1 - x)]
    })
}

/// Resizes to `cfg.resize`, then center-crops to `cfg.crop`.
pub fn preprocess<T: Scalar>(img: &Image<T>, cfg: &PreprocessConfig) -> Image<T> {
    let (rw, rh) = cfg.resize;
    let (cw, ch) = cfg.crop;
    let resized = resize_bilinear(&img.pixels, rw, rh);
    let top = (rh - ch) / 2;
    let left = (rw - cw) / 2;
    Image::new(crop_tensor(&resized, top, left, ch, cw), img.domain, img.id.clone())
}

/// Random crop position and flip decision for one training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip: bool,
}

impl AugmentParams {
    /// Crop offsets are uniform over all valid positions.
    pub fn sample(height: usize, width: usize, size: usize, hflip_prob: f64, rng: &mut impl Rng) -> Result<Self> {
        if height < size || width < size {
            return Err(Error::ImageTooSmall { width, height, need: size });
        }
        let top = rng.random_range(0..=height - size);
        let left = rng.random_range(0..=width - size);
        let flip = rng.random::<f64>() < hflip_prob;
        Ok(Self { top, left, size, flip })
    }

    pub fn apply<T: Scalar>(&self, t: &Tensor<T>) -> Tensor<T> {
        let out = crop_tensor(t, self.top, self.left, self.size, self.size);
        if self.flip {
            flip_horizontal(&out)
        } else {
            out
        }
    }
}

/// Random `cfg.train_crop` square crop plus horizontal flip.
pub fn augment<T: Scalar>(img: &Image<T>, cfg: &PreprocessConfig, rng: &mut impl Rng) -> Result<Image<T>> {
    let params = AugmentParams::sample(img.height(), img.width(), cfg.train_crop, cfg.hflip_prob, rng)?;
    Ok(Image::new(params.apply(&img.pixels), img.domain, img.id.clone()))
}

/// Indices of one domain-A and one domain-B image, drawn independently and
/// uniformly.
pub fn sample_unpaired_indices<T>(ds: &UnpairedDataset<T>, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if ds.domain_a.is_empty() {
        return Err(Error::EmptyDomain("domain A"));
    }
    if ds.domain_b.is_empty() {
        return Err(Error::EmptyDomain("domain B"));
    }
    Ok((rng.random_range(0..ds.domain_a.len()), rng.random_range(0..ds.domain_b.len())))
}

pub fn sample_unpaired_batch<'a, T>(
    ds: &'a UnpairedDataset<T>,
    rng: &mut impl Rng,
) -> Result<(&'a Image<T>, &'a Image<T>)> {
    let (i, j) = sample_unpaired_indices(ds, rng)?;
    Ok((&ds.domain_a[i], &ds.domain_b[j]))
}
