//! Edge maps, gradient-magnitude maps, the edge-sharpness threshold and
//! edge-patch sampling.
//!
//! Edge maps come from an in-repo Canny detector (Gaussian σ = 1.4, 3×3
//! Sobel, non-maximum suppression, 8-connected hysteresis) that works in
//! `f64` with a fixed evaluation order, so results are bit-stable. The
//! gradient-magnitude map is a differentiable graph op so that it can sit
//! inside a loss on generated images.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default side length of SGA patches.
pub const PATCH_SIZE: usize = 32;

/// Canny parameters. Thresholds are fractions of the image's maximum
/// smoothed gradient magnitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyParams {
    pub sigma: f64,
    pub high: f64,
    pub low: f64,
}

impl Default for CannyParams {
    /// Offline edge maps for the alignment loss: high 0.2, low half of it.
    fn default() -> Self {
        Self { sigma: 1.4, high: 0.2, low: 0.1 }
    }
}

/// Binary edge raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, `true` on edge pixels.
    pub mask: Vec<bool>,
}

impl EdgeMap {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.height, self.width], |i| if self.mask[i] { T::one() } else { T::zero() })
    }
}

/// Channel mean of a c×h×w tensor, as a row-major `f64` plane.
pub fn grayscale<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    let (c, h, w) = t.chw();
    let plane = h * w;
    let d = t.data();
    (0..plane).map(|i| (0..c).map(|ch| d[ch * plane + i].to_f64c()).sum::<f64>() / c as f64).collect()
}

/// Mirror index without edge repeat, valid for any offset.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .zip(&k)
                .map(|(d, kv)| kv * src[y * w + reflect(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .zip(&k)
                .map(|(d, kv)| kv * tmp[reflect(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

/// 3×3 Sobel derivatives with reflected borders, unscaled.
fn sobel(src: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| src[reflect(y, h) * w + reflect(x, w)];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

/// Threshold-independent part of Canny: the non-maximum-suppressed
/// gradient magnitude normalized to `[0, 1]` by its image maximum.
#[derive(Clone, Debug)]
pub struct CannyResponse {
    pub height: usize,
    pub width: usize,
    pub suppressed: Vec<f64>,
}

impl CannyResponse {
    pub fn new(gray: &[f64], height: usize, width: usize, sigma: f64) -> Self {
        assert_eq!(gray.len(), height * width);
        let blurred = gaussian_blur(gray, height, width, sigma);
        let (gx, gy) = sobel(&blurred, height, width);
        let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
        let max = mag.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            return Self { height, width, suppressed: vec![0.0; height * width] };
        }
        let mag: Vec<f64> = mag.iter().map(|m| m / max).collect();
        let at = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
                0.0
            } else {
                mag[y as usize * width + x as usize]
            }
        };
        let mut suppressed = vec![0.0; height * width];
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let m = mag[i];
                if m == 0.0 {
                    continue;
                }
                let mut angle = gy[i].atan2(gx[i]).to_degrees();
                if angle < 0.0 {
                    angle += 180.0;
                }
                // Neighbour offsets along the gradient direction.
                let (dy, dx): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                    (0, 1)
                } else if angle < 67.5 {
                    (1, 1)
                } else if angle < 112.5 {
                    (1, 0)
                } else {
                    (1, -1)
                };
                let (yi, xi) = (y as isize, x as isize);
                let ahead = at(yi + dy, xi + dx);
                let behind = at(yi - dy, xi - dx);
                // Asymmetric tie-break keeps exactly one of two equal
                // maxima, so plateaus yield one-pixel-wide edges.
                if m >= ahead && m > behind {
                    suppressed[i] = m;
                }
            }
        }
        Self { height, width, suppressed }
    }

    /// Hysteresis: pixels above `high` seed edges that grow through
    /// 8-connected pixels above `low`.
    pub fn threshold(&self, high: f64, low: f64) -> EdgeMap {
        let (h, w) = (self.height, self.width);
        let mut mask = vec![false; h * w];
        let mut stack: Vec<usize> = Vec::new();
        for (i, &m) in self.suppressed.iter().enumerate() {
            if m > high {
                mask[i] = true;
                stack.push(i);
            }
        }
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !mask[j] && self.suppressed[j] > low {
                        mask[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        EdgeMap { height: h, width: w, mask }
    }
}

/// Canny edges of a grayscale plane.
pub fn canny(gray: &[f64], height: usize, width: usize, params: &CannyParams) -> EdgeMap {
    CannyResponse::new(gray, height, width, params.sigma).threshold(params.high, params.low)
}

/// Canny edges of an image after channel-mean grayscale conversion.
pub fn detect_edges<T: Scalar>(img: &Tensor<T>, params: &CannyParams) -> EdgeMap {
    let (_, h, w) = img.chw();
    canny(&grayscale(img), h, w, params)
}

/// Disk cache of edge maps, one binary PNG per image, keyed by a hash of
/// the pixel data and the detector parameters.
#[derive(Clone, Debug)]
pub struct EdgeCache {
    pub dir: PathBuf,
    pub params: CannyParams,
}

impl EdgeCache {
    pub fn new(dir: impl Into<PathBuf>, params: CannyParams) -> Self {
        Self { dir: dir.into(), params }
    }

    pub fn key<T: Scalar>(&self, img: &Tensor<T>) -> String {
        let mut hasher = Sha256::new();
        for &d in img.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in img.data() {
            hasher.update(v.to_f64c().to_le_bytes());
        }
        let p = &self.params;
        hasher.update(format!("canny sigma={} high={} low={}", p.sigma, p.high, p.low).as_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn path_for<T: Scalar>(&self, img: &Tensor<T>) -> PathBuf {
        self.dir.join(format!("{}.png", self.key(img)))
    }

    /// Loads the cached map or computes and stores it.
    pub fn get_or_compute<T: Scalar>(&self, img: &Tensor<T>) -> Result<EdgeMap> {
        let path = self.path_for(img);
        if path.exists() {
            return read_edge_png(&path);
        }
        let edges = detect_edges(img, &self.params);
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        write_edge_png(&edges, &path)?;
        Ok(edges)
    }
}

pub fn write_edge_png(edges: &EdgeMap, path: &Path) -> Result<()> {
    let raw = edges.mask.iter().map(|&m| if m { 255u8 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(edges.width as u32, edges.height as u32, raw).expect("buffer size");
    img.save(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn read_edge_png(path: &Path) -> Result<EdgeMap> {
    let img = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    let gray = img.to_luma8();
    Ok(EdgeMap {
        height: gray.height() as usize,
        width: gray.width() as usize,
        mask: gray.as_raw().iter().map(|&v| v >= 128).collect(),
    })
}

/// Per-channel Sobel gradient magnitude (kernels scaled by 1/8, so a ramp
/// of slope `s` has magnitude `s`) with reflected borders, reduced by the
/// channel maximum: c×h×w → 1×h×w. Differentiable.
pub fn sobel_magnitude<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let eighth = 0.125;
    let kx = Tensor::from_vec(&[3, 3], [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0].map(|v| T::of(v * eighth)).to_vec());
    let ky = Tensor::from_vec(&[3, 3], [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0].map(|v| T::of(v * eighth)).to_vec());
    let padded = g.reflect_pad(x, 1);
    let dx = g.depthwise_fixed(padded, &kx);
    let dy = g.depthwise_fixed(padded, &ky);
    let mag = g.hypot(dx, dy);
    g.max_axis0(mag)
}

/// Gradient-magnitude map of a plain tensor (see [`sobel_magnitude`]).
pub fn gradient_magnitude<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let m = sobel_magnitude(&mut g, x);
    g.value(m).clone()
}

/// Edge-sharpness threshold `0.8 · i_max / 255`.
pub fn eta(i_max: f64) -> Result<f64> {
    if !(i_max > 0.0 && i_max <= 255.0) {
        return Err(Error::InvalidIntensity(i_max));
    }
    Ok(0.8 * i_max / 255.0)
}

/// Square edge patch normalized by its own maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgePatch<T> {
    /// 1×l×l values in `[0, 1]`, maximum exactly 1.
    pub values: Tensor<T>,
    pub row: usize,
    pub col: usize,
}

/// Edge density of each `l×l` tile on a stride-`l` grid (trailing partial
/// tiles are dropped), row-major over the `(h/l)×(w/l)` grid.
pub fn tile_densities(edges: &EdgeMap, l: usize) -> Vec<f64> {
    let (th, tw) = (edges.height / l, edges.width / l);
    let mut out = Vec::with_capacity(th * tw);
    for ty in 0..th {
        for tx in 0..tw {
            let mut n = 0usize;
            for y in ty * l..(ty + 1) * l {
                n += edges.mask[y * edges.width + tx * l..y * edges.width + (tx + 1) * l].iter().filter(|&&m| m).count();
            }
            out.push(n as f64 / (l * l) as f64);
        }
    }
    out
}

/// Picks a tile with probability proportional to its edge density.
pub fn sample_edge_patch<T: Scalar>(edges: &EdgeMap, l: usize, rng: &mut impl Rng) -> Result<EdgePatch<T>> {
    let dens = tile_densities(edges, l);
    if dens.iter().all(|&d| d == 0.0) {
        return Err(Error::NoEdges);
    }
    let tile = WeightedIndex::new(&dens).map_err(|_| Error::NoEdges)?.sample(rng);
    let tw = edges.width / l;
    let (row, col) = ((tile / tw) * l, (tile % tw) * l);
    let values = Tensor::from_fn(&[1, l, l], |i| {
        if edges.get(row + i / l, col + i % l) {
            T::one()
        } else {
            T::zero()
        }
    });
    Ok(EdgePatch { values, row, col })
}
