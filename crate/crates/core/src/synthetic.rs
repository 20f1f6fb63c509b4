//! Procedural street scenes for self-contained experiments.
//!
//! Domain A renders a scene as a thermal frame: cold sky, cool buildings and
//! road, warm cars, hot pedestrians. Domain B renders an independent scene
//! in daylight colors. The two sets are unpaired.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    shade: f64,
}

#[derive(Clone, Debug)]
struct Scene {
    horizon: f64,
    road_top_half_width: f64,
    buildings: Vec<Rect>,
    trees: Vec<(f64, f64, f64)>,
    cars: Vec<Rect>,
    pedestrians: Vec<(f64, f64, f64, f64)>,
}

fn random_scene(rng: &mut impl Rng) -> Scene {
    let horizon = rng.random_range(0.35..0.5);
    let mut buildings = Vec::new();
    let mut x = rng.random_range(-0.05..0.05);
    while x < 1.0 {
        let w = rng.random_range(0.1..0.25);
        let top = horizon - rng.random_range(0.1..0.3);
        buildings.push(Rect { x0: x, y0: top, x1: x + w, y1: horizon + 0.02, shade: rng.random_range(0.0..1.0) });
        x += w + rng.random_range(0.0..0.08);
    }
    let trees = (0..rng.random_range(0..3))
        .map(|_| (rng.random_range(0.0..1.0), horizon - rng.random_range(0.0..0.05), rng.random_range(0.04..0.08)))
        .collect();
    let cars = (0..rng.random_range(1..3))
        .map(|_| {
            let y = rng.random_range(horizon + 0.12..0.85);
            let depth = (y - horizon) / (1.0 - horizon);
            let w = 0.12 + 0.2 * depth;
            let cx = rng.random_range(0.15..0.85);
            Rect { x0: cx - w / 2.0, y0: y - 0.45 * w, x1: cx + w / 2.0, y1: y, shade: rng.random_range(0.0..1.0) }
        })
        .collect();
    let pedestrians = (0..rng.random_range(1..4))
        .map(|_| {
            let y = rng.random_range(horizon + 0.08..0.9);
            let depth = (y - horizon) / (1.0 - horizon);
            let h = 0.12 + 0.25 * depth;
            (rng.random_range(0.05..0.95), y - h / 2.0, h * 0.18, h / 2.0)
        })
        .collect();
    Scene { horizon, road_top_half_width: rng.random_range(0.05..0.15), buildings, trees, cars, pedestrians }
}

#[derive(Clone, Copy, PartialEq)]
enum Surface {
    Sky,
    Ground,
    Road,
    Lane,
    Building(f64),
    Tree,
    Car(f64),
    Person,
}

fn surface_at(s: &Scene, u: f64, v: f64) -> Surface {
    for &(cx, cy, rx, ry) in &s.pedestrians {
        if ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0 {
            return Surface::Person;
        }
    }
    for c in &s.cars {
        if u >= c.x0 && u <= c.x1 && v >= c.y0 && v <= c.y1 {
            return Surface::Car(c.shade);
        }
    }
    if v >= s.horizon {
        let depth = (v - s.horizon) / (1.0 - s.horizon);
        let half = s.road_top_half_width + depth * 0.45;
        if (u - 0.5).abs() <= half {
            let lane = (u - 0.5).abs() < 0.004 + 0.01 * depth && ((depth * 12.0).fract() < 0.5);
            return if lane { Surface::Lane } else { Surface::Road };
        }
        return Surface::Ground;
    }
    for &(cx, cy, r) in &s.trees {
        if (u - cx).powi(2) + (v - cy).powi(2) <= r * r {
            return Surface::Tree;
        }
    }
    for b in &s.buildings {
        if u >= b.x0 && u <= b.x1 && v >= b.y0 && v <= b.y1 {
            return Surface::Building(b.shade);
        }
    }
    Surface::Sky
}

fn thermal(surface: Surface, v: f64) -> f64 {
    match surface {
        Surface::Sky => 20.0 + 25.0 * v,
        Surface::Ground => 70.0,
        Surface::Road => 60.0,
        Surface::Lane => 75.0,
        Surface::Building(s) => 75.0 + 30.0 * s,
        Surface::Tree => 55.0,
        Surface::Car(s) => 150.0 + 50.0 * s,
        Surface::Person => 255.0,
    }
}

fn daylight(surface: Surface, v: f64) -> [f64; 3] {
    match surface {
        Surface::Sky => [120.0 + 60.0 * v, 170.0 + 50.0 * v, 235.0],
        Surface::Ground => [90.0, 140.0, 70.0],
        Surface::Road => [95.0, 95.0, 100.0],
        Surface::Lane => [235.0, 235.0, 230.0],
        Surface::Building(s) => [150.0 + 60.0 * s, 120.0 + 40.0 * s, 100.0 + 30.0 * s],
        Surface::Tree => [40.0, 110.0, 45.0],
        Surface::Car(s) => [200.0 * s + 30.0, 40.0 + 60.0 * (1.0 - s), 60.0 + 150.0 * (1.0 - s)],
        Surface::Person => [180.0, 60.0, 50.0],
    }
}

/// Renders a thermal-style scene as 8-bit grayscale, row-major.
pub fn render_thermal(seed: u64, width: usize, height: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = random_scene(&mut rng);
    let noise = Normal::new(0.0, 3.0).expect("valid std");
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = ((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64);
            let surface = surface_at(&scene, u, v);
            let n = if surface == Surface::Person { 0.0 } else { noise.sample(&mut rng) };
            out.push((thermal(surface, v) + n).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Renders a daylight-color scene as 8-bit interleaved RGB.
pub fn render_daylight(seed: u64, width: usize, height: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = random_scene(&mut rng);
    let noise = Normal::new(0.0, 3.0).expect("valid std");
    let mut out = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = ((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64);
            let rgb = daylight(surface_at(&scene, u, v), v);
            let n: f64 = noise.sample(&mut rng);
            for c in rgb {
                out.push((c + n).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Writes `count` scenes per domain as `<dir>/A/*.png`, `<dir>/B/*.png`
/// and a `manifest.txt` listing `id<TAB>domain` per image.
pub fn generate(dir: &Path, count: usize, width: usize, height: usize, seed: u64) -> Result<()> {
    let dir_a = dir.join("A");
    let dir_b = dir.join("B");
    for d in [&dir_a, &dir_b] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let manifest_path = dir.join("manifest.txt");
    let mut manifest = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let save = |img: image::DynamicImage, path: &Path| {
        img.save(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })
    };
    for i in 0..count {
        let id = format!("a{i:04}");
        let gray = render_thermal(seed.wrapping_mul(1_000_003).wrapping_add(2 * i as u64), width, height);
        let img = image::GrayImage::from_raw(width as u32, height as u32, gray).expect("buffer size");
        save(image::DynamicImage::ImageLuma8(img), &dir_a.join(format!("{id}.png")))?;
        writeln!(manifest, "{id}\tA").map_err(|e| Error::io(&manifest_path, e))?;
    }
    for i in 0..count {
        let id = format!("b{i:04}");
        let rgb = render_daylight(seed.wrapping_mul(1_000_003).wrapping_add(2 * i as u64 + 1), width, height);
        let img = image::RgbImage::from_raw(width as u32, height as u32, rgb).expect("buffer size");
        save(image::DynamicImage::ImageRgb8(img), &dir_b.join(format!("{id}.png")))?;
        writeln!(manifest, "{id}\tB").map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(())
}
