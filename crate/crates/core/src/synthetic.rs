//! Procedural registered pairs for smoke tests, demos and overfit checks.
//!
//! The visible image is a colored scene of discs and rectangles over a
//! gradient with fine texture. The infrared image follows the same geometry
//! (its luma) mixed with smooth hot spots, so the two modalities share edges
//! but differ in intensity where the hot spots sit.

use std::path::Path;

use rand::Rng as _;

use crate::data::{save_gray_png, save_rgb_png, Dataset, ImagePair};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    /// Weight of the hot-spot layer in the infrared image; 0 makes infrared
    /// equal to the visible luma.
    pub ir_contrast: f64,
    pub shapes: usize,
    pub hot_spots: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 128,
            width: 128,
            ir_contrast: 0.5,
            shapes: 6,
            hot_spots: 3,
        }
    }
}

pub fn synthetic_pair(id: impl Into<String>, seed: u64, p: &SceneParams) -> Result<ImagePair> {
    let (h, w) = (p.height, p.width);
    if h == 0 || w == 0 {
        return Err(Error::Size("synthetic scene needs a positive size".into()));
    }
    let mut rng = seeded(seed);
    let mut rgb = vec![[0.0f64; 3]; h * w];
    let base: [f64; 3] = [rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5)];
    let tilt: [f64; 2] = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
    let freq = rng.gen_range(0.3..0.8);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 / h as f64, j as f64 / w as f64);
            let tex = 0.04 * ((freq * i as f64).sin() * (freq * 1.3 * j as f64).cos());
            for c in 0..3 {
                rgb[i * w + j][c] = base[c] + tilt[0] * y + tilt[1] * x + tex;
            }
        }
    }
    for _ in 0..p.shapes {
        let color: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let size = rng.gen_range(0.08..0.25) * h.min(w) as f64;
        let disc = rng.gen_bool(0.5);
        for i in 0..h {
            for j in 0..w {
                let (dy, dx) = (i as f64 - cy, j as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= size * size
                } else {
                    dy.abs() <= size && dx.abs() <= 0.6 * size
                };
                if inside {
                    rgb[i * w + j] = color;
                }
            }
        }
    }
    let mut heat = vec![0.0f64; h * w];
    for _ in 0..p.hot_spots {
        let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let s = rng.gen_range(0.05..0.15) * h.min(w) as f64;
        let amp = rng.gen_range(0.6..1.0);
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                heat[i * w + j] += amp * (-d2 / (2.0 * s * s)).exp();
            }
        }
    }
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let mut vis = vec![0.0f64; 3 * h * w];
    let mut ir = vec![0.0f64; h * w];
    for k in 0..h * w {
        let [r, g, b] = rgb[k].map(clamp);
        vis[k] = r;
        vis[h * w + k] = g;
        vis[2 * h * w + k] = b;
        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
        ir[k] = clamp((1.0 - p.ir_contrast) * luma + p.ir_contrast * heat[k].min(1.0));
    }
    ImagePair::new(
        id,
        Tensor::from_f64(vec![3, h, w], &vis)?,
        Tensor::from_f64(vec![1, h, w], &ir)?,
    )
}

/// `n` pairs with ids `<name>_000`, ... each seeded from `(seed, index)`.
pub fn synthetic_dataset(name: &str, n: usize, seed: u64, p: &SceneParams) -> Result<Dataset> {
    let pairs = (0..n)
        .map(|i| synthetic_pair(format!("{name}_{i:03}"), derive_seed(seed, i as u64, 0), p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_pairs(name, pairs))
}

/// Writes `<dir>/vi/<id>.png` and `<dir>/ir/<id>.png` for every pair, the
/// layout `Dataset::load_dir` scans.
pub fn write_dataset_dir(dir: &Path, pairs: &[ImagePair]) -> Result<()> {
    for sub in ["vi", "ir"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for p in pairs {
        save_rgb_png(&dir.join("vi").join(format!("{}.png", p.id)), &p.visible)?;
        save_gray_png(&dir.join("ir").join(format!("{}.png", p.id)), &p.infrared)?;
    }
    Ok(())
}
