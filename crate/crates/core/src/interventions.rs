//! Block-mask interventions: complementary (disjoint occlusions per modality),
//! shared random occlusion, and whole-modality dropout.

use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    ComplementaryVi,
    ComplementaryIr,
    RandomShared,
    Dropout,
    /// Keeps everything; used to switch an intervention off.
    Identity,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::ComplementaryVi => "complementary_vi",
            MaskKind::ComplementaryIr => "complementary_ir",
            MaskKind::RandomShared => "random_shared",
            MaskKind::Dropout => "dropout",
            MaskKind::Identity => "identity",
        }
    }
}

/// Binary keep map (`1` keep, `0` occlude) with the blocks that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterventionMask {
    pub height: usize,
    pub width: usize,
    /// Row-major `[H, W]`.
    pub keep: Vec<u8>,
    /// `(row, col)` origins.
    pub blocks: Vec<(usize, usize)>,
    pub block_size: usize,
    pub kind: MaskKind,
}

impl InterventionMask {
    pub fn from_blocks(
        height: usize,
        width: usize,
        block_size: usize,
        blocks: Vec<(usize, usize)>,
        kind: MaskKind,
    ) -> Result<Self> {
        let mut keep = vec![1u8; height * width];
        for &(r, c) in &blocks {
            if r + block_size > height || c + block_size > width {
                return Err(Error::Size(format!(
                    "block at ({r}, {c}) of size {block_size} exceeds {width}x{height}"
                )));
            }
            for i in r..r + block_size {
                keep[i * width + c..i * width + c + block_size].fill(0);
            }
        }
        Ok(InterventionMask {
            height,
            width,
            keep,
            blocks,
            block_size,
            kind,
        })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        InterventionMask {
            height,
            width,
            keep: vec![1; height * width],
            blocks: Vec::new(),
            block_size: 0,
            kind: MaskKind::Identity,
        }
    }

    pub fn dropout(height: usize, width: usize) -> Self {
        InterventionMask {
            height,
            width,
            keep: vec![0; height * width],
            blocks: Vec::new(),
            block_size: 0,
            kind: MaskKind::Dropout,
        }
    }

    pub fn occluded_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k == 0).count()
    }

    pub fn occluded_fraction(&self) -> f64 {
        self.occluded_count() as f64 / (self.height * self.width) as f64
    }

    pub fn is_occluded(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.width + col] == 0
    }

    /// `[1, H, W]` keep map as floats.
    pub fn keep_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self
            .keep
            .iter()
            .map(|&k| if k == 1 { T::one() } else { T::zero() })
            .collect();
        Tensor::from_parts(vec![1, self.height, self.width], data)
    }

    /// True when no pixel is occluded by both masks.
    pub fn occlusion_disjoint(&self, other: &InterventionMask) -> bool {
        self.keep.len() == other.keep.len()
            && self
                .keep
                .iter()
                .zip(&other.keep)
                .all(|(&a, &b)| a == 1 || b == 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub block_size: usize,
    pub min_blocks: usize,
    pub max_blocks: usize,
    /// Random placement attempts per block before giving up.
    pub max_attempts: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            block_size: 16,
            min_blocks: 1,
            max_blocks: 6,
            max_attempts: 1000,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::config("block_size must be positive"));
        }
        if self.min_blocks == 0 || self.min_blocks > self.max_blocks {
            return Err(Error::config(format!(
                "mask count range {}..={} is invalid",
                self.min_blocks, self.max_blocks
            )));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts must be positive"));
        }
        Ok(())
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        if h < self.block_size || w < self.block_size {
            return Err(Error::Size(format!(
                "{w}x{h} cannot hold a {0}x{0} block",
                self.block_size
            )));
        }
        Ok(())
    }

    fn draw_count(&self, rng: &mut Rng) -> usize {
        rng.gen_range(self.min_blocks..=self.max_blocks)
    }
}

fn draw_origin(h: usize, w: usize, b: usize, rng: &mut Rng) -> (usize, usize) {
    (rng.gen_range(0..=h - b), rng.gen_range(0..=w - b))
}

/// Shared random occlusion: `n ~ U{min..=max}` blocks, overlaps allowed.
pub fn sample_block_mask(
    h: usize,
    w: usize,
    config: &MaskConfig,
    rng: &mut Rng,
) -> Result<InterventionMask> {
    config.check_dims(h, w)?;
    let n = config.draw_count(rng);
    let blocks = (0..n)
        .map(|_| draw_origin(h, w, config.block_size, rng))
        .collect();
    InterventionMask::from_blocks(h, w, config.block_size, blocks, MaskKind::RandomShared)
}

/// Occupancy of one modality's occlusion with O(1) block-overlap queries.
struct Occupancy {
    h: usize,
    w: usize,
    b: usize,
    grid: Vec<u8>,
}

impl Occupancy {
    fn new(h: usize, w: usize, b: usize) -> Self {
        Occupancy {
            h,
            w,
            b,
            grid: vec![0; h * w],
        }
    }

    fn mark(&mut self, (r, c): (usize, usize)) {
        for i in r..r + self.b {
            self.grid[i * self.w + c..i * self.w + c + self.b].fill(1);
        }
    }

    fn overlaps(&self, (r, c): (usize, usize)) -> bool {
        (r..r + self.b).any(|i| {
            self.grid[i * self.w + c..i * self.w + c + self.b]
                .iter()
                .any(|&v| v == 1)
        })
    }

    /// Every origin whose block avoids the occupied set (summed-area table scan).
    fn free_origins(&self) -> Vec<(usize, usize)> {
        let (h, w, b) = (self.h, self.w, self.b);
        let mut sat = vec![0u32; (h + 1) * (w + 1)];
        for i in 0..h {
            for j in 0..w {
                sat[(i + 1) * (w + 1) + j + 1] = self.grid[i * w + j] as u32
                    + sat[i * (w + 1) + j + 1]
                    + sat[(i + 1) * (w + 1) + j]
                    - sat[i * (w + 1) + j];
            }
        }
        let mut out = Vec::new();
        for r in 0..=h - b {
            for c in 0..=w - b {
                let s = sat[(r + b) * (w + 1) + c + b] + sat[r * (w + 1) + c]
                    - sat[r * (w + 1) + c + b]
                    - sat[(r + b) * (w + 1) + c];
                if s == 0 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    fn place_random(&self, attempts: usize, rng: &mut Rng) -> Option<(usize, usize)> {
        (0..attempts)
            .map(|_| draw_origin(self.h, self.w, self.b, rng))
            .find(|&o| !self.overlaps(o))
    }
}

/// Two masks whose occluded regions are pixel-disjoint, each with its own
/// block count drawn from the configured range.
///
/// The first visible and infrared blocks are mandatory: if the infrared block
/// cannot avoid the visible one (random tries, then an exhaustive scan), the
/// visible block is redrawn, up to `max_attempts` times. Further blocks are
/// placed alternately and dropped if `max_attempts` random tries all collide,
/// so on crowded canvases the realized count can fall below the drawn target.
pub fn sample_complementary_masks(
    h: usize,
    w: usize,
    config: &MaskConfig,
    rng: &mut Rng,
) -> Result<(InterventionMask, InterventionMask)> {
    config.check_dims(h, w)?;
    let b = config.block_size;
    let n_vi = config.draw_count(rng);
    let n_ir = config.draw_count(rng);

    let mut first = None;
    for _ in 0..config.max_attempts {
        let vi0 = draw_origin(h, w, b, rng);
        let mut occ_vi = Occupancy::new(h, w, b);
        occ_vi.mark(vi0);
        let ir0 = occ_vi.place_random(config.max_attempts, rng).or_else(|| {
            let free = occ_vi.free_origins();
            (!free.is_empty()).then(|| free[rng.gen_range(0..free.len())])
        });
        if let Some(ir0) = ir0 {
            first = Some((vi0, ir0, occ_vi));
            break;
        }
    }
    let (vi0, ir0, mut occ_vi) = first.ok_or_else(|| {
        Error::Sampling(format!(
            "no disjoint pair of {b}x{b} blocks found in {w}x{h} after {} attempts",
            config.max_attempts
        ))
    })?;
    let mut occ_ir = Occupancy::new(h, w, b);
    occ_ir.mark(ir0);
    let mut vi_blocks = vec![vi0];
    let mut ir_blocks = vec![ir0];

    for k in 1..n_vi.max(n_ir) {
        if k < n_vi {
            if let Some(o) = occ_ir.place_random(config.max_attempts, rng) {
                occ_vi.mark(o);
                vi_blocks.push(o);
            }
        }
        if k < n_ir {
            if let Some(o) = occ_vi.place_random(config.max_attempts, rng) {
                occ_ir.mark(o);
                ir_blocks.push(o);
            }
        }
    }
    Ok((
        InterventionMask::from_blocks(h, w, b, vi_blocks, MaskKind::ComplementaryVi)?,
        InterventionMask::from_blocks(h, w, b, ir_blocks, MaskKind::ComplementaryIr)?,
    ))
}

/// `image ⊙ keep`, broadcast over channels. Accepts `[C, H, W]` or `[N, C, H, W]`.
pub fn apply_mask<T: Element>(image: &Tensor<T>, mask: &InterventionMask) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() < 2 || s[s.len() - 2] != mask.height || s[s.len() - 1] != mask.width {
        return Err(Error::shape(format!(
            "image {s:?} does not match mask {}x{}",
            mask.width, mask.height
        )));
    }
    let hw = mask.height * mask.width;
    let mut out = image.clone();
    for plane in out.data_mut().chunks_mut(hw) {
        for (v, &k) in plane.iter_mut().zip(&mask.keep) {
            if k == 0 {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

/// Masks for one image: a complementary pair and a shared random mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterventionSet {
    pub comp_vi: InterventionMask,
    pub comp_ir: InterventionMask,
    pub random_shared: InterventionMask,
    pub seed: u64,
    /// When false the two dropout passes feed the unmodified inputs.
    pub dropout_enabled: bool,
}

impl InterventionSet {
    /// All masks keep everything and dropout is off.
    pub fn identity(h: usize, w: usize) -> Self {
        InterventionSet {
            comp_vi: InterventionMask::identity(h, w),
            comp_ir: InterventionMask::identity(h, w),
            random_shared: InterventionMask::identity(h, w),
            seed: 0,
            dropout_enabled: false,
        }
    }

    pub fn from_seed(h: usize, w: usize, config: &MaskConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let (comp_vi, comp_ir) = sample_complementary_masks(h, w, config, &mut rng)?;
        let random_shared = sample_block_mask(h, w, config, &mut rng)?;
        Ok(InterventionSet {
            comp_vi,
            comp_ir,
            random_shared,
            seed,
            dropout_enabled: true,
        })
    }

    pub fn height(&self) -> usize {
        self.comp_vi.height
    }

    pub fn width(&self) -> usize {
        self.comp_vi.width
    }

    pub fn is_disjoint(&self) -> bool {
        self.comp_vi.occlusion_disjoint(&self.comp_ir)
    }
}

/// Draws a per-set seed from `rng` and samples every mask from it, so each
/// set is reproducible from its recorded `seed` alone.
pub fn make_intervention_set(
    h: usize,
    w: usize,
    config: &MaskConfig,
    rng: &mut Rng,
) -> Result<InterventionSet> {
    let seed = rng.next_u64();
    InterventionSet::from_seed(h, w, config, seed)
}
