//! Average treatment effect of each intervention on fusion quality:
//! `ATE(t) = mean_i [Q(f(I_i)) - Q(f(M_t(I_i)))]`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImagePair};
use crate::error::{Error, Result};
use crate::interventions::{apply_mask, InterventionMask, InterventionSet, MaskConfig};
use crate::metrics::{cc, psnr, to_255};
use crate::model::FusionNet;
use crate::rng::derive_seed;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intervention {
    Baseline,
    Complementary,
    Random,
    IrDropout,
    ViDropout,
}

impl Intervention {
    pub const TREATMENTS: [Intervention; 4] = [
        Intervention::Complementary,
        Intervention::Random,
        Intervention::IrDropout,
        Intervention::ViDropout,
    ];

    pub fn index(self) -> u8 {
        match self {
            Intervention::Baseline => 0,
            Intervention::Complementary => 1,
            Intervention::Random => 2,
            Intervention::IrDropout => 3,
            Intervention::ViDropout => 4,
        }
    }

    pub fn from_index(t: u8) -> Result<Self> {
        Ok(match t {
            0 => Intervention::Baseline,
            1 => Intervention::Complementary,
            2 => Intervention::Random,
            3 => Intervention::IrDropout,
            4 => Intervention::ViDropout,
            other => {
                return Err(Error::config(format!(
                    "unknown intervention t = {other} (expected 0..=4)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Intervention::Baseline => "baseline",
            Intervention::Complementary => "complementary",
            Intervention::Random => "random",
            Intervention::IrDropout => "ir_dropout",
            Intervention::ViDropout => "vi_dropout",
        }
    }

    /// Applies the intervention to `[1, H, W]` visible-luma and infrared maps.
    pub fn apply<T: Element>(
        self,
        vi: &Tensor<T>,
        ir: &Tensor<T>,
        set: &InterventionSet,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok(match self {
            Intervention::Baseline => (vi.clone(), ir.clone()),
            Intervention::Complementary => {
                (apply_mask(vi, &set.comp_vi)?, apply_mask(ir, &set.comp_ir)?)
            }
            Intervention::Random => (
                apply_mask(vi, &set.random_shared)?,
                apply_mask(ir, &set.random_shared)?,
            ),
            Intervention::IrDropout => (
                vi.clone(),
                apply_mask(ir, &InterventionMask::dropout(set.height(), set.width()))?,
            ),
            Intervention::ViDropout => (
                apply_mask(vi, &InterventionMask::dropout(set.height(), set.width()))?,
                ir.clone(),
            ),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quality {
    #[serde(rename = "PSNR")]
    Psnr,
    #[serde(rename = "CC")]
    Cc,
}

impl Quality {
    pub const ALL: [Quality; 2] = [Quality::Psnr, Quality::Cc];

    pub fn name(self) -> &'static str {
        match self {
            Quality::Psnr => "PSNR",
            Quality::Cc => "CC",
        }
    }

    /// Scores a fused map against its sources; all three on the 255 scale.
    pub fn score(self, f: &Tensor<f64>, vi: &Tensor<f64>, ir: &Tensor<f64>) -> Result<f64> {
        match self {
            Quality::Psnr => psnr(f, vi, ir),
            Quality::Cc => cc(f, vi, ir),
        }
    }
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "psnr" => Ok(Quality::Psnr),
            "cc" => Ok(Quality::Cc),
            other => Err(Error::config(format!(
                "unknown quality metric {other:?} (expected psnr or cc)"
            ))),
        }
    }
}

/// Per-sample deltas and their mean for one intervention and metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub ate: f64,
    pub n: usize,
    pub deltas: Vec<f64>,
}

/// Mean of `baseline[i] - intervened[i]`.
pub fn ate_from_scores(baseline: &[f64], intervened: &[f64]) -> Result<AteEstimate> {
    if baseline.len() != intervened.len() {
        return Err(Error::shape(format!(
            "{} baseline scores but {} intervened scores",
            baseline.len(),
            intervened.len()
        )));
    }
    if baseline.is_empty() {
        return Err(Error::Dataset("cannot estimate an ATE from zero samples".into()));
    }
    let deltas: Vec<f64> = baseline.iter().zip(intervened).map(|(b, i)| b - i).collect();
    Ok(AteEstimate {
        ate: deltas.iter().sum::<f64>() / deltas.len() as f64,
        n: deltas.len(),
        deltas,
    })
}

fn id_hash(id: &str) -> u64 {
    // FNV-1a: stable across platforms and runs.
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Mask seed for one (image, seed, intervention) triple.
pub fn mask_seed(id: &str, seed: u64, t: Intervention) -> u64 {
    derive_seed(seed, id_hash(id), t.index() as u64)
}

/// Fused `[1, H, W]` output under intervention `t`, plus the unmasked sources,
/// all on the 255 scale.
fn fused_under<T: Element>(
    net: &FusionNet<T>,
    pair: &ImagePair,
    t: Intervention,
    seed: u64,
    masks: &MaskConfig,
) -> Result<[Tensor<f64>; 3]> {
    let vi = pair.visible_luma();
    let ir = pair.infrared.clone();
    let (h, w) = (pair.height(), pair.width());
    let set = match t {
        Intervention::Complementary | Intervention::Random => {
            InterventionSet::from_seed(h, w, masks, mask_seed(&pair.id, seed, t))?
        }
        _ => InterventionSet::identity(h, w),
    };
    let (vi_t, ir_t) = t.apply(&vi, &ir, &set)?;
    let fused = net.fuse(&vi_t.cast(), &ir_t.cast())?;
    Ok([to_255(&fused), to_255(&vi), to_255(&ir)])
}

/// ATE of `t` on `dataset` with a caller-supplied quality functional.
pub fn estimate_ate_with<T: Element>(
    net: &FusionNet<T>,
    dataset: &Dataset,
    t: Intervention,
    seed: u64,
    masks: &MaskConfig,
    quality: &(dyn Fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<f64> + Sync),
) -> Result<AteEstimate> {
    if dataset.is_empty() {
        return Err(Error::Dataset(format!("dataset {} is empty", dataset.name())));
    }
    let pairs: Vec<&ImagePair> = dataset.iter().collect();
    let scores = pairs
        .par_iter()
        .map(|pair| {
            let [fb, vi, ir] = fused_under(net, pair, Intervention::Baseline, seed, masks)?;
            let base = quality(&fb, &vi, &ir)?;
            let treated = if t == Intervention::Baseline {
                base
            } else {
                let [ft, vi, ir] = fused_under(net, pair, t, seed, masks)?;
                quality(&ft, &vi, &ir)?
            };
            Ok((base, treated))
        })
        .collect::<Result<Vec<_>>>()?;
    let (b, i): (Vec<f64>, Vec<f64>) = scores.into_iter().unzip();
    ate_from_scores(&b, &i)
}

pub fn estimate_ate<T: Element>(
    net: &FusionNet<T>,
    dataset: &Dataset,
    t: Intervention,
    quality: Quality,
    seed: u64,
    masks: &MaskConfig,
) -> Result<AteEstimate> {
    estimate_ate_with(net, dataset, t, seed, masks, &|f, a, b| quality.score(f, a, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteRow {
    pub t: u8,
    pub intervention: Intervention,
    pub metric: Quality,
    /// Mean over all (seed, image) deltas.
    pub ate: f64,
    /// Standard deviation of the per-seed ATEs (population form).
    pub std_across_seeds: f64,
    pub per_seed: Vec<f64>,
    pub n: usize,
    /// Seed-major: all images for the first seed, then the next.
    pub deltas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub dataset: String,
    pub seeds: Vec<u64>,
    /// Mean baseline quality per metric.
    pub baseline: Vec<(Quality, f64)>,
    /// Four interventions by two metrics.
    pub rows: Vec<AteRow>,
    /// `t = 0` rows, identically zero.
    pub sanity: Vec<AteRow>,
}

/// Every treatment under both metrics and all seeds. Baseline fusions are
/// computed once per image and shared.
pub fn run_ate_suite<T: Element>(
    net: &FusionNet<T>,
    dataset: &Dataset,
    seeds: &[u64],
    masks: &MaskConfig,
) -> Result<AteReport> {
    if dataset.is_empty() {
        return Err(Error::Dataset(format!("dataset {} is empty", dataset.name())));
    }
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let pairs: Vec<&ImagePair> = dataset.iter().collect();
    let base: Vec<[f64; 2]> = pairs
        .par_iter()
        .map(|p| {
            let [f, vi, ir] = fused_under(net, p, Intervention::Baseline, 0, masks)?;
            Ok([Quality::Psnr.score(&f, &vi, &ir)?, Quality::Cc.score(&f, &vi, &ir)?])
        })
        .collect::<Result<_>>()?;
    let n = pairs.len();
    let baseline = Quality::ALL
        .iter()
        .enumerate()
        .map(|(q, &m)| (m, base.iter().map(|b| b[q]).sum::<f64>() / n as f64))
        .collect();

    let mut rows = Vec::new();
    for t in Intervention::TREATMENTS {
        // Seeds do not affect dropout, but every seed is still evaluated so
        // the row layout is uniform.
        let mut per_metric: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        for &seed in seeds {
            let treated: Vec<[f64; 2]> = pairs
                .par_iter()
                .map(|p| {
                    let [f, vi, ir] = fused_under(net, p, t, seed, masks)?;
                    Ok([Quality::Psnr.score(&f, &vi, &ir)?, Quality::Cc.score(&f, &vi, &ir)?])
                })
                .collect::<Result<_>>()?;
            for q in 0..2 {
                let b: Vec<f64> = base.iter().map(|s| s[q]).collect();
                let i: Vec<f64> = treated.iter().map(|s| s[q]).collect();
                per_metric[q].push(ate_from_scores(&b, &i)?.deltas);
            }
        }
        for (q, metric) in Quality::ALL.into_iter().enumerate() {
            rows.push(summarize(t, metric, &per_metric[q]));
        }
    }
    let zeros = vec![vec![0.0; n]; seeds.len()];
    let sanity = Quality::ALL
        .into_iter()
        .map(|m| summarize(Intervention::Baseline, m, &zeros))
        .collect();
    Ok(AteReport {
        dataset: dataset.name().to_string(),
        seeds: seeds.to_vec(),
        baseline,
        rows,
        sanity,
    })
}

fn summarize(t: Intervention, metric: Quality, per_seed_deltas: &[Vec<f64>]) -> AteRow {
    let per_seed: Vec<f64> = per_seed_deltas
        .iter()
        .map(|d| d.iter().sum::<f64>() / d.len() as f64)
        .collect();
    let deltas: Vec<f64> = per_seed_deltas.concat();
    let ate = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let mean_seed = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let var = per_seed.iter().map(|a| (a - mean_seed).powi(2)).sum::<f64>() / per_seed.len() as f64;
    AteRow {
        t: t.index(),
        intervention: t,
        metric,
        ate,
        std_across_seeds: var.sqrt(),
        per_seed,
        n: deltas.len(),
        deltas,
    }
}

impl AteReport {
    pub fn row(&self, t: Intervention, metric: Quality) -> Option<&AteRow> {
        self.rows
            .iter()
            .chain(&self.sanity)
            .find(|r| r.intervention == t && r.metric == metric)
    }

    pub const CSV_HEADER: &'static str = "t,intervention,metric,ate,std,n";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in self.sanity.iter().chain(&self.rows) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.t,
                r.intervention.name(),
                r.metric.name(),
                r.ate,
                r.std_across_seeds,
                r.n
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One panel per metric, one bar per intervention; bars grow up for
    /// positive ATE (quality lost) and down for negative.
    pub fn save_chart(&self, path: &Path) -> Result<()> {
        let (pw, ph, margin) = (320u32, 200u32, 20u32);
        let colors = [
            Rgb([70, 130, 180]),
            Rgb([120, 180, 90]),
            Rgb([220, 120, 60]),
            Rgb([190, 70, 90]),
        ];
        let mut img = RgbImage::from_pixel(pw * 2, ph, Rgb([255, 255, 255]));
        for (panel, metric) in Quality::ALL.into_iter().enumerate() {
            let vals: Vec<f64> = Intervention::TREATMENTS
                .iter()
                .map(|&t| self.row(t, metric).map_or(0.0, |r| r.ate))
                .collect();
            let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            let x0 = panel as u32 * pw;
            let mid = ph / 2;
            let half = (mid - margin) as f64;
            for x in x0 + margin..x0 + pw - margin {
                img.put_pixel(x, mid, Rgb([0, 0, 0]));
            }
            let bw = (pw - 2 * margin) / 4;
            for (k, v) in vals.iter().enumerate() {
                let len = (v.abs() / scale * half).round() as u32;
                let (top, bottom) = if *v >= 0.0 { (mid - len, mid) } else { (mid, mid + len) };
                let left = x0 + margin + k as u32 * bw + bw / 6;
                for x in left..left + bw * 2 / 3 {
                    for y in top..bottom.max(top + 1) {
                        img.put_pixel(x, y, colors[k]);
                    }
                }
            }
        }
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}
