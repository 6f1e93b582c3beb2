//! Fusion quality metrics on 8-bit-scale single-channel images.
//!
//! Inputs are `[H, W]` or `[1, H, W]` tensors with values in `[0, 255]`.
//! `f` is the fused image, `a` and `b` the two sources.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::kernels::reflect_index;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::FusionNet;
use crate::tensor::{Element, Tensor};

/// PSNR reported when the mean squared error vanishes.
pub const PSNR_CAP: f64 = 100.0;

const QG: (f64, f64, f64) = (0.9994, -15.0, 0.5);
const QA: (f64, f64, f64) = (0.9879, -22.0, 0.8);

struct Plane<'a> {
    d: &'a [f64],
    h: usize,
    w: usize,
}

impl<'a> Plane<'a> {
    fn of(t: &'a Tensor<f64>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [h, w] | [1, h, w] => (*h, *w),
            _ => return Err(Error::shape(format!("expected [H, W] or [1, H, W], got {s:?}"))),
        };
        if h == 0 || w == 0 {
            return Err(Error::shape("empty image"));
        }
        Ok(Plane { d: t.data(), h, w })
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.w + j]
    }

    fn at_reflect(&self, i: isize, j: isize) -> f64 {
        self.at(reflect_index(i, self.h), reflect_index(j, self.w))
    }
}

fn planes<'a>(ts: [&'a Tensor<f64>; 3]) -> Result<[Plane<'a>; 3]> {
    let [f, a, b] = ts.map(Plane::of);
    let (f, a, b) = (f?, a?, b?);
    if (f.h, f.w) != (a.h, a.w) || (f.h, f.w) != (b.h, b.w) {
        return Err(Error::shape(format!(
            "metric inputs differ in size: {}x{}, {}x{}, {}x{}",
            f.w, f.h, a.w, a.h, b.w, b.h
        )));
    }
    Ok([f, a, b])
}

/// Mean of `sqrt((dx^2 + dy^2) / 2)` over pixels that have both forward neighbours.
pub fn ag(f: &Tensor<f64>) -> Result<f64> {
    let p = Plane::of(f)?;
    if p.h < 2 || p.w < 2 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in 0..p.h - 1 {
        for j in 0..p.w - 1 {
            let dx = p.at(i, j + 1) - p.at(i, j);
            let dy = p.at(i + 1, j) - p.at(i, j);
            acc += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(acc / ((p.h - 1) * (p.w - 1)) as f64)
}

/// `sqrt(RF^2 + CF^2)` from mean squared horizontal and vertical differences.
pub fn sf(f: &Tensor<f64>) -> Result<f64> {
    let p = Plane::of(f)?;
    let mut rf = 0.0;
    for i in 0..p.h {
        for j in 1..p.w {
            rf += (p.at(i, j) - p.at(i, j - 1)).powi(2);
        }
    }
    let mut cf = 0.0;
    for i in 1..p.h {
        for j in 0..p.w {
            cf += (p.at(i, j) - p.at(i - 1, j)).powi(2);
        }
    }
    let rf = if p.w > 1 { rf / (p.h * (p.w - 1)) as f64 } else { 0.0 };
    let cf = if p.h > 1 { cf / ((p.h - 1) * p.w) as f64 } else { 0.0 };
    Ok((rf + cf).sqrt())
}

fn mse(x: &Plane, y: &Plane) -> f64 {
    x.d.iter().zip(y.d).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.d.len() as f64
}

/// `10 log10(255^2 / mean(MSE(f, a), MSE(f, b)))`, capped at [`PSNR_CAP`].
pub fn psnr(f: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let [f, a, b] = planes([f, a, b])?;
    let m = (mse(&f, &a) + mse(&f, &b)) / 2.0;
    let peak = 255.0f64 * 255.0;
    if m < peak * 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (peak / m).log10())
}

fn pearson(x: &Plane, y: &Plane) -> f64 {
    let n = x.d.len() as f64;
    let mx = x.d.iter().sum::<f64>() / n;
    let my = y.d.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.d.iter().zip(y.d) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Mean Pearson correlation of `f` with each source; a constant image correlates as 0.
pub fn cc(f: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let [f, a, b] = planes([f, a, b])?;
    Ok((pearson(&f, &a) + pearson(&f, &b)) / 2.0)
}

/// Sobel magnitude and orientation with reflect-padded borders.
fn sobel(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let mut g = Vec::with_capacity(p.h * p.w);
    let mut alpha = Vec::with_capacity(p.h * p.w);
    for i in 0..p.h as isize {
        for j in 0..p.w as isize {
            let v = |di: isize, dj: isize| p.at_reflect(i + di, j + dj);
            let sx = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
            let sy = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
            g.push((sx * sx + sy * sy).sqrt());
            alpha.push(if sx == 0.0 { FRAC_PI_2 } else { (sy / sx).atan() });
        }
    }
    (g, alpha)
}

fn preservation(gs: f64, as_: f64, gf: f64, af: f64) -> f64 {
    let rel = if gs == 0.0 || gf == 0.0 {
        0.0
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    let orient = 1.0 - (as_ - af).abs() / FRAC_PI_2;
    let qg = QG.0 / (1.0 + (QG.1 * (rel - QG.2)).exp());
    let qa = QA.0 / (1.0 + (QA.1 * (orient - QA.2)).exp());
    qg * qa
}

/// Edge-strength and orientation preservation (Xydeas–Petrović), weighted
/// by the sources' Sobel magnitudes.
pub fn qabf(f: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let [f, a, b] = planes([f, a, b])?;
    let (gf, af) = sobel(&f);
    let (ga, aa) = sobel(&a);
    let (gb, ab) = sobel(&b);
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..gf.len() {
        num += preservation(ga[k], aa[k], gf[k], af[k]) * ga[k]
            + preservation(gb[k], ab[k], gf[k], af[k]) * gb[k];
        den += ga[k] + gb[k];
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// Largest value [`qabf`] can reach: both preservation terms saturated.
pub fn qabf_ceiling() -> f64 {
    preservation(1.0, 0.0, 1.0, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "AG")]
    pub ag: f64,
    #[serde(rename = "SF")]
    pub sf: f64,
    #[serde(rename = "PSNR")]
    pub psnr: f64,
    #[serde(rename = "CC")]
    pub cc: f64,
    #[serde(rename = "Qabf")]
    pub qabf: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["AG", "SF", "PSNR", "CC", "Qabf"];

    pub fn compute(f: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Self> {
        Ok(Metrics {
            ag: ag(f)?,
            sf: sf(f)?,
            psnr: psnr(f, a, b)?,
            cc: cc(f, a, b)?,
            qabf: qabf(f, a, b)?,
        })
    }

    pub fn values(&self) -> [f64; 5] {
        [self.ag, self.sf, self.psnr, self.cc, self.qabf]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| self.values()[i])
    }

    fn mean_of(rows: &[Metrics]) -> Metrics {
        let n = rows.len() as f64;
        let mut s = [0.0; 5];
        for r in rows {
            for (acc, v) in s.iter_mut().zip(r.values()) {
                *acc += v;
            }
        }
        Metrics {
            ag: s[0] / n,
            sf: s[1] / n,
            psnr: s[2] / n,
            cc: s[3] / n,
            qabf: s[4] / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub checkpoint: Option<String>,
    pub timestamp: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: Metrics,
    pub meta: ReportMeta,
}

impl MetricReport {
    /// Rows are sorted by id. Errors on an empty input.
    pub fn from_rows(mut rows: Vec<MetricRow>, meta: ReportMeta) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dataset(format!(
                "no image pairs to evaluate in {:?}",
                meta.dataset
            )));
        }
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let all: Vec<Metrics> = rows.iter().map(|r| r.metrics).collect();
        Ok(MetricReport {
            mean: Metrics::mean_of(&all),
            rows,
            meta,
        })
    }

    pub const CSV_HEADER: &'static str = "id,AG,SF,PSNR,CC,Qabf";

    /// Header, one row per image, and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        let mut line = |id: &str, m: &Metrics| {
            let v = m.values();
            let _ = writeln!(out, "{id},{},{},{},{},{}", v[0], v[1], v[2], v[3], v[4]);
        };
        for r in &self.rows {
            line(&r.id, &r.metrics);
        }
        line("mean", &self.mean);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.id.len())
            .max()
            .unwrap_or(0)
            .max(4);
        let mut out = format!("{:<width$}", "id");
        for n in Metrics::NAMES {
            let _ = write!(out, " {n:>10}");
        }
        out.push('\n');
        let mut line = |id: &str, m: &Metrics| {
            let _ = write!(out, "{id:<width$}");
            for v in m.values() {
                let _ = write!(out, " {v:>10.4}");
            }
            out.push('\n');
        };
        for r in &self.rows {
            line(&r.id, &r.metrics);
        }
        line("mean", &self.mean);
        out
    }
}

/// Converts a `[0, 1]` map of any element type to the 255 scale in f64.
pub fn to_255<T: Element>(t: &Tensor<T>) -> Tensor<f64> {
    t.cast::<f64>().map(|v| v * 255.0)
}

/// Metrics of already-fused images; each item is `(id, fused, vi_luma, ir)` in `[0, 1]`.
pub fn evaluate_fused(
    items: &[(String, Tensor<f32>, Tensor<f32>, Tensor<f32>)],
    meta: ReportMeta,
) -> Result<MetricReport> {
    let rows = items
        .par_iter()
        .map(|(id, f, a, b)| {
            Ok(MetricRow {
                id: id.clone(),
                metrics: Metrics::compute(&to_255(f), &to_255(a), &to_255(b))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_rows(rows, meta)
}

/// Fuses every pair with `net` and scores the result against its sources.
pub fn evaluate_model<T: Element>(
    net: &FusionNet<T>,
    dataset: &Dataset,
    checkpoint: Option<String>,
) -> Result<MetricReport> {
    let meta = ReportMeta {
        dataset: dataset.name().to_string(),
        checkpoint,
        timestamp: None,
    };
    if dataset.is_empty() {
        return Err(Error::Dataset(format!("dataset {} is empty", dataset.name())));
    }
    let mut items = Vec::with_capacity(dataset.len());
    for pair in dataset.iter() {
        let vi = pair.visible_luma();
        let fused = net.fuse(&vi.cast(), &pair.infrared.cast())?.cast::<f32>();
        items.push((pair.id.clone(), fused, vi, pair.infrared.clone()));
    }
    evaluate_fused(&items, meta)
}
