//! Training objective: fidelity to both sources, gate-weighted consistency
//! under masking interventions, and distance from single-modality fusions.
//!
//! All L1 terms are mean-reduced. Every function here builds on a [`Tape`] so
//! the same code serves the trainer, the gradient checks and the tensor-level
//! helpers at the bottom of the file.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::BundleVars;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NecessityMode {
    /// Minimize the L1 distance to each single-modality fusion.
    AsWritten,
    /// Hinge `max(0, margin - d)` on each distance, pushing the baseline away.
    MaximizeMargin,
}

impl FromStr for NecessityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_written" => Ok(NecessityMode::AsWritten),
            "maximize_margin" => Ok(NecessityMode::MaximizeMargin),
            other => Err(Error::config(format!(
                "unknown necessity mode {other:?} (expected as_written or maximize_margin)"
            ))),
        }
    }
}

impl fmt::Display for NecessityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NecessityMode::AsWritten => "as_written",
            NecessityMode::MaximizeMargin => "maximize_margin",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub eta: f64,
    pub nec_mode: NecessityMode,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.05,
            lambda1: 1.0,
            eta: 0.3,
            nec_mode: NecessityMode::AsWritten,
            margin: 0.1,
        }
    }
}

/// Scalar loss components of one step, with the weights that combined them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub fidelity: f64,
    /// Includes `reg`.
    pub inv: f64,
    pub nec: f64,
    pub reg: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub eta: f64,
}

impl LossBreakdown {
    pub fn recomposed(&self) -> f64 {
        self.fidelity + self.alpha * self.inv + self.beta * self.nec
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.fidelity, self.inv, self.nec, self.reg]
            .iter()
            .all(|v| v.is_finite())
    }

    pub const LOG_HEADER: &'static str = "step fidelity inv nec reg total";

    /// `step fidelity inv nec reg total`, space separated.
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "{step} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
            self.fidelity, self.inv, self.nec, self.reg, self.total
        )
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} fidelity={} inv={} nec={} reg={} (alpha={}, beta={}, lambda1={}, eta={})",
            self.total,
            self.fidelity,
            self.inv,
            self.nec,
            self.reg,
            self.alpha,
            self.beta,
            self.lambda1,
            self.eta
        )
    }
}

fn same_shape<T: Element>(tape: &Tape<T>, vars: &[Var], what: &str) -> Result<()> {
    let s = tape.shape(vars[0]);
    if let Some(v) = vars[1..].iter().find(|&&v| tape.shape(v) != s) {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            s,
            tape.shape(*v)
        )));
    }
    Ok(())
}

/// 5-point Laplacian with reflect-padded borders on `[N, 1, H, W]`.
pub fn laplacian<T: Element>(tape: &mut Tape<T>, x: Var) -> Var {
    let kernel = Tensor::from_f64(
        vec![1, 1, 3, 3],
        &[0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
    )
    .expect("3x3 kernel");
    let k = tape.constant(kernel);
    let padded = tape.pad_reflect(x, 1, 1, 1, 1);
    tape.conv2d(padded, k, None, 1, 0)
}

fn mean_abs_diff<T: Element>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    tape.mean_all(d)
}

/// `mean|f - vi| + mean|f - ir| + lambda1 * mean|lap f - max(lap vi, lap ir)|`.
pub fn fidelity<T: Element>(
    tape: &mut Tape<T>,
    fused: Var,
    vi: Var,
    ir: Var,
    lambda1: f64,
) -> Result<Var> {
    same_shape(tape, &[fused, vi, ir], "fidelity")?;
    let a = mean_abs_diff(tape, fused, vi);
    let b = mean_abs_diff(tape, fused, ir);
    let lf = laplacian(tape, fused);
    let lv = laplacian(tape, vi);
    let li = laplacian(tape, ir);
    let target = tape.maximum(lv, li);
    let g = mean_abs_diff(tape, lf, target);
    let g = tape.scale(g, lambda1);
    let ab = tape.add(a, b);
    Ok(tape.add(ab, g))
}

/// Bilinearly upsamples the coarser gates to the first gate's resolution and averages.
pub fn aggregate_gates<T: Element>(tape: &mut Tape<T>, gates: [Var; 3]) -> Result<Var> {
    let s1 = tape.shape(gates[0]).to_vec();
    if s1.len() != 4 || s1[1] != 1 {
        return Err(Error::shape(format!("gate must be [N, 1, H, W], got {s1:?}")));
    }
    let mut acc = gates[0];
    for (k, &g) in gates[1..].iter().enumerate() {
        let s = tape.shape(g).to_vec();
        let f = 1 << (k + 1);
        if s.len() != 4 || s[0] != s1[0] || s[1] != 1 || s[2] * f != s1[2] || s[3] * f != s1[3] {
            return Err(Error::shape(format!(
                "gate {} has shape {s:?}, expected 1/{f} of {s1:?}",
                k + 2
            )));
        }
        let up = tape.resize_bilinear(g, s1[2], s1[3]);
        acc = tape.add(acc, up);
    }
    Ok(tape.scale(acc, 1.0 / 3.0))
}

/// Per image `|mean(g) - eta| - H(g)`, with `H` the entropy of `g` normalized
/// to a spatial distribution; averaged over the batch.
pub fn gate_regularizer<T: Element>(tape: &mut Tape<T>, gbar: Var, eta: f64) -> Var {
    let m = tape.mean_per_sample(gbar);
    let dev = tape.affine(m, 1.0, -eta);
    let dev = tape.abs(dev);
    let s = tape.sum_per_sample(gbar);
    let glg = tape.xlogx(gbar);
    let sglg = tape.sum_per_sample(glg);
    let ln_s = tape.ln(s);
    let ratio = tape.div(sglg, s);
    let entropy = tape.sub(ln_s, ratio);
    let r = tape.sub(dev, entropy);
    tape.mean_all(r)
}

/// Returns `(consistency including the regularizer, regularizer)`.
pub fn intervention_consistency<T: Element>(
    tape: &mut Tape<T>,
    fused: Var,
    comp: Var,
    random: Var,
    gbar: Var,
    eta: f64,
) -> Result<(Var, Var)> {
    same_shape(tape, &[fused, comp, random, gbar], "intervention consistency")?;
    let mut acc = None;
    for j in [comp, random] {
        let d = tape.sub(j, fused);
        let w = tape.mul(d, gbar);
        let a = tape.abs(w);
        let m = tape.mean_all(a);
        acc = Some(match acc {
            None => m,
            Some(prev) => tape.add(prev, m),
        });
    }
    let reg = gate_regularizer(tape, gbar, eta);
    let total = tape.add(acc.expect("two terms"), reg);
    Ok((total, reg))
}

pub fn modal_necessity<T: Element>(
    tape: &mut Tape<T>,
    fused: Var,
    drop_ir: Var,
    drop_vi: Var,
    mode: NecessityMode,
    margin: f64,
) -> Result<Var> {
    same_shape(tape, &[fused, drop_ir, drop_vi], "modal necessity")?;
    let a = mean_abs_diff(tape, fused, drop_ir);
    let b = mean_abs_diff(tape, fused, drop_vi);
    Ok(match mode {
        NecessityMode::AsWritten => tape.add(a, b),
        NecessityMode::MaximizeMargin => {
            let ha = tape.affine(a, -1.0, margin);
            let ha = tape.relu(ha);
            let hb = tape.affine(b, -1.0, margin);
            let hb = tape.relu(hb);
            tape.add(ha, hb)
        }
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub fidelity: Var,
    pub inv: Var,
    pub nec: Var,
    pub reg: Var,
    pub gbar: Var,
}

impl LossVars {
    pub fn breakdown<T: Element>(&self, tape: &Tape<T>, w: &LossWeights) -> LossBreakdown {
        LossBreakdown {
            total: tape.item(self.total).f64(),
            fidelity: tape.item(self.fidelity).f64(),
            inv: tape.item(self.inv).f64(),
            nec: tape.item(self.nec).f64(),
            reg: tape.item(self.reg).f64(),
            alpha: w.alpha,
            beta: w.beta,
            lambda1: w.lambda1,
            eta: w.eta,
        }
    }
}

/// `fidelity + alpha * inv + beta * nec` using the baseline pass's gates.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    bundle: &BundleVars,
    vi: Var,
    ir: Var,
    w: &LossWeights,
) -> Result<LossVars> {
    let fid = fidelity(tape, bundle.baseline, vi, ir, w.lambda1)?;
    let g = aggregate_gates(tape, bundle.gates)?;
    let gs = tape.shape(g).to_vec();
    let gbar = if gs[2] != bundle.height || gs[3] != bundle.width {
        tape.crop(g, 0, 0, bundle.height, bundle.width)
    } else {
        g
    };
    let (inv, reg) =
        intervention_consistency(tape, bundle.baseline, bundle.comp, bundle.random, gbar, w.eta)?;
    let nec = modal_necessity(
        tape,
        bundle.baseline,
        bundle.drop_ir,
        bundle.drop_vi,
        w.nec_mode,
        w.margin,
    )?;
    let a = tape.scale(inv, w.alpha);
    let b = tape.scale(nec, w.beta);
    let fa = tape.add(fid, a);
    let total = tape.add(fa, b);
    Ok(LossVars {
        total,
        fidelity: fid,
        inv,
        nec,
        reg,
        gbar,
    })
}

/// Evaluates a tape expression over constant inputs.
fn eval<T: Element>(
    inputs: &[&Tensor<T>],
    f: impl FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(as_nchw(t))).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// `[H, W]` and `[C, H, W]` inputs become `[1, C, H, W]`.
fn as_nchw<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let shape = match s.len() {
        2 => vec![1, 1, s[0], s[1]],
        3 => vec![1, s[0], s[1], s[2]],
        _ => s.to_vec(),
    };
    t.clone().reshape(shape).expect("same element count")
}

/// Tensor-level Laplacian of a `[1, H, W]` image.
pub fn laplacian_map<T: Element>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = img.shape().to_vec();
    eval(&[img], |t, v| Ok(laplacian(t, v[0])))?.reshape(shape)
}

pub fn fidelity_value<T: Element>(
    fused: &Tensor<T>,
    vi: &Tensor<T>,
    ir: &Tensor<T>,
    lambda1: f64,
) -> Result<f64> {
    Ok(eval(&[fused, vi, ir], |t, v| fidelity(t, v[0], v[1], v[2], lambda1))?.data()[0].f64())
}

/// Aggregate of `[1, H, W]`, `[1, H/2, W/2]`, `[1, H/4, W/4]` gates as `[1, H, W]`.
pub fn aggregate_gate_maps<T: Element>(
    g1: &Tensor<T>,
    g2: &Tensor<T>,
    g3: &Tensor<T>,
) -> Result<Tensor<T>> {
    let shape = g1.shape().to_vec();
    eval(&[g1, g2, g3], |t, v| aggregate_gates(t, [v[0], v[1], v[2]]))?.reshape(shape)
}

pub fn gate_regularizer_value<T: Element>(gbar: &Tensor<T>, eta: f64) -> Result<f64> {
    Ok(eval(&[gbar], |t, v| Ok(gate_regularizer(t, v[0], eta)))?.data()[0].f64())
}

pub fn intervention_consistency_value<T: Element>(
    fused: &Tensor<T>,
    comp: &Tensor<T>,
    random: &Tensor<T>,
    gbar: &Tensor<T>,
    eta: f64,
) -> Result<f64> {
    let out = eval(&[fused, comp, random, gbar], |t, v| {
        Ok(intervention_consistency(t, v[0], v[1], v[2], v[3], eta)?.0)
    })?;
    Ok(out.data()[0].f64())
}

pub fn modal_necessity_value<T: Element>(
    fused: &Tensor<T>,
    drop_ir: &Tensor<T>,
    drop_vi: &Tensor<T>,
    mode: NecessityMode,
    margin: f64,
) -> Result<f64> {
    let out = eval(&[fused, drop_ir, drop_vi], |t, v| {
        modal_necessity(t, v[0], v[1], v[2], mode, margin)
    })?;
    Ok(out.data()[0].f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        let data = (0..h * w).map(|p| f(p / w, p % w)).collect();
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    fn random_img(h: usize, w: usize, rng: &mut crate::rng::Rng, lo: f64, hi: f64) -> Tensor<f64> {
        let data = (0..h * w).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    /// Central differences of `f` with respect to every element of `inputs[k]`.
    fn fd_check(
        inputs: &[Tensor<f64>],
        k: usize,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) -> f64 {
        let run = |ins: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let v: Vec<Var> = ins.iter().map(|x| t.param(as_nchw(x))).collect();
            let o = f(&mut t, &v);
            t.item(o)
        };
        let mut t = Tape::new();
        let v: Vec<Var> = inputs.iter().map(|x| t.param(as_nchw(x))).collect();
        let o = f(&mut t, &v);
        let g = t.backward(o).get_or_zeros(v[k], t.shape(v[k]));
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..inputs[k].numel() {
            let mut p = inputs.to_vec();
            p[k].data_mut()[i] += h;
            let mut m = inputs.to_vec();
            m[k].data_mut()[i] -= h;
            let num = (run(&p) - run(&m)) / (2.0 * h);
            let a = g.data()[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn laplacian_cases() {
        let c = laplacian_map(&img(5, 4, |_, _| 0.7)).unwrap();
        assert!(c.data().iter().all(|&v| v.abs() < 1e-12));

        // Impulse away from the border: the kernel itself.
        let d = laplacian_map(&img(5, 5, |i, j| if (i, j) == (2, 2) { 1.0 } else { 0.0 })).unwrap();
        let window: Vec<f64> = (1..4).flat_map(|i| (1..4).map(move |j| (i, j))).map(|(i, j)| d.data()[i * 5 + j]).collect();
        assert_eq!(window, vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]);
        // On a 3x3 image the reflected border doubles each edge neighbor's response.
        let d = laplacian_map(&img(3, 3, |i, j| if (i, j) == (1, 1) { 1.0 } else { 0.0 })).unwrap();
        assert_eq!(d.data(), &[0.0, 2.0, 0.0, 2.0, -4.0, 2.0, 0.0, 2.0, 0.0]);

        let r = laplacian_map(&img(6, 5, |i, _| i as f64)).unwrap();
        for i in 1..5 {
            for j in 1..4 {
                assert_eq!(r.data()[i * 5 + j], 0.0);
            }
        }
    }

    #[test]
    fn fidelity_cases() {
        let x = img(4, 4, |i, j| (i * j) as f64 / 9.0);
        assert_eq!(fidelity_value(&x, &x, &x, 1.0).unwrap(), 0.0);
        let v = fidelity_value(
            &img(4, 4, |_, _| 0.5),
            &img(4, 4, |_, _| 0.0),
            &img(4, 4, |_, _| 1.0),
            1.0,
        )
        .unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fidelity_gradient_matches_finite_differences() {
        let mut rng = seeded(1);
        let ins: Vec<_> = (0..3).map(|_| random_img(8, 8, &mut rng, 0.0, 1.0)).collect();
        let err = fd_check(&ins, 0, |t, v| fidelity(t, v[0], v[1], v[2], 1.0).unwrap());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn aggregate_cases() {
        let half = |h, w| Tensor::full(vec![1, h, w], 0.5f64);
        let g = aggregate_gate_maps(&half(8, 8), &half(4, 4), &half(2, 2)).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let eps: f64 = 1e-6;
        let g = aggregate_gate_maps(
            &Tensor::full(vec![1, 8, 8], 1.0 - eps),
            &Tensor::full(vec![1, 4, 4], eps),
            &Tensor::full(vec![1, 2, 2], eps),
        )
        .unwrap();
        assert!(g.data().iter().all(|&v| (v - (1.0 + eps) / 3.0).abs() < 1e-12));
        assert!(aggregate_gate_maps(&half(8, 8), &half(3, 4), &half(2, 2)).is_err());
    }

    #[test]
    fn regularizer_cases() {
        let n = 64.0f64;
        let r = gate_regularizer_value(&Tensor::full(vec![1, 8, 8], 0.3f64), 0.3).unwrap();
        assert!((r + n.ln()).abs() < 1e-12, "{r}");
        let uniform_h = n.ln();
        let peaked = img(8, 8, |i, j| if i + j == 0 { 1.0 - 1e-9 } else { 1e-9 });
        let mean = peaked.mean();
        let r = gate_regularizer_value(&peaked, 0.3).unwrap();
        let h_peaked = (mean - 0.3).abs() - r;
        assert!(h_peaked < uniform_h && h_peaked < 1e-3, "{h_peaked}");
    }

    #[test]
    fn consistency_reduces_to_regularizer() {
        let mut rng = seeded(2);
        let f = random_img(8, 8, &mut rng, 0.0, 1.0);
        let g = random_img(8, 8, &mut rng, 0.05, 0.95);
        let v = intervention_consistency_value(&f, &f, &f, &g, 0.3).unwrap();
        assert_eq!(v, gate_regularizer_value(&g, 0.3).unwrap());
        let tiny = Tensor::full(vec![1, 8, 8], 1e-9f64);
        let other = random_img(8, 8, &mut rng, 0.0, 1.0);
        let v = intervention_consistency_value(&f, &other, &other, &tiny, 0.3).unwrap();
        assert!((v - gate_regularizer_value(&tiny, 0.3).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        let mut rng = seeded(3);
        let ins = vec![
            random_img(6, 6, &mut rng, 0.0, 1.0),
            random_img(6, 6, &mut rng, 0.0, 1.0),
            random_img(6, 6, &mut rng, 0.0, 1.0),
            random_img(6, 6, &mut rng, 0.1, 0.9),
        ];
        for k in 0..4 {
            let err = fd_check(&ins, k, |t, v| {
                intervention_consistency(t, v[0], v[1], v[2], v[3], 0.3).unwrap().0
            });
            assert!(err < 1e-4, "input {k}: {err}");
        }
    }

    #[test]
    fn necessity_cases() {
        let x = img(4, 4, |i, _| i as f64 / 4.0);
        let m = NecessityMode::MaximizeMargin;
        assert_eq!(modal_necessity_value(&x, &x, &x, NecessityMode::AsWritten, 0.1).unwrap(), 0.0);
        assert!((modal_necessity_value(&x, &x, &x, m, 0.1).unwrap() - 0.2).abs() < 1e-15);
        let one = Tensor::full(vec![1, 4, 4], 1.0f64);
        let zero = Tensor::zeros(vec![1, 4, 4]);
        assert_eq!(
            modal_necessity_value(&one, &zero, &zero, NecessityMode::AsWritten, 0.1).unwrap(),
            2.0
        );
        assert!("sideways".parse::<NecessityMode>().is_err());
    }

    #[test]
    fn necessity_gradients_away_from_kink() {
        let mut rng = seeded(4);
        let ins: Vec<_> = (0..3).map(|_| random_img(6, 6, &mut rng, 0.0, 1.0)).collect();
        for (mode, margin) in [
            (NecessityMode::AsWritten, 0.1),
            (NecessityMode::MaximizeMargin, 5.0),
            (NecessityMode::MaximizeMargin, 0.01),
        ] {
            let err = fd_check(&ins, 0, |t, v| {
                let out = modal_necessity(t, v[0], v[1], v[2], mode, margin).unwrap();
                // Keep the hinge-inactive case from being identically zero.
                let s = t.mean_all(v[0]);
                t.add(out, s)
            });
            assert!(err < 1e-4, "{mode}: {err}");
        }
    }

    #[test]
    fn breakdown_recomposes() {
        let b = LossBreakdown {
            total: 1.0 + 0.1 * 2.0 + 0.05 * 3.0,
            fidelity: 1.0,
            inv: 2.0,
            nec: 3.0,
            reg: -1.0,
            alpha: 0.1,
            beta: 0.05,
            lambda1: 1.0,
            eta: 0.3,
        };
        assert!((b.total - b.recomposed()).abs() < 1e-12);
        assert_eq!(b.log_line(7).split(' ').count(), 6);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.lambda1, w.eta), (0.1, 0.05, 1.0, 0.3));
        assert_eq!(w.nec_mode, NecessityMode::AsWritten);
    }

    proptest! {
        #[test]
        fn fidelity_is_nonnegative_and_homogeneous(seed in any::<u64>(), s in 0.1f64..4.0) {
            let mut rng = seeded(seed);
            let f = random_img(6, 7, &mut rng, 0.0, 1.0);
            let a = random_img(6, 7, &mut rng, 0.0, 1.0);
            let b = random_img(6, 7, &mut rng, 0.0, 1.0);
            let base = fidelity_value(&f, &a, &b, 1.0).unwrap();
            prop_assert!(base >= 0.0);
            let sc = |t: &Tensor<f64>| t.map(|v| v * s);
            let scaled = fidelity_value(&sc(&f), &sc(&a), &sc(&b), 1.0).unwrap();
            prop_assert!((scaled - s * base).abs() <= 1e-12 * scaled.abs().max(1.0));
            prop_assert_eq!(fidelity_value(&f, &f, &f, 1.0).unwrap(), 0.0);
        }

        #[test]
        fn loss_terms_are_finite(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let f = random_img(8, 8, &mut rng, 0.0, 1.0);
            let c = random_img(8, 8, &mut rng, 0.0, 1.0);
            let g = random_img(8, 8, &mut rng, 1e-6, 1.0 - 1e-6);
            prop_assert!(intervention_consistency_value(&f, &c, &c, &g, 0.3).unwrap().is_finite());
            prop_assert!(modal_necessity_value(&f, &c, &g, NecessityMode::AsWritten, 0.1).unwrap().is_finite());
        }

        #[test]
        fn pointwise_terms_ignore_pixel_order(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let maps: Vec<_> = (0..4).map(|_| random_img(6, 6, &mut rng, 0.05, 0.95)).collect();
            let mut perm: Vec<usize> = (0..36).collect();
            for i in (1..36).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let shuf = |t: &Tensor<f64>| {
                Tensor::new(vec![1, 6, 6], perm.iter().map(|&p| t.data()[p]).collect()).unwrap()
            };
            let s: Vec<_> = maps.iter().map(shuf).collect();
            let a = intervention_consistency_value(&maps[0], &maps[1], &maps[2], &maps[3], 0.3).unwrap();
            let b = intervention_consistency_value(&s[0], &s[1], &s[2], &s[3], 0.3).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let a = modal_necessity_value(&maps[0], &maps[1], &maps[2], NecessityMode::AsWritten, 0.1).unwrap();
            let b = modal_necessity_value(&s[0], &s[1], &s[2], NecessityMode::AsWritten, 0.1).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
