//! Finite-difference verification of the loss gradients on a small two-layer
//! fusion network in double precision.
//!
//! The toy network maps the channel-stacked pair `[N, 2, H, W]` through a
//! 3x3 conv with leaky ReLU and a 3x3 conv with sigmoid. Three gate heads read
//! the hidden layer at full, half and quarter resolution, so the aggregate gate
//! goes through the same upsampling as in the real model. Both inputs are
//! tape leaves, so input gradients are checked alongside weight gradients.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::interventions::{InterventionMask, InterventionSet, MaskKind};
use crate::losses::{fidelity, total_loss, LossWeights};
use crate::model::BundleVars;
use crate::rng::seeded;
use crate::tensor::Tensor;

const HIDDEN: usize = 4;
const SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    FidelityOnly { lambda1: f64 },
    Full(LossWeights),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub params: BTreeMap<String, Tensor<f64>>,
}

fn conv_shapes() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("l1.w", vec![HIDDEN, 2, 3, 3]),
        ("l1.b", vec![HIDDEN]),
        ("l2.w", vec![1, HIDDEN, 3, 3]),
        ("l2.b", vec![1]),
        ("g1.w", vec![1, HIDDEN, 3, 3]),
        ("g1.b", vec![1]),
        ("g2.w", vec![1, HIDDEN, 3, 3]),
        ("g2.b", vec![1]),
        ("g3.w", vec![1, HIDDEN, 3, 3]),
        ("g3.b", vec![1]),
    ]
}

impl ToyModel {
    pub fn random(seed: u64, std: f64) -> Self {
        let mut rng = seeded(seed);
        let params = conv_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-std..std)).collect();
                (name.to_string(), Tensor::new(shape, data).expect("sizes match"))
            })
            .collect();
        ToyModel { params }
    }

    pub fn zeros() -> Self {
        ToyModel {
            params: conv_shapes()
                .into_iter()
                .map(|(name, shape)| (name.to_string(), Tensor::zeros(shape)))
                .collect(),
        }
    }

    /// Returns the fused output `[N, 1, H, W]` and the three gates.
    fn forward(&self, tape: &mut Tape<f64>, p: &BTreeMap<String, Var>, x: Var) -> (Var, [Var; 3]) {
        let s = tape.shape(x).to_vec();
        let (h, w) = (s[2], s[3]);
        let h1 = tape.conv2d(x, p["l1.w"], Some(p["l1.b"]), 1, 1);
        let h1 = tape.leaky_relu(h1, SLOPE);
        let y = tape.conv2d(h1, p["l2.w"], Some(p["l2.b"]), 1, 1);
        let fused = tape.sigmoid(y);
        let mut gates = [fused; 3];
        for (k, g) in gates.iter_mut().enumerate() {
            let src = if k == 0 {
                h1
            } else {
                tape.adaptive_avg_pool(h1, h >> k, w >> k)
            };
            let name = format!("g{}", k + 1);
            let z = tape.conv2d(src, p[&format!("{name}.w")], Some(p[&format!("{name}.b")]), 1, 1);
            *g = tape.sigmoid(z);
        }
        (fused, gates)
    }
}

/// Toy inputs: a `[1, 1, H, W]` pair plus the masks of its intervention set.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyInputs {
    pub vi: Tensor<f64>,
    pub ir: Tensor<f64>,
    pub set: InterventionSet,
}

impl ToyInputs {
    /// Random pair with hand-placed complementary and shared 2x2 blocks.
    pub fn random(side: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let mut img = || -> Result<Tensor<f64>> {
            let d: Vec<f64> = (0..side * side).map(|_| rng.gen_range(0.05..0.95)).collect();
            Tensor::new(vec![1, 1, side, side], d)
        };
        let (vi, ir) = (img()?, img()?);
        let block = |origins: Vec<(usize, usize)>, kind| {
            InterventionMask::from_blocks(side, side, 2, origins, kind)
        };
        let mut set = InterventionSet::identity(side, side);
        set.comp_vi = block(vec![(0, 0), (4, 2)], MaskKind::ComplementaryVi)?;
        set.comp_ir = block(vec![(2, 4), (6, 6)], MaskKind::ComplementaryIr)?;
        set.random_shared = block(vec![(2, 0)], MaskKind::RandomShared)?;
        set.dropout_enabled = true;
        Ok(ToyInputs { vi, ir, set })
    }

    pub fn constant(side: usize, value: f64) -> Self {
        ToyInputs {
            vi: Tensor::full(vec![1, 1, side, side], value),
            ir: Tensor::full(vec![1, 1, side, side], value),
            set: InterventionSet::identity(side, side),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    pub checked: usize,
    pub all_finite: bool,
}

/// Objective value, and the gradient of every parameter and of both inputs.
fn evaluate(
    model: &ToyModel,
    inputs: &ToyInputs,
    objective: Objective,
    leaves: &BTreeMap<String, Tensor<f64>>,
) -> Result<(f64, BTreeMap<String, Tensor<f64>>)> {
    let mut tape = Tape::new();
    let vars: BTreeMap<String, Var> = leaves
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(v.clone())))
        .collect();
    let (vi, ir) = (vars["input.vi"], vars["input.ir"]);
    let set = &inputs.set;
    let keep = |tape: &mut Tape<f64>, x: Var, m: &InterventionMask| {
        let (h, w) = (m.height, m.width);
        let k = tape.constant(m.keep_tensor::<f64>().reshape(vec![1, 1, h, w]).expect("same size"));
        tape.mul(x, k)
    };
    let zero = InterventionMask::dropout(set.height(), set.width());
    let vis = [
        vi,
        keep(&mut tape, vi, &set.comp_vi),
        keep(&mut tape, vi, &set.random_shared),
        vi,
        keep(&mut tape, vi, &zero),
    ];
    let irs = [
        ir,
        keep(&mut tape, ir, &set.comp_ir),
        keep(&mut tape, ir, &set.random_shared),
        keep(&mut tape, ir, &zero),
        ir,
    ];
    let vb = tape.concat_batch(&vis);
    let ib = tape.concat_batch(&irs);
    let x = tape.concat_channels(vb, ib);
    let (fused, gates) = model.forward(&mut tape, &vars, x);
    let part = |tape: &mut Tape<f64>, v: Var, i: usize| tape.slice_batch(v, i, 1);
    let bundle = BundleVars {
        baseline: part(&mut tape, fused, 0),
        comp: part(&mut tape, fused, 1),
        random: part(&mut tape, fused, 2),
        drop_ir: part(&mut tape, fused, 3),
        drop_vi: part(&mut tape, fused, 4),
        gates: [
            part(&mut tape, gates[0], 0),
            part(&mut tape, gates[1], 0),
            part(&mut tape, gates[2], 0),
        ],
        height: set.height(),
        width: set.width(),
    };
    let root = match objective {
        Objective::FidelityOnly { lambda1 } => fidelity(&mut tape, bundle.baseline, vi, ir, lambda1)?,
        Objective::Full(w) => total_loss(&mut tape, &bundle, vi, ir, &w)?.total,
    };
    let value = tape.item(root);
    let grads = tape.backward(root);
    let g = vars
        .iter()
        .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, tape.shape(v))))
        .collect();
    Ok((value, g))
}

/// Compares analytic gradients with central differences of step `h` for every
/// weight and input element; relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(
    objective: Objective,
    model: &ToyModel,
    inputs: &ToyInputs,
    h: f64,
) -> Result<GradCheckReport> {
    let mut leaves = model.params.clone();
    leaves.insert("input.vi".into(), inputs.vi.clone());
    leaves.insert("input.ir".into(), inputs.ir.clone());
    let (_, analytic) = evaluate(model, inputs, objective, &leaves)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        all_finite: true,
    };
    let names: Vec<String> = leaves.keys().cloned().collect();
    for name in names {
        for i in 0..leaves[&name].numel() {
            let orig = leaves[&name].data()[i];
            leaves.get_mut(&name).expect("known").data_mut()[i] = orig + h;
            let (fp, _) = evaluate(model, inputs, objective, &leaves)?;
            leaves.get_mut(&name).expect("known").data_mut()[i] = orig - h;
            let (fm, _) = evaluate(model, inputs, objective, &leaves)?;
            leaves.get_mut(&name).expect("known").data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let a = analytic[&name].data()[i];
            report.all_finite &= num.is_finite() && a.is_finite();
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}]");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
