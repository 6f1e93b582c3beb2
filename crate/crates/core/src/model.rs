//! Siamese U-Net fusion network.
//!
//! Both modalities run through one shared three-block encoder. At every scale
//! a feature integrator exchanges information through pooled cross-attention,
//! predicts a single-channel invariance gate, and blends the cross-modal sum
//! with the plain sum of the two feature maps. A decoder with skip
//! connections maps the three integrated scales back to a fused luma image.
//!
//! Parameters live in a name-keyed map so checkpoints and optimizers can
//! treat them uniformly:
//!
//! | name | shape |
//! |------|-------|
//! | `enc.b{1,2,3}.c{1,2}.{w,b}` | 3x3 convs; `b2.c1`, `b3.c1` have stride 2 |
//! | `cfi{1,2,3}.{vi,ir}.{q,k,v}.{w,b}` | 1x1 projections, one set per modality |
//! | `cfi{1,2,3}.gate.{w,b}` | 3x3 conv to one channel |
//! | `dec.s{2,1}.c{1,2}.{w,b}` | 3x3 convs after upsample + skip concat |
//! | `dec.head.{w,b}` | 1x1 conv to one channel |

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::PatchPair;
use crate::error::{Error, Result};
use crate::interventions::{apply_mask, InterventionSet};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: [usize; 3],
    pub pool_r: usize,
    pub attention_heads: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [32, 64, 128],
            pool_r: 8,
            attention_heads: 1,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.pool_r == 0 {
            return Err(Error::config("pool_r must be at least 1"));
        }
        if self.attention_heads == 0 {
            return Err(Error::config("attention_heads must be at least 1"));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c % self.attention_heads != 0) {
            return Err(Error::config(format!(
                "{c} channels are not divisible by {} heads",
                self.attention_heads
            )));
        }
        Ok(())
    }

    /// Smallest image side for which every scale still holds `pool_r` positions.
    pub fn min_side(&self) -> usize {
        4 * self.pool_r
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [c1, c2, c3] = self.channels;
        let mut out = Vec::new();
        let mut conv = |name: &str, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.w"), vec![cout, cin, k, k]));
            out.push((format!("{name}.b"), vec![cout]));
        };
        conv("enc.b1.c1", c1, 1, 3);
        conv("enc.b1.c2", c1, c1, 3);
        conv("enc.b2.c1", c2, c1, 3);
        conv("enc.b2.c2", c2, c2, 3);
        conv("enc.b3.c1", c3, c2, 3);
        conv("enc.b3.c2", c3, c3, 3);
        for (k, c) in [c1, c2, c3].into_iter().enumerate() {
            for m in ["vi", "ir"] {
                for proj in ["q", "k", "v"] {
                    conv(&format!("cfi{}.{m}.{proj}", k + 1), c, c, 1);
                }
            }
            conv(&format!("cfi{}.gate", k + 1), 1, c, 3);
        }
        conv("dec.s2.c1", c2, c3 + c2, 3);
        conv("dec.s2.c2", c2, c2, 3);
        conv("dec.s1.c1", c1, c2 + c1, 3);
        conv("dec.s1.c2", c1, c1, 3);
        conv("dec.head", 1, c1, 1);
        out
    }
}

fn truncated_normal(std: f64, rng: &mut Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Query/key/value 1x1 projections of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections<T> {
    pub q_w: Tensor<T>,
    pub q_b: Tensor<T>,
    pub k_w: Tensor<T>,
    pub k_b: Tensor<T>,
    pub v_w: Tensor<T>,
    pub v_b: Tensor<T>,
}

impl<T: Element> Projections<T> {
    pub fn identity(c: usize) -> Self {
        let mut eye = Tensor::zeros(vec![c, c, 1, 1]);
        for i in 0..c {
            eye.data_mut()[i * c + i] = T::one();
        }
        Projections {
            q_w: eye.clone(),
            q_b: Tensor::zeros(vec![c]),
            k_w: eye.clone(),
            k_b: Tensor::zeros(vec![c]),
            v_w: eye,
            v_b: Tensor::zeros(vec![c]),
        }
    }
}

/// Weights of one feature-integrator scale.
#[derive(Clone, Debug, PartialEq)]
pub struct CfiWeights<T> {
    pub vi: Projections<T>,
    pub ir: Projections<T>,
    pub gate_w: Tensor<T>,
    pub gate_b: Tensor<T>,
}

impl<T: Element> CfiWeights<T> {
    /// Identity projections, zero biases, zero gate (gate output 0.5).
    pub fn identity(c: usize) -> Self {
        CfiWeights {
            vi: Projections::identity(c),
            ir: Projections::identity(c),
            gate_w: Tensor::zeros(vec![1, c, 3, 3]),
            gate_b: Tensor::zeros(vec![1]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProjVars {
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
}

#[derive(Clone, Copy, Debug)]
pub struct CfiVars {
    pub vi: ProjVars,
    pub ir: ProjVars,
    pub gate: (Var, Var),
}

impl CfiVars {
    pub fn bind<T: Element>(tape: &mut Tape<T>, w: &CfiWeights<T>, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut proj = |p: &Projections<T>| ProjVars {
            q: (leaf(&p.q_w), leaf(&p.q_b)),
            k: (leaf(&p.k_w), leaf(&p.k_b)),
            v: (leaf(&p.v_w), leaf(&p.v_b)),
        };
        let (vi, ir) = (proj(&w.vi), proj(&w.ir));
        CfiVars {
            vi,
            ir,
            gate: (leaf(&w.gate_w), leaf(&w.gate_b)),
        }
    }
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn conv(&self, name: &str) -> (Var, Var) {
        (self.get(&format!("{name}.w")), self.get(&format!("{name}.b")))
    }

    pub fn cfi(&self, scale: usize) -> CfiVars {
        let p = |s: &str| self.conv(&format!("cfi{scale}.{s}"));
        let proj = |m: &str| ProjVars {
            q: p(&format!("{m}.q")),
            k: p(&format!("{m}.k")),
            v: p(&format!("{m}.v")),
        };
        CfiVars {
            vi: proj("vi"),
            ir: proj("ir"),
            gate: p("gate"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visible,
    Infrared,
}

/// Encoder outputs at strides 1, 2 and 4.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub theta: [Tensor<T>; 3],
    pub modality: Modality,
}

/// Tape handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[N, 1, H, W]` at the caller's resolution.
    pub fused: Var,
    /// `[N, 1, H_k, W_k]` at the padded resolution of each scale.
    pub gates: [Var; 3],
    pub pad_bottom: usize,
    pub pad_right: usize,
}

/// Tape handles for the baseline and the four intervened passes, each `[N, 1, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct BundleVars {
    pub baseline: Var,
    pub comp: Var,
    pub random: Var,
    pub drop_ir: Var,
    pub drop_vi: Var,
    /// Baseline-pass gates at padded resolution.
    pub gates: [Var; 3],
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput<T> {
    /// `[N, 1, H, W]`
    pub fused: Tensor<T>,
    /// `[N, 1, H_k, W_k]`
    pub gates: [Tensor<T>; 3],
}

/// Concrete values of the five passes, each `[N, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBundle<T> {
    pub baseline: Tensor<T>,
    pub comp: Tensor<T>,
    pub random: Tensor<T>,
    pub drop_ir: Tensor<T>,
    pub drop_vi: Tensor<T>,
    pub gates_baseline: [Tensor<T>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNet<T> {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> FusionNet<T> {
    /// Truncated-normal (std 0.02) for attention projections and gates, He
    /// normal for the remaining convolutions, zero biases.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let slope = config.leaky_slope;
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".b") {
                vec![0.0; n]
            } else if name.starts_with("cfi") {
                (0..n).map(|_| truncated_normal(0.02, rng)).collect()
            } else {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    })
                    .collect()
            };
            params.insert(name, Tensor::from_f64(shape, &data)?);
        }
        Ok(FusionNet { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .collect();
        Ok(FusionNet { config, params })
    }

    /// Builds a network from named arrays, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in expected {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter {name}"))),
            }
        }
        Ok(FusionNet { config, params })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> FusionNet<U> {
        FusionNet {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn cfi_weights(&self, scale: usize) -> CfiWeights<T> {
        let g = |s: &str| self.params[&format!("cfi{scale}.{s}")].clone();
        let proj = |m: &str| Projections {
            q_w: g(&format!("{m}.q.w")),
            q_b: g(&format!("{m}.q.b")),
            k_w: g(&format!("{m}.k.w")),
            k_b: g(&format!("{m}.k.b")),
            v_w: g(&format!("{m}.v.w")),
            v_b: g(&format!("{m}.v.b")),
        };
        CfiWeights {
            vi: proj("vi"),
            ir: proj("ir"),
            gate_w: g("gate.w"),
            gate_b: g("gate.b"),
        }
    }

    /// Places every parameter on the tape, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    fn conv_act(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var, name: &str, stride: usize) -> Var {
        let (w, b) = p.conv(name);
        let y = tape.conv2d(x, w, Some(b), stride, 1);
        tape.leaky_relu(y, self.config.leaky_slope)
    }

    /// Shared encoder on `[N, 1, H, W]` with `H`, `W` multiples of 4.
    pub fn encode_vars(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var) -> Result<[Var; 3]> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != 1 || s[2] % 4 != 0 || s[3] % 4 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape(format!(
                "encoder expects [N, 1, H, W] with H, W positive multiples of 4, got {s:?}"
            )));
        }
        let a = self.conv_act(tape, p, x, "enc.b1.c1", 1);
        let t1 = self.conv_act(tape, p, a, "enc.b1.c2", 1);
        let a = self.conv_act(tape, p, t1, "enc.b2.c1", 2);
        let t2 = self.conv_act(tape, p, a, "enc.b2.c2", 1);
        let a = self.conv_act(tape, p, t2, "enc.b3.c1", 2);
        let t3 = self.conv_act(tape, p, a, "enc.b3.c2", 1);
        Ok([t1, t2, t3])
    }

    /// Encodes a single `[1, H, W]` image (no padding applied).
    pub fn encode(&self, x: &Tensor<T>, modality: Modality) -> Result<FeaturePyramid<T>> {
        let x = batch_of_one(x)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x);
        let vars = self.encode_vars(&mut tape, &p, xv)?;
        let theta = vars.map(|v| {
            let t = tape.value(v);
            let s = t.shape()[1..].to_vec();
            t.clone().reshape(s).expect("same element count")
        });
        Ok(FeaturePyramid { theta, modality })
    }

    fn decode_vars(&self, tape: &mut Tape<T>, p: &BoundParams, cfi: [Var; 3]) -> Var {
        let s2 = tape.shape(cfi[1]).to_vec();
        let up = tape.resize_bilinear(cfi[2], s2[2], s2[3]);
        let cat = tape.concat_channels(up, cfi[1]);
        let a = self.conv_act(tape, p, cat, "dec.s2.c1", 1);
        let d2 = self.conv_act(tape, p, a, "dec.s2.c2", 1);
        let s1 = tape.shape(cfi[0]).to_vec();
        let up = tape.resize_bilinear(d2, s1[2], s1[3]);
        let cat = tape.concat_channels(up, cfi[0]);
        let a = self.conv_act(tape, p, cat, "dec.s1.c1", 1);
        let d1 = self.conv_act(tape, p, a, "dec.s1.c2", 1);
        let (w, b) = p.conv("dec.head");
        let logits = tape.conv2d(d1, w, Some(b), 1, 0);
        tape.sigmoid(logits)
    }

    /// Full forward pass on `[N, 1, H, W]` visible-luma and infrared inputs.
    /// Inputs are reflect-padded on the bottom/right to multiples of 4 and the
    /// fused output is cropped back.
    pub fn forward_vars(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        vi: Var,
        ir: Var,
    ) -> Result<ForwardVars> {
        let (vs, is) = (tape.shape(vi).to_vec(), tape.shape(ir).to_vec());
        if vs.len() != 4 || vs[1] != 1 || vs != is {
            return Err(Error::shape(format!(
                "forward expects matching [N, 1, H, W] inputs, got {vs:?} and {is:?}"
            )));
        }
        let (h, w) = (vs[2], vs[3]);
        let (pb, pr) = (pad_to(h, 4), pad_to(w, 4));
        let r = self.config.pool_r;
        let (h3, w3) = ((h + pb) / 4, (w + pr) / 4);
        if r > h3 || r > w3 {
            return Err(Error::config(format!(
                "pool_r = {r} exceeds the coarsest feature map {w3}x{h3} of a {w}x{h} input"
            )));
        }
        let (vi_p, ir_p) = if pb + pr > 0 {
            (
                tape.pad_reflect(vi, 0, pb, 0, pr),
                tape.pad_reflect(ir, 0, pb, 0, pr),
            )
        } else {
            (vi, ir)
        };
        // One encoder pass over both modalities stacked along the batch.
        let n = vs[0];
        let both = tape.concat_batch(&[vi_p, ir_p]);
        let pyr = self.encode_vars(tape, p, both)?;
        let mut cfi = [pyr[0]; 3];
        let mut gates = [pyr[0]; 3];
        for k in 0..3 {
            let tv = tape.slice_batch(pyr[k], 0, n);
            let ti = tape.slice_batch(pyr[k], n, n);
            let out = cfi_fuse(tape, tv, ti, &p.cfi(k + 1), r, self.config.attention_heads);
            cfi[k] = out.fused;
            gates[k] = out.gate;
        }
        let full = self.decode_vars(tape, p, cfi);
        let fused = if pb + pr > 0 {
            tape.crop(full, 0, 0, h, w)
        } else {
            full
        };
        Ok(ForwardVars {
            fused,
            gates,
            pad_bottom: pb,
            pad_right: pr,
        })
    }

    /// Runs the baseline and the four intervened passes as one batch of `5N`.
    /// `vi`, `ir` are `[N, 1, H, W]`; `sets[i]` holds the masks for sample `i`.
    pub fn forward_with_interventions_vars(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        vi: &Tensor<T>,
        ir: &Tensor<T>,
        sets: &[InterventionSet],
    ) -> Result<BundleVars> {
        let (n, c, h, w) = vi.dims4();
        if ir.shape() != vi.shape() || c != 1 {
            return Err(Error::shape(format!(
                "expected matching [N, 1, H, W] inputs, got {:?} and {:?}",
                vi.shape(),
                ir.shape()
            )));
        }
        if sets.len() != n {
            return Err(Error::shape(format!(
                "{} intervention sets for a batch of {n}",
                sets.len()
            )));
        }
        if let Some(s) = sets.iter().find(|s| s.height() != h || s.width() != w) {
            return Err(Error::shape(format!(
                "mask {}x{} does not match input {w}x{h}",
                s.width(),
                s.height()
            )));
        }
        let vi_batch = build_intervened(vi, sets, Modality::Visible)?;
        let ir_batch = build_intervened(ir, sets, Modality::Infrared)?;
        let viv = tape.constant(vi_batch);
        let irv = tape.constant(ir_batch);
        let out = self.forward_vars(tape, p, viv, irv)?;
        let part = |tape: &mut Tape<T>, v: Var, i: usize| tape.slice_batch(v, i * n, n);
        let gates = [
            part(tape, out.gates[0], 0),
            part(tape, out.gates[1], 0),
            part(tape, out.gates[2], 0),
        ];
        Ok(BundleVars {
            baseline: part(tape, out.fused, 0),
            comp: part(tape, out.fused, 1),
            random: part(tape, out.fused, 2),
            drop_ir: part(tape, out.fused, 3),
            drop_vi: part(tape, out.fused, 4),
            gates,
            height: h,
            width: w,
        })
    }

    /// Inference on `[N, 1, H, W]` (or `[1, H, W]`) inputs.
    pub fn forward(&self, vi: &Tensor<T>, ir: &Tensor<T>) -> Result<FusionOutput<T>> {
        let (vi, ir) = (as_batch(vi)?, as_batch(ir)?);
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let (viv, irv) = (tape.constant(vi), tape.constant(ir));
        let out = self.forward_vars(&mut tape, &p, viv, irv)?;
        Ok(FusionOutput {
            fused: tape.value(out.fused).clone(),
            gates: out.gates.map(|g| tape.value(g).clone()),
        })
    }

    pub fn forward_patch(&self, pair: &PatchPair) -> Result<FusionOutput<T>> {
        self.forward(&pair.visible_luma.cast(), &pair.infrared.cast())
    }

    pub fn forward_with_interventions(
        &self,
        pair: &PatchPair,
        set: &InterventionSet,
    ) -> Result<FusionBundle<T>> {
        let vi = as_batch(&pair.visible_luma.cast())?;
        let ir = as_batch(&pair.infrared.cast())?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let b = self.forward_with_interventions_vars(&mut tape, &p, &vi, &ir, std::slice::from_ref(set))?;
        let v = |x: Var| tape.value(x).clone();
        Ok(FusionBundle {
            baseline: v(b.baseline),
            comp: v(b.comp),
            random: v(b.random),
            drop_ir: v(b.drop_ir),
            drop_vi: v(b.drop_vi),
            gates_baseline: b.gates.map(v),
        })
    }

    /// Fuses one `[1, H, W]` pair into a `[1, H, W]` image.
    pub fn fuse(&self, vi_luma: &Tensor<T>, ir: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(vi_luma, ir)?;
        let (_, _, h, w) = out.fused.dims4();
        out.fused.reshape(vec![1, h, w])
    }
}

fn pad_to(n: usize, m: usize) -> usize {
    (m - n % m) % m
}

fn batch_of_one<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape(format!("expected [1, H, W], got {s:?}")));
    }
    x.clone().reshape(vec![1, 1, s[1], s[2]])
}

fn as_batch<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.shape().len() {
        3 => batch_of_one(x),
        4 => Ok(x.clone()),
        _ => Err(Error::shape(format!(
            "expected [1, H, W] or [N, 1, H, W], got {:?}",
            x.shape()
        ))),
    }
}

/// Stacks `[baseline, complementary, random, drop_ir, drop_vi]` inputs of one modality.
fn build_intervened<T: Element>(
    x: &Tensor<T>,
    sets: &[InterventionSet],
    modality: Modality,
) -> Result<Tensor<T>> {
    let (n, _, h, w) = x.dims4();
    let hw = h * w;
    let sample = |i: usize| Tensor::from_parts(vec![1, h, w], x.data()[i * hw..(i + 1) * hw].to_vec());
    let mut data = Vec::with_capacity(5 * n * hw);
    data.extend_from_slice(x.data());
    for i in 0..n {
        let m = match modality {
            Modality::Visible => &sets[i].comp_vi,
            Modality::Infrared => &sets[i].comp_ir,
        };
        data.extend_from_slice(apply_mask(&sample(i), m)?.data());
    }
    for i in 0..n {
        data.extend_from_slice(apply_mask(&sample(i), &sets[i].random_shared)?.data());
    }
    // drop_ir zeroes infrared; drop_vi zeroes visible.
    for dropped in [Modality::Infrared, Modality::Visible] {
        for (i, set) in sets.iter().enumerate() {
            if set.dropout_enabled && dropped == modality {
                data.extend(std::iter::repeat(T::zero()).take(hw));
            } else {
                data.extend_from_slice(&x.data()[i * hw..(i + 1) * hw]);
            }
        }
    }
    Tensor::new(vec![5 * n, 1, h, w], data)
}

#[derive(Clone, Copy, Debug)]
pub struct CfiOutput {
    pub fused: Var,
    pub gate: Var,
    /// `[N * heads, h*w, r*r]` attention of visible queries over infrared keys.
    pub attn_v2i: Var,
    pub attn_i2v: Var,
    pub v2i: Var,
    pub i2v: Var,
}

/// Queries from `query_src` (projected by `qp`) attend over keys/values of
/// `kv_src` (projected by `kvp`) pooled to `r x r`.
/// Returns `(output [N, C, h, w], attention [N*heads, h*w, r*r])`.
pub fn cross_attention<T: Element>(
    tape: &mut Tape<T>,
    query_src: Var,
    qp: &ProjVars,
    kv_src: Var,
    kvp: &ProjVars,
    r: usize,
    heads: usize,
) -> (Var, Var) {
    let s = tape.shape(query_src).to_vec();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let dh = c / heads;
    let q = tape.conv2d(query_src, qp.q.0, Some(qp.q.1), 1, 0);
    let pooled = tape.adaptive_avg_pool(kv_src, r, r);
    let k = tape.conv2d(pooled, kvp.k.0, Some(kvp.k.1), 1, 0);
    let v = tape.conv2d(pooled, kvp.v.0, Some(kvp.v.1), 1, 0);
    let q = tape.reshape(q, &[n * heads, dh, h * wd]);
    let k = tape.reshape(k, &[n * heads, dh, r * r]);
    let v = tape.reshape(v, &[n * heads, dh, r * r]);
    let scores = tape.bmm(q, k, true, false);
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax_last(scores);
    let out = tape.bmm(v, attn, false, true);
    (tape.reshape(out, &[n, c, h, wd]), attn)
}

/// `sigmoid(conv3x3(x))` to a single channel.
pub fn invariance_gate<T: Element>(tape: &mut Tape<T>, x: Var, w: &CfiVars) -> Var {
    let logits = tape.conv2d(x, w.gate.0, Some(w.gate.1), 1, 1);
    tape.sigmoid(logits)
}

/// `gate * cross + (1 - gate) * local`, gate broadcast over channels.
pub fn cfi_blend<T: Element>(tape: &mut Tape<T>, cross: Var, local: Var, gate: Var) -> Var {
    let a = tape.mul_channels(cross, gate);
    let inv = tape.affine(gate, -1.0, 1.0);
    let b = tape.mul_channels(local, inv);
    tape.add(a, b)
}

pub fn cfi_fuse<T: Element>(
    tape: &mut Tape<T>,
    theta_v: Var,
    theta_i: Var,
    w: &CfiVars,
    r: usize,
    heads: usize,
) -> CfiOutput {
    let (v2i, attn_v2i) = cross_attention(tape, theta_v, &w.vi, theta_i, &w.ir, r, heads);
    let (i2v, attn_i2v) = cross_attention(tape, theta_i, &w.ir, theta_v, &w.vi, r, heads);
    let cross = tape.add(v2i, i2v);
    let local = tape.add(theta_i, theta_v);
    let gate = invariance_gate(tape, cross, w);
    let fused = cfi_blend(tape, cross, local, gate);
    CfiOutput {
        fused,
        gate,
        attn_v2i,
        attn_i2v,
        v2i,
        i2v,
    }
}

/// Tensor-level pooled cross-attention on `[C, h, w]` maps:
/// `(visible-to-infrared, infrared-to-visible)`.
pub fn pooled_cross_attention<T: Element>(
    theta_v: &Tensor<T>,
    theta_i: &Tensor<T>,
    r: usize,
    heads: usize,
    weights: &CfiWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (tv, ti) = (as_feature_batch(theta_v)?, as_feature_batch(theta_i)?);
    if tv.shape() != ti.shape() {
        return Err(Error::shape(format!(
            "feature maps differ: {:?} vs {:?}",
            theta_v.shape(),
            theta_i.shape()
        )));
    }
    let (_, c, h, w) = tv.dims4();
    if r == 0 || r > h || r > w {
        return Err(Error::config(format!("pool_r = {r} does not fit a {w}x{h} map")));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(format!("{c} channels cannot split into {heads} heads")));
    }
    let mut tape = Tape::new();
    let wv = CfiVars::bind(&mut tape, weights, false);
    let (a, b) = (tape.constant(tv), tape.constant(ti));
    let (v2i, _) = cross_attention(&mut tape, a, &wv.vi, b, &wv.ir, r, heads);
    let (i2v, _) = cross_attention(&mut tape, b, &wv.ir, a, &wv.vi, r, heads);
    let shape = theta_v.shape().to_vec();
    Ok((
        tape.value(v2i).clone().reshape(shape.clone())?,
        tape.value(i2v).clone().reshape(shape)?,
    ))
}

fn as_feature_batch<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected [C, h, w], got {s:?}")));
    }
    x.clone().reshape(vec![1, s[0], s[1], s[2]])
}

/// Random-initialised weights for one integrator scale, for probing in isolation.
pub fn random_cfi_weights<T: Element>(c: usize, std: f64, rng: &mut Rng) -> CfiWeights<T> {
    let mut t = |shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * std).collect();
        Tensor::from_f64(shape, &data).expect("length matches")
    };
    let mut proj = || Projections {
        q_w: t(vec![c, c, 1, 1]),
        q_b: t(vec![c]),
        k_w: t(vec![c, c, 1, 1]),
        k_b: t(vec![c]),
        v_w: t(vec![c, c, 1, 1]),
        v_b: t(vec![c]),
    };
    let (vi, ir) = (proj(), proj());
    CfiWeights {
        vi,
        ir,
        gate_w: t(vec![1, c, 3, 3]),
        gate_b: t(vec![1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::MaskConfig;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn small() -> ModelConfig {
        ModelConfig {
            channels: [4, 8, 8],
            pool_r: 2,
            ..ModelConfig::default()
        }
    }

    fn rand_t(shape: &[usize], rng: &mut crate::rng::Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn pyramid_shapes_at_256() {
        let net = FusionNet::<f32>::new(ModelConfig::default(), &mut seeded(0)).unwrap();
        let p = net.encode(&Tensor::zeros(vec![1, 256, 256]), Modality::Visible).unwrap();
        assert_eq!(p.theta[0].shape(), &[32, 256, 256]);
        assert_eq!(p.theta[1].shape(), &[64, 128, 128]);
        assert_eq!(p.theta[2].shape(), &[128, 64, 64]);
        assert!(p.theta.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn encoder_rejects_unpadded_input() {
        let net = FusionNet::<f32>::zeros(small()).unwrap();
        assert!(matches!(
            net.encode(&Tensor::zeros(vec![1, 10, 12]), Modality::Visible),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn shared_encoder_is_modality_blind() {
        let mut rng = seeded(1);
        let net = FusionNet::<f64>::new(small(), &mut rng).unwrap();
        let x = rand_t(&[1, 16, 12], &mut rng);
        let a = net.encode(&x, Modality::Visible).unwrap();
        let b = net.encode(&x, Modality::Infrared).unwrap();
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn single_token_attention_returns_pooled_value() {
        let mut rng = seeded(2);
        let w = random_cfi_weights::<f64>(3, 0.5, &mut rng);
        let tv = rand_t(&[3, 4, 5], &mut rng);
        let ti = rand_t(&[3, 4, 5], &mut rng);
        let (v2i, _) = pooled_cross_attention(&tv, &ti, 1, 1, &w).unwrap();
        for c in 0..3 {
            let mut expect = w.ir.v_b.data()[c];
            for j in 0..3 {
                let mj: f64 = ti.data()[j * 20..(j + 1) * 20].iter().sum::<f64>() / 20.0;
                expect += w.ir.v_w.data()[c * 3 + j] * mj;
            }
            for &o in &v2i.data()[c * 20..(c + 1) * 20] {
                assert!((o - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_projection_attention_matches_brute_force() {
        let mut rng = seeded(3);
        let c = 3;
        let tv = rand_t(&[c, 2, 2], &mut rng);
        let ti = rand_t(&[c, 2, 2], &mut rng);
        let w = CfiWeights::<f64>::identity(c);
        let (v2i, _) = pooled_cross_attention(&tv, &ti, 2, 1, &w).unwrap();
        // r = 2 on a 2x2 map: pooling is the identity, so 4 tokens per side.
        let tok = |t: &Tensor<f64>, p: usize| -> Vec<f64> { (0..c).map(|ch| t.data()[ch * 4 + p]).collect() };
        for qp in 0..4 {
            let q = tok(&tv, qp);
            let logits: Vec<f64> = (0..4)
                .map(|kp| {
                    let k = tok(&ti, kp);
                    q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for ch in 0..c {
                let expect: f64 = (0..4).map(|kp| e[kp] / z * ti.data()[ch * 4 + kp]).sum();
                assert!((v2i.data()[ch * 4 + qp] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_limits() {
        let mut tape = Tape::<f64>::new();
        let mut w = CfiWeights::<f64>::identity(2);
        let x = tape.constant(rand_t(&[1, 2, 5, 5], &mut seeded(4)));
        let wv = CfiVars::bind(&mut tape, &w, false);
        let g = invariance_gate(&mut tape, x, &wv);
        assert!(tape.value(g).data().iter().all(|&v| v == 0.5));
        w.gate_b = Tensor::full(vec![1], 30.0);
        w.gate_w = rand_t(&[1, 2, 3, 3], &mut seeded(5)).map(|v| v * 0.01);
        let wv = CfiVars::bind(&mut tape, &w, false);
        let g = invariance_gate(&mut tape, x, &wv);
        assert!(tape.value(g).data().iter().all(|&v| v >= 1.0 - 1e-9 && v < 1.0));
    }

    #[test]
    fn blend_identities_are_exact() {
        let mut rng = seeded(6);
        let mut tape = Tape::<f32>::new();
        let cross = tape.constant(rand_t(&[2, 3, 4, 4], &mut rng).cast());
        let local = tape.constant(rand_t(&[2, 3, 4, 4], &mut rng).cast());
        for (g, check) in [(1.0f32, 0), (0.0, 1), (0.5, 2)] {
            let gate = tape.constant(Tensor::full(vec![2, 1, 4, 4], g));
            let out = cfi_blend(&mut tape, cross, local, gate);
            let (o, c, l) = (tape.value(out), tape.value(cross), tape.value(local));
            for i in 0..o.numel() {
                let expect = match check {
                    0 => c.data()[i],
                    1 => l.data()[i],
                    _ => 0.5 * (c.data()[i] + l.data()[i]),
                };
                assert_eq!(o.data()[i], expect);
            }
        }
    }

    #[test]
    fn forward_contract() {
        let mut rng = seeded(7);
        let net = FusionNet::<f64>::new(small(), &mut rng).unwrap();
        let vi = rand_t(&[1, 18, 13], &mut rng);
        let ir = rand_t(&[1, 18, 13], &mut rng);
        let a = net.fuse(&vi, &ir).unwrap();
        assert_eq!(a.shape(), &[1, 18, 13]);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a, net.fuse(&vi, &ir).unwrap());
        assert_ne!(a, net.fuse(&ir, &vi).unwrap());
        let z = net.fuse(&Tensor::zeros(vec![1, 16, 16]), &Tensor::zeros(vec![1, 16, 16])).unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn pool_larger_than_coarsest_map_is_config_error() {
        let net = FusionNet::<f32>::zeros(ModelConfig::default()).unwrap();
        let x = Tensor::zeros(vec![1, 16, 16]);
        assert!(matches!(net.fuse(&x, &x), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_interventions_match_baseline() {
        let mut rng = seeded(8);
        let net = FusionNet::<f64>::new(small(), &mut rng).unwrap();
        let pair = PatchPair {
            visible_luma: rand_t(&[1, 16, 16], &mut rng).cast(),
            infrared: rand_t(&[1, 16, 16], &mut rng).cast(),
            size: 16,
        };
        let b = net
            .forward_with_interventions(&pair, &InterventionSet::identity(16, 16))
            .unwrap();
        for o in [&b.comp, &b.random, &b.drop_ir, &b.drop_vi] {
            assert_eq!(o, &b.baseline);
        }
        let base = net.forward_patch(&pair).unwrap();
        assert_eq!(base.fused, b.baseline);
    }

    #[test]
    fn dropout_pass_sees_zero_infrared() {
        let mut rng = seeded(9);
        let net = FusionNet::<f64>::new(small(), &mut rng).unwrap();
        let vi = rand_t(&[1, 1, 32, 32], &mut rng);
        let ir = rand_t(&[1, 1, 32, 32], &mut rng);
        let set = InterventionSet::from_seed(32, 32, &MaskConfig::default(), 1).unwrap();
        let mut tape = Tape::new();
        let p = net.bind(&mut tape, false);
        let b = net
            .forward_with_interventions_vars(&mut tape, &p, &vi, &ir, std::slice::from_ref(&set))
            .unwrap();
        let zero = Tensor::zeros(vec![1, 1, 32, 32]);
        let expect = net.forward(&vi, &zero).unwrap().fused;
        assert_eq!(tape.value(b.drop_ir), &expect);
        let expect = net.forward(&zero, &ir).unwrap().fused;
        assert_eq!(tape.value(b.drop_vi), &expect);
        for v in [b.baseline, b.comp, b.random, b.drop_ir, b.drop_vi] {
            assert_eq!(tape.shape(v), &[1, 1, 32, 32]);
        }
    }

    #[test]
    fn attention_rows_are_stochastic_in_f32() {
        let mut rng = seeded(10);
        let w = random_cfi_weights::<f32>(8, 2.0, &mut rng);
        let mut tape = Tape::<f32>::new();
        let wv = CfiVars::bind(&mut tape, &w, false);
        let a = tape.constant(rand_t(&[2, 8, 6, 6], &mut rng).map(|v| v * 10.0).cast());
        let b = tape.constant(rand_t(&[2, 8, 6, 6], &mut rng).cast());
        let (_, attn) = cross_attention(&mut tape, a, &wv.vi, b, &wv.ir, 3, 2);
        for row in tape.value(attn).data().chunks(9) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6, "{s}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn double_precision_forward_is_finite() {
        let mut rng = seeded(11);
        let net = FusionNet::<f64>::new(ModelConfig::default(), &mut rng).unwrap();
        let vi = rand_t(&[1, 32, 32], &mut rng);
        let ir = rand_t(&[1, 32, 32], &mut rng);
        assert!(net.fuse(&vi, &ir).unwrap().is_finite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shape_algebra_for_multiples_of_four(h4 in 2usize..=128, w4 in 2usize..=128) {
            let (h, w) = (4 * h4, 4 * w4);
            let cfg = ModelConfig { channels: [1, 1, 1], pool_r: 1, ..ModelConfig::default() };
            let net = FusionNet::<f32>::new(cfg, &mut seeded(h4 as u64)).unwrap();
            let x = Tensor::full(vec![1, h, w], 0.5f32);
            let p = net.encode(&x, Modality::Visible).unwrap();
            prop_assert_eq!(p.theta[0].shape(), &[1, h, w]);
            prop_assert_eq!(p.theta[1].shape(), &[1, h / 2, w / 2]);
            prop_assert_eq!(p.theta[2].shape(), &[1, h / 4, w / 4]);
            let out = net.forward(&x, &x).unwrap();
            prop_assert_eq!(out.fused.shape(), &[1, 1, h, w]);
            prop_assert!(out.gates.iter().all(|g| g.data().iter().all(|&v| v > 0.0 && v < 1.0)));
        }
    }
}
