use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction, no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<f32>>,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::shape(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = self.lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &BTreeMap<String, Tensor<f32>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping and whether clipping happened.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> (f64, bool) {
    let norm = global_norm(grads);
    if norm <= max_norm {
        return (norm, false);
    }
    let s = (max_norm / norm) as f32;
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|x| *x *= s);
    }
    (norm, true)
}
