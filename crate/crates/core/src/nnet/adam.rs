use serde::{Deserialize, Serialize};

use super::{Gradients, ModelParams, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-4,
            l2: 5e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0 && self.learning_rate > 0.0 && self.l2 >= 0.0 && self.adam_eps > 0.0;
        let betas = (0.0..1.0).contains(&self.adam_beta1)
            && self.adam_beta1 > 0.0
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_beta2 > 0.0;
        if !positive || !betas {
            return Err(Error::InvalidArgument(format!("invalid hyperparameters {self:?}")));
        }
        Ok(())
    }
}

fn update<T: Real>(w: &mut [T], m: &mut [T], v: &mut [T], g: &[T], l2: f64, h: &TrainHyper, c1: f64, c2: f64) {
    let (b1, b2) = (T::from_f64(h.adam_beta1), T::from_f64(h.adam_beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - h.adam_beta1), T::from_f64(1.0 - h.adam_beta2));
    let (l2, lr, eps) = (T::from_f64(l2), T::from_f64(h.learning_rate), T::from_f64(h.adam_eps));
    let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
    for i in 0..w.len() {
        let gi = g[i] + l2 * w[i];
        m[i] = b1 * m[i] + one_b1 * gi;
        v[i] = b2 * v[i] + one_b2 * gi * gi;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        w[i] = w[i] - lr * mh / (vh.sqrt() + eps);
    }
}

/// One bias-corrected Adam step in place. The L2 term `l2 * w` is added to
/// weight gradients only; biases are not decayed.
pub fn adam_step<T: Real>(params: &mut ModelParams<T>, grads: &Gradients<T>, hyper: &TrainHyper) -> Result<()> {
    if grads.layers.len() != params.layers.len()
        || params
            .layers
            .iter()
            .zip(&grads.layers)
            .any(|(l, (gw, gb))| l.weight.len() != gw.len() || l.bias.len() != gb.len())
    {
        return Err(Error::ShapeMismatch("gradients do not match parameters".into()));
    }
    params.step += 1;
    let t = params.step as i32;
    let c1 = 1.0 - hyper.adam_beta1.powi(t);
    let c2 = 1.0 - hyper.adam_beta2.powi(t);
    for (l, (gw, gb)) in params.layers.iter_mut().zip(&grads.layers) {
        update(&mut l.weight, &mut l.m_weight, &mut l.v_weight, gw, hyper.l2, hyper, c1, c2);
        update(&mut l.bias, &mut l.m_bias, &mut l.v_bias, gb, 0.0, hyper, c1, c2);
    }
    Ok(())
}
