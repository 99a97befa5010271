//! AdamW with decoupled weight decay.

use super::config::OptimConfig;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (name, t) in params.iter() {
                s.insert(name.clone(), Tensor::zeros(t.dims().to_vec()));
            }
            s
        };
        AdamW { m: zeros(), v: zeros(), step: 0 }
    }

    /// One update. Parameters without a gradient entry are treated as
    /// having a zero gradient (they still decay).
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>, cfg: &OptimConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok();
            let m = self.m.get_mut(name)?;
            if m.dims() != p.dims() || g.is_some_and(|g| g.dims() != p.dims()) {
                return Err(Error::shape(format!("optimizer state for `{name}` does not match the parameter")));
            }
            let v = self.v.get_mut(name)?;
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi as f64 / bc1;
                let vhat = vi as f64 / bc2;
                let pi = p.data()[i] as f64;
                let next = pi - cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * pi);
                p.data_mut()[i] = next as f32;
            }
        }
        Ok(())
    }
}
