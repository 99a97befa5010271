//! Gumbel-softmax sampling with a straight-through hard forward value.

use super::{lit, Graph, Real, Rng, Tensor, Var};
use crate::error::{Error, Result};

/// I.i.d. standard Gumbel noise with the given dims.
pub fn gumbel_noise<T: Real>(rng: &mut Rng, dims: &[usize]) -> Tensor<T> {
    Tensor::from_fn(dims.to_vec(), |_| lit(rng.gumbel()))
}

impl<T: Real> Graph<T> {
    /// Soft relaxation `softmax((logits + noise) / tau)` over axis 0 of an
    /// `N×HW` matrix.
    pub fn gumbel_softmax(&mut self, logits: Var, noise: &Tensor<T>, tau: T) -> Result<Var> {
        if !(tau > T::zero()) {
            return Err(Error::config(format!("gumbel temperature must be positive, got {tau}")));
        }
        let noisy = self.add_const(logits, noise)?;
        let scaled = self.scale(noisy, T::one() / tau);
        self.softmax(scaled, 0)
    }

    /// Column-wise one-hot of the noisy argmax over axis 0, whose gradient
    /// is exactly that of [`Graph::gumbel_softmax`].
    pub fn gumbel_softmax_hard(&mut self, logits: Var, noise: &Tensor<T>, tau: T) -> Result<Var> {
        let soft = self.gumbel_softmax(logits, noise, tau)?;
        self.straight_through_onehot(soft)
    }

    /// [`Graph::gumbel_softmax_hard`] drawing fresh noise from `rng`.
    pub fn gumbel_softmax_hard_sampled(&mut self, logits: Var, rng: &mut Rng, tau: T) -> Result<Var> {
        let noise = gumbel_noise(rng, self.dims(logits));
        self.gumbel_softmax_hard(logits, &noise, tau)
    }
}
