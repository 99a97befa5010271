use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the autodiff gradient of a scalar function against central
/// finite differences and return the maximum relative error
/// `|ad - fd| / max(|ad|, |fd|, 1e-8)` over all elements of `x`.
///
/// `f` builds its graph from the supplied leaf; it must be deterministic.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_sampled(f, x, eps, &all)
}

/// Like [`grad_check`] but only probes the listed element indices.
pub fn grad_check_sampled<F>(f: F, x: &Tensor<f64>, eps: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t.clone());
        let out = f(&mut g, v)?;
        let y = g.scalar(out);
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("function value {y} at probe point")));
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&mut g, v)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::NonFinite(format!("function value {} at base point", g.scalar(out))));
    }
    let grads = g.backward(out)?;
    let zero = Tensor::zeros(x.dims().to_vec());
    let ad = grads.get(v).unwrap_or(&zero);
    if !ad.all_finite() {
        return Err(Error::NonFinite("autodiff gradient".into()));
    }

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let a = ad.data()[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
