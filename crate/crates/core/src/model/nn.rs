//! Parameter storage and the small set of layers the model is built from.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{lit, Graph, Real, Rng, Tensor, Var};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::validation(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::validation(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Zero every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

/// Deterministic initialiser used while building a [`ParamStore`].
pub struct Init<'a, T> {
    pub store: ParamStore<T>,
    rng: &'a mut Rng,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(rng: &'a mut Rng) -> Self {
        Init { store: ParamStore::new(), rng }
    }

    pub fn normal(&mut self, name: &str, dims: &[usize], std: f64) {
        let t = Tensor::from_fn(dims.to_vec(), |_| lit(std * self.rng.normal()));
        self.store.insert(name, t);
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], v: f64) {
        self.store.insert(name, Tensor::full(dims.to_vec(), lit(v)));
    }

    /// Weight `[fan_in × fan_out]`, Xavier-normal.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.normal(name, &[fan_in, fan_out], std);
    }

    /// `{name}.w` and `{name}.b`.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.weight(&format!("{name}.w"), fan_in, fan_out);
        self.constant(&format!("{name}.b"), &[fan_out], 0.0);
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.constant(&format!("{name}.g"), &[dim], 1.0);
        self.constant(&format!("{name}.b"), &[dim], 0.0);
    }

    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        self.normal(&format!("{name}.w"), &[k, k, cin, cout], std);
        self.constant(&format!("{name}.b"), &[cout], 0.0);
    }

    pub fn attention(&mut self, name: &str, dim: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), dim, dim);
        }
    }

    pub fn ffn(&mut self, name: &str, dim: usize, width: usize) {
        self.linear(&format!("{name}.fc1"), dim, width);
        self.linear(&format!("{name}.fc2"), width, dim);
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

pub const LN_EPS: f64 = 1e-5;

/// A graph under construction together with the parameters it reads.
pub struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a ParamStore<T>) -> Self {
        Ctx { g, params }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let t = self.params.get(name)?;
        Ok(self.g.param(name, t))
    }

    /// `x · W` without bias.
    pub fn project(&mut self, x: Var, weight: &str) -> Result<Var> {
        let w = self.p(weight)?;
        self.g.matmul(x, w)
    }

    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gain = self.p(&format!("{name}.g"))?;
        let bias = self.p(&format!("{name}.b"))?;
        let n = self.g.layer_norm(x, lit(LN_EPS))?;
        let y = self.g.mul_row(n, gain)?;
        self.g.add_row(y, bias)
    }

    pub fn conv(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.g.conv2d(x, w, b)
    }

    pub fn ffn(&mut self, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{name}.fc1"))?;
        let h = self.g.relu(h);
        self.linear(h, &format!("{name}.fc2"))
    }

    /// Multi-head attention. `mask`, when given, is an additive
    /// `[queries × keys]` tensor of `0` / `-inf` shared by all heads.
    /// Returns the output and the per-head attention weights.
    pub fn attention(
        &mut self,
        query: Var,
        key: Var,
        value: Var,
        heads: usize,
        mask: Option<&Tensor<T>>,
        name: &str,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.linear(query, &format!("{name}.q"))?;
        let k = self.linear(key, &format!("{name}.k"))?;
        let v = self.linear(value, &format!("{name}.v"))?;
        let dim = self.g.dims(q)[1];
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("width {dim} is not divisible by {heads} heads")));
        }
        let hd = dim / heads;
        let scale = lit::<T>(1.0 / (hd as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let (a, b) = (h * hd, (h + 1) * hd);
            let qh = if heads == 1 { q } else { self.g.slice_cols(q, a, b)? };
            let kh = if heads == 1 { k } else { self.g.slice_cols(k, a, b)? };
            let vh = if heads == 1 { v } else { self.g.slice_cols(v, a, b)? };
            let s = self.g.matmul_nt(qh, kh)?;
            let mut s = self.g.scale(s, scale);
            if let Some(m) = mask {
                s = self.g.add_const(s, m)?;
            }
            let w = self.g.softmax(s, 1)?;
            outs.push(self.g.matmul(w, vh)?);
            weights.push(w);
        }
        let o = if heads == 1 { outs[0] } else { self.g.concat_cols(&outs)? };
        Ok((self.linear(o, &format!("{name}.o"))?, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let build = || {
            let mut rng = Rng::new(3);
            let mut init = Init::<f32>::new(&mut rng);
            init.linear("a", 4, 5);
            init.layer_norm("n", 5);
            init.finish()
        };
        assert_eq!(build(), build());
        assert_eq!(build().len(), 4);
    }

    #[test]
    fn all_allowed_mask_matches_unmasked() {
        let mut rng = Rng::new(1);
        let mut init = Init::<f64>::new(&mut rng);
        init.attention("att", 8);
        let params = init.finish();
        let q = Tensor::from_fn([3, 8], |i| (i as f64 * 0.37).sin());
        let kv = Tensor::from_fn([5, 8], |i| (i as f64 * 0.11).cos());
        let run = |mask: Option<&Tensor<f64>>| {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &params);
            let qv = ctx.g.constant(q.clone());
            let kvv = ctx.g.constant(kv.clone());
            let (o, _) = ctx.attention(qv, kvv, kvv, 2, mask, "att").unwrap();
            g.value(o).clone()
        };
        let zeros = Tensor::zeros([3, 5]);
        assert!(run(None).bit_eq(&run(Some(&zeros))));
    }
}
