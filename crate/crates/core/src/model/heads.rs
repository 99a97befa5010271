//! Classification and mask heads, and inference-time map assembly.

use super::config::ModelConfig;
use super::nn::{Ctx, Init};
use crate::data::BACKGROUND;
use crate::error::{Error, Result};
use crate::tensor::{kernels, sigmoid, Real, Tensor, Var};

pub(crate) fn init_params<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig, c2: usize, num_categories: usize) {
    let ch = cfg.hidden;
    init.conv("head.pixel", 1, c2, ch);
    init.layer_norm("head.norm", ch);
    init.linear("head.cls", ch, num_categories + 1);
    for i in 1..=3 {
        init.linear(&format!("head.mask{i}"), ch, ch);
    }
}

/// Graph handles for one set of predictions.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub queries: Var,
    /// `[N × (K+1)]`; column `K` is "no object".
    pub class_logits: Var,
    /// `[N × H2·W2]`.
    pub mask_logits: Var,
}

/// Per-pixel embeddings `[H2·W2 × C^h]` from a 1×1 conv over `V2`.
pub fn pixel_embeddings<T: Real>(ctx: &mut Ctx<'_, T>, v2: Var) -> Result<Var> {
    let e = ctx.conv(v2, "head.pixel")?;
    let d = ctx.g.dims(e).to_vec();
    ctx.g.reshape(e, &[d[0] * d[1], d[2]])
}

/// Class logits from a linear layer and mask logits as the inner product of
/// a 3-layer query MLP with the pixel embeddings. Queries pass through a
/// shared layer norm first.
pub fn predict<T: Real>(ctx: &mut Ctx<'_, T>, queries: Var, pixel_embed: Var) -> Result<LayerOutput> {
    let q = ctx.layer_norm(queries, "head.norm")?;
    let class_logits = ctx.linear(q, "head.cls")?;
    let m = ctx.linear(q, "head.mask1")?;
    let m = ctx.g.relu(m);
    let m = ctx.linear(m, "head.mask2")?;
    let m = ctx.g.relu(m);
    let m = ctx.linear(m, "head.mask3")?;
    let mask_logits = ctx.g.matmul_nt(m, pixel_embed)?;
    Ok(LayerOutput { queries, class_logits, mask_logits })
}

/// Plain-value predictions, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub class_logits: Tensor<T>,
    pub mask_logits: Tensor<T>,
    pub mask_size: (usize, usize),
}

impl<T: Real> Prediction<T> {
    pub fn new(class_logits: Tensor<T>, mask_logits: Tensor<T>, mask_size: (usize, usize)) -> Result<Self> {
        let (n, kp1) = class_logits.shape2()?;
        let (n2, hw) = mask_logits.shape2()?;
        if n != n2 || hw != mask_size.0 * mask_size.1 || kp1 < 2 {
            return Err(Error::shape(format!(
                "class logits {:?} and mask logits {:?} do not fit a {}×{} mask",
                class_logits.dims(),
                mask_logits.dims(),
                mask_size.0,
                mask_size.1
            )));
        }
        Ok(Prediction { class_logits, mask_logits, mask_size })
    }

    pub fn num_queries(&self) -> usize {
        self.class_logits.dims()[0]
    }

    /// `K`, excluding the no-object column.
    pub fn num_categories(&self) -> usize {
        self.class_logits.dims()[1] - 1
    }

    /// Row-wise softmax of the class logits.
    pub fn class_probs(&self) -> Vec<f64> {
        let d = self.class_logits.dims().to_vec();
        let x: Vec<f64> = self.class_logits.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        kernels::softmax_axis(&x, &d, 1)
    }
}

/// Per-pixel semantic scores `[K × H2·W2]`:
/// `score[k, p] = Σ_q P(k | q) · σ(mask_q[p])`.
pub fn semantic_scores<T: Real>(pred: &Prediction<T>) -> Vec<f64> {
    let n = pred.num_queries();
    let k = pred.num_categories();
    let hw = pred.mask_size.0 * pred.mask_size.1;
    let probs = pred.class_probs();
    let masks = pred.mask_logits.data();
    let mut out = vec![0.0; k * hw];
    for q in 0..n {
        for c in 0..k {
            let pc = probs[q * (k + 1) + c];
            for p in 0..hw {
                out[c * hw + p] += pc * sigmoid(masks[q * hw + p].to_f64().unwrap_or(f64::NAN));
            }
        }
    }
    out
}

/// Minimum winning semantic score for a pixel to be labelled foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.5;

/// Per-pixel label map at `out` resolution. Scores are bilinearly upsampled,
/// the best category wins (lowest index on ties), and pixels whose best
/// score is below [`FOREGROUND_THRESHOLD`] are background.
pub fn assemble_semantic_map<T: Real>(pred: &Prediction<T>, out: (usize, usize)) -> Vec<u32> {
    let k = pred.num_categories();
    let (h2, w2) = pred.mask_size;
    let scores = semantic_scores(pred);
    let up = kernels::bilinear_resize(&scores, k, h2, w2, out.0, out.1);
    let hw = out.0 * out.1;
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if up[c * hw + p] > up[best * hw + p] {
                    best = c;
                }
            }
            if up[best * hw + p] < FOREGROUND_THRESHOLD {
                BACKGROUND
            } else {
                best as u32
            }
        })
        .collect()
}
