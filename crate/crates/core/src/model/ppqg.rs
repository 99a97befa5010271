//! Query generation from the stride-4 visual map.
//!
//! Three steps: spatial aggregation of `V2` into `N` embeddings, prompting
//! those embeddings with learnable audio prototypes by cross-attention, and
//! grouping pixel context into each embedding through a hard
//! (straight-through Gumbel) pixel-to-query assignment. The prototypes are
//! tied to the audio stream by the prototype–audio contrastive loss.

use super::config::{Grouping, ModelConfig};
use super::nn::{Ctx, Init};
use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor, Var};

/// Spatial and channel sizes the query generator is bound to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PpqgDims {
    pub h2: usize,
    pub w2: usize,
    pub c2: usize,
    pub audio_channels: usize,
    pub num_categories: usize,
}

pub(crate) fn init_params<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig, d: &PpqgDims) {
    let ch = cfg.hidden;
    let hw = d.h2 * d.w2;
    let hid = cfg.aggregation_width(hw);
    init.conv("ppqg.conv1", 1, d.c2, ch);
    init.conv("ppqg.conv2", 3, ch, ch);
    init.conv("ppqg.conv3", 1, ch, ch);
    init.linear("ppqg.mlp1", hw, hid);
    init.linear("ppqg.mlp2", hid, hid);
    init.linear("ppqg.mlp3", hid, cfg.num_queries);

    init.normal("ppqg.prototypes", &[d.num_categories, ch], cfg.prototype_init_std);
    for w in ["ppqg.prompt.wq", "ppqg.prompt.wk", "ppqg.prompt.wv"] {
        init.weight(w, ch, ch);
    }
    init.layer_norm("ppqg.prompt.norm1", ch);
    init.ffn("ppqg.prompt.ffn", ch, cfg.ffn_width);
    init.layer_norm("ppqg.prompt.norm2", ch);
    init.linear("ppqg.pac.proj", d.audio_channels, ch);

    for w in ["ppqg.group.wq", "ppqg.group.wk", "ppqg.group.wv", "ppqg.group.wo"] {
        init.weight(w, ch, ch);
    }
}

/// Output of visual embedding aggregation.
pub struct Aggregated {
    /// Hidden map `V^h` flattened to `[H2·W2 × C^h]`.
    pub hidden_map: Var,
    /// Visual embeddings `V^e`, `[N × C^h]`.
    pub embeddings: Var,
}

/// `V^h = conv1×1(relu(conv3×3(relu(conv1×1(V2)))))`, then a three-layer
/// MLP over the flattened spatial axis maps `H2·W2` positions to `N`
/// embeddings.
pub fn aggregate_visual_embeddings<T: Real>(ctx: &mut Ctx<'_, T>, v2: Var, dims: &PpqgDims) -> Result<Aggregated> {
    let got = ctx.g.dims(v2);
    if got.len() != 3 || got[0] != dims.h2 || got[1] != dims.w2 || got[2] != dims.c2 {
        return Err(Error::shape(format!(
            "V2 dims {:?} do not match the bound shape [{}, {}, {}]",
            got, dims.h2, dims.w2, dims.c2
        )));
    }
    let hw = dims.h2 * dims.w2;
    let x = ctx.conv(v2, "ppqg.conv1")?;
    let x = ctx.g.relu(x);
    let x = ctx.conv(x, "ppqg.conv2")?;
    let x = ctx.g.relu(x);
    let vh = ctx.conv(x, "ppqg.conv3")?;
    let ch = ctx.g.dims(vh)[2];
    let hidden_map = ctx.g.reshape(vh, &[hw, ch])?;

    let t = ctx.g.transpose(hidden_map)?;
    let t = ctx.linear(t, "ppqg.mlp1")?;
    let t = ctx.g.relu(t);
    let t = ctx.linear(t, "ppqg.mlp2")?;
    let t = ctx.g.relu(t);
    let t = ctx.linear(t, "ppqg.mlp3")?;
    let embeddings = ctx.g.transpose(t)?;
    Ok(Aggregated { hidden_map, embeddings })
}

pub struct Prompted {
    pub queries: Var,
    /// `[N × K]` attention of embeddings over prototypes.
    pub attention: Var,
}

/// Cross-attend embeddings to the prototypes, then post-norm FFN:
/// `x = LN(V^e + softmax(q kᵀ / √C^h) v)`, `out = LN(x + FFN(x))`.
pub fn prompt_with_prototypes<T: Real>(ctx: &mut Ctx<'_, T>, embeddings: Var, prototypes: Var) -> Result<Prompted> {
    let ch = ctx.g.dims(embeddings)[1];
    if ctx.g.dims(prototypes).get(1) != Some(&ch) {
        return Err(Error::shape(format!(
            "prototypes {:?} do not match embedding width {ch}",
            ctx.g.dims(prototypes)
        )));
    }
    let q = ctx.project(embeddings, "ppqg.prompt.wq")?;
    let k = ctx.project(prototypes, "ppqg.prompt.wk")?;
    let v = ctx.project(prototypes, "ppqg.prompt.wv")?;
    let s = ctx.g.matmul_nt(q, k)?;
    let s = ctx.g.scale(s, lit(1.0 / (ch as f64).sqrt()));
    let attention = ctx.g.softmax(s, 1)?;
    let fetched = ctx.g.matmul(attention, v)?;
    let x = ctx.g.add(embeddings, fetched)?;
    let x = ctx.layer_norm(x, "ppqg.prompt.norm1")?;
    let f = ctx.ffn(x, "ppqg.prompt.ffn")?;
    let x = ctx.g.add(x, f)?;
    let queries = ctx.layer_norm(x, "ppqg.prompt.norm2")?;
    Ok(Prompted { queries, attention })
}

/// Clamp bounds applied to prototype-presence likelihoods before BCE.
pub const LIKELIHOOD_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy between likelihoods `[K]` and the presence
/// vector.
pub fn presence_bce<T: Real>(ctx: &mut Ctx<'_, T>, likelihoods: Var, presence: &[bool]) -> Result<Var> {
    let k = ctx.g.value(likelihoods).len();
    if presence.len() != k {
        return Err(Error::shape(format!("{k} likelihoods but {} presence flags", presence.len())));
    }
    let target = Tensor::from_fn([k], |i| if presence[i] { T::one() } else { T::zero() });
    let inverse = Tensor::from_fn([k], |i| if presence[i] { T::zero() } else { T::one() });
    let log_m = ctx.g.log(likelihoods);
    let one_minus = ctx.g.scale(likelihoods, -T::one());
    let one_minus = ctx.g.add_scalar(one_minus, T::one());
    let log_1m = ctx.g.log(one_minus);
    let pos = ctx.g.mul_const(log_m, &target)?;
    let neg = ctx.g.mul_const(log_1m, &inverse)?;
    let both = ctx.g.add(pos, neg)?;
    let m = ctx.g.mean(both);
    Ok(ctx.g.scale(m, -T::one()))
}

/// Prototype–audio contrastive loss. `Ā_t` is the row-mean of a linear
/// projection of the audio feature; each prototype's likelihood is the
/// clamped sigmoid of its inner product with `Ā_t`.
pub fn pac_loss<T: Real>(ctx: &mut Ctx<'_, T>, audio: Var, prototypes: Var, presence: &[bool]) -> Result<Var> {
    let proj = ctx.linear(audio, "ppqg.pac.proj")?;
    let pooled = ctx.g.mean_rows(proj)?;
    let ch = ctx.g.value(pooled).len();
    let col = ctx.g.reshape(pooled, &[ch, 1])?;
    let m = ctx.g.matmul(prototypes, col)?;
    let k = ctx.g.dims(m)[0];
    let m = ctx.g.reshape(m, &[k])?;
    let m = ctx.g.sigmoid(m);
    let m = ctx.g.clamp(m, lit(LIKELIHOOD_CLAMP), lit(1.0 - LIKELIHOOD_CLAMP));
    presence_bce(ctx, m, presence)
}

pub struct Grouped {
    pub queries: Var,
    /// Pixel-to-query assignment `[N × H2·W2]` (hard one-hot columns for
    /// `GumbelHard`), when grouping is enabled.
    pub assignment: Option<Var>,
}

/// `V^q = V̄^e + (Norm(R̂) · V^h W^v) W^o` with
/// `R̂ = onehot(argmax_N softmax(q kᵀ + G))` carrying the soft gradient.
/// `noise` is the Gumbel sample `G`, or `None` for noiseless argmax.
pub fn group_pixel_context<T: Real>(
    ctx: &mut Ctx<'_, T>,
    prompted: Var,
    hidden_map: Var,
    noise: Option<&Tensor<T>>,
    cfg: &ModelConfig,
) -> Result<Grouped> {
    if cfg.grouping == Grouping::None {
        return Ok(Grouped { queries: prompted, assignment: None });
    }
    let n = ctx.g.dims(prompted)[0];
    let hw = ctx.g.dims(hidden_map)[0];
    let q = ctx.project(prompted, "ppqg.group.wq")?;
    let k = ctx.project(hidden_map, "ppqg.group.wk")?;
    let logits = ctx.g.matmul_nt(q, k)?;
    let zero;
    let noise = match noise {
        Some(g) => g,
        None => {
            zero = Tensor::zeros([n, hw]);
            &zero
        }
    };
    let tau = lit(cfg.gumbel_tau);
    let assignment = match cfg.grouping {
        Grouping::GumbelHard => ctx.g.gumbel_softmax_hard(logits, noise, tau)?,
        Grouping::GumbelSoft => ctx.g.gumbel_softmax(logits, noise, tau)?,
        Grouping::SoftCrossAttn => {
            let ch = ctx.g.dims(q)[1];
            let s = ctx.g.scale(logits, lit(1.0 / (ch as f64).sqrt()));
            ctx.g.softmax(s, 1)?
        }
        Grouping::None => unreachable!(),
    };
    let weights = ctx.g.row_normalize_guarded(assignment)?;
    let values = ctx.project(hidden_map, "ppqg.group.wv")?;
    let context = ctx.g.matmul(weights, values)?;
    let context = ctx.project(context, "ppqg.group.wo")?;
    let queries = ctx.g.add(prompted, context)?;
    Ok(Grouped { queries, assignment: Some(assignment) })
}

pub struct PpqgOutput {
    pub queries: Var,
    /// Present when presence flags were given and prototypes are in use.
    pub pac: Option<Var>,
    pub hidden_map: Var,
    pub assignment: Option<Var>,
}

/// Full query generator for one frame.
pub fn ppqg_forward<T: Real>(
    ctx: &mut Ctx<'_, T>,
    v2: Var,
    audio: Var,
    presence: Option<&[bool]>,
    noise: Option<&Tensor<T>>,
    cfg: &ModelConfig,
    dims: &PpqgDims,
) -> Result<PpqgOutput> {
    let agg = aggregate_visual_embeddings(ctx, v2, dims)?;
    let prototypes = ctx.p("ppqg.prototypes")?;
    let prompted =
        if cfg.use_prototypes { prompt_with_prototypes(ctx, agg.embeddings, prototypes)?.queries } else { agg.embeddings };
    let pac = match presence {
        Some(m) if cfg.use_prototypes => Some(pac_loss(ctx, audio, prototypes, m)?),
        _ => None,
    };
    let grouped = group_pixel_context(ctx, prompted, agg.hidden_map, noise, cfg)?;
    Ok(PpqgOutput { queries: grouped.queries, pac, hidden_map: agg.hidden_map, assignment: grouped.assignment })
}
