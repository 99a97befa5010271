//! The full segmentation model: query generation, decoder and heads.

pub mod config;
pub mod decoder;
pub mod heads;
pub mod nn;
pub mod ppqg;

pub use config::{Grouping, ModelConfig};
pub use heads::{assemble_semantic_map, LayerOutput, Prediction};
pub use nn::{Ctx, Init, ParamStore};
pub use ppqg::PpqgDims;

use crate::data::FeatureBundle;
use crate::error::{Error, Result};
use crate::tensor::{gumbel_noise, Graph, Real, Rng, Tensor, Var};

/// Input sizes a model is bound to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub visual_channels: [usize; 4],
    pub audio_channels: usize,
    pub num_categories: usize,
}

impl Geometry {
    /// `(H2, W2)`, the stride-4 mask resolution.
    pub fn mask_size(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    pub fn ppqg_dims(&self) -> PpqgDims {
        let (h2, w2) = self.mask_size();
        PpqgDims {
            h2,
            w2,
            c2: self.visual_channels[0],
            audio_channels: self.audio_channels,
            num_categories: self.num_categories,
        }
    }
}

/// Graph handles produced by one forward pass.
pub struct ForwardOutput {
    /// Initial prediction followed by one per decoder block.
    pub layers: Vec<LayerOutput>,
    pub pac: Option<Var>,
    pub assignment: Option<Var>,
}

impl ForwardOutput {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("at least one layer output")
    }
}

/// Build every parameter for `cfg` and `geom`, deterministically from `seed`.
pub fn init_params<T: Real>(cfg: &ModelConfig, geom: &Geometry, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let mut init = Init::new(&mut rng);
    let ch = cfg.hidden;
    if cfg.use_act_baseline {
        init.normal("act.queries", &[cfg.num_queries, ch], 1.0);
        init.linear("act.audio_proj", geom.audio_channels, ch);
    } else {
        ppqg::init_params(&mut init, cfg, &geom.ppqg_dims());
    }
    decoder::init_params(&mut init, cfg, &geom.visual_channels, geom.audio_channels);
    heads::init_params(&mut init, cfg, geom.visual_channels[0], geom.num_categories);
    Ok(init.finish())
}

/// Audio-centric queries: learnable queries plus the projected, pooled audio
/// feature added to every row.
pub fn act_queries<T: Real>(ctx: &mut Ctx<'_, T>, audio: Var) -> Result<Var> {
    let q = ctx.p("act.queries")?;
    let a = ctx.linear(audio, "act.audio_proj")?;
    let a = ctx.g.mean_rows(a)?;
    ctx.g.add_row(q, a)
}

/// A configured model bound to one input geometry.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub geometry: Geometry,
}

impl Model {
    pub fn new(config: ModelConfig, geometry: Geometry) -> Result<Self> {
        config.validate()?;
        if geometry.height % 32 != 0 || geometry.width % 32 != 0 {
            return Err(Error::config(format!(
                "image size {}×{} is not divisible by 32",
                geometry.height, geometry.width
            )));
        }
        Ok(Model { config, geometry })
    }

    /// Gumbel noise for the grouping step, or `None` when grouping does not
    /// sample.
    pub fn sample_noise<T: Real>(&self, rng: &mut Rng) -> Option<Tensor<T>> {
        match self.config.grouping {
            Grouping::GumbelHard | Grouping::GumbelSoft if !self.config.use_act_baseline => {
                let (h2, w2) = self.geometry.mask_size();
                Some(gumbel_noise(rng, &[self.config.num_queries, h2 * w2]))
            }
            _ => None,
        }
    }

    /// Forward pass on one frame. `presence` enables the PAC loss; `noise`
    /// is the Gumbel sample for grouping (`None` for plain argmax).
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        features: &FeatureBundle<T>,
        presence: Option<&[bool]>,
        noise: Option<&Tensor<T>>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let visual: [Var; 4] = std::array::from_fn(|i| ctx.g.constant(features.visual[i].clone()));
        let audio = ctx.g.constant(features.audio.clone());
        let (queries, pac, assignment) = if cfg.use_act_baseline {
            (act_queries(ctx, audio)?, None, None)
        } else {
            let out = ppqg::ppqg_forward(ctx, visual[0], audio, presence, noise, cfg, &self.geometry.ppqg_dims())?;
            (out.queries, out.pac, out.assignment)
        };
        let (audio_mem, levels) = decoder::build_memories(ctx, audio, &visual)?;
        let pixel = heads::pixel_embeddings(ctx, visual[0])?;
        let layers =
            decoder::decoder_forward(ctx, queries, &audio_mem, &levels, pixel, self.geometry.mask_size(), cfg)?;
        Ok(ForwardOutput { layers, pac, assignment })
    }

    /// Final-layer prediction for evaluation. Gumbel noise is drawn from
    /// `rng` only when the config asks for it at evaluation time.
    pub fn predict<T: Real>(&self, params: &ParamStore<T>, features: &FeatureBundle<T>, rng: &mut Rng) -> Result<Prediction<T>> {
        let noise = if self.config.gumbel_at_eval { self.sample_noise(rng) } else { None };
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, params);
        let out = self.forward(&mut ctx, features, None, noise.as_ref())?;
        let last = *out.last();
        Prediction::new(g.value(last.class_logits).clone(), g.value(last.mask_logits).clone(), self.geometry.mask_size())
    }
}
