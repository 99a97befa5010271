use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How grouped pixel context is folded into the queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// Straight-through Gumbel-softmax hard assignment of pixels to queries.
    GumbelHard,
    /// The soft relaxation of `GumbelHard` (no one-hot rounding).
    GumbelSoft,
    /// Ordinary cross-attention, softmax over pixels.
    SoftCrossAttn,
    /// Skip grouping; queries come straight from aggregation (+ prompting).
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width `C^h`.
    pub hidden: usize,
    /// Number of queries `N`.
    pub num_queries: usize,
    /// Repetitions `D` of the audio + three-scale interaction unit.
    pub decoder_depth: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Hidden width of the spatial aggregation MLP; `None` means
    /// `max(N, H2·W2 / 4)`.
    pub aggregation_hidden: Option<usize>,
    pub gumbel_tau: f64,
    pub grouping: Grouping,
    pub use_prototypes: bool,
    /// Replace vision-derived queries with learnable queries plus pooled
    /// audio (audio-centric baseline).
    pub use_act_baseline: bool,
    pub gumbel_at_eval: bool,
    pub prototype_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            num_queries: 16,
            decoder_depth: 2,
            heads: 4,
            ffn_width: 256,
            aggregation_hidden: None,
            gumbel_tau: 1.0,
            grouping: Grouping::GumbelHard,
            use_prototypes: true,
            use_act_baseline: false,
            gumbel_at_eval: false,
            prototype_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        ModelConfig { hidden: 256, num_queries: 100, ffn_width: 1024, heads: 8, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.num_queries == 0 || self.ffn_width == 0 {
            return Err(Error::config("hidden, num_queries and ffn_width must be positive"));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads)));
        }
        if self.hidden % 4 != 0 {
            return Err(Error::config("hidden must be a multiple of 4 for 2-D positional encodings"));
        }
        if !(self.gumbel_tau > 0.0) {
            return Err(Error::config("gumbel_tau must be positive"));
        }
        if self.aggregation_hidden == Some(0) {
            return Err(Error::config("aggregation_hidden must be positive"));
        }
        Ok(())
    }

    pub fn aggregation_width(&self, pixels: usize) -> usize {
        self.aggregation_hidden.unwrap_or_else(|| self.num_queries.max(pixels / 4))
    }

    /// `4·D + 1`.
    pub fn num_blocks(&self) -> usize {
        4 * self.decoder_depth + 1
    }
}
