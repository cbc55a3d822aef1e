use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conditioning::{AttentionBias, TokenConditioning};
use crate::error::{Error, Result};
use crate::graph::{Metric, DEFAULT_K};

/// Where the graph attention layer sits relative to the transformer blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegatPlacement {
    None,
    #[default]
    Pre,
    Post,
}

impl fmt::Display for DegatPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DegatPlacement::None => "none",
            DegatPlacement::Pre => "pre",
            DegatPlacement::Post => "post",
        })
    }
}

impl FromStr for DegatPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DegatPlacement::None),
            "pre" => Ok(DegatPlacement::Pre),
            "post" => Ok(DegatPlacement::Post),
            other => Err(Error::invalid(format!("unknown DeGAT placement {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub k_neighbors: usize,
    pub metric: Metric,
    pub degat_placement: DegatPlacement,
    pub token_conditioning: TokenConditioning,
    pub attention_bias: AttentionBias,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            patch: 8,
            dim: 32,
            blocks: 2,
            heads: 4,
            k_neighbors: DEFAULT_K,
            metric: Metric::Cosine,
            degat_placement: DegatPlacement::Pre,
            token_conditioning: TokenConditioning::None,
            attention_bias: AttentionBias::None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn n_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Values per patch: three colour channels.
    pub fn patch_features(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// The early graph pass runs when its output feeds the tokens, the
    /// camera-token prior, or the log-affinity bias.
    pub fn needs_early_degat(&self) -> bool {
        self.degat_placement == DegatPlacement::Pre
            || self.token_conditioning != TokenConditioning::None
            || self.attention_bias == AttentionBias::LogAffinity
    }

    pub fn uses_degat(&self) -> bool {
        self.needs_early_degat() || self.degat_placement == DegatPlacement::Post
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("image and patch sizes must be positive"));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::invalid(format!(
                "patch size {} does not divide the {}x{} image",
                self.patch, self.height, self.width
            )));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("{} heads do not divide embedding dim {}", self.heads, self.dim)));
        }
        let l = self.n_tokens();
        if self.uses_degat() && (self.k_neighbors == 0 || self.k_neighbors >= l) {
            return Err(Error::invalid(format!(
                "k_neighbors = {} is outside 1..{} for {l} tokens per frame",
                self.k_neighbors,
                l.saturating_sub(1)
            )));
        }
        Ok(())
    }
}
