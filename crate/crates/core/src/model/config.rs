use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which objectives the model is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Segmentation plus the auxiliary coherence objective.
    Cats,
    /// Segmentation objective only.
    TltTs,
}

impl Variant {
    pub fn default_tau(self) -> f64 {
        match self {
            Variant::Cats => 0.3,
            Variant::TltTs => 0.5,
        }
    }

    pub fn coherence_enabled(self) -> bool {
        matches!(self, Variant::Cats)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Cats => "cats",
            Variant::TltTs => "tlt-ts",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cats" => Ok(Variant::Cats),
            "tlt-ts" => Ok(Variant::TltTs),
            other => Err(Error::Config(format!("unknown variant {other:?} (expected cats or tlt-ts)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Sentences per snippet.
    pub k: usize,
    /// Tokens per sentence, not counting the sentence-start token.
    pub t: usize,
    pub d_e: usize,
    pub d_p: usize,
    pub n_tt: usize,
    pub n_ts: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub delta_coh: f64,
    pub tau: f64,
    pub coherence_enabled: bool,
}

impl ModelConfig {
    /// Full-size configuration for a variant and word-vector width.
    pub fn for_variant(variant: Variant, d_e: usize) -> Self {
        ModelConfig {
            k: 16,
            t: 50,
            d_e,
            d_p: 10,
            n_tt: 6,
            n_ts: 6,
            heads: 4,
            ff_dim: 1024,
            dropout: 0.1,
            delta_coh: 1.0,
            tau: variant.default_tau(),
            coherence_enabled: variant.coherence_enabled(),
        }
    }

    pub fn variant(&self) -> Variant {
        if self.coherence_enabled {
            Variant::Cats
        } else {
            Variant::TltTs
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_e + self.d_p
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t", self.t),
            ("d_e", self.d_e),
            ("d_p", self.d_p),
            ("n_tt", self.n_tt),
            ("n_ts", self.n_ts),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.d_model() % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_e + d_p = {} is not divisible by {} heads",
                self.d_model(),
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.delta_coh.is_finite() && self.delta_coh > 0.0) {
            return Err(Error::Config(format!("delta_coh must be positive, got {}", self.delta_coh)));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Cats, 300)
    }
}
