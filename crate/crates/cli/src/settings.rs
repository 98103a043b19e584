//! Run configuration: built-in defaults, overridden by a flat `key = value`
//! file, overridden by flags.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cats_core::data::CorruptionSpec;
use cats_core::model::{ModelConfig, Variant};
use cats_core::pipeline::TrainSettings;
use clap::Args;

use crate::UsageError;

/// Every tunable value; unset fields fall through to the next layer.
#[derive(Args, Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    /// cats or tlt-ts
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Sentences per snippet
    #[arg(long)]
    pub k: Option<usize>,
    /// Tokens per sentence
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub d_p: Option<usize>,
    #[arg(long)]
    pub n_tt: Option<usize>,
    #[arg(long)]
    pub n_ts: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub delta_coh: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub p1: Option<f64>,
    #[arg(long)]
    pub p2: Option<f64>,
}

macro_rules! merge_fields {
    ($hi:expr, $lo:expr, $($f:ident),*) => {
        Overrides { $($f: $hi.$f.or($lo.$f)),* }
    };
}

impl Overrides {
    /// `self` wins over `lower` field by field.
    pub fn over(&self, lower: &Overrides) -> Overrides {
        merge_fields!(
            self, lower, variant, k, t, d_p, n_tt, n_ts, heads, ff_dim, dropout, delta_coh, tau, batch_size,
            epochs, seed, learning_rate, checkpoint_every, p1, p2
        )
    }

    /// Parses a config file: `key = value` lines, `#` comments, blank lines.
    pub fn parse_file(path: &Path) -> Result<Overrides> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }

    pub fn parse_str(text: &str) -> std::result::Result<Overrides, String> {
        let mut o = Overrides::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| format!("line {}: {key}: {e}", n + 1);
            macro_rules! set {
                ($f:ident) => {
                    o.$f = Some(value.parse().map_err(|e| bad(&e))?)
                };
            }
            match key {
                "variant" => set!(variant),
                "k" => set!(k),
                "t" => set!(t),
                "d_p" => set!(d_p),
                "n_tt" => set!(n_tt),
                "n_ts" => set!(n_ts),
                "heads" => set!(heads),
                "ff_dim" => set!(ff_dim),
                "dropout" => set!(dropout),
                "delta_coh" => set!(delta_coh),
                "tau" => set!(tau),
                "batch_size" => set!(batch_size),
                "epochs" => set!(epochs),
                "seed" => set!(seed),
                "learning_rate" => set!(learning_rate),
                "checkpoint_every" => set!(checkpoint_every),
                "p1" => set!(p1),
                "p2" => set!(p2),
                other => return Err(format!("line {}: unknown key {other:?}", n + 1)),
            }
        }
        Ok(o)
    }

    /// Applies the layers to the variant defaults for word vectors of width `d_e`.
    pub fn resolve(&self, d_e: usize) -> Result<(ModelConfig, TrainSettings)> {
        let variant = self.variant.unwrap_or(Variant::Cats);
        let mut c = ModelConfig::for_variant(variant, d_e);
        macro_rules! apply {
            ($target:ident, $($f:ident),*) => {
                $(if let Some(v) = self.$f { $target.$f = v; })*
            };
        }
        apply!(c, k, t, d_p, n_tt, n_ts, heads, ff_dim, dropout, delta_coh, tau);
        let defaults = TrainSettings::default();
        let s = TrainSettings {
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            epochs: self.epochs.unwrap_or(defaults.epochs),
            seed: self.seed.unwrap_or(defaults.seed),
            learning_rate: self.learning_rate.unwrap_or(defaults.learning_rate),
            checkpoint_every: self.checkpoint_every.unwrap_or(defaults.checkpoint_every),
            coherence_enabled: variant.coherence_enabled(),
            corruption: CorruptionSpec {
                p1: self.p1.unwrap_or(defaults.corruption.p1),
                p2: self.p2.unwrap_or(defaults.corruption.p2),
            },
        };
        if s.epochs == 0 || s.batch_size == 0 {
            bail!("epochs and batch_size must be positive");
        }
        Ok((c, s))
    }
}

/// `key = value` lines for every effective value.
pub fn echo(config: &ModelConfig, settings: &TrainSettings) -> String {
    let mut out = String::new();
    let lines: [(&str, String); 21] = [
        ("variant", config.variant().to_string()),
        ("k", config.k.to_string()),
        ("t", config.t.to_string()),
        ("d_e", config.d_e.to_string()),
        ("d_p", config.d_p.to_string()),
        ("n_tt", config.n_tt.to_string()),
        ("n_ts", config.n_ts.to_string()),
        ("heads", config.heads.to_string()),
        ("ff_dim", config.ff_dim.to_string()),
        ("dropout", config.dropout.to_string()),
        ("delta_coh", config.delta_coh.to_string()),
        ("tau", config.tau.to_string()),
        ("coherence_enabled", config.coherence_enabled.to_string()),
        ("batch_size", settings.batch_size.to_string()),
        ("epochs", settings.epochs.to_string()),
        ("seed", settings.seed.to_string()),
        ("learning_rate", settings.learning_rate.to_string()),
        ("checkpoint_every", settings.checkpoint_every.to_string()),
        ("p1", settings.corruption.p1.to_string()),
        ("p2", settings.corruption.p2.to_string()),
        ("adam", "beta1=0.9 beta2=0.999 epsilon=1e-8".to_string()),
    ];
    for (k, v) in lines {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}
