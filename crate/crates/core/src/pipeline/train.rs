use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_and_pad, corrupt_snippet, training_windows, CorruptionSpec, Document, Snippet};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::model::{Gradients, ModelConfig, ModelParams, Network};
use crate::tensor::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    /// Snippets per batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Epochs between checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub coherence_enabled: bool,
    pub corruption: CorruptionSpec,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 32,
            epochs: 1,
            seed: 0,
            learning_rate: 1e-4,
            checkpoint_every: 0,
            coherence_enabled: true,
            corruption: CorruptionSpec::default(),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        self.corruption.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Segmentation,
    Coherence,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Segmentation => "J_seg",
            Objective::Coherence => "J_coh",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    /// Optimizer step, starting at 1.
    pub step: u64,
    pub objective: Objective,
    pub value: f64,
}

/// Per-step losses in optimizer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn values(&self, objective: Objective) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.objective == objective)
            .map(|e| e.value)
            .collect()
    }
}

/// One `step<TAB>objective<TAB>value` line per entry.
impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{}\t{}\t{}", e.step, e.objective.name(), e.value)?;
        }
        Ok(())
    }
}

pub struct TrainOutput {
    pub params: ModelParams<f32>,
    pub log: TrainLog,
}

pub fn train(
    corpus: &[Document],
    table: &EmbeddingTable,
    config: &ModelConfig,
    settings: &TrainSettings,
) -> Result<TrainOutput> {
    train_with(corpus, table, config, settings, |_, _| Ok(()))
}

/// Trains from a seeded initialization. With coherence enabled, every
/// segmentation step is followed by one coherence step on original/corrupt
/// pairs built from the same snippets. `on_checkpoint(epoch, params)` runs
/// every `checkpoint_every` epochs.
pub fn train_with(
    corpus: &[Document],
    table: &EmbeddingTable,
    config: &ModelConfig,
    settings: &TrainSettings,
    mut on_checkpoint: impl FnMut(usize, &ModelParams<f32>) -> Result<()>,
) -> Result<TrainOutput> {
    settings.validate()?;
    if settings.coherence_enabled != config.coherence_enabled {
        return Err(Error::Config(format!(
            "training coherence_enabled = {} but model coherence_enabled = {}",
            settings.coherence_enabled, config.coherence_enabled
        )));
    }
    let docs: Vec<&Document> = corpus.iter().filter(|d| !d.is_empty()).collect();
    if docs.is_empty() {
        return Err(Error::Config("training corpus has no non-empty documents".into()));
    }
    let mut params = ModelParams::<f32>::init(config, settings.seed)?;
    // Validates dims once; steps below build the network directly.
    Network::new(config, &params, table)?;

    let pools: Vec<Vec<Snippet>> = docs
        .iter()
        .map(|d| training_windows(d, config.k))
        .collect::<Result<_>>()?;
    let stream: Vec<(usize, usize)> = pools
        .iter()
        .enumerate()
        .flat_map(|(d, ws)| (0..ws.len()).map(move |w| (d, w)))
        .collect();

    let adam = AdamConfig {
        learning_rate: settings.learning_rate,
        ..AdamConfig::default()
    };
    // Separate moment estimates per objective: the summed segmentation loss
    // has far larger gradients than the averaged coherence loss.
    let mut seg_state = AdamState::new(adam, params.tensors());
    let mut coh_state = AdamState::new(adam, params.tensors());
    let mut step = 0u64;
    let mut log = TrainLog::default();
    let mut order = stream.clone();

    for epoch in 0..settings.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(epoch as u64 + 1);
        order.copy_from_slice(&stream);
        order.shuffle(&mut rng);

        for chunk in order.chunks(settings.batch_size) {
            let snippets: Vec<Snippet> = chunk.iter().map(|&(d, w)| pools[d][w].clone()).collect();
            let batch = batch_and_pad(&snippets, table, config.k, config.t);
            let net = Network { config, params: &params, table };
            let (loss, grads) = net.segmentation_gradients(&batch, Some(&mut rng))?;
            step += 1;
            apply(&mut params, &mut seg_state, &mut log, step, Objective::Segmentation, loss, grads)?;

            if !settings.coherence_enabled {
                continue;
            }
            let mut originals = Vec::new();
            let mut corrupt = Vec::new();
            for (&(d, _), s) in chunk.iter().zip(&snippets) {
                match corrupt_snippet(s, &pools[d], &settings.corruption, &mut rng) {
                    Ok(c) => {
                        originals.push(s.clone());
                        corrupt.push(c);
                    }
                    Err(Error::Corruption(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if originals.is_empty() {
                log::debug!("no corruptible snippet in batch; coherence step skipped");
                continue;
            }
            let original = batch_and_pad(&originals, table, config.k, config.t);
            let corrupt = batch_and_pad(&corrupt, table, config.k, config.t);
            let net = Network { config, params: &params, table };
            let (loss, grads) = net.coherence_gradients(&original, &corrupt, Some(&mut rng))?;
            step += 1;
            apply(&mut params, &mut coh_state, &mut log, step, Objective::Coherence, loss, grads)?;
        }
        log::info!(
            "epoch {} done, step {}, last J_seg {:?}",
            epoch + 1,
            step,
            log.values(Objective::Segmentation).last()
        );
        if settings.checkpoint_every > 0 && (epoch + 1) % settings.checkpoint_every == 0 {
            on_checkpoint(epoch + 1, &params)?;
        }
    }
    Ok(TrainOutput { params, log })
}

fn apply(
    params: &mut ModelParams<f32>,
    state: &mut AdamState<f32>,
    log: &mut TrainLog,
    step: u64,
    objective: Objective,
    loss: f32,
    grads: Gradients<f32>,
) -> Result<()> {
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: step as usize,
            objective: objective.name(),
            value: loss as f64,
        });
    }
    adam_step(params.tensors_mut(), &grads.grads, state)?;
    if !params.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: step as usize,
            objective: objective.name(),
            value: loss as f64,
        });
    }
    log.entries.push(LogEntry {
        step,
        objective,
        value: loss as f64,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (EmbeddingTable, ModelConfig, Vec<Document>) {
        let entries = (0..6).map(|i| (format!("w{i}"), vec![i as f32 * 0.2 - 0.5, 1.0 - i as f32 * 0.3]));
        let table = EmbeddingTable::from_entries(2, entries).unwrap();
        let config = ModelConfig {
            k: 4,
            t: 3,
            d_e: 2,
            d_p: 2,
            n_tt: 1,
            n_ts: 1,
            heads: 1,
            ff_dim: 4,
            ..ModelConfig::default()
        };
        let doc = Document {
            id: "a".into(),
            sentences: vec![
                vec!["w0".into(), "w1".into()],
                vec!["w2".into()],
                vec!["w3".into(), "w4".into()],
            ],
            boundaries: vec![1, 0, 1],
        };
        (table, config, vec![doc])
    }

    #[test]
    fn alternating_steps() {
        let (table, config, corpus) = setup();
        let settings = TrainSettings::default();
        let out = train(&corpus, &table, &config, &settings).unwrap();
        let names: Vec<_> = out.log.entries.iter().map(|e| (e.step, e.objective)).collect();
        assert_eq!(names, vec![(1, Objective::Segmentation), (2, Objective::Coherence)]);
    }

    #[test]
    fn segmentation_only_variant() {
        let (table, mut config, corpus) = setup();
        config.coherence_enabled = false;
        let settings = TrainSettings {
            coherence_enabled: false,
            epochs: 3,
            ..TrainSettings::default()
        };
        let out = train(&corpus, &table, &config, &settings).unwrap();
        assert!(out.log.values(Objective::Coherence).is_empty());
        assert_eq!(out.log.entries.len(), 3);
        assert_eq!(out.log.to_string().lines().next().unwrap().split('\t').nth(1), Some("J_seg"));
    }

    #[test]
    fn mismatched_variant_rejected() {
        let (table, config, corpus) = setup();
        let settings = TrainSettings {
            coherence_enabled: false,
            ..TrainSettings::default()
        };
        assert!(matches!(train(&corpus, &table, &config, &settings), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_and_s0_fixed() {
        let (table, config, corpus) = setup();
        let settings = TrainSettings {
            epochs: 2,
            learning_rate: 1e-2,
            ..TrainSettings::default()
        };
        let a = train(&corpus, &table, &config, &settings).unwrap();
        let b = train(&corpus, &table, &config, &settings).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        let fresh = ModelParams::<f32>::init(&config, settings.seed).unwrap();
        assert_eq!(a.params.s0(), fresh.s0());
        assert_ne!(a.params.tensors(), fresh.tensors());
    }

    #[test]
    fn checkpoint_schedule() {
        let (table, config, corpus) = setup();
        let settings = TrainSettings {
            epochs: 5,
            checkpoint_every: 2,
            ..TrainSettings::default()
        };
        let mut seen = Vec::new();
        train_with(&corpus, &table, &config, &settings, |e, _| {
            seen.push(e);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![2, 4]);
    }

    #[test]
    fn log_format() {
        let log = TrainLog {
            entries: vec![LogEntry {
                step: 3,
                objective: Objective::Coherence,
                value: 0.5,
            }],
        };
        assert_eq!(log.to_string(), "3\tJ_coh\t0.5\n");
    }
}
