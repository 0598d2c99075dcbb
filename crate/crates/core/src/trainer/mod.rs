//! Training loop, evaluation and experiment bookkeeping.

mod metrics;
#[cfg(test)]
mod tests;

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{
    bce_loss, evaluate_doclevel, evaluate_sentlevel, gold_facts, kfold, metrics_from_counts, sentlevel_decision,
    train_triples, tune_threshold, tune_threshold_sentlevel, Fact, Metrics, LOG_CLAMP,
};

use crate::corpus::{Document, RelationVocab};
use crate::encoder::{Dropout, EmbedderSpec};
use crate::error::{Error, Result};
use crate::kgstore::{DescriptionStore, KgStore};
use crate::model::{prepare, Miuk, ModeConfig, PreparedDoc};
use crate::tensorcore::{AdamConfig, Gradients, Graph, ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Fixed(f64),
    DevTuned,
}

/// Which metric family a run reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Multi-label facts per entity pair, scored with F1 and IgnF1.
    #[default]
    Document,
    /// One relation or "No Relation" per pair, scored with micro-F1.
    Sentence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    pub d: usize,
    pub task: Task,
    pub threshold: ThresholdPolicy,
    pub embedder: EmbedderSpec,
    pub mode: ModeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Small model for CPU runs on synthetic data.
    pub fn desk() -> Self {
        TrainConfig {
            lr_encoder: 1e-3,
            lr_other: 1e-3,
            batch_size: 8,
            epochs: 20,
            dropout: 0.1,
            seed: 0,
            d: 32,
            task: Task::Document,
            threshold: ThresholdPolicy::Fixed(0.5),
            embedder: EmbedderSpec {
                base_dim: 128,
                ..EmbedderSpec::default()
            },
            mode: ModeConfig::default(),
        }
    }

    /// Full-size settings: d 100, 768-wide embeddings, lr 1e-5, batch 16.
    pub fn full_scale() -> Self {
        TrainConfig {
            lr_encoder: 1e-5,
            lr_other: 1e-5,
            batch_size: 16,
            dropout: 0.2,
            d: 100,
            threshold: ThresholdPolicy::DevTuned,
            embedder: EmbedderSpec::default(),
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_encoder", self.lr_encoder), ("lr_other", self.lr_other)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        if let ThresholdPolicy::Fixed(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("threshold.fixed must lie in [0, 1], got {t}")));
            }
        }
        self.embedder.validate()?;
        self.mode.validate()
    }
}

/// A corpus with everything needed to run the network on it.
pub struct Corpus<'a> {
    pub docs: &'a [Document],
    pub kg: &'a KgStore,
    pub descriptions: &'a DescriptionStore,
    pub vocab: &'a RelationVocab,
}

impl Corpus<'_> {
    pub fn prepare(&self, mode: &ModeConfig) -> Result<Vec<PreparedDoc>> {
        self.docs
            .par_iter()
            .map(|d| prepare(d, self.kg, self.descriptions, mode, self.vocab.len()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev_f1: Option<f64>,
    pub dev_ign_f1: Option<f64>,
}

pub fn write_history<W: Write>(history: &[EpochRecord], mut out: W) -> Result<()> {
    for rec in history {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_history(history, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub struct Trained {
    pub store: ParamStore<f32>,
    pub model: Miuk,
    pub history: Vec<EpochRecord>,
    /// Decision threshold after training: the fixed value, or the one tuned
    /// on the dev set (0.5 when there is none).
    pub threshold: f64,
}

/// Held-out scores and metrics for a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub threshold: f64,
}

// Independent random streams per purpose, all derived from the run seed.
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1 << 62;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fresh parameters for `config`.
pub fn initialize(config: &TrainConfig, num_relations: usize) -> Result<(ParamStore<f32>, Miuk)> {
    config.validate()?;
    let embedder = config.embedder.build()?;
    let mut store = ParamStore::new();
    let model = Miuk::register(
        &mut store,
        embedder,
        config.d,
        num_relations,
        &config.mode,
        &mut stream_rng(config.seed, INIT_STREAM),
    )?;
    Ok((store, model))
}

/// Trains from a fresh initialization. Documents are reshuffled every epoch
/// by a seeded permutation; each batch is one Adam step on the mean BCE over
/// its pairs and relations. Per-document graphs run in parallel and their
/// gradients are summed in batch order, so results do not depend on the
/// number of worker threads.
pub fn train(train: &Corpus<'_>, dev: Option<&Corpus<'_>>, config: &TrainConfig) -> Result<Trained> {
    if train.docs.is_empty() {
        return Err(Error::Config("the training set is empty".into()));
    }
    let (mut store, model) = initialize(config, train.vocab.len())?;
    let l = train.vocab.len();
    let prepared = train.prepare(&config.mode)?;
    let dev_prepared = dev.map(|d| d.prepare(&config.mode)).transpose()?;
    let train_set = train_triples(train.docs, train.vocab);
    let adam = AdamConfig::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle = stream_rng(config.seed, SHUFFLE_STREAM);
    let mut threshold = match config.threshold {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::DevTuned => 0.5,
    };

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut cells) = (0.0, 0usize);
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let pairs: usize = batch.iter().map(|&i| prepared[i].num_pairs()).sum();
            if pairs == 0 {
                continue;
            }
            let weight = 1.0 / (pairs * l) as f64;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let stream = ((epoch as u64) << 32) | (step * config.batch_size + j) as u64;
                    doc_gradients(&model, &store, &prepared[i], config, weight, stream_rng(config.seed, stream))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = Gradients::new(store.len());
            let mut batch_loss = 0.0;
            for (loss, grads) in results.into_iter().flatten() {
                batch_loss += loss;
                total.merge(&grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!("loss is {batch_loss} at epoch {epoch}, step {}", step + 1)));
            }
            store.accumulate(&total);
            store.adam_step(&adam, |group| match group {
                ParamGroup::Encoder => config.lr_encoder,
                ParamGroup::Other => config.lr_other,
            });
            store.zero_grad();
            if let Err(e) = store.all_finite() {
                return Err(Error::Numeric(format!("{e} after epoch {epoch}, step {}", step + 1)));
            }
            loss_sum += batch_loss * (pairs * l) as f64;
            cells += pairs * l;
        }
        let loss = if cells == 0 { 0.0 } else { loss_sum / cells as f64 };
        let (dev_f1, dev_ign_f1) = match (&dev, &dev_prepared) {
            (Some(corpus), Some(prep)) => {
                let scores = score_prepared(&model, &store, prep, &config.mode)?;
                let eval = evaluate_scores(config.task, corpus, prep, &scores, &train_set, config.threshold)?;
                threshold = eval.threshold;
                (Some(eval.metrics.f1), Some(eval.metrics.ign_f1))
            }
            _ => (None, None),
        };
        log::info!(
            "epoch {epoch}: loss {loss:.6}{}",
            dev_f1.map_or(String::new(), |f| format!(", dev F1 {f:.4}"))
        );
        history.push(EpochRecord {
            epoch,
            loss,
            dev_f1,
            dev_ign_f1,
        });
    }
    Ok(Trained {
        store,
        model,
        history,
        threshold,
    })
}

fn doc_gradients(
    model: &Miuk,
    store: &ParamStore<f32>,
    prep: &PreparedDoc,
    config: &TrainConfig,
    weight: f64,
    mut rng: ChaCha8Rng,
) -> Result<Option<(f64, Gradients<f32>)>> {
    let mut g = Graph::with_params(store);
    let mut dropout = Dropout {
        ratio: config.dropout,
        rng: &mut rng,
    };
    let active = (config.dropout > 0.0).then_some(&mut dropout);
    let nodes = model.forward_doc(&mut g, prep, &config.mode, active)?;
    let Some(loss) = model.doc_loss(&mut g, prep, &nodes, weight)? else {
        return Ok(None);
    };
    let value = g.scalar(loss) as f64;
    Ok(Some((value, g.backward(loss)?.into_params())))
}

/// Evaluation-mode scores per document, pair and relation.
pub fn score_prepared(
    model: &Miuk,
    store: &ParamStore<f32>,
    prepared: &[PreparedDoc],
    mode: &ModeConfig,
) -> Result<Vec<Vec<Vec<f64>>>> {
    prepared.par_iter().map(|p| model.score_doc(store, p, mode)).collect()
}

/// Every (pair, relation) score as a named fact.
pub fn scored_facts(prepared: &[PreparedDoc], scores: &[Vec<Vec<f64>>], vocab: &RelationVocab) -> Vec<(Fact, f64)> {
    let mut out = Vec::new();
    for (prep, doc_scores) in prepared.iter().zip(scores) {
        for (&(h, t), row) in prep.pairs.iter().zip(doc_scores) {
            for (r, &s) in row.iter().enumerate() {
                out.push((
                    Fact {
                        doc: prep.doc_id.clone(),
                        head: prep.entities[h].name.clone(),
                        tail: prep.entities[t].name.clone(),
                        relation: vocab.name(r).to_string(),
                    },
                    s,
                ));
            }
        }
    }
    out
}

/// Gold single labels per candidate pair, in prepared order.
fn sentlevel_gold(prepared: &[PreparedDoc]) -> Result<Vec<Option<usize>>> {
    let mut gold = Vec::new();
    for prep in prepared {
        for (pair, y) in prep.pairs.iter().zip(&prep.targets) {
            let positives: Vec<usize> = (0..y.len()).filter(|&r| y[r] > 0.5).collect();
            if positives.len() > 1 {
                return Err(Error::Invalid(format!(
                    "{}: pair {pair:?} has {} relations; sentence-level evaluation needs at most one",
                    prep.doc_id,
                    positives.len()
                )));
            }
            gold.push(positives.first().copied());
        }
    }
    Ok(gold)
}

/// Metrics for already computed scores, under a threshold policy.
pub fn evaluate_scores(
    task: Task,
    corpus: &Corpus<'_>,
    prepared: &[PreparedDoc],
    scores: &[Vec<Vec<f64>>],
    train_set: &HashSet<(String, String, String)>,
    policy: ThresholdPolicy,
) -> Result<Evaluation> {
    match task {
        Task::Document => {
            let facts = scored_facts(prepared, scores, corpus.vocab);
            let gold: BTreeSet<Fact> = gold_facts(corpus.docs, corpus.vocab);
            let threshold = match policy {
                ThresholdPolicy::Fixed(t) => t,
                ThresholdPolicy::DevTuned => {
                    let s: Vec<f64> = facts.iter().map(|(_, s)| *s).collect();
                    let y: Vec<bool> = facts.iter().map(|(f, _)| gold.contains(f)).collect();
                    tune_threshold(&s, &y)?
                }
            };
            Ok(Evaluation {
                metrics: evaluate_doclevel(&facts, &gold, train_set, threshold),
                threshold,
            })
        }
        Task::Sentence => {
            let gold = sentlevel_gold(prepared)?;
            let rows: Vec<Vec<f64>> = scores.iter().flatten().cloned().collect();
            let threshold = match policy {
                ThresholdPolicy::Fixed(t) => t,
                ThresholdPolicy::DevTuned => tune_threshold_sentlevel(&rows, &gold)?,
            };
            let preds: Vec<Option<usize>> = rows.iter().map(|r| sentlevel_decision(r, threshold)).collect();
            Ok(Evaluation {
                metrics: evaluate_sentlevel(&preds, &gold)?,
                threshold,
            })
        }
    }
}

/// Scores `corpus` with a trained model at a fixed threshold.
pub fn evaluate(
    model: &Miuk,
    store: &ParamStore<f32>,
    corpus: &Corpus<'_>,
    mode: &ModeConfig,
    task: Task,
    train_set: &HashSet<(String, String, String)>,
    threshold: f64,
) -> Result<Evaluation> {
    let prepared = corpus.prepare(mode)?;
    let scores = score_prepared(model, store, &prepared, mode)?;
    evaluate_scores(task, corpus, &prepared, &scores, train_set, ThresholdPolicy::Fixed(threshold))
}
