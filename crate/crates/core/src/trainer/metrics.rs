use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, RelationVocab};
use crate::error::{Error, Result};

/// Smallest probability fed to a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// A document-level relation fact, keyed by entity names.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub doc: String,
    pub head: String,
    pub tail: String,
    pub relation: String,
}

impl Fact {
    /// The document-independent part compared against training facts.
    pub fn triple(&self) -> (String, String, String) {
        (self.head.clone(), self.tail.clone(), self.relation.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
    pub f1: f64,
    pub ign_f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Precision, recall and F1 from confusion counts; `ign_f1` mirrors `f1`.
pub fn metrics_from_counts(tp: usize, fp: usize, fn_: usize) -> Metrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = harmonic(precision, recall);
    Metrics {
        precision,
        recall,
        micro_f1: f1,
        f1,
        ign_f1: f1,
        tp,
        fp,
        fn_,
    }
}

fn compare_sets<'a>(
    predicted: impl IntoIterator<Item = &'a Fact>,
    gold: &HashSet<&'a Fact>,
) -> (usize, usize, usize) {
    let predicted: HashSet<&Fact> = predicted.into_iter().collect();
    let tp = predicted.iter().filter(|f| gold.contains(*f)).count();
    (tp, predicted.len() - tp, gold.len() - tp)
}

/// Document-level scoring of facts whose score reaches `threshold`.
///
/// IgnF1 drops, from both sides, every fact whose (head, tail, relation)
/// triple also occurs in `train`. If nothing is left it is reported as 0.
pub fn evaluate_doclevel(
    predicted: &[(Fact, f64)],
    gold: &BTreeSet<Fact>,
    train: &HashSet<(String, String, String)>,
    threshold: f64,
) -> Metrics {
    let kept: Vec<&Fact> = predicted.iter().filter(|(_, s)| *s >= threshold).map(|(f, _)| f).collect();
    let gold_all: HashSet<&Fact> = gold.iter().collect();
    let (tp, fp, fn_) = compare_sets(kept.iter().copied(), &gold_all);
    let mut m = metrics_from_counts(tp, fp, fn_);

    let unseen = |f: &&Fact| !train.contains(&f.triple());
    let gold_ign: HashSet<&Fact> = gold.iter().filter(unseen).collect();
    let pred_ign: Vec<&Fact> = kept.iter().copied().filter(unseen).collect();
    if gold_ign.is_empty() && pred_ign.is_empty() {
        if !gold.is_empty() || !kept.is_empty() {
            log::warn!("every fact also appears in the training set; IgnF1 reported as 0");
        }
        m.ign_f1 = 0.0;
    } else {
        let (tp, fp, fn_) = compare_sets(pred_ign, &gold_ign);
        m.ign_f1 = metrics_from_counts(tp, fp, fn_).f1;
    }
    m
}

/// Single-label decision: the best-scoring relation, or `None` ("No
/// Relation") when even that score is below `threshold`.
pub fn sentlevel_decision(scores: &[f64], threshold: f64) -> Option<usize> {
    let (best, score) = scores
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &s)| match acc {
            Some((_, b)) if b >= s => acc,
            _ => Some((i, s)),
        })?;
    (score >= threshold).then_some(best)
}

/// Micro-averaged P/R/F1 over the positive classes; `None` is "No Relation".
pub fn evaluate_sentlevel(predictions: &[Option<usize>], gold: &[Option<usize>]) -> Result<Metrics> {
    if predictions.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} gold instances",
            predictions.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in predictions.iter().zip(gold) {
        match (p, g) {
            (Some(p), Some(g)) if p == g => tp += 1,
            (Some(_), Some(_)) => {
                fp += 1;
                fn_ += 1;
            }
            (Some(_), None) => fp += 1,
            (None, Some(_)) => fn_ += 1,
            (None, None) => {}
        }
    }
    Ok(metrics_from_counts(tp, fp, fn_))
}

/// Mean binary cross-entropy over pairs and relations.
pub fn bce_loss(scores: &[Vec<f64>], gold: &[Vec<f64>], num_relations: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("bce_loss"));
    }
    if scores.len() != gold.len() {
        return Err(Error::Invalid(format!("{} score rows for {} gold rows", scores.len(), gold.len())));
    }
    let mut total = 0.0;
    for (row, y) in scores.iter().zip(gold) {
        if row.len() != num_relations || y.len() != num_relations {
            return Err(Error::Invalid(format!("expected {num_relations} relations per pair")));
        }
        for (&p, &y) in row.iter().zip(y) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Numeric(format!("score {p} is not a probability")));
            }
            let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
    }
    Ok(total / (scores.len() * num_relations) as f64)
}

/// Seeded shuffle cut into `k` contiguous folds; returns `(train, test)`
/// index lists per fold. Earlier folds take the remainder.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::Config(format!("cannot cut {n} items into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let test = order[start..start + len].to_vec();
        let train = order[..start].iter().chain(&order[start + len..]).copied().collect();
        folds.push((train, test));
        start += len;
    }
    Ok(folds)
}

/// `2tp / (predicted + gold)` compared exactly as fractions.
fn better(a: (usize, usize), b: (usize, usize)) -> bool {
    let lhs = a.0 as u128 * b.1.max(1) as u128;
    let rhs = b.0 as u128 * a.1.max(1) as u128;
    lhs > rhs
}

/// Threshold maximizing F1 of `score >= threshold` against binary gold.
/// Candidates are the distinct scores; ties go to the lowest.
pub fn tune_threshold(scores: &[f64], gold: &[bool]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("tune_threshold"));
    }
    if scores.len() != gold.len() {
        return Err(Error::Invalid(format!("{} scores for {} gold labels", scores.len(), gold.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score while tuning the threshold".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let positives = gold.iter().filter(|&&g| g).count();

    // Sweep from the highest score down; every group of equal scores is one
    // candidate. The last best seen is the lowest threshold with that F1.
    let (mut tp, mut predicted) = (0usize, 0usize);
    let mut best: Option<(f64, (usize, usize))> = None;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(gold[order[i]]);
            predicted += 1;
            i += 1;
        }
        let f1 = (2 * tp, predicted + positives);
        match best {
            Some((_, b)) if better(b, f1) => {}
            _ => best = Some((s, f1)),
        }
    }
    Ok(best.expect("non-empty").0)
}

/// Tuning for the single-label decision rule, where the threshold applies
/// to each instance's best score.
pub fn tune_threshold_sentlevel(scores: &[Vec<f64>], gold: &[Option<usize>]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("tune_threshold_sentlevel"));
    }
    let mut candidates: Vec<f64> = scores
        .iter()
        .filter_map(|row| row.iter().copied().fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s)))))
        .collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    candidates.dedup();
    let mut best: Option<(f64, f64)> = None;
    for &t in &candidates {
        let preds: Vec<Option<usize>> = scores.iter().map(|row| sentlevel_decision(row, t)).collect();
        let f1 = evaluate_sentlevel(&preds, gold)?.f1;
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((t, f1));
        }
    }
    best.map(|(t, _)| t)
        .ok_or(Error::EmptyInput("tune_threshold_sentlevel"))
}

/// Gold facts of a corpus, named through `vocab`.
pub fn gold_facts(docs: &[Document], vocab: &RelationVocab) -> BTreeSet<Fact> {
    let mut out = BTreeSet::new();
    for doc in docs {
        for label in &doc.labels {
            for &r in &label.relations {
                out.insert(Fact {
                    doc: doc.doc_id.clone(),
                    head: doc.entities[label.head].name.clone(),
                    tail: doc.entities[label.tail].name.clone(),
                    relation: vocab.name(r).to_string(),
                });
            }
        }
    }
    out
}

/// Name triples of a training corpus, the reference set for IgnF1.
pub fn train_triples(docs: &[Document], vocab: &RelationVocab) -> HashSet<(String, String, String)> {
    gold_facts(docs, vocab).iter().map(Fact::triple).collect()
}
