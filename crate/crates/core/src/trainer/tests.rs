use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;

use super::*;
use crate::corpus::{generate_synthetic, SynthConfig};

fn fact(name: &str) -> Fact {
    Fact {
        doc: "d0".into(),
        head: format!("{name}_h"),
        tail: format!("{name}_t"),
        relation: "R".into(),
    }
}

fn scored(facts: &[Fact]) -> Vec<(Fact, f64)> {
    facts.iter().map(|f| (f.clone(), 0.9)).collect()
}

#[test]
fn bce_at_the_uninformative_point_is_ln2() {
    let scores = vec![vec![0.5; 3]; 4];
    let gold = vec![vec![1.0, 0.0, 0.0], vec![0.0; 3], vec![0.0, 1.0, 1.0], vec![0.0; 3]];
    let loss = bce_loss(&scores, &gold, 3).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn bce_of_perfect_scores_is_near_zero() {
    let gold = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let loss = bce_loss(&gold, &gold, 2).unwrap();
    assert!((0.0..1e-11).contains(&loss), "{loss}");
}

#[test]
fn bce_rejects_values_that_are_not_probabilities() {
    for bad in [1.5, -0.1, f64::NAN] {
        let err = bce_loss(&[vec![bad]], &[vec![1.0]], 1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }
}

#[test]
fn bce_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    use rand::Rng;
    for _ in 0..50 {
        let (n, l) = (rng.gen_range(1..8), rng.gen_range(1..5));
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..l).map(|_| rng.gen_range(0.001..0.999)).collect()).collect();
        let gold: Vec<Vec<f64>> = (0..n).map(|_| (0..l).map(|_| f64::from(rng.gen_bool(0.3))).collect()).collect();
        let mut terms = Vec::new();
        for i in 0..n {
            for r in 0..l {
                let p = scores[i][r];
                terms.push(if gold[i][r] == 1.0 { -p.ln() } else { -(1.0 - p).ln() });
            }
        }
        let oracle = terms.iter().sum::<f64>() / terms.len() as f64;
        assert!((bce_loss(&scores, &gold, l).unwrap() - oracle).abs() < 1e-12);
    }
}

#[test]
fn doclevel_exact_predictions() {
    let gold: BTreeSet<Fact> = [fact("a"), fact("b")].into();
    let facts: Vec<Fact> = gold.iter().cloned().collect();
    let m = evaluate_doclevel(&scored(&facts), &gold, &HashSet::new(), 0.5);
    assert_eq!((m.f1, m.ign_f1), (1.0, 1.0));
}

#[test]
fn doclevel_hand_count() {
    let gold: BTreeSet<Fact> = [fact("a"), fact("b")].into();
    let pred = scored(&[fact("a"), fact("c")]);
    let m = evaluate_doclevel(&pred, &gold, &HashSet::new(), 0.5);
    assert_eq!((m.precision, m.recall, m.f1, m.ign_f1), (0.5, 0.5, 0.5, 0.5));
    assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 1));

    let train: HashSet<_> = [fact("a").triple()].into();
    let m = evaluate_doclevel(&pred, &gold, &train, 0.5);
    assert_eq!(m.f1, 0.5);
    assert_eq!(m.ign_f1, 0.0);
}

#[test]
fn doclevel_threshold_filters_predictions() {
    let gold: BTreeSet<Fact> = [fact("a")].into();
    let pred = vec![(fact("a"), 0.7), (fact("b"), 0.4)];
    assert_eq!(evaluate_doclevel(&pred, &gold, &HashSet::new(), 0.5).precision, 1.0);
    assert_eq!(evaluate_doclevel(&pred, &gold, &HashSet::new(), 0.3).precision, 0.5);
}

#[test]
fn ign_f1_of_an_empty_remainder_is_zero() {
    let gold: BTreeSet<Fact> = [fact("a")].into();
    let train: HashSet<_> = [fact("a").triple()].into();
    let m = evaluate_doclevel(&scored(&[fact("a")]), &gold, &train, 0.5);
    assert_eq!((m.f1, m.ign_f1), (1.0, 0.0));
}

#[test]
fn sentlevel_fixtures() {
    let gold = [Some(0), Some(1), Some(2), None];
    let m = evaluate_sentlevel(&gold, &gold).unwrap();
    assert_eq!((m.precision, m.recall, m.micro_f1), (1.0, 1.0, 1.0));

    let m = evaluate_sentlevel(&[None; 4], &gold).unwrap();
    assert_eq!(m.recall, 0.0);
    assert_eq!(m.micro_f1, 0.0);

    // tp: 4, fp: 2 (a wrong class, a spurious positive), fn: 2 (a wrong class, a miss)
    let gold = [Some(0), Some(0), Some(1), Some(1), Some(2), None, None, Some(2)];
    let pred = [Some(0), Some(1), Some(1), None, Some(2), Some(0), None, Some(2)];
    let m = evaluate_sentlevel(&pred, &gold).unwrap();
    assert_eq!((m.tp, m.fp, m.fn_), (4, 2, 2));
    assert!((m.micro_f1 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn sentlevel_decision_rule() {
    assert_eq!(sentlevel_decision(&[0.2, 0.7, 0.6], 0.5), Some(1));
    assert_eq!(sentlevel_decision(&[0.2, 0.4], 0.5), None);
    assert_eq!(sentlevel_decision(&[0.6, 0.6], 0.5), Some(0));
    assert_eq!(sentlevel_decision(&[], 0.5), None);
}

#[test]
fn kfold_examples() {
    let folds = kfold(10, 5, 3).unwrap();
    assert_eq!(folds.len(), 5);
    let mut seen = BTreeSet::new();
    for (train, test) in &folds {
        assert_eq!(test.len(), 2);
        assert_eq!(train.len(), 8);
        seen.extend(test.iter().copied());
    }
    assert_eq!(seen, (0..10).collect());
    assert_eq!(folds, kfold(10, 5, 3).unwrap());
    assert!(kfold(3, 5, 0).is_err());
    assert!(kfold(3, 1, 0).is_err());
}

#[test]
fn threshold_examples() {
    let t = tune_threshold(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
    assert_eq!(t, 0.8);
    assert_eq!(tune_threshold(&[0.4; 5], &[true, false, true, false, false]).unwrap(), 0.4);
    assert!(tune_threshold(&[], &[]).is_err());
}

fn brute_force_threshold(scores: &[f64], gold: &[bool]) -> f64 {
    let mut candidates = scores.to_vec();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let positives = gold.iter().filter(|&&g| g).count();
    let mut best = (f64::NAN, -1.0);
    for &t in &candidates {
        let predicted = scores.iter().filter(|&&s| s >= t).count();
        let tp = scores.iter().zip(gold).filter(|(&s, &g)| s >= t && g).count();
        let f1 = 2.0 * tp as f64 / (predicted + positives) as f64;
        if f1 > best.1 + 1e-15 {
            best = (t, f1);
        }
    }
    best.0
}

fn facts_strategy() -> impl Strategy<Value = (Vec<(Fact, f64)>, BTreeSet<Fact>)> {
    let pool: Vec<Fact> = (0..12).map(|i| fact(&format!("f{i}"))).collect();
    (
        prop::collection::vec((0usize..12, 0.0f64..1.0), 0..20),
        prop::collection::btree_set(0usize..12, 0..10),
    )
        .prop_map(move |(pred, gold)| {
            let pred = pred.into_iter().map(|(i, s)| (pool[i].clone(), s)).collect();
            let gold = gold.into_iter().map(|i| pool[i].clone()).collect();
            (pred, gold)
        })
}

proptest! {
    #[test]
    fn threshold_matches_exhaustive_scan(
        cells in prop::collection::vec((0u8..20, any::<bool>()), 1..40),
    ) {
        let scores: Vec<f64> = cells.iter().map(|(s, _)| f64::from(*s) / 20.0).collect();
        let gold: Vec<bool> = cells.iter().map(|(_, g)| *g).collect();
        prop_assert_eq!(tune_threshold(&scores, &gold).unwrap(), brute_force_threshold(&scores, &gold));
    }

    #[test]
    fn kfold_is_a_partition(n in 2usize..60, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let folds = kfold(n, k, seed).unwrap();
        let mut all: Vec<usize> = folds.iter().flat_map(|(_, t)| t.clone()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(|(_, t)| t.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for (train, test) in &folds {
            prop_assert_eq!(train.len() + test.len(), n);
            prop_assert!(test.iter().all(|i| !train.contains(i)));
        }
    }

    #[test]
    fn ign_f1_equals_f1_without_training_facts((pred, gold) in facts_strategy(), t in 0.0f64..1.0) {
        let m = evaluate_doclevel(&pred, &gold, &HashSet::new(), t);
        prop_assert_eq!(m.ign_f1, m.f1);
    }

    #[test]
    fn metrics_ignore_prediction_order((pred, gold) in facts_strategy(), train_mask in 0u16..4096) {
        let train: HashSet<_> = (0..12).filter(|i| train_mask & (1 << i) != 0).map(|i| fact(&format!("f{i}")).triple()).collect();
        let mut rev = pred.clone();
        rev.reverse();
        let a = evaluate_doclevel(&pred, &gold, &train, 0.5);
        let b = evaluate_doclevel(&rev, &gold, &train, 0.5);
        prop_assert_eq!(a, b);
        for v in [a.precision, a.recall, a.f1, a.ign_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn bce_is_non_negative(cells in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..30)) {
        let scores: Vec<Vec<f64>> = cells.iter().map(|(p, _)| vec![*p]).collect();
        let gold: Vec<Vec<f64>> = cells.iter().map(|(_, g)| vec![f64::from(*g)]).collect();
        prop_assert!(bce_loss(&scores, &gold, 1).unwrap() >= 0.0);
    }
}

struct Fixture {
    corpus: crate::corpus::SyntheticCorpus,
    kg: KgStore,
    descriptions: DescriptionStore,
}

fn fixture(docs: usize, seed: u64) -> Fixture {
    let cfg = SynthConfig {
        num_documents: docs,
        ..SynthConfig::default()
    };
    let corpus = generate_synthetic(&cfg, seed).unwrap();
    let (kg, descriptions) = corpus.stores();
    Fixture {
        corpus,
        kg,
        descriptions,
    }
}

impl Fixture {
    fn corpus(&self) -> Corpus<'_> {
        Corpus {
            docs: &self.corpus.documents,
            kg: &self.kg,
            descriptions: &self.descriptions,
            vocab: &self.corpus.vocab,
        }
    }
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        d: 8,
        embedder: EmbedderSpec {
            base_dim: 16,
            ..EmbedderSpec::default()
        },
        ..TrainConfig::desk()
    }
}

fn checkpoint(store: &ParamStore<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    store.save(&mut buf).unwrap();
    buf
}

#[test]
fn zero_epochs_return_the_initialization() {
    let fx = fixture(6, 1);
    let cfg = tiny_config(0);
    let trained = train(&fx.corpus(), None, &cfg).unwrap();
    let (init, _) = initialize(&cfg, fx.corpus.vocab.len()).unwrap();
    assert!(trained.history.is_empty());
    assert_eq!(checkpoint(&trained.store), checkpoint(&init));
}

#[test]
fn training_is_bit_identical_across_runs_and_thread_counts() {
    let fx = fixture(12, 2);
    let cfg = tiny_config(2);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&fx.corpus(), Some(&fx.corpus()), &cfg).unwrap())
    };
    let (a, b, c) = (run(1), run(1), run(4));
    assert_eq!(a.history, b.history);
    assert_eq!(a.history, c.history);
    assert_eq!(checkpoint(&a.store), checkpoint(&b.store));
    assert_eq!(checkpoint(&a.store), checkpoint(&c.store));
}

#[test]
fn loss_goes_down_on_synthetic_data() {
    let fx = fixture(24, 3);
    let trained = train(&fx.corpus(), None, &tiny_config(5)).unwrap();
    let losses: Vec<f64> = trained.history.iter().map(|r| r.loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn divergence_aborts_with_a_numeric_error() {
    let fx = fixture(6, 4);
    let cfg = TrainConfig {
        lr_other: 1e38,
        lr_encoder: 1e38,
        ..tiny_config(3)
    };
    let err = train(&fx.corpus(), None, &cfg).err().expect("training should fail");
    assert!(matches!(err, Error::Numeric(ref m) if m.contains("epoch")), "{err}");
}

#[test]
fn config_validation() {
    assert!(TrainConfig::desk().validate().is_ok());
    assert!(TrainConfig::full_scale().validate().is_ok());
    for bad in [
        TrainConfig { lr_other: 0.0, ..TrainConfig::desk() },
        TrainConfig { batch_size: 0, ..TrainConfig::desk() },
        TrainConfig { dropout: 1.0, ..TrainConfig::desk() },
        TrainConfig { threshold: ThresholdPolicy::Fixed(1.5), ..TrainConfig::desk() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn config_json_shape() {
    let json = serde_json::to_value(TrainConfig::desk()).unwrap();
    assert_eq!(json["threshold"], serde_json::json!({"fixed": 0.5}));
    let cfg: TrainConfig = serde_json::from_str(r#"{"threshold": "dev_tuned", "epochs": 3}"#).unwrap();
    assert_eq!(cfg.threshold, ThresholdPolicy::DevTuned);
    assert_eq!(cfg.d, 32);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
}

#[test]
fn history_is_json_lines() {
    let history = vec![
        EpochRecord { epoch: 1, loss: 0.5, dev_f1: Some(0.25), dev_ign_f1: Some(0.2) },
        EpochRecord { epoch: 2, loss: 0.25, dev_f1: None, dev_ign_f1: None },
    ];
    let mut buf = Vec::new();
    write_history(&history, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let parsed: Vec<EpochRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, history);
    assert!(text.starts_with(r#"{"epoch":1,"loss":0.5,"dev_f1":0.25,"dev_ign_f1":0.2}"#));
}
