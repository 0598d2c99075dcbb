//! Synthetic corpus to disk, back through the loaders, training, checkpoint
//! round trip and evaluation, using only the public API.

use std::collections::HashSet;

use miuk_core::corpus::{generate_synthetic, load_dataset, RelationVocab, SynthConfig};
use miuk_core::encoder::EmbedderSpec;
use miuk_core::kgstore::{DescriptionStore, KgStore};
use miuk_core::model::Miuk;
use miuk_core::tensorcore::ParamStore;
use miuk_core::trainer::{self, train_triples, Corpus, ThresholdPolicy, TrainConfig};

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        d: 16,
        embedder: EmbedderSpec {
            base_dim: 32,
            ..EmbedderSpec::default()
        },
        ..TrainConfig::desk()
    }
}

#[test]
fn files_written_by_the_generator_train_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        num_documents: 60,
        prior_dominance: 0.0,
        ..SynthConfig::default()
    };
    generate_synthetic(&synth, 3).unwrap().write_to(dir.path()).unwrap();

    let vocab = RelationVocab::load(&dir.path().join("rel2id.json")).unwrap();
    let (docs, _) = load_dataset(&dir.path().join("dataset.json"), Some(&vocab)).unwrap();
    let kg = KgStore::load(&dir.path().join("triples.tsv")).unwrap();
    let descriptions =
        DescriptionStore::load(&dir.path().join("descriptions.jsonl"), Some(&dir.path().join("types.tsv"))).unwrap();
    assert_eq!(docs.len(), 60);

    let (train_docs, dev_docs) = docs.split_at(48);
    let corpus = |d| Corpus {
        docs: d,
        kg: &kg,
        descriptions: &descriptions,
        vocab: &vocab,
    };
    let cfg = TrainConfig {
        threshold: ThresholdPolicy::DevTuned,
        ..small_config(6)
    };
    let trained = trainer::train(&corpus(train_docs), Some(&corpus(dev_docs)), &cfg).unwrap();
    assert_eq!(trained.history.len(), 6);
    assert!(trained.history.iter().all(|h| h.loss.is_finite() && h.dev_f1.is_some()));
    assert!(trained.history.last().unwrap().loss < trained.history[0].loss);
    assert!((0.0..=1.0).contains(&trained.threshold));

    let mut bytes = Vec::new();
    trained.store.save(&mut bytes).unwrap();
    let reloaded = ParamStore::<f32>::load(bytes.as_slice()).unwrap();
    let model = Miuk::bind(&reloaded, cfg.embedder.build().unwrap(), vocab.len(), &cfg.mode).unwrap();

    let dev = corpus(dev_docs);
    let train_set: HashSet<_> = train_triples(train_docs, &vocab);
    let before =
        trainer::evaluate(&trained.model, &trained.store, &dev, &cfg.mode, cfg.task, &train_set, trained.threshold).unwrap();
    let after = trainer::evaluate(&model, &reloaded, &dev, &cfg.mode, cfg.task, &train_set, trained.threshold).unwrap();
    assert_eq!(before, after);

    let (init, init_model) = trainer::initialize(&cfg, vocab.len()).unwrap();
    let untrained = trainer::evaluate(&init_model, &init, &dev, &cfg.mode, cfg.task, &train_set, trained.threshold).unwrap();
    assert!(after.metrics.f1 > untrained.metrics.f1, "{} vs {}", after.metrics.f1, untrained.metrics.f1);
}

#[test]
fn a_truncated_checkpoint_is_rejected() {
    let (store, _) = trainer::initialize(&small_config(0), 3).unwrap();
    let mut bytes = Vec::new();
    store.save(&mut bytes).unwrap();
    bytes.truncate(bytes.len() / 2);
    assert!(ParamStore::<f32>::load(bytes.as_slice()).is_err());
    assert!(ParamStore::<f32>::load(&b"not a checkpoint"[..]).is_err());
}

#[test]
fn binding_to_a_different_relation_count_fails() {
    let cfg = small_config(0);
    let (store, _) = trainer::initialize(&cfg, 3).unwrap();
    assert!(Miuk::bind(&store, cfg.embedder.build().unwrap(), 4, &cfg.mode).is_err());
}
