use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_entity_doc() -> &'static str {
    r#"[{
        "title": "d0",
        "sents": [["Alice", "met", "Bob", "in", "Paris", "."], ["She", "left", "."]],
        "vertexSet": [
            [{"name": "Alice", "sent_id": 0, "pos": [0, 1], "type": "PER"}],
            [{"name": "Paris", "sent_id": 0, "pos": [4, 5], "type": "LOC"}]
        ],
        "labels": [{"h": 0, "t": 1, "r": "visited"}]
    }]"#
}

fn doc_with_entities(n: usize) -> Document {
    Document {
        doc_id: "x".into(),
        sentences: vec![(0..n).map(|i| format!("w{i}")).collect()],
        entities: (0..n)
            .map(|i| EntityCluster {
                entity_index: i,
                name: format!("e{i}"),
                entity_type: String::new(),
                mentions: vec![Mention { sent_idx: 0, start: i, end: i + 1 }],
            })
            .collect(),
        labels: vec![],
    }
}

#[test]
fn empty_dataset() {
    let (docs, vocab) = parse_dataset("[]", None).unwrap();
    assert!(docs.is_empty());
    assert!(vocab.is_empty());
}

#[test]
fn parse_builds_vocab_and_labels() {
    let (docs, vocab) = parse_dataset(two_entity_doc(), None).unwrap();
    assert_eq!(vocab.names(), &["visited".to_string()]);
    assert_eq!(docs[0].relations_of(0, 1), BTreeSet::from([0]));
    assert!(docs[0].relations_of(1, 0).is_empty());
    assert_eq!(docs[0].entities[1].entity_type, "LOC");
}

#[test]
fn five_entities_give_twenty_pairs() {
    let pairs = candidate_pairs(doc_with_entities(5).num_entities());
    assert_eq!(pairs.len(), 20);
    assert_eq!(candidate_pairs(1), vec![]);
    assert_eq!(candidate_pairs(2), vec![(0, 1), (1, 0)]);
    assert!(pairs.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn span_out_of_range_names_the_mention() {
    let bad = two_entity_doc().replace("[4, 5]", "[4, 9]");
    let err = parse_dataset(&bad, None).unwrap_err();
    match err {
        Error::Dataset { doc, path, msg } => {
            assert_eq!(doc, 0);
            assert_eq!(path, "vertexSet[1][0].pos");
            assert!(msg.contains("Paris"), "{msg}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn schema_errors_carry_a_field_path() {
    let bad = two_entity_doc().replace(r#""sent_id": 0, "pos": [0, 1]"#, r#""sent_id": "zero", "pos": [0, 1]"#);
    match parse_dataset(&bad, None).unwrap_err() {
        Error::Dataset { path, .. } => assert_eq!(path, "vertexSet[0][0].sent_id"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn frozen_vocab_rejects_unknown_relation() {
    let vocab = RelationVocab::from_names(["born_in"]);
    assert!(matches!(
        parse_dataset(two_entity_doc(), Some(&vocab)),
        Err(Error::Dataset { .. })
    ));
}

#[test]
fn self_relation_is_rejected() {
    let bad = two_entity_doc().replace(r#""h": 0, "t": 1"#, r#""h": 1, "t": 1"#);
    assert!(parse_dataset(&bad, None).is_err());
}

#[test]
fn vocab_json_round_trip() {
    let v = RelationVocab::from_names(["b", "a", "c"]);
    let back = RelationVocab::from_json(&v.to_json()).unwrap();
    assert_eq!(back, v);
    assert!(RelationVocab::from_json(r#"{"a": 0, "b": 2}"#).is_err());
}

#[test]
fn save_then_load_is_identity() {
    let (docs, vocab) = parse_dataset(two_entity_doc(), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("data.json");
    save_dataset(&p, &docs, &vocab).unwrap();
    let (back, v2) = load_dataset(&p, Some(&vocab)).unwrap();
    assert_eq!(back, docs);
    assert_eq!(v2, vocab);
}

#[test]
fn anchors_precede_mentions() {
    let (docs, _) = parse_dataset(two_entity_doc(), None).unwrap();
    let a = insert_anchors(&docs[0]);
    let expect = ["⟦E0⟧", "Alice", "met", "Bob", "in", "⟦E1⟧", "Paris", ".", "She", "left", "."];
    assert_eq!(a.tokens, expect);
    assert_eq!(a.sentence_spans, vec![0..8, 8..11]);
    assert_eq!(a.mentions[0][0].anchor, 0);
    assert_eq!(a.mentions[1][0].words, vec![6]);
    assert_eq!(min_distance(&a, 0, 1).unwrap(), 5);
    assert_eq!(min_distance(&a, 1, 0).unwrap(), -5);
}

#[test]
fn nested_mentions_share_words() {
    let mut doc = doc_with_entities(1);
    doc.sentences = vec![vec!["New".into(), "York".into(), "City".into()]];
    doc.entities[0].mentions = vec![Mention { sent_idx: 0, start: 0, end: 3 }];
    doc.entities.push(EntityCluster {
        entity_index: 1,
        name: "York".into(),
        entity_type: String::new(),
        mentions: vec![Mention { sent_idx: 0, start: 1, end: 2 }],
    });
    let a = insert_anchors(&doc);
    assert_eq!(a.tokens, ["⟦E0⟧", "New", "⟦E1⟧", "York", "City"]);
    assert_eq!(a.mentions[0][0].words, vec![1, 3, 4]);
    assert_eq!(a.mentions[1][0].words, vec![3]);
}

#[test]
fn distance_example_in_anchored_offsets() {
    // entity 0 at word 2, entity 1 at word 9 of the same sentence
    let mut doc = doc_with_entities(0);
    doc.sentences = vec![(0..12).map(|i| format!("w{i}")).collect()];
    for (i, s) in [2usize, 9].into_iter().enumerate() {
        doc.entities.push(EntityCluster {
            entity_index: i,
            name: format!("e{i}"),
            entity_type: String::new(),
            mentions: vec![Mention { sent_idx: 0, start: s, end: s + 1 }],
        });
    }
    let a = insert_anchors(&doc);
    // one extra anchor lies between the two mentions
    assert_eq!(min_distance(&a, 0, 1).unwrap(), 8);
    assert_eq!(min_distance(&a, 1, 0).unwrap(), -8);
    assert_eq!(distance_index(8), 520);
    assert_eq!(distance_index(-8), 504);
    assert_eq!(distance_index(10_000), DISTANCE_BUCKETS - 1);
    assert_eq!(distance_index(-10_000), 0);
}

fn random_doc(rng: &mut ChaCha8Rng) -> Document {
    let num_sents = rng.gen_range(1..5);
    let sentences: Vec<Vec<String>> = (0..num_sents)
        .map(|_| (0..rng.gen_range(1..15)).map(|i| format!("t{i}")).collect())
        .collect();
    let n = rng.gen_range(2..7);
    let entities = (0..n)
        .map(|i| {
            let mentions = (0..rng.gen_range(1..4))
                .map(|_| {
                    let s = rng.gen_range(0..num_sents);
                    let len = sentences[s].len();
                    let start = rng.gen_range(0..len);
                    let end = rng.gen_range(start + 1..=len.min(start + 3));
                    Mention { sent_idx: s, start, end }
                })
                .collect::<Vec<_>>();
            let mut mentions = mentions;
            mentions.sort_by_key(|m| (m.sent_idx, m.start, m.end));
            EntityCluster {
                entity_index: i,
                name: format!("e{i}"),
                entity_type: "MISC".into(),
                mentions,
            }
        })
        .collect();
    Document {
        doc_id: "r".into(),
        sentences,
        entities,
        labels: vec![],
    }
}

#[test]
fn min_distance_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let doc = random_doc(&mut rng);
        let a = insert_anchors(&doc);
        for (h, t) in candidate_pairs(doc.num_entities()) {
            let d = min_distance(&a, h, t).unwrap();
            let best = a.mentions[h]
                .iter()
                .flat_map(|x| a.mentions[t].iter().map(move |y| (y.start() as i64 - x.start() as i64).abs()))
                .min()
                .unwrap();
            assert_eq!(d.abs(), best);
            assert_eq!(d, -min_distance(&a, t, h).unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn anchoring_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = random_doc(&mut rng);
        let a = insert_anchors(&doc);
        let words: usize = doc.sentences.iter().map(Vec::len).sum();
        prop_assert_eq!(a.tokens.len(), words + doc.num_mentions());
        let stripped: Vec<&String> = a.tokens.iter().filter(|t| !t.starts_with('⟦')).collect();
        let original: Vec<&String> = doc.sentences.iter().flatten().collect();
        prop_assert_eq!(stripped, original);
        for (ei, ms) in a.mentions.iter().enumerate() {
            for (m, orig) in ms.iter().zip(&doc.entities[ei].mentions) {
                prop_assert_eq!(&a.tokens[m.anchor], &anchor_token(ei));
                prop_assert!(m.anchor < m.start());
                let span = &a.sentence_spans[m.sent_idx];
                prop_assert!(span.contains(&m.anchor));
                let got: Vec<&String> = m.words.iter().map(|&p| &a.tokens[p]).collect();
                let want: Vec<&String> = doc.sentences[orig.sent_idx][orig.start..orig.end].iter().collect();
                prop_assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn distance_index_in_range(d in any::<i32>()) {
        let i = distance_index(d as i64);
        prop_assert!(i < DISTANCE_BUCKETS);
    }
}

#[test]
fn synthetic_corpus_is_deterministic_and_labelled_by_rules() {
    let cfg = SynthConfig {
        num_documents: 40,
        ..SynthConfig::default()
    };
    let a = generate_synthetic(&cfg, 3).unwrap();
    let b = generate_synthetic(&cfg, 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.documents, generate_synthetic(&cfg, 4).unwrap().documents);
    assert_eq!(a.vocab.len(), cfg.num_relations);

    let mut seen = BTreeSet::new();
    for doc in &a.documents {
        for (h, t) in candidate_pairs(doc.num_entities()) {
            let ch = &a.rules.primary_concept[&doc.entities[h].name];
            let ct = &a.rules.primary_concept[&doc.entities[t].name];
            let expect: BTreeSet<usize> = a
                .rules
                .relation(ch, ct)
                .map(|r| a.vocab.id(r).unwrap())
                .into_iter()
                .collect();
            assert_eq!(doc.relations_of(h, t), expect);
            seen.extend(expect);
        }
    }
    assert!(!seen.is_empty());

    let store = crate::kgstore::KgStore::from_triples(a.triples.clone());
    for (name, concept) in &a.rules.primary_concept {
        assert_eq!(&store.concepts(name)[0].0, concept);
    }
}

#[test]
fn zero_prior_dominance_puts_a_trigger_on_every_positive_pair() {
    let cfg = SynthConfig {
        num_documents: 30,
        prior_dominance: 0.0,
        ..SynthConfig::default()
    };
    let c = generate_synthetic(&cfg, 9).unwrap();
    for doc in &c.documents {
        for l in &doc.labels {
            let r = *l.relations.iter().next().unwrap();
            let trig = synth::trigger_token(r);
            let (h, t) = (&doc.entities[l.head].name, &doc.entities[l.tail].name);
            let found = doc.sentences.iter().any(|s| {
                s.windows(3).any(|w| &w[0] == h && w[1] == trig && &w[2] == t)
            });
            assert!(found, "{} missing trigger for ({h}, {t})", doc.doc_id);
        }
    }
}

#[test]
fn synthetic_files_load_back() {
    let cfg = SynthConfig {
        num_documents: 10,
        ..SynthConfig::default()
    };
    let c = generate_synthetic(&cfg, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    c.write_to(dir.path()).unwrap();
    let vocab = RelationVocab::load(&dir.path().join("rel2id.json")).unwrap();
    let (docs, _) = load_dataset(&dir.path().join("dataset.json"), Some(&vocab)).unwrap();
    assert_eq!(docs, c.documents);
    let (store, report) = crate::kgstore::KgStore::load_tsv(&dir.path().join("triples.tsv")).unwrap();
    assert!(report.rejected.is_empty());
    assert_eq!(store.num_triples(), c.triples.len());
}

#[test]
fn synth_config_validation() {
    let bad = SynthConfig {
        entities_per_doc: 1,
        ..SynthConfig::default()
    };
    assert!(matches!(generate_synthetic(&bad, 0), Err(Error::Config(_))));
    let bad = SynthConfig {
        prior_dominance: 1.5,
        ..SynthConfig::default()
    };
    assert!(bad.validate().is_err());
}
