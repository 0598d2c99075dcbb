use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dataset_to_json, Document, EntityCluster, Mention, RelationLabel, RelationVocab};
use crate::error::{Error, Result};
use crate::kgstore::{DescriptionRecord, DescriptionStore, KgStore, UncertainTriple};

const ENTITY_TYPES: [&str; 4] = ["PER", "LOC", "ORG", "MISC"];

fn default_density() -> f64 {
    0.3
}
fn default_sentence_length() -> usize {
    8
}
fn default_filler_vocab() -> usize {
    60
}
fn default_max_concepts() -> usize {
    5
}

/// Knobs for the toy corpus. `prior_dominance` is the probability that a
/// related pair gets no lexical trigger, leaving only the KG prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_concepts: usize,
    pub entities_per_concept: usize,
    pub num_relations: usize,
    pub num_documents: usize,
    pub sentences_per_doc: usize,
    /// Upper bound; each entity gets between 1 and this many mentions.
    pub mentions_per_entity: usize,
    pub entities_per_doc: usize,
    pub prior_dominance: f64,
    /// Fraction of ordered concept pairs that carry a relation.
    #[serde(default = "default_density")]
    pub relation_density: f64,
    #[serde(default = "default_sentence_length")]
    pub sentence_length: usize,
    #[serde(default = "default_filler_vocab")]
    pub filler_vocab: usize,
    #[serde(default = "default_max_concepts")]
    pub max_concepts_per_entity: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_concepts: 8,
            entities_per_concept: 25,
            num_relations: 4,
            num_documents: 500,
            sentences_per_doc: 4,
            mentions_per_entity: 2,
            entities_per_doc: 5,
            prior_dominance: 0.5,
            relation_density: default_density(),
            sentence_length: default_sentence_length(),
            filler_vocab: default_filler_vocab(),
            max_concepts_per_entity: default_max_concepts(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        if self.num_relations == 0 {
            return fail("num_relations", "must be at least 1");
        }
        if self.num_concepts == 0 {
            return fail("num_concepts", "must be at least 1");
        }
        if self.entities_per_concept == 0 {
            return fail("entities_per_concept", "must be at least 1");
        }
        if self.sentences_per_doc == 0 {
            return fail("sentences_per_doc", "must be at least 1");
        }
        if self.mentions_per_entity == 0 {
            return fail("mentions_per_entity", "must be at least 1");
        }
        if self.entities_per_doc < 2 {
            return fail("entities_per_doc", "must be at least 2");
        }
        if self.entities_per_doc > self.num_concepts * self.entities_per_concept {
            return fail("entities_per_doc", "exceeds the number of entities");
        }
        if !(0.0..=1.0).contains(&self.prior_dominance) {
            return fail("prior_dominance", "must lie in [0, 1]");
        }
        if !(self.relation_density > 0.0 && self.relation_density <= 1.0) {
            return fail("relation_density", "must lie in (0, 1]");
        }
        if self.filler_vocab == 0 {
            return fail("filler_vocab", "must be at least 1");
        }
        if self.max_concepts_per_entity == 0 || self.max_concepts_per_entity > self.num_concepts {
            return fail("max_concepts_per_entity", "must lie in [1, num_concepts]");
        }
        Ok(())
    }
}

/// Ground truth used to label the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTable {
    pub concepts: Vec<String>,
    /// Relation for an ordered (head concept, tail concept) pair.
    pub rules: BTreeMap<String, BTreeMap<String, String>>,
    /// Entity name → its dominant (highest-count) concept.
    pub primary_concept: BTreeMap<String, String>,
}

impl RuleTable {
    pub fn relation(&self, head_concept: &str, tail_concept: &str) -> Option<&str> {
        self.rules
            .get(head_concept)
            .and_then(|m| m.get(tail_concept))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    pub vocab: RelationVocab,
    pub triples: Vec<UncertainTriple>,
    pub descriptions: Vec<DescriptionRecord>,
    pub entity_types: Vec<(String, String)>,
    pub rules: RuleTable,
}

pub fn trigger_token(relation: usize) -> String {
    format!("trig{relation}")
}

struct SynthEntity {
    name: String,
    entity_type: &'static str,
    primary: usize,
}

enum Slot {
    Word(String),
    Entity(usize),
    /// `head trigger tail`, kept atomic so later insertions cannot split it.
    Clause(usize, String, usize),
}

/// Builds a corpus, uncertain KG and description set, deterministic in `seed`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let concepts: Vec<String> = (0..cfg.num_concepts).map(|c| format!("concept{c}")).collect();
    let relation_names: Vec<String> = (0..cfg.num_relations).map(|r| format!("R{r}")).collect();

    // entity names are shuffled so the name carries no concept information
    let total = cfg.num_concepts * cfg.entities_per_concept;
    let mut name_ids: Vec<usize> = (0..total).collect();
    name_ids.shuffle(&mut rng);
    let mut entities = Vec::with_capacity(total);
    let mut triples = Vec::new();
    for (k, &nid) in name_ids.iter().enumerate() {
        let primary = k / cfg.entities_per_concept;
        let name = format!("ent{nid:04}");
        let extra = rng.gen_range(0..cfg.max_concepts_per_entity);
        let mut others: Vec<usize> = (0..cfg.num_concepts).filter(|&c| c != primary).collect();
        others.shuffle(&mut rng);
        triples.push(UncertainTriple {
            entity: name.clone(),
            concept: concepts[primary].clone(),
            count: rng.gen_range(50..=100),
        });
        for &c in others.iter().take(extra) {
            triples.push(UncertainTriple {
                entity: name.clone(),
                concept: concepts[c].clone(),
                count: rng.gen_range(1..=20),
            });
        }
        entities.push(SynthEntity {
            name,
            entity_type: ENTITY_TYPES[nid % ENTITY_TYPES.len()],
            primary,
        });
    }

    // relation rules; round-robin assignment guarantees every relation occurs
    let mut concept_pairs: Vec<(usize, usize)> = (0..cfg.num_concepts)
        .flat_map(|a| (0..cfg.num_concepts).map(move |b| (a, b)))
        .collect();
    concept_pairs.shuffle(&mut rng);
    let wanted = ((cfg.relation_density * concept_pairs.len() as f64).round() as usize)
        .max(cfg.num_relations)
        .min(concept_pairs.len());
    let mut rule_of: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (j, &pair) in concept_pairs.iter().take(wanted).enumerate() {
        rule_of.insert(pair, j % cfg.num_relations);
    }

    let mut documents = Vec::with_capacity(cfg.num_documents);
    for di in 0..cfg.num_documents {
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, total, cfg.entities_per_doc).into_vec();
        picks.sort_unstable();
        let mut sentences: Vec<Vec<Slot>> = (0..cfg.sentences_per_doc)
            .map(|_| {
                (0..cfg.sentence_length)
                    .map(|_| Slot::Word(format!("w{}", rng.gen_range(0..cfg.filler_vocab))))
                    .collect()
            })
            .collect();
        for local in 0..picks.len() {
            let n = rng.gen_range(1..=cfg.mentions_per_entity);
            for _ in 0..n {
                let s = rng.gen_range(0..sentences.len());
                let at = rng.gen_range(0..=sentences[s].len());
                sentences[s].insert(at, Slot::Entity(local));
            }
        }
        let mut labels = Vec::new();
        for h in 0..picks.len() {
            for t in 0..picks.len() {
                if h == t {
                    continue;
                }
                let key = (entities[picks[h]].primary, entities[picks[t]].primary);
                let Some(&r) = rule_of.get(&key) else { continue };
                labels.push(RelationLabel {
                    head: h,
                    tail: t,
                    relations: BTreeSet::from([r]),
                });
                if rng.gen::<f64>() >= cfg.prior_dominance {
                    let s = rng.gen_range(0..sentences.len());
                    let at = rng.gen_range(0..=sentences[s].len());
                    sentences[s].insert(at, Slot::Clause(h, trigger_token(r), t));
                }
            }
        }

        let mut mentions: Vec<Vec<Mention>> = vec![Vec::new(); picks.len()];
        let mut tokens: Vec<Vec<String>> = Vec::with_capacity(sentences.len());
        for (si, sent) in sentences.into_iter().enumerate() {
            let mut words = Vec::with_capacity(sent.len());
            let mut put_entity = |local: usize, words: &mut Vec<String>| {
                mentions[local].push(Mention {
                    sent_idx: si,
                    start: words.len(),
                    end: words.len() + 1,
                });
                words.push(entities[picks[local]].name.clone());
            };
            for slot in sent {
                match slot {
                    Slot::Word(w) => words.push(w),
                    Slot::Entity(local) => put_entity(local, &mut words),
                    Slot::Clause(h, trig, t) => {
                        put_entity(h, &mut words);
                        words.push(trig);
                        put_entity(t, &mut words);
                    }
                }
            }
            tokens.push(words);
        }
        let clusters = picks
            .iter()
            .enumerate()
            .map(|(local, &g)| EntityCluster {
                entity_index: local,
                name: entities[g].name.clone(),
                entity_type: entities[g].entity_type.to_string(),
                mentions: std::mem::take(&mut mentions[local]),
            })
            .collect();
        documents.push(Document {
            doc_id: format!("synth-{di:05}"),
            sentences: tokens,
            entities: clusters,
            labels,
        });
    }

    let mut descriptions: Vec<DescriptionRecord> = concepts
        .iter()
        .map(|c| DescriptionRecord {
            name: c.clone(),
            text: format!("{c} is a kind of {c}_group with {c}_trait"),
        })
        .collect();
    descriptions.extend(entities.iter().map(|e| DescriptionRecord {
        name: e.name.clone(),
        text: format!("{} is a named {} entity", e.name, e.entity_type.to_lowercase()),
    }));
    let entity_types = entities
        .iter()
        .map(|e| (e.name.clone(), e.entity_type.to_string()))
        .collect();

    let mut rules: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for (&(a, b), &r) in &rule_of {
        rules
            .entry(concepts[a].clone())
            .or_default()
            .insert(concepts[b].clone(), relation_names[r].clone());
    }
    let primary_concept = entities
        .iter()
        .map(|e| (e.name.clone(), concepts[e.primary].clone()))
        .collect();

    Ok(SyntheticCorpus {
        documents,
        vocab: RelationVocab::from_names(relation_names),
        triples,
        descriptions,
        entity_types,
        rules: RuleTable {
            concepts,
            rules,
            primary_concept,
        },
    })
}

impl SyntheticCorpus {
    /// In-memory knowledge graph and description stores for this corpus.
    pub fn stores(&self) -> (KgStore, DescriptionStore) {
        let kg = KgStore::from_triples(self.triples.iter().cloned());
        let mut descriptions = DescriptionStore::new();
        for r in &self.descriptions {
            descriptions.insert(&r.name, &r.text);
        }
        for (entity, ty) in &self.entity_types {
            descriptions.insert_type(entity, ty);
        }
        (kg, descriptions)
    }

    /// Writes `dataset.json`, `triples.tsv`, `descriptions.jsonl`,
    /// `types.tsv`, `rules.json` and `rel2id.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        write("dataset.json", dataset_to_json(&self.documents, &self.vocab))?;
        write(
            "triples.tsv",
            self.triples
                .iter()
                .map(|t| format!("{}\t{}\t{}\n", t.entity, t.concept, t.count))
                .collect(),
        )?;
        let mut desc = String::new();
        for d in &self.descriptions {
            desc.push_str(&serde_json::to_string(d)?);
            desc.push('\n');
        }
        write("descriptions.jsonl", desc)?;
        write(
            "types.tsv",
            self.entity_types
                .iter()
                .map(|(e, t)| format!("{e}\t{t}\n"))
                .collect(),
        )?;
        write("rules.json", serde_json::to_string_pretty(&self.rules)?)?;
        write("rel2id.json", self.vocab.to_json())?;
        Ok(())
    }
}
