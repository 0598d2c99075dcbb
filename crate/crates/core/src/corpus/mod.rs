//! Document data model (DocRED layout), entity anchors, distance features
//! and candidate pairs.

mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{generate_synthetic, trigger_token, RuleTable, SynthConfig, SyntheticCorpus};

/// Largest distance magnitude with its own embedding row.
pub const MAX_DISTANCE: i64 = 512;
/// Rows in the distance embedding table.
pub const DISTANCE_BUCKETS: usize = 2 * MAX_DISTANCE as usize + 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub sent_idx: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityCluster {
    pub entity_index: usize,
    pub name: String,
    pub entity_type: String,
    pub mentions: Vec<Mention>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationLabel {
    pub head: usize,
    pub tail: usize,
    pub relations: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    pub entities: Vec<EntityCluster>,
    pub labels: Vec<RelationLabel>,
}

impl Document {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Gold relation set for an ordered pair (empty for "no relation").
    pub fn relations_of(&self, head: usize, tail: usize) -> BTreeSet<usize> {
        self.labels
            .iter()
            .find(|l| l.head == head && l.tail == tail)
            .map(|l| l.relations.clone())
            .unwrap_or_default()
    }

    pub fn num_mentions(&self) -> usize {
        self.entities.iter().map(|e| e.mentions.len()).sum()
    }
}

/// Relation names in id order. Serialized as `rel2id.json`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelationVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl RelationVocab {
    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        let mut v = RelationVocab::default();
        for n in names {
            v.insert(n.into());
        }
        v
    }

    fn insert(&mut self, name: String) -> usize {
        if let Some(&id) = self.index.get(&name) {
            return id;
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, usize> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        serde_json::to_string_pretty(&map).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> = serde_json::from_str(text)?;
        let mut pairs: Vec<(usize, String)> = map.into_iter().map(|(n, i)| (i, n)).collect();
        pairs.sort();
        for (expect, (id, name)) in pairs.iter().enumerate() {
            if *id != expect {
                return Err(Error::Invalid(format!(
                    "rel2id ids must be 0..n without gaps; `{name}` has id {id}"
                )));
            }
        }
        Ok(Self::from_names(pairs.into_iter().map(|(_, n)| n)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawMention {
    name: String,
    sent_id: usize,
    pos: [usize; 2],
    #[serde(rename = "type", default)]
    entity_type: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawLabel {
    h: usize,
    t: usize,
    r: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDocument {
    title: String,
    sents: Vec<Vec<String>>,
    #[serde(rename = "vertexSet")]
    vertex_set: Vec<Vec<RawMention>>,
    #[serde(default)]
    labels: Vec<RawLabel>,
}

fn invalid(doc: usize, path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Dataset {
        doc,
        path: path.into(),
        msg: msg.into(),
    }
}

fn convert(doc_index: usize, raw: RawDocument, vocab: &mut RelationVocab, frozen: bool) -> Result<Document> {
    let mut entities = Vec::with_capacity(raw.vertex_set.len());
    for (ei, cluster) in raw.vertex_set.into_iter().enumerate() {
        let first = cluster
            .first()
            .ok_or_else(|| invalid(doc_index, format!("vertexSet[{ei}]"), "entity has no mentions"))?;
        let name = first.name.clone();
        let entity_type = first.entity_type.clone();
        let mut mentions = Vec::with_capacity(cluster.len());
        for (mi, m) in cluster.iter().enumerate() {
            let path = format!("vertexSet[{ei}][{mi}]");
            let sent = raw
                .sents
                .get(m.sent_id)
                .ok_or_else(|| invalid(doc_index, format!("{path}.sent_id"), format!("sentence {} does not exist", m.sent_id)))?;
            let [start, end] = m.pos;
            if start >= end || end > sent.len() {
                return Err(invalid(
                    doc_index,
                    format!("{path}.pos"),
                    format!(
                        "mention `{}` span [{start}, {end}) is outside sentence {} of length {}",
                        m.name,
                        m.sent_id,
                        sent.len()
                    ),
                ));
            }
            mentions.push(Mention {
                sent_idx: m.sent_id,
                start,
                end,
            });
        }
        mentions.sort_by_key(|m| (m.sent_idx, m.start, m.end));
        entities.push(EntityCluster {
            entity_index: ei,
            name,
            entity_type,
            mentions,
        });
    }

    let mut grouped: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for (li, l) in raw.labels.iter().enumerate() {
        let path = format!("labels[{li}]");
        if l.h >= entities.len() || l.t >= entities.len() {
            return Err(invalid(doc_index, path, format!("entity index out of range ({}, {})", l.h, l.t)));
        }
        if l.h == l.t {
            return Err(invalid(doc_index, path, "head and tail are the same entity"));
        }
        let rid = if frozen {
            vocab.id(&l.r).ok_or_else(|| {
                invalid(doc_index, format!("{path}.r"), format!("relation `{}` not in vocabulary", l.r))
            })?
        } else {
            vocab.insert(l.r.clone())
        };
        grouped.entry((l.h, l.t)).or_default().insert(rid);
    }
    let labels = grouped
        .into_iter()
        .map(|((head, tail), relations)| RelationLabel {
            head,
            tail,
            relations,
        })
        .collect();

    Ok(Document {
        doc_id: raw.title,
        sentences: raw.sents,
        entities,
        labels,
    })
}

/// Parses a DocRED-style JSON array. With `vocab: None` the relation
/// vocabulary is collected in first-appearance order; otherwise it is
/// frozen and unknown relations are rejected.
pub fn parse_dataset(json: &str, vocab: Option<&RelationVocab>) -> Result<(Vec<Document>, RelationVocab)> {
    let values: Vec<serde_json::Value> = serde_json::from_str(json)?;
    let frozen = vocab.is_some();
    let mut vocab = vocab.cloned().unwrap_or_default();
    let mut docs = Vec::with_capacity(values.len());
    for (i, v) in values.into_iter().enumerate() {
        let raw: RawDocument = serde_path_to_error::deserialize(v).map_err(|e| {
            invalid(i, e.path().to_string(), e.inner().to_string())
        })?;
        docs.push(convert(i, raw, &mut vocab, frozen)?);
    }
    Ok((docs, vocab))
}

pub fn load_dataset(path: &Path, vocab: Option<&RelationVocab>) -> Result<(Vec<Document>, RelationVocab)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, vocab)
}

/// Canonical JSON for a dataset; [`parse_dataset`] inverts it exactly.
pub fn dataset_to_json(docs: &[Document], vocab: &RelationVocab) -> String {
    let raw: Vec<RawDocument> = docs
        .iter()
        .map(|d| RawDocument {
            title: d.doc_id.clone(),
            sents: d.sentences.clone(),
            vertex_set: d
                .entities
                .iter()
                .map(|e| {
                    e.mentions
                        .iter()
                        .map(|m| RawMention {
                            name: e.name.clone(),
                            sent_id: m.sent_idx,
                            pos: [m.start, m.end],
                            entity_type: e.entity_type.clone(),
                        })
                        .collect()
                })
                .collect(),
            labels: d
                .labels
                .iter()
                .flat_map(|l| {
                    l.relations.iter().map(move |&r| RawLabel {
                        h: l.head,
                        t: l.tail,
                        r: vocab.name(r).to_string(),
                    })
                })
                .collect(),
        })
        .collect();
    serde_json::to_string(&raw).expect("serializable")
}

pub fn save_dataset(path: &Path, docs: &[Document], vocab: &RelationVocab) -> Result<()> {
    std::fs::write(path, dataset_to_json(docs, vocab)).map_err(|e| Error::io(path, e))
}

pub fn anchor_token(entity_index: usize) -> String {
    format!("⟦E{entity_index}⟧")
}

/// A mention located in the anchored token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchoredMention {
    pub sent_idx: usize,
    pub anchor: usize,
    /// Positions of the mention's own words (anchors of nested mentions excluded).
    pub words: Vec<usize>,
}

impl AnchoredMention {
    pub fn start(&self) -> usize {
        self.words[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchoredDoc {
    pub tokens: Vec<String>,
    pub sentence_spans: Vec<Range<usize>>,
    /// `mentions[entity]`, in the entity's mention order.
    pub mentions: Vec<Vec<AnchoredMention>>,
}

/// Flattens the document and inserts the entity's anchor token right
/// before the first word of every mention.
pub fn insert_anchors(doc: &Document) -> AnchoredDoc {
    let mut starts: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); doc.sentences.len()];
    for (ei, e) in doc.entities.iter().enumerate() {
        for (mi, m) in e.mentions.iter().enumerate() {
            starts[m.sent_idx].push((m.start, ei, mi));
        }
    }
    let mut tokens = Vec::new();
    let mut sentence_spans = Vec::with_capacity(doc.sentences.len());
    let mut anchors: HashMap<(usize, usize), usize> = HashMap::new();
    let mut word_pos: Vec<Vec<usize>> = Vec::with_capacity(doc.sentences.len());
    for (si, sent) in doc.sentences.iter().enumerate() {
        let begin = tokens.len();
        let list = &mut starts[si];
        list.sort_unstable();
        let mut next = 0;
        let mut positions = Vec::with_capacity(sent.len());
        for (j, tok) in sent.iter().enumerate() {
            while next < list.len() && list[next].0 == j {
                let (_, ei, mi) = list[next];
                anchors.insert((ei, mi), tokens.len());
                tokens.push(anchor_token(ei));
                next += 1;
            }
            positions.push(tokens.len());
            tokens.push(tok.clone());
        }
        word_pos.push(positions);
        sentence_spans.push(begin..tokens.len());
    }
    let mentions = doc
        .entities
        .iter()
        .enumerate()
        .map(|(ei, e)| {
            e.mentions
                .iter()
                .enumerate()
                .map(|(mi, m)| AnchoredMention {
                    sent_idx: m.sent_idx,
                    anchor: anchors[&(ei, mi)],
                    words: word_pos[m.sent_idx][m.start..m.end].to_vec(),
                })
                .collect()
        })
        .collect();
    AnchoredDoc {
        tokens,
        sentence_spans,
        mentions,
    }
}

/// Signed minimum distance `d_ht` between mention start offsets of `h`
/// and `t` in the anchored sequence. Among equally close pairs the
/// earliest mention of the lower-indexed entity wins, and `d_th` is always
/// computed as `−d_ht`.
pub fn min_distance(doc: &AnchoredDoc, h: usize, t: usize) -> Result<i64> {
    if h > t {
        return min_distance(doc, t, h).map(|d| -d);
    }
    let (hm, tm) = (&doc.mentions[h], &doc.mentions[t]);
    if hm.is_empty() || tm.is_empty() {
        return Err(Error::Invalid(format!(
            "entity {} has no mentions",
            if hm.is_empty() { h } else { t }
        )));
    }
    let mut best: Option<(i64, i64)> = None;
    for a in hm {
        for b in tm {
            let d = b.start() as i64 - a.start() as i64;
            if best.map_or(true, |(abs, _)| d.abs() < abs) {
                best = Some((d.abs(), d));
            }
        }
    }
    Ok(best.expect("non-empty").1)
}

/// Row of the distance embedding table for a signed distance.
pub fn distance_index(d: i64) -> usize {
    (d.clamp(-MAX_DISTANCE, MAX_DISTANCE) + MAX_DISTANCE) as usize
}

/// All ordered entity pairs `(h, t)`, `h ≠ t`, in lexicographic order.
pub fn candidate_pairs(num_entities: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(num_entities * num_entities.saturating_sub(1));
    for h in 0..num_entities {
        for t in 0..num_entities {
            if h != t {
                out.push((h, t));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
