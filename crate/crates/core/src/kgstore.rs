//! Uncertain-KG ingestion and top-K concept retrieval.
//!
//! The store holds IsA facts `(entity, concept, count)` where `count` is a
//! raw frequency. Queries return a fixed-width [`ConceptBundle`]: real
//! concepts by descending count (ties by name), padded with [`PAD_CONCEPT`],
//! plus a weight distribution over the real slots.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_CONCEPT: &str = "<UNK>";
pub const NO_DESP: &str = "<NO_DESP>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncertainTriple {
    pub entity: String,
    pub concept: String,
    pub count: u64,
}

/// How raw frequency counts become softmax logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Raw,
    #[default]
    Log1p,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBundle {
    pub concepts: Vec<String>,
    pub counts: Vec<u64>,
    pub weights: Vec<f64>,
    pub is_pad: Vec<bool>,
}

impl ConceptBundle {
    pub fn k(&self) -> usize {
        self.concepts.len()
    }

    pub fn num_real(&self) -> usize {
        self.is_pad.iter().filter(|p| !**p).count()
    }
}

/// Softmax over the (optionally log-damped) counts of the non-pad slots.
/// Pad slots get exactly 0; an all-pad input yields all zeros.
pub fn weighting_scores(counts: &[u64], is_pad: &[bool], weighting: Weighting) -> Vec<f64> {
    debug_assert_eq!(counts.len(), is_pad.len());
    let logit = |c: u64| match weighting {
        Weighting::Raw => c as f64,
        Weighting::Log1p => (c as f64).ln_1p(),
    };
    let max = counts
        .iter()
        .zip(is_pad)
        .filter(|(_, &pad)| !pad)
        .map(|(&c, _)| logit(c))
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; counts.len()];
    }
    let exps: Vec<f64> = counts
        .iter()
        .zip(is_pad)
        .map(|(&c, &pad)| if pad { 0.0 } else { (logit(c) - max).exp() })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedLine {
    pub line_no: usize,
    pub content: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub lines: usize,
    pub accepted: usize,
    pub merged_duplicates: usize,
    pub distinct_triples: usize,
    pub entities: usize,
    pub rejected: Vec<RejectedLine>,
}

impl IngestReport {
    /// Fails when more than 10% of the non-blank lines were rejected.
    pub fn check(&self) -> Result<()> {
        if self.rejected.len() * 10 > self.lines {
            return Err(Error::TooManyRejects {
                rejected: self.rejected.len(),
                total: self.lines,
            });
        }
        Ok(())
    }
}

/// Write-once triple store indexed by entity.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgStore {
    entities: BTreeMap<String, Vec<(String, u64)>>,
}

fn parse_line(line: &str) -> std::result::Result<UncertainTriple, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(format!("expected 3 tab-separated fields, found {}", fields.len()));
    }
    let (entity, concept) = (fields[0].trim(), fields[1].trim());
    if entity.is_empty() || concept.is_empty() {
        return Err("empty entity or concept".into());
    }
    let count = fields[2]
        .trim()
        .parse::<u64>()
        .map_err(|_| format!("count `{}` is not a non-negative integer", fields[2].trim()))?;
    Ok(UncertainTriple {
        entity: entity.to_string(),
        concept: concept.to_string(),
        count,
    })
}

impl KgStore {
    /// Reads `entity<TAB>concept<TAB>count` lines. Malformed lines are
    /// logged and skipped; more than 10% malformed is a hard error.
    pub fn ingest<R: BufRead>(reader: R) -> Result<(Self, IngestReport)> {
        let (store, report) = Self::parse(reader)?;
        report.check()?;
        Ok((store, report))
    }

    /// Like [`KgStore::ingest`] but leaves the reject-rate check to the
    /// caller, so the report survives a failed ingestion.
    pub fn parse<R: BufRead>(reader: R) -> Result<(Self, IngestReport)> {
        let mut report = IngestReport::default();
        let mut merged: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            report.lines += 1;
            match parse_line(line) {
                Ok(t) => {
                    report.accepted += 1;
                    match merged.entry((t.entity, t.concept)) {
                        Entry::Occupied(mut e) => {
                            report.merged_duplicates += 1;
                            *e.get_mut() = e.get().saturating_add(t.count);
                        }
                        Entry::Vacant(e) => {
                            e.insert(t.count);
                        }
                    }
                }
                Err(reason) => {
                    log::warn!("triples line {}: {reason}", i + 1);
                    report.rejected.push(RejectedLine {
                        line_no: i + 1,
                        content: line.to_string(),
                        reason,
                    });
                }
            }
        }
        let store = Self::from_merged(merged);
        report.distinct_triples = store.num_triples();
        report.entities = store.entities.len();
        Ok((store, report))
    }

    pub fn load_tsv(path: &Path) -> Result<(Self, IngestReport)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::ingest(std::io::BufReader::new(file))
    }

    pub fn from_triples<I: IntoIterator<Item = UncertainTriple>>(triples: I) -> Self {
        let mut merged: BTreeMap<(String, String), u64> = BTreeMap::new();
        for t in triples {
            let slot = merged.entry((t.entity, t.concept)).or_insert(0);
            *slot = slot.saturating_add(t.count);
        }
        Self::from_merged(merged)
    }

    fn from_merged(merged: BTreeMap<(String, String), u64>) -> Self {
        let mut entities: BTreeMap<String, Vec<(String, u64)>> = BTreeMap::new();
        for ((entity, concept), count) in merged {
            entities.entry(entity).or_default().push((concept, count));
        }
        for list in entities.values_mut() {
            list.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        }
        KgStore { entities }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_triples(&self) -> usize {
        self.entities.values().map(Vec::len).sum()
    }

    /// All concepts of `entity`, by descending count.
    pub fn concepts(&self, entity: &str) -> &[(String, u64)] {
        self.entities.get(entity).map_or(&[], Vec::as_slice)
    }

    pub fn triples(&self) -> impl Iterator<Item = UncertainTriple> + '_ {
        self.entities.iter().flat_map(|(e, list)| {
            list.iter().map(move |(c, n)| UncertainTriple {
                entity: e.clone(),
                concept: c.clone(),
                count: *n,
            })
        })
    }

    pub fn topk(&self, entity: &str, k: usize, weighting: Weighting) -> Result<ConceptBundle> {
        if k == 0 {
            return Err(Error::Config("K must be positive".into()));
        }
        let real = self.concepts(entity);
        let take = real.len().min(k);
        let mut concepts = Vec::with_capacity(k);
        let mut counts = Vec::with_capacity(k);
        let mut is_pad = Vec::with_capacity(k);
        for (c, n) in &real[..take] {
            concepts.push(c.clone());
            counts.push(*n);
            is_pad.push(false);
        }
        for _ in take..k {
            concepts.push(PAD_CONCEPT.to_string());
            counts.push(0);
            is_pad.push(true);
        }
        let weights = weighting_scores(&counts, &is_pad, weighting);
        Ok(ConceptBundle {
            concepts,
            counts,
            weights,
            is_pad,
        })
    }

    pub fn save_index(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_index(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads either a JSON index written by [`KgStore::save_index`] or a raw TSV dump.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "json") {
            Self::load_index(path)
        } else {
            Ok(Self::load_tsv(path)?.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub name: String,
    pub text: String,
}

/// Entity and concept descriptions with an entity-type fallback.
#[derive(Debug, Clone, Default)]
pub struct DescriptionStore {
    texts: HashMap<String, String>,
    types: HashMap<String, String>,
}

impl DescriptionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, text: &str) {
        self.texts.insert(name.to_string(), text.to_string());
    }

    pub fn insert_type(&mut self, entity: &str, entity_type: &str) {
        self.types.insert(entity.to_string(), entity_type.to_string());
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// JSON Lines, one `{"name": .., "text": ..}` per line. Later lines win.
    pub fn read_jsonl<R: BufRead>(&mut self, reader: R) -> Result<usize> {
        let mut n = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DescriptionRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
                offset: i + 1,
                msg: format!("descriptions line {}: {e}", i + 1),
            })?;
            self.texts.insert(rec.name, rec.text);
            n += 1;
        }
        Ok(n)
    }

    /// TSV `entity<TAB>type`.
    pub fn read_types<R: BufRead>(&mut self, reader: R) -> Result<usize> {
        let mut n = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (entity, ty) = line.split_once('\t').ok_or_else(|| Error::Format {
                offset: i + 1,
                msg: format!("types line {}: expected entity<TAB>type", i + 1),
            })?;
            self.types.insert(entity.to_string(), ty.trim().to_string());
            n += 1;
        }
        Ok(n)
    }

    pub fn load(descriptions: &Path, types: Option<&Path>) -> Result<Self> {
        let mut store = Self::new();
        let f = std::fs::File::open(descriptions).map_err(|e| Error::io(descriptions, e))?;
        store.read_jsonl(std::io::BufReader::new(f))?;
        if let Some(tp) = types {
            let f = std::fs::File::open(tp).map_err(|e| Error::io(tp, e))?;
            store.read_types(std::io::BufReader::new(f))?;
        }
        Ok(store)
    }

    /// Stored text, else the given entity type, else the type on file,
    /// else [`NO_DESP`].
    pub fn description<'a>(&'a self, name: &str, entity_type: Option<&'a str>) -> &'a str {
        if let Some(t) = self.texts.get(name) {
            return t;
        }
        if let Some(t) = entity_type.filter(|t| !t.is_empty()) {
            return t;
        }
        if let Some(t) = self.types.get(name) {
            return t;
        }
        NO_DESP
    }

    pub fn records(&self) -> Vec<DescriptionRecord> {
        let mut v: Vec<_> = self
            .texts
            .iter()
            .map(|(n, t)| DescriptionRecord {
                name: n.clone(),
                text: t.clone(),
            })
            .collect();
        v.sort_by(|a, b| a.name.cmp(&b.name));
        v
    }

    pub fn types(&self) -> Vec<(String, String)> {
        let mut v: Vec<_> = self.types.iter().map(|(a, b)| (a.clone(), b.clone())).collect();
        v.sort();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ingest(text: &str) -> Result<(KgStore, IngestReport)> {
        KgStore::ingest(text.as_bytes())
    }

    #[test]
    fn duplicates_are_summed() {
        let (store, report) = ingest("a\tc\t3\na\tc\t4\n").unwrap();
        assert_eq!(store.concepts("a"), &[("c".to_string(), 7)]);
        assert_eq!(report.accepted, 2);
        assert_eq!(report.merged_duplicates, 1);
    }

    #[test]
    fn empty_stream_gives_all_pad_bundles() {
        let (store, _) = ingest("").unwrap();
        let b = store.topk("anything", 3, Weighting::Log1p).unwrap();
        assert_eq!(b.concepts, vec![PAD_CONCEPT; 3]);
        assert_eq!(b.weights, vec![0.0; 3]);
        assert!(b.is_pad.iter().all(|&p| p));
    }

    #[test]
    fn malformed_lines_are_rejected_and_reported() {
        let mut text = String::new();
        for i in 0..20 {
            text.push_str(&format!("e{i}\tc\t{i}\n"));
        }
        text.push_str("bad\tc\t-3\n");
        let (store, report) = ingest(&text).unwrap();
        assert_eq!(store.num_triples(), 20);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.rejected[0].line_no, 21);

        let err = ingest("a\tc\t1\nb\tc\tx\n").unwrap_err();
        assert!(matches!(err, Error::TooManyRejects { rejected: 1, total: 2 }));
    }

    #[test]
    fn topk_pads_with_unk() {
        let (store, _) = ingest("e\tc1\t10\ne\tc2\t5\n").unwrap();
        let b = store.topk("e", 3, Weighting::Log1p).unwrap();
        assert_eq!(b.concepts, vec!["c1", "c2", PAD_CONCEPT]);
        assert_eq!(b.is_pad, vec![false, false, true]);
        assert_eq!(b.weights[2], 0.0);
        assert!((b.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(store.topk("e", 0, Weighting::Log1p), Err(Error::Config(_))));
    }

    #[test]
    fn topk_takes_largest_counts_with_name_ties() {
        let (store, _) = ingest("e\ta\t1\ne\tb\t9\ne\tc\t4\ne\td\t9\ne\tf\t2\n").unwrap();
        let b = store.topk("e", 3, Weighting::Raw).unwrap();
        assert_eq!(b.concepts, vec!["b", "d", "c"]);
        assert_eq!(b.counts, vec![9, 9, 4]);
    }

    #[test]
    fn weighting_examples() {
        let w = weighting_scores(&[7, 7, 7], &[false; 3], Weighting::Log1p);
        for x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = weighting_scores(&[5, 0, 0], &[false, true, true], Weighting::Log1p);
        assert_eq!(w, vec![1.0, 0.0, 0.0]);
        // softmax(log1p(c)) reduces to (1 + c) / Σ(1 + c)
        let w = weighting_scores(&[100, 10], &[false, false], Weighting::Log1p);
        assert!((w[0] - 101.0 / 112.0).abs() < 1e-12);
        assert!((w[1] - 11.0 / 112.0).abs() < 1e-12);
        assert_eq!(weighting_scores(&[0, 0], &[true, true], Weighting::Raw), vec![0.0, 0.0]);
    }

    #[test]
    fn description_fallbacks() {
        let mut d = DescriptionStore::new();
        d.read_jsonl(r#"{"name": "Paris", "text": "capital of France"}"#.as_bytes())
            .unwrap();
        d.read_types("Lyon\tLOC\n".as_bytes()).unwrap();
        assert_eq!(d.description("Paris", Some("LOC")), "capital of France");
        assert_eq!(d.description("Nice", Some("LOC")), "LOC");
        assert_eq!(d.description("Lyon", None), "LOC");
        assert_eq!(d.description("city", None), NO_DESP);
    }

    fn random_triples(rng: &mut ChaCha8Rng, n: usize) -> Vec<UncertainTriple> {
        (0..n)
            .map(|_| UncertainTriple {
                entity: format!("e{}", rng.gen_range(0..30)),
                concept: format!("c{}", rng.gen_range(0..40)),
                count: rng.gen_range(0..50),
            })
            .collect()
    }

    #[test]
    fn topk_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let triples = random_triples(&mut rng, 1000);
        let text: String = triples
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.entity, t.concept, t.count))
            .collect();
        let (store, _) = ingest(&text).unwrap();
        for e in 0..30 {
            let name = format!("e{e}");
            let mut merged: HashMap<&str, u64> = HashMap::new();
            for t in triples.iter().filter(|t| t.entity == name) {
                *merged.entry(&t.concept).or_default() += t.count;
            }
            let mut all: Vec<(&str, u64)> = merged.into_iter().collect();
            all.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            for k in 1..=6 {
                let b = store.topk(&name, k, Weighting::Log1p).unwrap();
                let expect: Vec<&str> = all.iter().take(k).map(|x| x.0).collect();
                let got: Vec<&str> = b
                    .concepts
                    .iter()
                    .zip(&b.is_pad)
                    .filter(|(_, p)| !**p)
                    .map(|(c, _)| c.as_str())
                    .collect();
                assert_eq!(got, expect);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn bundle_weight_contract(seed in any::<u64>(), k in 1usize..6, raw in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(0..40);
            let store = KgStore::from_triples(random_triples(&mut rng, n));
            let weighting = if raw { Weighting::Raw } else { Weighting::Log1p };
            let entity = format!("e{}", rng.gen_range(0..30));
            let b = store.topk(&entity, k, weighting).unwrap();
            let total: f64 = b.weights.iter().sum();
            prop_assert!(total == 0.0 || (total - 1.0).abs() < 1e-9);
            prop_assert_eq!(total == 0.0, b.num_real() == 0);
            for (w, pad) in b.weights.iter().zip(&b.is_pad) {
                prop_assert!((0.0..=1.0).contains(w));
                if *pad { prop_assert_eq!(*w, 0.0); }
            }
            if k > 1 {
                let smaller = store.topk(&entity, k - 1, weighting).unwrap();
                for (c, pad) in smaller.concepts.iter().zip(&smaller.is_pad) {
                    if !pad { prop_assert!(b.concepts.contains(c)); }
                }
            }
        }

        #[test]
        fn ingestion_is_order_independent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut lines: Vec<String> = random_triples(&mut rng, 60)
                .iter()
                .map(|t| format!("{}\t{}\t{}", t.entity, t.concept, t.count))
                .collect();
            let (a, _) = ingest(&lines.join("\n")).unwrap();
            lines.shuffle(&mut rng);
            let (b, _) = ingest(&lines.join("\n")).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
