//! Token embeddings, the trainable projection to model width, and the
//! pooling recipes for mentions, sentences and descriptions.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnchoredDoc, AnchoredMention};
use crate::error::{Error, Result};
use crate::kgstore::NO_DESP;
use crate::tensorcore::{Graph, ParamGroup, ParamId, ParamStore, PoolKind, Scalar, Tensor, Var};

const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const DEFAULT_BASE_DIM: usize = 768;
/// Descriptions longer than this are truncated before pooling.
pub const MAX_DESCRIPTION_TOKENS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Precomputed,
}

/// How to build an [`Embedder`]; the serialized form lives in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub base_dim: usize,
    pub hash_seed: u64,
    pub embeddings: Option<PathBuf>,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            kind: EmbedderKind::Hash,
            base_dim: DEFAULT_BASE_DIM,
            hash_seed: 0,
            embeddings: None,
        }
    }
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.embeddings) {
            (EmbedderKind::Hash, Some(_)) => Err(Error::Config(
                "embedder: an embeddings file cannot be combined with kind `hash`".into(),
            )),
            (EmbedderKind::Precomputed, None) => Err(Error::Config(
                "embedder: kind `precomputed` needs an embeddings file".into(),
            )),
            (EmbedderKind::Hash, None) if self.base_dim == 0 => {
                Err(Error::Config("embedder.base_dim must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Embedder> {
        self.validate()?;
        match &self.embeddings {
            None => Ok(Embedder::hash(self.hash_seed, self.base_dim)),
            Some(path) => {
                let e = Embedder::load_precomputed(path)?;
                if e.base_dim() != self.base_dim {
                    return Err(Error::Config(format!(
                        "embedder.base_dim is {} but {} holds {}-dimensional vectors",
                        self.base_dim,
                        path.display(),
                        e.base_dim()
                    )));
                }
                Ok(e)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Hash { seed: u64 },
    Table(HashMap<String, Vec<f32>>),
}

/// Frozen base vectors for tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    base_dim: usize,
    source: Source,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn token_seed(seed: u64, token: &str) -> u64 {
    // FNV-1a over the bytes, then folded with the global seed
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut s = seed ^ h.rotate_left(17);
    splitmix64(&mut s) ^ h
}

impl Embedder {
    pub fn hash(seed: u64, base_dim: usize) -> Self {
        Embedder {
            base_dim,
            source: Source::Hash { seed },
        }
    }

    pub fn from_table(base_dim: usize, table: HashMap<String, Vec<f32>>) -> Result<Self> {
        if let Some((tok, v)) = table.iter().find(|(_, v)| v.len() != base_dim) {
            return Err(Error::Invalid(format!(
                "embedding for `{tok}` has {} values, expected {base_dim}",
                v.len()
            )));
        }
        Ok(Embedder {
            base_dim,
            source: Source::Table(table),
        })
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn is_hash(&self) -> bool {
        matches!(self.source, Source::Hash { .. })
    }

    /// Appends the base vector of `token` to `out`.
    pub fn write_vector(&self, token: &str, out: &mut Vec<f64>) -> Result<()> {
        match &self.source {
            Source::Hash { seed } => {
                let mut state = token_seed(*seed, token);
                let root3 = 3f64.sqrt();
                out.extend((0..self.base_dim).map(|_| {
                    let u = (splitmix64(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
                    (2.0 * u - 1.0) * root3
                }));
                Ok(())
            }
            Source::Table(t) => {
                let v = t
                    .get(token)
                    .ok_or_else(|| Error::UnknownToken(token.to_string()))?;
                out.extend(v.iter().map(|&x| x as f64));
                Ok(())
            }
        }
    }

    pub fn vector(&self, token: &str) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(self.base_dim);
        self.write_vector(token, &mut v)?;
        Ok(v)
    }

    /// `tokens.len() × base_dim` matrix of base vectors.
    pub fn matrix<T: Scalar, S: AsRef<str>>(&self, tokens: &[S]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(tokens.len() * self.base_dim);
        for t in tokens {
            self.write_vector(t.as_ref(), &mut data)?;
        }
        let data = data.into_iter().map(T::of).collect();
        Tensor::new(vec![tokens.len(), self.base_dim], data)
    }

    /// Reads the `EMB1` binary format.
    pub fn read_precomputed<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<(usize, &[u8])> {
            if pos + n > bytes.len() {
                return Err(Error::Format {
                    offset: pos,
                    msg: format!("truncated: needed {n} bytes, {} left", bytes.len() - pos),
                });
            }
            let at = pos;
            pos += n;
            Ok((at, &bytes[at..at + n]))
        };
        let (_, magic) = take(4)?;
        if magic != EMB_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected EMB1".into(),
            });
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let base_dim = u32_at(take(4)?.1);
        let count = u32_at(take(4)?.1);
        let mut table = HashMap::with_capacity(count);
        for _ in 0..count {
            let len = u32_at(take(4)?.1);
            let (at, raw) = take(len)?;
            let token = std::str::from_utf8(raw)
                .map_err(|_| Error::Format {
                    offset: at,
                    msg: "token is not UTF-8".into(),
                })?
                .to_string();
            let (_, raw) = take(base_dim * 4)?;
            let v = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            table.insert(token, v);
        }
        Self::from_table(base_dim, table)
    }

    pub fn load_precomputed(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_precomputed(std::io::BufReader::new(f))
    }

    /// Writes entries in the `EMB1` format, in the order given.
    pub fn write_precomputed<W: Write>(base_dim: usize, entries: &[(String, Vec<f32>)], mut out: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(EMB_MAGIC);
        buf.extend_from_slice(&(base_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (tok, v) in entries {
            if v.len() != base_dim {
                return Err(Error::Invalid(format!("embedding for `{tok}` has wrong length")));
            }
            buf.extend_from_slice(&(tok.len() as u32).to_le_bytes());
            buf.extend_from_slice(tok.as_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }
}

/// Projected token rows of one sequence, as a graph node.
#[derive(Debug, Clone, Copy)]
pub struct ContextEncoding {
    pub vectors: Var,
    pub num_tokens: usize,
}

/// Dropout settings for a forward pass; `None` everywhere means evaluation.
pub struct Dropout<'r, R: Rng + ?Sized> {
    pub ratio: f64,
    pub rng: &'r mut R,
}

/// Shared encoder: frozen embedder plus a trainable affine projection.
#[derive(Debug, Clone)]
pub struct Encoder {
    embedder: Embedder,
    d: usize,
    weight: ParamId,
    bias: ParamId,
}

pub const PROJ_WEIGHT: &str = "encoder.proj.weight";
pub const PROJ_BIAS: &str = "encoder.proj.bias";

impl Encoder {
    /// Registers the projection in `store`, initialized uniformly in
    /// `±1/sqrt(base_dim)` with a zero bias.
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        embedder: Embedder,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let b = embedder.base_dim();
        let bound = 1.0 / (b as f64).sqrt();
        let w: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = store.add(PROJ_WEIGHT, ParamGroup::Encoder, Tensor::from_f64(&[b, d], &w)?)?;
        let bias = store.add(PROJ_BIAS, ParamGroup::Encoder, Tensor::zeros(&[d]))?;
        Ok(Encoder {
            embedder,
            d,
            weight,
            bias,
        })
    }

    /// Binds to an existing projection (e.g. a loaded checkpoint).
    pub fn bind<T: Scalar>(store: &ParamStore<T>, embedder: Embedder) -> Result<Self> {
        let find = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Compatibility(format!("checkpoint has no `{name}`")))
        };
        let (weight, bias) = (find(PROJ_WEIGHT)?, find(PROJ_BIAS)?);
        let shape = store.shape(weight);
        if shape.len() != 2 || shape[0] != embedder.base_dim() {
            return Err(Error::Compatibility(format!(
                "`{PROJ_WEIGHT}` has shape {shape:?}, embedder base_dim is {}",
                embedder.base_dim()
            )));
        }
        let d = shape[1];
        if store.shape(bias) != [d] {
            return Err(Error::Compatibility(format!("`{PROJ_BIAS}` does not match width {d}")));
        }
        Ok(Encoder {
            embedder,
            d,
            weight,
            bias,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    /// Base embedding, affine projection and (in training) dropout.
    pub fn encode_tokens<T: Scalar, S: AsRef<str>, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: &[S],
        dropout: Option<&mut Dropout<'_, R>>,
    ) -> Result<ContextEncoding> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("encode_tokens"));
        }
        let base = g.constant(self.embedder.matrix(tokens)?);
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let projected = g.matmul(base, w)?;
        let mut vectors = g.add_row_bias(projected, b)?;
        if let Some(dr) = dropout {
            vectors = g.dropout(vectors, dr.ratio, Some(&mut *dr.rng))?;
        }
        Ok(ContextEncoding {
            vectors,
            num_tokens: tokens.len(),
        })
    }

    /// Max-pooled encoding of a whitespace-tokenized description, truncated
    /// to [`MAX_DESCRIPTION_TOKENS`]. The `<NO_DESP>` sentinel maps to zeros.
    pub fn description_vector<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        text: &str,
        dropout: Option<&mut Dropout<'_, R>>,
    ) -> Result<Var> {
        let tokens = description_tokens(text);
        if tokens.is_empty() {
            return Ok(g.zeros(&[self.d]));
        }
        let ctx = self.encode_tokens(g, &tokens, dropout)?;
        g.pool(ctx.vectors, PoolKind::Max)
    }
}

/// Tokens that feed a description vector; empty for the sentinel.
pub fn description_tokens(text: &str) -> Vec<&str> {
    if text.trim() == NO_DESP {
        return Vec::new();
    }
    text.split_whitespace().take(MAX_DESCRIPTION_TOKENS).collect()
}

/// Rows averaged into a mention embedding: its anchor, then its words.
pub fn mention_rows(m: &AnchoredMention) -> Vec<usize> {
    let mut rows = Vec::with_capacity(m.words.len() + 1);
    rows.push(m.anchor);
    rows.extend_from_slice(&m.words);
    rows
}

pub fn mention_embedding<T: Scalar>(g: &mut Graph<'_, T>, ctx: &ContextEncoding, m: &AnchoredMention) -> Result<Var> {
    let rows = g.gather_rows(ctx.vectors, &mention_rows(m))?;
    g.pool(rows, PoolKind::Mean)
}

/// Token rows pooled into the representation of sentence `s`.
pub fn sentence_rows(doc: &AnchoredDoc, s: usize, include_anchors: bool) -> Result<Vec<usize>> {
    let span = doc
        .sentence_spans
        .get(s)
        .ok_or_else(|| Error::Invalid(format!("sentence {s} does not exist")))?;
    let rows: Vec<usize> = if include_anchors {
        span.clone().collect()
    } else {
        let anchors: std::collections::HashSet<usize> =
            doc.mentions.iter().flatten().map(|m| m.anchor).collect();
        span.clone().filter(|i| !anchors.contains(i)).collect()
    };
    if rows.is_empty() {
        return Err(Error::Invalid(format!("sentence {s} is empty")));
    }
    Ok(rows)
}

pub fn sentence_representation<T: Scalar>(g: &mut Graph<'_, T>, ctx: &ContextEncoding, rows: &[usize]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("sentence_representation"));
    }
    let block = g.gather_rows(ctx.vectors, rows)?;
    g.pool(block, PoolKind::Max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{insert_anchors, Document, EntityCluster, Mention};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    fn encoder(base_dim: usize, d: usize) -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::register(&mut store, Embedder::hash(7, base_dim), d, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn hash_vectors_are_stable_and_distinct() {
        let e = Embedder::hash(3, 16);
        assert_eq!(e.vector("paris").unwrap(), e.vector("paris").unwrap());
        assert_ne!(e.vector("paris").unwrap(), e.vector("Paris").unwrap());
        assert_ne!(e.vector("paris").unwrap(), Embedder::hash(4, 16).vector("paris").unwrap());
    }

    #[test]
    fn hash_statistics_are_unit_variance() {
        let dim = 32;
        let e = Embedder::hash(0, dim);
        let n = 10_000;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for i in 0..n {
            let v = e.vector(&format!("tok{i}")).unwrap();
            for j in 0..dim {
                sum[j] += v[j];
                sq[j] += v[j] * v[j];
            }
        }
        for j in 0..dim {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.05, "dim {j} mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "dim {j} variance {var}");
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let (store, enc) = encoder(8, 4);
        let mut g = Graph::with_params(&store);
        let ctx = enc.encode_tokens::<_, _, NoRng>(&mut g, &["a", "b", "a"], None).unwrap();
        let v = g.value(ctx.vectors);
        assert_eq!(&v[0..4], &v[8..12]);
        assert_ne!(&v[0..4], &v[4..8]);
    }

    #[test]
    fn zero_projection_gives_zero_rows() {
        let (mut store, enc) = encoder(8, 4);
        store.value_mut(enc.weight_id()).iter_mut().for_each(|x| *x = 0.0);
        let mut g = Graph::with_params(&store);
        let ctx = enc.encode_tokens::<_, _, NoRng>(&mut g, &["x", "y"], None).unwrap();
        assert!(g.value(ctx.vectors).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn description_rules() {
        let (store, enc) = encoder(8, 4);
        let mut g = Graph::with_params(&store);
        let z = enc.description_vector::<_, NoRng>(&mut g, NO_DESP, None).unwrap();
        assert_eq!(g.value(z), &[0.0; 4]);
        let one = enc.description_vector::<_, NoRng>(&mut g, "city", None).unwrap();
        let ctx = enc.encode_tokens::<_, _, NoRng>(&mut g, &["city"], None).unwrap();
        assert_eq!(g.value(one), g.value(ctx.vectors));
        let rep = enc.description_vector::<_, NoRng>(&mut g, "city city city", None).unwrap();
        assert_eq!(g.value(rep), g.value(one));
        let long: String = (0..300).map(|i| format!("t{i} ")).collect();
        assert_eq!(description_tokens(&long).len(), MAX_DESCRIPTION_TOKENS);
    }

    fn sample_doc() -> Document {
        Document {
            doc_id: "d".into(),
            sentences: vec![
                vec!["a".into(), "big".into(), "red".into(), "house".into()],
                vec!["ok".into()],
            ],
            entities: vec![
                EntityCluster {
                    entity_index: 0,
                    name: "big red house".into(),
                    entity_type: String::new(),
                    mentions: vec![Mention { sent_idx: 0, start: 1, end: 4 }],
                },
                EntityCluster {
                    entity_index: 1,
                    name: "ok".into(),
                    entity_type: String::new(),
                    mentions: vec![Mention { sent_idx: 1, start: 0, end: 1 }],
                },
            ],
            labels: vec![],
        }
    }

    #[test]
    fn mention_embedding_is_mean_of_anchor_and_words() {
        let (store, enc) = encoder(8, 4);
        let doc = insert_anchors(&sample_doc());
        let mut g = Graph::with_params(&store);
        let ctx = enc.encode_tokens::<_, _, NoRng>(&mut g, &doc.tokens, None).unwrap();
        let m = mention_embedding(&mut g, &ctx, &doc.mentions[0][0]).unwrap();
        let rows = g.value(ctx.vectors).to_vec();
        let m_vals = g.value(m).to_vec();
        for k in 0..4 {
            let expect: f64 = [1usize, 2, 3, 4].iter().map(|&r| rows[r * 4 + k]).sum::<f64>() / 4.0;
            assert!((m_vals[k] - expect).abs() < 1e-12);
        }
        let single = mention_embedding(&mut g, &ctx, &doc.mentions[1][0]).unwrap();
        for k in 0..4 {
            let expect = (rows[5 * 4 + k] + rows[6 * 4 + k]) / 2.0;
            assert!((g.value(single)[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sentence_rows_respect_anchor_flag() {
        let doc = insert_anchors(&sample_doc());
        assert_eq!(sentence_rows(&doc, 0, true).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sentence_rows(&doc, 0, false).unwrap(), vec![0, 2, 3, 4]);
        assert!(sentence_rows(&doc, 5, true).is_err());
    }

    #[test]
    fn sentence_representation_is_columnwise_max() {
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vectors = g.constant(Tensor::matrix(5, 6, data.clone()).unwrap());
        let ctx = ContextEncoding { vectors, num_tokens: 5 };
        let s = sentence_representation(&mut g, &ctx, &[0, 1, 2, 3, 4]).unwrap();
        for k in 0..6 {
            let expect = (0..5).map(|r| data[r * 6 + k]).fold(f64::MIN, f64::max);
            assert_eq!(g.value(s)[k], expect);
        }
        assert!(sentence_representation(&mut g, &ctx, &[]).is_err());
    }

    #[test]
    fn precomputed_round_trip_and_errors() {
        let entries = vec![
            ("a".to_string(), vec![1.0f32, 2.0, 3.0]),
            ("b".to_string(), vec![-1.0f32, 0.5, 0.25]),
        ];
        let mut buf = Vec::new();
        Embedder::write_precomputed(3, &entries, &mut buf).unwrap();
        let e = Embedder::read_precomputed(buf.as_slice()).unwrap();
        assert_eq!(e.vector("b").unwrap(), vec![-1.0, 0.5, 0.25]);
        assert!(matches!(e.vector("zzz"), Err(Error::UnknownToken(t)) if t == "zzz"));

        let mut empty = Vec::new();
        Embedder::write_precomputed(3, &[], &mut empty).unwrap();
        let e = Embedder::read_precomputed(empty.as_slice()).unwrap();
        assert!(e.vector("a").is_err());

        let err = Embedder::read_precomputed(&buf[..buf.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset > 12));
        let err = Embedder::read_precomputed(&b"EMB2xxxxxxxx"[..]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn spec_validation() {
        let bad = EmbedderSpec {
            embeddings: Some("x.bin".into()),
            ..EmbedderSpec::default()
        };
        assert!(matches!(bad.build(), Err(Error::Config(_))));
        let bad = EmbedderSpec {
            kind: EmbedderKind::Precomputed,
            ..EmbedderSpec::default()
        };
        assert!(matches!(bad.build(), Err(Error::Config(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        let (store, enc) = encoder(8, 4);
        let run = |seed| {
            let mut g = Graph::with_params(&store);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut dr = Dropout { ratio: 0.3, rng: &mut rng };
            let ctx = enc.encode_tokens(&mut g, &["p", "q", "r"], Some(&mut dr)).unwrap();
            g.value(ctx.vectors).to_vec()
        };
        assert_eq!(run(5), run(5));
    }
}
