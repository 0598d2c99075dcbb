//! The multi-view network: mention-to-entity attention, concept integration
//! (NWI, AWI, PWI), the local and global bilinear interactions, the gate,
//! mixed sentence attention and the sigmoid relation head.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{candidate_pairs, distance_index, insert_anchors, min_distance, AnchoredDoc, Document, DISTANCE_BUCKETS};
use crate::encoder::{mention_embedding, sentence_representation, sentence_rows, Dropout, Embedder, Encoder};
use crate::error::{Error, Result};
use crate::kgstore::{DescriptionStore, KgStore, Weighting};
use crate::tensorcore::{Graph, ParamGroup, ParamId, ParamStore, PoolKind, Scalar, Tensor, Var};

/// Width of a distance embedding.
pub const DIST_DIM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Views {
    /// Sentence-level: entity and concept views only, one mention per entity.
    TwoView,
    #[default]
    ThreeView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integration {
    Nwi,
    Awi,
    #[default]
    Pwi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeConfig {
    pub views: Views,
    pub integration: Integration,
    /// Concepts retrieved per entity.
    #[serde(rename = "K", alias = "k")]
    pub k: usize,
    pub cross_view_inference: bool,
    pub mixed_attention: bool,
    pub use_entity_desp: bool,
    pub use_concept_desp: bool,
    pub anchor_in_sentpool: bool,
    /// Halve the mixed sentence weights so they sum to 1 instead of 2.
    pub normalize_mixed_weights: bool,
    pub weighting: Weighting,
}

impl Default for ModeConfig {
    fn default() -> Self {
        ModeConfig {
            views: Views::ThreeView,
            integration: Integration::Pwi,
            k: 3,
            cross_view_inference: true,
            mixed_attention: true,
            use_entity_desp: true,
            use_concept_desp: true,
            anchor_in_sentpool: true,
            normalize_mixed_weights: false,
            weighting: Weighting::Log1p,
        }
    }
}

pub const ABLATIONS: [&str; 6] = ["nwi", "awi", "no-crossview", "no-mixedatt", "no-entity-desp", "no-concept-desp"];

impl ModeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("mode.K must be at least 1".into()));
        }
        Ok(())
    }

    /// This configuration with one named ablation applied.
    pub fn ablation(&self, name: &str) -> Result<ModeConfig> {
        let mut m = self.clone();
        match name {
            "nwi" => m.integration = Integration::Nwi,
            "awi" => m.integration = Integration::Awi,
            "no-crossview" => m.cross_view_inference = false,
            "no-mixedatt" => m.mixed_attention = false,
            "no-entity-desp" => m.use_entity_desp = false,
            "no-concept-desp" => m.use_concept_desp = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}`; valid names: {}",
                    ABLATIONS.join(", ")
                )))
            }
        }
        Ok(m)
    }
}

/// Everything the network needs about one entity, resolved outside the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEntity {
    pub name: String,
    pub description: String,
    pub concepts: Vec<String>,
    pub concept_descriptions: Vec<String>,
    pub weights: Vec<f64>,
    pub is_pad: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDoc {
    pub doc_id: String,
    pub anchored: AnchoredDoc,
    pub entities: Vec<PreparedEntity>,
    pub sentence_rows: Vec<Vec<usize>>,
    pub pairs: Vec<(usize, usize)>,
    /// Signed `d_ht` per pair.
    pub distances: Vec<i64>,
    /// Sentences holding at least one mention, per entity.
    pub mention_sentences: Vec<BTreeSet<usize>>,
    /// Binary gold vector per pair (length = number of relations).
    pub targets: Vec<Vec<f64>>,
}

impl PreparedDoc {
    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }
}

/// Resolves anchors, distances, concept bundles and descriptions for a document.
pub fn prepare(
    doc: &Document,
    kg: &KgStore,
    descriptions: &DescriptionStore,
    mode: &ModeConfig,
    num_relations: usize,
) -> Result<PreparedDoc> {
    mode.validate()?;
    if mode.views == Views::TwoView {
        if let Some(e) = doc.entities.iter().find(|e| e.mentions.len() != 1) {
            return Err(Error::Config(format!(
                "two-view mode needs exactly one mention per entity; `{}` in {} has {}",
                e.name,
                doc.doc_id,
                e.mentions.len()
            )));
        }
    }
    let anchored = insert_anchors(doc);
    let sentence_rows = (0..doc.sentences.len())
        .map(|s| sentence_rows(&anchored, s, mode.anchor_in_sentpool))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Invalid(format!("{}: {e}", doc.doc_id)))?;
    let mut entities = Vec::with_capacity(doc.entities.len());
    for e in &doc.entities {
        let bundle = kg.topk(&e.name, mode.k, mode.weighting)?;
        let concept_descriptions = bundle
            .concepts
            .iter()
            .zip(&bundle.is_pad)
            .map(|(c, &pad)| {
                if pad {
                    crate::kgstore::NO_DESP.to_string()
                } else {
                    descriptions.description(c, None).to_string()
                }
            })
            .collect();
        entities.push(PreparedEntity {
            name: e.name.clone(),
            description: descriptions.description(&e.name, Some(&e.entity_type)).to_string(),
            concepts: bundle.concepts,
            concept_descriptions,
            weights: bundle.weights,
            is_pad: bundle.is_pad,
        });
    }
    let pairs = candidate_pairs(doc.num_entities());
    let distances = pairs
        .iter()
        .map(|&(h, t)| min_distance(&anchored, h, t))
        .collect::<Result<Vec<_>>>()?;
    let mention_sentences = doc
        .entities
        .iter()
        .map(|e| e.mentions.iter().map(|m| m.sent_idx).collect())
        .collect();
    let mut targets = Vec::with_capacity(pairs.len());
    for &(h, t) in &pairs {
        let mut y = vec![0.0; num_relations];
        for r in doc.relations_of(h, t) {
            if r >= num_relations {
                return Err(Error::Compatibility(format!(
                    "{}: relation id {r} outside a {num_relations}-relation model",
                    doc.doc_id
                )));
            }
            y[r] = 1.0;
        }
        targets.push(y);
    }
    Ok(PreparedDoc {
        doc_id: doc.doc_id.clone(),
        anchored,
        entities,
        sentence_rows,
        pairs,
        distances,
        mention_sentences,
        targets,
    })
}

/// Parameters of the cross-view heads.
#[derive(Debug, Clone, Copy)]
pub struct CrossViewParams {
    pub distance: ParamId,
    pub fl_weight: ParamId,
    pub fl_bias: ParamId,
    pub fg_weight: ParamId,
    pub fg_bias: ParamId,
    pub gate_weight: ParamId,
    pub gate_bias: ParamId,
    pub cls_weight: ParamId,
    pub cls_bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub enum Heads {
    CrossView(CrossViewParams),
    /// Concatenation baseline: one affine layer over seven d-vectors.
    Concat { weight: ParamId, bias: ParamId },
}

#[derive(Debug, Clone)]
pub struct Miuk {
    pub encoder: Encoder,
    pub d: usize,
    pub num_relations: usize,
    pub heads: Heads,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn head_shapes(d: usize, l: usize, cross_view: bool) -> Vec<(&'static str, Vec<usize>)> {
    if cross_view {
        let p = d + DIST_DIM;
        vec![
            ("dist.table", vec![DISTANCE_BUCKETS, DIST_DIM]),
            ("f_l.weight", vec![p, d, p]),
            ("f_l.bias", vec![d]),
            ("f_g.weight", vec![2 * d, d, 2 * d]),
            ("f_g.bias", vec![d]),
            ("gate.weight", vec![d, 2 * d]),
            ("gate.bias", vec![d]),
            ("cls.weight", vec![l, 2 * d]),
            ("cls.bias", vec![l]),
        ]
    } else {
        vec![("concat_cls.weight", vec![l, 7 * d]), ("concat_cls.bias", vec![l])]
    }
}

impl Miuk {
    /// Registers and initializes all parameters the mode uses. Bilinear
    /// tensors and linear maps are uniform in `±1/sqrt(fan_in)`, where a
    /// bilinear map's fan-in is `p·q`; biases start at 0.
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        embedder: Embedder,
        d: usize,
        num_relations: usize,
        mode: &ModeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || num_relations == 0 {
            return Err(Error::Config("model width and relation count must be positive".into()));
        }
        let encoder = Encoder::register(store, embedder, d, rng)?;
        let mut ids = Vec::new();
        for (name, shape) in head_shapes(d, num_relations, mode.cross_view_inference) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name == "dist.table" {
                uniform(rng, n, 1.0)
            } else if shape.len() == 3 {
                uniform(rng, n, 1.0 / ((shape[0] * shape[2]) as f64).sqrt())
            } else {
                uniform(rng, n, 1.0 / (shape[1] as f64).sqrt())
            };
            ids.push(store.add(name, ParamGroup::Other, Tensor::from_f64(&shape, &data)?)?);
        }
        Ok(Miuk {
            encoder,
            d,
            num_relations,
            heads: Self::heads_from(&ids, mode.cross_view_inference),
        })
    }

    /// Binds to parameters already in `store`, checking every shape.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, embedder: Embedder, num_relations: usize, mode: &ModeConfig) -> Result<Self> {
        let encoder = Encoder::bind(store, embedder)?;
        let d = encoder.d();
        let mut ids = Vec::new();
        for (name, shape) in head_shapes(d, num_relations, mode.cross_view_inference) {
            let id = store.id(name).ok_or_else(|| {
                let hint = if mode.cross_view_inference {
                    ""
                } else {
                    " (the concatenation baseline needs a checkpoint trained with cross_view_inference = false)"
                };
                Error::Compatibility(format!("checkpoint has no `{name}`{hint}"))
            })?;
            if store.shape(id) != shape.as_slice() {
                return Err(Error::Compatibility(format!(
                    "`{name}` has shape {:?}, expected {shape:?} for d={d} and {num_relations} relations",
                    store.shape(id)
                )));
            }
            ids.push(id);
        }
        Ok(Miuk {
            encoder,
            d,
            num_relations,
            heads: Self::heads_from(&ids, mode.cross_view_inference),
        })
    }

    fn heads_from(ids: &[ParamId], cross_view: bool) -> Heads {
        if cross_view {
            Heads::CrossView(CrossViewParams {
                distance: ids[0],
                fl_weight: ids[1],
                fl_bias: ids[2],
                fg_weight: ids[3],
                fg_bias: ids[4],
                gate_weight: ids[5],
                gate_bias: ids[6],
                cls_weight: ids[7],
                cls_bias: ids[8],
            })
        } else {
            Heads::Concat {
                weight: ids[0],
                bias: ids[1],
            }
        }
    }

    /// Builds the forward graph for every candidate pair of a document.
    pub fn forward_doc<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        prep: &PreparedDoc,
        mode: &ModeConfig,
        mut dropout: Option<&mut Dropout<'_, R>>,
    ) -> Result<DocNodes> {
        let d = self.d;
        if mode.cross_view_inference != matches!(self.heads, Heads::CrossView(_)) {
            return Err(Error::Config(
                "mode.cross_view_inference does not match the parameters this model was built with".into(),
            ));
        }
        let ctx = self
            .encoder
            .encode_tokens(g, &prep.anchored.tokens, dropout.as_mut().map(|x| &mut **x))?;
        let sentence_vars = prep
            .sentence_rows
            .iter()
            .map(|rows| sentence_representation(g, &ctx, rows))
            .collect::<Result<Vec<_>>>()?;
        let sentences = g.stack(&sentence_vars)?;

        let mut cache: HashMap<String, Var> = HashMap::new();
        let mut entities = Vec::with_capacity(prep.entities.len());
        for (ei, ent) in prep.entities.iter().enumerate() {
            let e_d = if mode.use_entity_desp {
                describe_cached(&mut cache, g, &self.encoder, &ent.description, dropout.as_mut().map(|x| &mut **x))?
            } else {
                g.zeros(&[d])
            };
            let mentions = prep.anchored.mentions[ei]
                .iter()
                .map(|m| mention_embedding(g, &ctx, m))
                .collect::<Result<Vec<_>>>()?;
            let (e_l, mention_attn) = if mode.views == Views::TwoView {
                (mentions[0], None)
            } else {
                let (e_l, alpha) = m2e_local_entity(g, &mentions, e_d)?;
                (e_l, Some(alpha))
            };

            let mut concept_vars = Vec::with_capacity(ent.concepts.len());
            for (text, &pad) in ent.concept_descriptions.iter().zip(&ent.is_pad) {
                concept_vars.push(if pad {
                    g.zeros(&[d])
                } else {
                    describe_cached(&mut cache, g, &self.encoder, text, dropout.as_mut().map(|x| &mut **x))?
                });
            }
            let (c, concept_attn) = concept_vector(g, mode.integration, &concept_vars, &ent.is_pad, &ent.weights, e_l)?;
            entities.push(EntityNodes {
                e_d,
                e_l,
                c,
                mention_attn,
                concept_attn,
            });
        }

        let mut pairs = Vec::with_capacity(prep.pairs.len());
        for (pi, &(h, t)) in prep.pairs.iter().enumerate() {
            let (eh, et) = (&entities[h], &entities[t]);
            let zero = g.zeros(&[d]);
            let (hd, td) = if mode.use_entity_desp { (eh.e_d, et.e_d) } else { (zero, zero) };
            let (ch, ct) = if mode.use_concept_desp { (eh.c, et.c) } else { (zero, zero) };
            let node = match self.heads {
                Heads::CrossView(p) => {
                    let dist = g.param(p.distance);
                    let dht = distance_index(prep.distances[pi]);
                    let dth = distance_index(-prep.distances[pi]);
                    debug_assert!(dht < DISTANCE_BUCKETS && dth < DISTANCE_BUCKETS);
                    let emb_ht = g.row(dist, dht)?;
                    let emb_th = g.row(dist, dth)?;
                    let (flw, flb) = (g.param(p.fl_weight), g.param(p.fl_bias));
                    let u_l = local_interactive(g, eh.e_l, et.e_l, emb_ht, emb_th, flw, flb)?;
                    let (fgw, fgb) = (g.param(p.fg_weight), g.param(p.fg_bias));
                    let u_g = global_interactive(g, hd, ch, td, ct, fgw, fgb)?;
                    let (gw, gb) = (g.param(p.gate_weight), g.param(p.gate_bias));
                    let (gate, u) = gate_aggregate(g, u_l, u_g, gw, gb)?;
                    let gamma = if mode.mixed_attention { Some(mixed_gamma(prep, h, t)?) } else { None };
                    let mixed = mixed_attention(g, sentences, u_l, u_g, gamma.as_deref(), mode.normalize_mixed_weights)?;
                    let v = mixed.v;
                    let feat = g.concat(&[u, v])?;
                    let feat = match dropout.as_mut() {
                        Some(dr) => g.dropout(feat, dr.ratio, Some(&mut *dr.rng))?,
                        None => feat,
                    };
                    let (cw, cb) = (g.param(p.cls_weight), g.param(p.cls_bias));
                    let (logits, scores) = predict(g, feat, cw, cb)?;
                    PairNodes {
                        cross: Some(CrossNodes {
                            u_l,
                            u_g,
                            gate,
                            u,
                            alpha: mixed.alpha,
                            beta: mixed.beta,
                            gamma,
                            weights: mixed.weights,
                        }),
                        v,
                        logits,
                        scores,
                    }
                }
                Heads::Concat { weight, bias } => {
                    let v = g.pool(sentences, PoolKind::Mean)?;
                    let feat = g.concat(&[eh.e_l, et.e_l, hd, td, ch, ct, v])?;
                    let feat = match dropout.as_mut() {
                        Some(dr) => g.dropout(feat, dr.ratio, Some(&mut *dr.rng))?,
                        None => feat,
                    };
                    let (w, b) = (g.param(weight), g.param(bias));
                    let (logits, scores) = predict(g, feat, w, b)?;
                    PairNodes {
                        cross: None,
                        v,
                        logits,
                        scores,
                    }
                }
            };
            pairs.push(node);
        }
        Ok(DocNodes {
            sentences,
            entities,
            pairs,
        })
    }

    /// Summed BCE over all pairs and relations of a document, times `weight`.
    pub fn doc_loss<T: Scalar>(&self, g: &mut Graph<'_, T>, prep: &PreparedDoc, nodes: &DocNodes, weight: f64) -> Result<Option<Var>> {
        if nodes.pairs.is_empty() {
            return Ok(None);
        }
        let logits: Vec<Var> = nodes.pairs.iter().map(|p| p.logits).collect();
        let stacked = g.stack(&logits)?;
        let targets: Vec<T> = prep.targets.iter().flatten().map(|&y| T::of(y)).collect();
        Ok(Some(g.bce_with_logits(stacked, &targets, weight)?))
    }

    /// Evaluation-mode scores, one `num_relations` vector per candidate pair.
    pub fn score_doc<T: Scalar>(&self, store: &ParamStore<T>, prep: &PreparedDoc, mode: &ModeConfig) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::with_params(store);
        let nodes = self.forward_doc::<T, rand_chacha::ChaCha8Rng>(&mut g, prep, mode, None)?;
        Ok(nodes.pairs.iter().map(|p| g.to_f64(p.scores)).collect())
    }

    /// Evaluation-mode trace of every intermediate, per pair.
    pub fn trace_doc<T: Scalar>(&self, store: &ParamStore<T>, prep: &PreparedDoc, mode: &ModeConfig) -> Result<Vec<PairTrace>> {
        let mut g = Graph::with_params(store);
        let nodes = self.forward_doc::<T, rand_chacha::ChaCha8Rng>(&mut g, prep, mode, None)?;
        Ok(nodes.trace(&g, prep))
    }
}

/// Attention over mention embeddings with the description vector as query.
/// Returns `(e_l, α)`.
pub fn m2e_local_entity<T: Scalar>(g: &mut Graph<'_, T>, mentions: &[Var], e_d: Var) -> Result<(Var, Var)> {
    let m = g.stack(mentions)?;
    let logits = g.matvec(m, e_d)?;
    let alpha = g.softmax(logits, None)?;
    Ok((g.vecmat(alpha, m)?, alpha))
}

/// `f_l([h_l; d_ht], [t_l; d_th])`.
pub fn local_interactive<T: Scalar>(
    g: &mut Graph<'_, T>,
    h_l: Var,
    t_l: Var,
    emb_ht: Var,
    emb_th: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let x = g.concat(&[h_l, emb_ht])?;
    let y = g.concat(&[t_l, emb_th])?;
    g.bilinear(x, weight, y, bias)
}

/// Concept vector under the chosen integration. Entities without real
/// concepts get a zero vector. The second value is the AWI attention.
pub fn concept_vector<T: Scalar>(
    g: &mut Graph<'_, T>,
    integration: Integration,
    concepts: &[Var],
    is_pad: &[bool],
    prior: &[f64],
    e_l: Var,
) -> Result<(Var, Option<Var>)> {
    let real: Vec<bool> = is_pad.iter().map(|p| !p).collect();
    if !real.iter().any(|&r| r) {
        let d = g.shape(e_l)[0];
        return Ok((g.zeros(&[d]), None));
    }
    let cm = g.stack(concepts)?;
    match integration {
        Integration::Nwi => {
            let rows: Vec<usize> = (0..real.len()).filter(|&i| real[i]).collect();
            let block = g.gather_rows(cm, &rows)?;
            Ok((g.pool(block, PoolKind::Mean)?, None))
        }
        Integration::Awi => {
            let logits = g.matvec(cm, e_l)?;
            let a = g.softmax(logits, Some(&real))?;
            Ok((g.vecmat(a, cm)?, Some(a)))
        }
        Integration::Pwi => {
            let w = g.vector(prior.iter().map(|&x| T::of(x)).collect());
            Ok((g.vecmat(w, cm)?, None))
        }
    }
}

/// `f_g([h_d; c_h], [t_d; c_t])`.
pub fn global_interactive<T: Scalar>(
    g: &mut Graph<'_, T>,
    h_d: Var,
    c_h: Var,
    t_d: Var,
    c_t: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let x = g.concat(&[h_d, c_h])?;
    let y = g.concat(&[t_d, c_t])?;
    g.bilinear(x, weight, y, bias)
}

/// `g = σ(W_g[u_l; u_g] + b_g)`, `u = g⊙u_l + (E − g)⊙u_g`. Returns `(g, u)`.
pub fn gate_aggregate<T: Scalar>(g: &mut Graph<'_, T>, u_l: Var, u_g: Var, weight: Var, bias: Var) -> Result<(Var, Var)> {
    let both = g.concat(&[u_l, u_g])?;
    let z = g.matvec(weight, both)?;
    let z = g.add(z, bias)?;
    let gate = g.sigmoid(z);
    let ones = g.ones(g.shape(gate).to_vec().as_slice());
    let rest = g.sub(ones, gate)?;
    let a = g.mul(gate, u_l)?;
    let b = g.mul(rest, u_g)?;
    Ok((gate, g.add(a, b)?))
}

pub struct MixedAttention {
    pub alpha: Var,
    pub beta: Var,
    pub weights: Var,
    pub v: Var,
}

/// Sentence weights `(α_i + β_i)/2 + γ_i` and `v = Σ w_i s_i`. With
/// `gamma: None` the empirical term is dropped; `normalize` halves the
/// weights when it is present.
pub fn mixed_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    sentences: Var,
    u_l: Var,
    u_g: Var,
    gamma: Option<&[f64]>,
    normalize: bool,
) -> Result<MixedAttention> {
    let sl = g.matvec(sentences, u_l)?;
    let alpha = g.softmax(sl, None)?;
    let sg = g.matvec(sentences, u_g)?;
    let beta = g.softmax(sg, None)?;
    let ab = g.add(alpha, beta)?;
    let mut weights = g.scale(ab, 0.5);
    if let Some(gamma) = gamma {
        let gv = g.vector(gamma.iter().map(|&x| T::of(x)).collect());
        weights = g.add(weights, gv)?;
        if normalize {
            weights = g.scale(weights, 0.5);
        }
    }
    let v = g.vecmat(weights, sentences)?;
    Ok(MixedAttention { alpha, beta, weights, v })
}

/// Affine layer plus sigmoid. Returns `(logits, scores)`.
pub fn predict<T: Scalar>(g: &mut Graph<'_, T>, feat: Var, weight: Var, bias: Var) -> Result<(Var, Var)> {
    let z = g.matvec(weight, feat)?;
    let logits = g.add(z, bias)?;
    Ok((logits, g.sigmoid(logits)))
}

fn describe_cached<T: Scalar, R: Rng + ?Sized>(
    cache: &mut HashMap<String, Var>,
    g: &mut Graph<'_, T>,
    encoder: &Encoder,
    text: &str,
    dropout: Option<&mut Dropout<'_, R>>,
) -> Result<Var> {
    if let Some(&v) = cache.get(text) {
        return Ok(v);
    }
    let v = encoder.description_vector(g, text, dropout)?;
    cache.insert(text.to_string(), v);
    Ok(v)
}

/// Empirical sentence weights: `1/z` on the `z` sentences that mention `h` or `t`.
pub fn mixed_gamma(prep: &PreparedDoc, h: usize, t: usize) -> Result<Vec<f64>> {
    let support: BTreeSet<usize> = prep.mention_sentences[h]
        .union(&prep.mention_sentences[t])
        .copied()
        .collect();
    if support.is_empty() {
        return Err(Error::Invalid("pair has no mention sentences".into()));
    }
    let z = support.len() as f64;
    Ok((0..prep.sentence_rows.len())
        .map(|i| if support.contains(&i) { 1.0 / z } else { 0.0 })
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub struct EntityNodes {
    pub e_d: Var,
    pub e_l: Var,
    pub c: Var,
    pub mention_attn: Option<Var>,
    pub concept_attn: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct CrossNodes {
    pub u_l: Var,
    pub u_g: Var,
    pub gate: Var,
    pub u: Var,
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Option<Vec<f64>>,
    pub weights: Var,
}

#[derive(Debug, Clone)]
pub struct PairNodes {
    /// Absent for the concatenation baseline.
    pub cross: Option<CrossNodes>,
    pub v: Var,
    pub logits: Var,
    pub scores: Var,
}

#[derive(Debug, Clone)]
pub struct DocNodes {
    pub sentences: Var,
    pub entities: Vec<EntityNodes>,
    pub pairs: Vec<PairNodes>,
}

/// Every intermediate of one pair's forward pass, in 64-bit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairTrace {
    pub doc_id: String,
    pub head: usize,
    pub tail: usize,
    pub e_l_h: Vec<f64>,
    pub e_l_t: Vec<f64>,
    pub e_d_h: Vec<f64>,
    pub e_d_t: Vec<f64>,
    pub c_h: Vec<f64>,
    pub c_t: Vec<f64>,
    pub mention_attn_h: Option<Vec<f64>>,
    pub mention_attn_t: Option<Vec<f64>>,
    pub concept_attn_h: Option<Vec<f64>>,
    pub concept_attn_t: Option<Vec<f64>>,
    pub concept_weights_h: Vec<f64>,
    pub concept_weights_t: Vec<f64>,
    pub u_l: Option<Vec<f64>>,
    pub u_g: Option<Vec<f64>>,
    pub g: Option<Vec<f64>>,
    pub u: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub sentence_weights: Option<Vec<f64>>,
    pub v: Vec<f64>,
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
}

impl DocNodes {
    pub fn trace<T: Scalar>(&self, g: &Graph<'_, T>, prep: &PreparedDoc) -> Vec<PairTrace> {
        let val = |v: Var| g.to_f64(v);
        let opt = |v: Option<Var>| v.map(|x| g.to_f64(x));
        self.pairs
            .iter()
            .zip(&prep.pairs)
            .map(|(p, &(h, t))| {
                let (eh, et) = (&self.entities[h], &self.entities[t]);
                let cross = p.cross.as_ref();
                PairTrace {
                    doc_id: prep.doc_id.clone(),
                    head: h,
                    tail: t,
                    e_l_h: val(eh.e_l),
                    e_l_t: val(et.e_l),
                    e_d_h: val(eh.e_d),
                    e_d_t: val(et.e_d),
                    c_h: val(eh.c),
                    c_t: val(et.c),
                    mention_attn_h: opt(eh.mention_attn),
                    mention_attn_t: opt(et.mention_attn),
                    concept_attn_h: opt(eh.concept_attn),
                    concept_attn_t: opt(et.concept_attn),
                    concept_weights_h: prep.entities[h].weights.clone(),
                    concept_weights_t: prep.entities[t].weights.clone(),
                    u_l: cross.map(|c| val(c.u_l)),
                    u_g: cross.map(|c| val(c.u_g)),
                    g: cross.map(|c| val(c.gate)),
                    u: cross.map(|c| val(c.u)),
                    alpha: cross.map(|c| val(c.alpha)),
                    beta: cross.map(|c| val(c.beta)),
                    gamma: cross.and_then(|c| c.gamma.clone()),
                    sentence_weights: cross.map(|c| val(c.weights)),
                    v: val(p.v),
                    logits: val(p.logits),
                    scores: val(p.scores),
                }
            })
            .collect()
    }
}
