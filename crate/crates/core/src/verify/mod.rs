//! Self-verification: finite-difference gradient checks for every op and
//! for the whole network, comparison against an independent reference
//! implementation, and a randomized invariant battery.

mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{Document, EntityCluster, Mention, RelationLabel};
use crate::encoder::Embedder;
use crate::error::Result;
use crate::kgstore::{DescriptionStore, KgStore, UncertainTriple};
use crate::model::{prepare, Integration, Miuk, ModeConfig, PairTrace, PreparedDoc, Views};
use crate::tensorcore::{grad_check, GradCheckConfig, Graph, ParamGroup, ParamStore, PoolKind, Tensor, Var};

pub use oracle::{reference_traces, trace_difference};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-9;
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Ops,
    Model,
    All,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub suite: &'static str,
    pub name: String,
    /// Worst observed error (or violation count for invariants).
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyReport {
    pub lines: Vec<CheckLine>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    fn push(&mut self, suite: &'static str, name: impl Into<String>, value: f64, limit: f64, detail: impl Into<String>) {
        self.lines.push(CheckLine {
            suite,
            name: name.into(),
            value,
            limit,
            passed: value < limit,
            detail: detail.into(),
        });
    }
}

pub fn run(level: Level, seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    if matches!(level, Level::Ops | Level::All) {
        op_checks(&mut report, seed)?;
    }
    if matches!(level, Level::Model | Level::All) {
        model_checks(&mut report, seed)?;
        forward_oracle(&mut report, 100, seed)?;
    }
    if level == Level::All {
        invariant_battery(&mut report, 1000, seed)?;
    }
    Ok(report)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Projects an op output onto a fixed random direction to get a scalar.
fn probe(g: &mut Graph<'_, f64>, out: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let r = random_tensor(&mut rng, g.shape(out));
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

type OpBuilder = fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpBuilder)> {
    vec![
        ("add", vec![vec![5], vec![5]], |g, p| g.add(p[0], p[1])),
        ("sub", vec![vec![5], vec![5]], |g, p| g.sub(p[0], p[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, p| g.mul(p[0], p[1])),
        ("scale", vec![vec![4]], |g, p| Ok(g.scale(p[0], -1.7))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, p| g.matmul(p[0], p[1])),
        ("matvec", vec![vec![3, 4], vec![4]], |g, p| g.matvec(p[0], p[1])),
        ("vecmat", vec![vec![3], vec![3, 4]], |g, p| g.vecmat(p[0], p[1])),
        ("add_row_bias", vec![vec![3, 4], vec![4]], |g, p| g.add_row_bias(p[0], p[1])),
        ("bilinear", vec![vec![3], vec![3, 2, 4], vec![4], vec![2]], |g, p| {
            g.bilinear(p[0], p[1], p[2], p[3])
        }),
        ("softmax", vec![vec![6]], |g, p| g.softmax(p[0], None)),
        ("softmax_masked", vec![vec![6]], |g, p| {
            g.softmax(p[0], Some(&[true, false, true, true, false, true]))
        }),
        ("sigmoid", vec![vec![6]], |g, p| Ok(g.sigmoid(p[0]))),
        ("concat", vec![vec![2], vec![3]], |g, p| g.concat(&[p[0], p[1], p[0]])),
        ("slice", vec![vec![6]], |g, p| g.slice(p[0], 1, 3)),
        ("gather_rows", vec![vec![4, 3]], |g, p| g.gather_rows(p[0], &[2, 0, 2])),
        ("row", vec![vec![4, 3]], |g, p| g.row(p[0], 1)),
        ("stack", vec![vec![3], vec![3]], |g, p| g.stack(&[p[1], p[0], p[1]])),
        ("max_pool", vec![vec![5, 4]], |g, p| g.pool(p[0], PoolKind::Max)),
        ("mean_pool", vec![vec![5, 4]], |g, p| g.pool(p[0], PoolKind::Mean)),
        ("dropout", vec![vec![8]], |g, p| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            g.dropout(p[0], 0.4, Some(&mut rng))
        }),
        ("sum", vec![vec![5]], |g, p| Ok(g.sum(p[0]))),
        ("dot", vec![vec![5], vec![5]], |g, p| g.dot(p[0], p[1])),
        ("bce_with_logits", vec![vec![6]], |g, p| {
            g.bce_with_logits(p[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 0.5)
        }),
    ]
}

/// Central differences at eps 1e-5 carry roughly 1e-11 of truncation error,
/// so gradient components smaller than this are compared absolutely.
const OP_FLOOR: f64 = 1e-4;

fn op_checks(report: &mut VerifyReport, seed: u64) -> Result<()> {
    for (i, (name, shapes, build)) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let mut store = ParamStore::<f64>::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| store.add(&format!("p{j}"), ParamGroup::Other, random_tensor(&mut rng, s)))
            .collect::<Result<Vec<_>>>()?;
        let cfg = GradCheckConfig { floor: OP_FLOOR, ..GradCheckConfig::default() };
        let r = grad_check(&mut store, &cfg, |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let out = build(g, &vars)?;
            probe(g, out)
        })?;
        report.push("ops", name, r.max_rel_error, OP_TOLERANCE, r.worst_param.unwrap_or_default());
    }
    Ok(())
}

/// Bounds for [`random_instance`].
#[derive(Debug, Clone)]
pub struct InstanceConfig {
    pub max_sentences: usize,
    pub max_entities: usize,
    pub max_mentions: usize,
    pub d: usize,
    pub base_dim: usize,
    pub num_relations: usize,
    /// Every entity has one mention and the document one sentence.
    pub sentence_level: bool,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        InstanceConfig {
            max_sentences: 4,
            max_entities: 4,
            max_mentions: 3,
            d: 6,
            base_dim: 12,
            num_relations: 3,
            sentence_level: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub doc: Document,
    pub kg: KgStore,
    pub descriptions: DescriptionStore,
    pub embedder: Embedder,
    pub num_relations: usize,
    pub d: usize,
}

impl Instance {
    pub fn prepare(&self, mode: &ModeConfig) -> Result<PreparedDoc> {
        prepare(&self.doc, &self.kg, &self.descriptions, mode, self.num_relations)
    }

    /// A freshly initialized f64 model for `mode`.
    pub fn model(&self, mode: &ModeConfig, seed: u64) -> Result<(ParamStore<f64>, Miuk)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Miuk::register(&mut store, self.embedder.clone(), self.d, self.num_relations, mode, &mut rng)?;
        Ok((store, model))
    }
}

const TYPES: [&str; 4] = ["PER", "LOC", "ORG", "MISC"];

/// A small random document with its own KG and description store.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, cfg: &InstanceConfig) -> Instance {
    let num_sents = if cfg.sentence_level { 1 } else { rng.gen_range(1..=cfg.max_sentences) };
    let mut sentences: Vec<Vec<String>> = (0..num_sents)
        .map(|_| (0..rng.gen_range(3..=10)).map(|_| format!("w{}", rng.gen_range(0..40))).collect())
        .collect();
    let p = rng.gen_range(2..=cfg.max_entities.max(2));
    let mut entities = Vec::with_capacity(p);
    for i in 0..p {
        let n = if cfg.sentence_level { 1 } else { rng.gen_range(1..=cfg.max_mentions) };
        let mut mentions: Vec<Mention> = (0..n)
            .map(|_| {
                let s = rng.gen_range(0..num_sents);
                let len = sentences[s].len();
                let start = rng.gen_range(0..len);
                let end = (start + rng.gen_range(1..=2)).min(len);
                Mention { sent_idx: s, start, end }
            })
            .collect();
        mentions.sort_by_key(|m| (m.sent_idx, m.start, m.end));
        for m in &mentions {
            sentences[m.sent_idx][m.start] = format!("ent{i}");
        }
        entities.push(EntityCluster {
            entity_index: i,
            name: format!("ent{i}"),
            entity_type: TYPES[rng.gen_range(0..TYPES.len())].to_string(),
            mentions,
        });
    }
    let mut labels = Vec::new();
    for h in 0..p {
        for t in 0..p {
            if h != t && rng.gen_bool(0.3) {
                let rels = (0..cfg.num_relations).filter(|_| rng.gen_bool(0.5)).collect();
                labels.push(RelationLabel { head: h, tail: t, relations: rels });
            }
        }
    }
    labels.retain(|l| !l.relations.is_empty());

    let mut triples = Vec::new();
    let mut descriptions = DescriptionStore::new();
    for i in 0..p {
        let amount = rng.gen_range(0..=5);
        for c in rand::seq::index::sample(rng, 8, amount) {
            triples.push(UncertainTriple {
                entity: format!("ent{i}"),
                concept: format!("con{c}"),
                count: rng.gen_range(1..100),
            });
        }
        if rng.gen_bool(0.7) {
            let text: Vec<String> = (0..rng.gen_range(1..6)).map(|_| format!("w{}", rng.gen_range(0..40))).collect();
            descriptions.insert(&format!("ent{i}"), &text.join(" "));
        }
    }
    for c in 0..8 {
        if rng.gen_bool(0.8) {
            let text: Vec<String> = (0..rng.gen_range(1..6)).map(|_| format!("x{}", rng.gen_range(0..40))).collect();
            descriptions.insert(&format!("con{c}"), &text.join(" "));
        }
    }
    Instance {
        doc: Document {
            doc_id: "random".into(),
            sentences,
            entities,
            labels,
        },
        kg: KgStore::from_triples(triples),
        descriptions,
        embedder: Embedder::hash(rng.gen(), cfg.base_dim),
        num_relations: cfg.num_relations,
        d: cfg.d,
    }
}

fn model_modes() -> Vec<(&'static str, ModeConfig, bool)> {
    let base = ModeConfig::default();
    let mut out = vec![("pwi", base.clone(), false)];
    for name in ["nwi", "awi", "no-crossview", "no-mixedatt", "no-entity-desp", "no-concept-desp"] {
        out.push((name, base.ablation(name).expect("known ablation"), false));
    }
    let normalized = ModeConfig {
        normalize_mixed_weights: true,
        ..base.clone()
    };
    out.push(("normalized-mixed", normalized, false));
    let two_view = ModeConfig {
        views: Views::TwoView,
        ..base
    };
    out.push(("two-view", two_view, true));
    out
}

/// The model loss is averaged over pairs and relations, so its gradients run
/// about two orders of magnitude below the per-op probes.
const MODEL_FLOOR: f64 = 1e-6;

/// Full forward plus BCE against finite differences, per mode.
pub(crate) fn model_checks(report: &mut VerifyReport, seed: u64) -> Result<()> {
    for (i, (name, mode, sentence_level)) in model_modes().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + i as u64));
        let inst = random_instance(
            &mut rng,
            &InstanceConfig {
                sentence_level,
                ..InstanceConfig::default()
            },
        );
        let prep = inst.prepare(&mode)?;
        let (mut store, model) = inst.model(&mode, seed)?;
        let weight = 1.0 / (prep.num_pairs() * inst.num_relations) as f64;
        let cfg = GradCheckConfig { floor: MODEL_FLOOR, ..GradCheckConfig::default() };
        let r = grad_check(&mut store, &cfg, |g| {
            let nodes = model.forward_doc::<f64, ChaCha8Rng>(g, &prep, &mode, None)?;
            Ok(model.doc_loss(g, &prep, &nodes, weight)?.expect("instance has pairs"))
        })?;
        let mut groups = String::new();
        for c in &r.params {
            groups.push_str(&format!("{}={:.1e} ", c.name, c.max_rel_error));
            if c.kinks > 0 {
                groups.push_str(&format!("({} at kinks skipped) ", c.kinks));
            }
        }
        report.push("model", format!("grad_check[{name}]"), r.max_rel_error, MODEL_TOLERANCE, groups.trim_end());
    }
    Ok(())
}

/// Graph forward vs. the reference implementation on random instances,
/// under every concept-integration strategy.
pub fn forward_oracle(report: &mut VerifyReport, instances: usize, seed: u64) -> Result<()> {
    let mut worst = (0.0f64, String::new());
    let mut compared = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
    for n in 0..instances {
        let inst = random_instance(&mut rng, &InstanceConfig::default());
        for integration in [Integration::Nwi, Integration::Awi, Integration::Pwi] {
            let mode = ModeConfig {
                integration,
                ..ModeConfig::default()
            };
            let prep = inst.prepare(&mode)?;
            let (store, model) = inst.model(&mode, seed.wrapping_add(n as u64))?;
            let got = model.trace_doc(&store, &prep, &mode)?;
            let want = reference_traces(&store, &inst.embedder, inst.num_relations, &prep, &mode)?;
            for (a, b) in got.iter().zip(&want) {
                let (err, field) = trace_difference(a, b);
                compared += 1;
                if err > worst.0 || err.is_nan() {
                    worst = (err, format!("instance {n} {integration:?} pair ({}, {}) field {field}", a.head, a.tail));
                }
            }
            if got.len() != want.len() {
                worst = (f64::INFINITY, format!("instance {n}: pair count mismatch"));
            }
        }
    }
    report.push(
        "oracle",
        format!("forward trace vs reference ({compared} pair traces)"),
        worst.0,
        ORACLE_TOLERANCE,
        worst.1,
    );
    Ok(())
}

fn sums_to(v: &[f64], target: f64) -> f64 {
    (v.iter().sum::<f64>() - target).abs()
}

#[derive(Default)]
struct Tally {
    worst: f64,
    detail: String,
}

impl Tally {
    fn see(&mut self, err: f64, what: impl FnOnce() -> String) {
        if err > self.worst || err.is_nan() {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
            self.detail = what();
        }
    }
}

/// Checks normalization and range contracts on `cases` random traces.
pub fn invariant_battery(report: &mut VerifyReport, cases: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(31));
    let mut attention = Tally::default();
    let mut gate = Tally::default();
    let mut mixed_on = Tally::default();
    let mut mixed_off = Tally::default();
    let mut pwi = Tally::default();
    let mut equal = Tally::default();
    for n in 0..cases {
        let inst = random_instance(&mut rng, &InstanceConfig::default());
        let mixed = n % 2 == 0;
        let integration = [Integration::Nwi, Integration::Awi, Integration::Pwi][n % 3];
        let mode = ModeConfig {
            integration,
            mixed_attention: mixed,
            ..ModeConfig::default()
        };
        let prep = inst.prepare(&mode)?;
        let (mut store, model) = inst.model(&mode, n as u64)?;
        // widen the initial scale so attention and gates are far from uniform
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).iter_mut().for_each(|x| *x *= 4.0);
        }
        let traces = model.trace_doc(&store, &prep, &mode)?;
        for tr in &traces {
            let tag = || format!("case {n} pair ({}, {})", tr.head, tr.tail);
            for v in [&tr.mention_attn_h, &tr.mention_attn_t, &tr.concept_attn_h, &tr.concept_attn_t, &tr.alpha, &tr.beta]
                .into_iter()
                .flatten()
            {
                attention.see(sums_to(v, 1.0), tag);
            }
            if let (Some(g), Some(u), Some(ul), Some(ug)) = (&tr.g, &tr.u, &tr.u_l, &tr.u_g) {
                for k in 0..g.len() {
                    let inside = g[k] > 0.0 && g[k] < 1.0;
                    let (lo, hi) = (ul[k].min(ug[k]), ul[k].max(ug[k]));
                    let slack = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
                    let between = u[k] >= lo - slack && u[k] <= hi + slack;
                    gate.see(if inside && between { 0.0 } else { 1.0 }, tag);
                }
            }
            if let Some(w) = &tr.sentence_weights {
                if mixed {
                    mixed_on.see(sums_to(w, 2.0), tag);
                } else {
                    mixed_off.see(sums_to(w, 1.0), tag);
                }
            }
            for (weights, ent) in [(&tr.concept_weights_h, tr.head), (&tr.concept_weights_t, tr.tail)] {
                let pads = &prep.entities[ent].is_pad;
                let real = pads.iter().filter(|p| !**p).count();
                let target = if real == 0 { 0.0 } else { 1.0 };
                let mut err = sums_to(weights, target);
                if weights.iter().zip(pads).any(|(&w, &p)| p && w != 0.0) {
                    err = f64::INFINITY;
                }
                pwi.see(err, tag);
            }
        }

        // identical concept vectors: all three strategies must agree
        let mut same = inst.clone();
        for c in 0..8 {
            same.descriptions.insert(&format!("con{c}"), "shared concept text");
        }
        let mut cs: Vec<Vec<PairTrace>> = Vec::new();
        for integration in [Integration::Nwi, Integration::Awi, Integration::Pwi] {
            let m = ModeConfig {
                integration,
                ..ModeConfig::default()
            };
            let prep = same.prepare(&m)?;
            cs.push(model.trace_doc(&store, &prep, &m)?);
        }
        for ((a, b), c) in cs[0].iter().zip(&cs[1]).zip(&cs[2]) {
            let err = a
                .c_h
                .iter()
                .zip(&b.c_h)
                .zip(&c.c_h)
                .map(|((x, y), z)| (x - y).abs().max((x - z).abs()))
                .fold(0.0, f64::max);
            equal.see(err, || format!("case {n} entity {}", a.head));
        }
    }
    let lines = [
        ("attention weights sum to 1", attention, NORMALIZATION_TOLERANCE),
        ("gate in (0,1) and u between u_l and u_g", gate, 0.5),
        ("mixed weights sum to 2 (gamma on)", mixed_on, NORMALIZATION_TOLERANCE),
        ("mixed weights sum to 1 (gamma off)", mixed_off, NORMALIZATION_TOLERANCE),
        ("prior weights sum to 1, pads exactly 0", pwi, NORMALIZATION_TOLERANCE),
        ("NWI == AWI == PWI for equal concept vectors", equal, NORMALIZATION_TOLERANCE),
    ];
    for (name, tally, limit) in lines {
        report.push("invariants", format!("{name} ({cases} cases)"), tally.worst, limit, tally.detail);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes() {
        let mut r = VerifyReport::default();
        op_checks(&mut r, 0).unwrap();
        for l in &r.lines {
            assert!(l.passed, "{l:?}");
        }
    }

    #[test]
    fn oracle_agrees_on_a_few_instances() {
        let mut r = VerifyReport::default();
        forward_oracle(&mut r, 10, 3).unwrap();
        assert!(r.passed(), "{:?}", r.lines);
    }

    #[test]
    fn invariants_hold_on_a_few_cases() {
        let mut r = VerifyReport::default();
        invariant_battery(&mut r, 30, 5).unwrap();
        assert!(r.passed(), "{:?}", r.lines);
    }
}
