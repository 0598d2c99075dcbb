//! Straight-line f64 recomputation of the network, written without the
//! graph so the two implementations can check each other.

use crate::corpus::distance_index;
use crate::encoder::{description_tokens, mention_rows, Embedder, PROJ_BIAS, PROJ_WEIGHT};
use crate::error::{Error, Result};
use crate::model::{mixed_gamma, Integration, ModeConfig, PairTrace, PreparedDoc, Views, DIST_DIM};
use crate::tensorcore::ParamStore;

fn param<'a>(store: &'a ParamStore<f64>, name: &str) -> Result<&'a [f64]> {
    store
        .id(name)
        .map(|id| store.value(id))
        .ok_or_else(|| Error::Compatibility(format!("missing parameter `{name}`")))
}

fn softmax(x: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let on = |i: usize| mask.map_or(true, |m| m[i]);
    let max = (0..x.len()).filter(|&i| on(i)).map(|i| x[i]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..x.len()).map(|i| if on(i) { (x[i] - max).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn weighted_sum(w: &[f64], rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (wi, r) in w.iter().zip(rows) {
        for k in 0..d {
            out[k] += wi * r[k];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out[k] = Σ_i Σ_j x_i W[i,k,j] y_j + b_k`
fn bilinear(x: &[f64], w: &[f64], y: &[f64], b: &[f64]) -> Vec<f64> {
    let (p, q, d) = (x.len(), y.len(), b.len());
    (0..d)
        .map(|k| {
            let mut s = b[k];
            for i in 0..p {
                for j in 0..q {
                    s += x[i] * w[(i * d + k) * q + j] * y[j];
                }
            }
            s
        })
        .collect()
}

struct Projector<'a> {
    embedder: &'a Embedder,
    w: &'a [f64],
    b: &'a [f64],
    d: usize,
}

impl Projector<'_> {
    fn row(&self, token: &str) -> Result<Vec<f64>> {
        let x = self.embedder.vector(token)?;
        Ok((0..self.d)
            .map(|j| self.b[j] + x.iter().enumerate().map(|(k, xk)| xk * self.w[k * self.d + j]).sum::<f64>())
            .collect())
    }

    fn description(&self, text: &str) -> Result<Vec<f64>> {
        let mut out: Option<Vec<f64>> = None;
        for tok in description_tokens(text) {
            let r = self.row(tok)?;
            out = Some(match out {
                None => r,
                Some(m) => m.iter().zip(&r).map(|(a, b)| a.max(*b)).collect(),
            });
        }
        Ok(out.unwrap_or_else(|| vec![0.0; self.d]))
    }
}

/// Reference traces for every pair of `prep`, evaluation mode.
pub fn reference_traces(
    store: &ParamStore<f64>,
    embedder: &Embedder,
    num_relations: usize,
    prep: &PreparedDoc,
    mode: &ModeConfig,
) -> Result<Vec<PairTrace>> {
    let w = param(store, PROJ_WEIGHT)?;
    let b = param(store, PROJ_BIAS)?;
    let d = b.len();
    let proj = Projector { embedder, w, b, d };
    let rows: Vec<Vec<f64>> = prep.anchored.tokens.iter().map(|t| proj.row(t)).collect::<Result<_>>()?;
    let sentences: Vec<Vec<f64>> = prep
        .sentence_rows
        .iter()
        .map(|rs| (0..d).map(|k| rs.iter().map(|&r| rows[r][k]).fold(f64::NEG_INFINITY, f64::max)).collect())
        .collect();

    struct Ent {
        e_d: Vec<f64>,
        e_l: Vec<f64>,
        c: Vec<f64>,
        mention_attn: Option<Vec<f64>>,
        concept_attn: Option<Vec<f64>>,
    }
    let mut ents = Vec::new();
    for (ei, ent) in prep.entities.iter().enumerate() {
        let e_d = if mode.use_entity_desp { proj.description(&ent.description)? } else { vec![0.0; d] };
        let ms: Vec<Vec<f64>> = prep.anchored.mentions[ei]
            .iter()
            .map(|m| {
                let idx = mention_rows(m);
                (0..d).map(|k| idx.iter().map(|&r| rows[r][k]).sum::<f64>() / idx.len() as f64).collect()
            })
            .collect();
        let (e_l, mention_attn) = if mode.views == Views::TwoView {
            (ms[0].clone(), None)
        } else {
            let a = softmax(&ms.iter().map(|m| dot(&e_d, m)).collect::<Vec<_>>(), None);
            (weighted_sum(&a, &ms, d), Some(a))
        };
        let cs: Vec<Vec<f64>> = ent
            .concept_descriptions
            .iter()
            .zip(&ent.is_pad)
            .map(|(t, &pad)| if pad { Ok(vec![0.0; d]) } else { proj.description(t) })
            .collect::<Result<_>>()?;
        let real: Vec<bool> = ent.is_pad.iter().map(|p| !p).collect();
        let n_real = real.iter().filter(|&&r| r).count();
        let (c, concept_attn) = if n_real == 0 {
            (vec![0.0; d], None)
        } else {
            match mode.integration {
                Integration::Nwi => {
                    let w: Vec<f64> = real.iter().map(|&r| if r { 1.0 / n_real as f64 } else { 0.0 }).collect();
                    (weighted_sum(&w, &cs, d), None)
                }
                Integration::Awi => {
                    let a = softmax(&cs.iter().map(|c| dot(&e_l, c)).collect::<Vec<_>>(), Some(&real));
                    (weighted_sum(&a, &cs, d), Some(a))
                }
                Integration::Pwi => (weighted_sum(&ent.weights, &cs, d), None),
            }
        };
        ents.push(Ent {
            e_d,
            e_l,
            c,
            mention_attn,
            concept_attn,
        });
    }

    let zero = vec![0.0; d];
    let mut out = Vec::with_capacity(prep.pairs.len());
    for (pi, &(h, t)) in prep.pairs.iter().enumerate() {
        let (eh, et) = (&ents[h], &ents[t]);
        let hd = if mode.use_entity_desp { &eh.e_d } else { &zero };
        let td = if mode.use_entity_desp { &et.e_d } else { &zero };
        let ch = if mode.use_concept_desp { &eh.c } else { &zero };
        let ct = if mode.use_concept_desp { &et.c } else { &zero };
        let mut trace = PairTrace {
            doc_id: prep.doc_id.clone(),
            head: h,
            tail: t,
            e_l_h: eh.e_l.clone(),
            e_l_t: et.e_l.clone(),
            e_d_h: eh.e_d.clone(),
            e_d_t: et.e_d.clone(),
            c_h: eh.c.clone(),
            c_t: et.c.clone(),
            mention_attn_h: eh.mention_attn.clone(),
            mention_attn_t: et.mention_attn.clone(),
            concept_attn_h: eh.concept_attn.clone(),
            concept_attn_t: et.concept_attn.clone(),
            concept_weights_h: prep.entities[h].weights.clone(),
            concept_weights_t: prep.entities[t].weights.clone(),
            u_l: None,
            u_g: None,
            g: None,
            u: None,
            alpha: None,
            beta: None,
            gamma: None,
            sentence_weights: None,
            v: Vec::new(),
            logits: Vec::new(),
            scores: Vec::new(),
        };
        let l = num_relations;
        let (feat, cw, cb) = if mode.cross_view_inference {
            let table = param(store, "dist.table")?;
            let row = |i: usize| table[i * DIST_DIM..(i + 1) * DIST_DIM].to_vec();
            let x = [eh.e_l.clone(), row(distance_index(prep.distances[pi]))].concat();
            let y = [et.e_l.clone(), row(distance_index(-prep.distances[pi]))].concat();
            let u_l = bilinear(&x, param(store, "f_l.weight")?, &y, param(store, "f_l.bias")?);
            let x = [hd.clone(), ch.clone()].concat();
            let y = [td.clone(), ct.clone()].concat();
            let u_g = bilinear(&x, param(store, "f_g.weight")?, &y, param(store, "f_g.bias")?);
            let (gw, gb) = (param(store, "gate.weight")?, param(store, "gate.bias")?);
            let both = [u_l.clone(), u_g.clone()].concat();
            let gate: Vec<f64> = (0..d).map(|k| sigmoid(gb[k] + dot(&gw[k * 2 * d..(k + 1) * 2 * d], &both))).collect();
            let u: Vec<f64> = (0..d).map(|k| gate[k] * u_l[k] + (1.0 - gate[k]) * u_g[k]).collect();
            let alpha = softmax(&sentences.iter().map(|s| dot(&u_l, s)).collect::<Vec<_>>(), None);
            let beta = softmax(&sentences.iter().map(|s| dot(&u_g, s)).collect::<Vec<_>>(), None);
            let gamma = if mode.mixed_attention { Some(mixed_gamma(prep, h, t)?) } else { None };
            let scale = if mode.mixed_attention && mode.normalize_mixed_weights { 0.5 } else { 1.0 };
            let weights: Vec<f64> = (0..sentences.len())
                .map(|i| scale * ((alpha[i] + beta[i]) / 2.0 + gamma.as_ref().map_or(0.0, |g| g[i])))
                .collect();
            let v = weighted_sum(&weights, &sentences, d);
            let feat = [u.clone(), v.clone()].concat();
            trace.u_l = Some(u_l);
            trace.u_g = Some(u_g);
            trace.g = Some(gate);
            trace.u = Some(u);
            trace.alpha = Some(alpha);
            trace.beta = Some(beta);
            trace.gamma = gamma;
            trace.sentence_weights = Some(weights);
            trace.v = v;
            (feat, param(store, "cls.weight")?, param(store, "cls.bias")?)
        } else {
            let n = sentences.len() as f64;
            let v: Vec<f64> = (0..d).map(|k| sentences.iter().map(|s| s[k]).sum::<f64>() / n).collect();
            let feat = [eh.e_l.clone(), et.e_l.clone(), hd.clone(), td.clone(), ch.clone(), ct.clone(), v.clone()].concat();
            trace.v = v;
            (feat, param(store, "concat_cls.weight")?, param(store, "concat_cls.bias")?)
        };
        let width = feat.len();
        trace.logits = (0..l).map(|r| cb[r] + dot(&cw[r * width..(r + 1) * width], &feat)).collect();
        trace.scores = trace.logits.iter().map(|&z| sigmoid(z)).collect();
        out.push(trace);
    }
    Ok(out)
}

fn diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let e = (x - y).abs();
            if e.is_nan() {
                f64::INFINITY
            } else {
                e
            }
        })
        .fold(0.0, f64::max)
}

fn diff_opt(a: &Option<Vec<f64>>, b: &Option<Vec<f64>>) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) => diff(x, y),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

/// Largest absolute difference over all intermediates, with the field name.
pub fn trace_difference(a: &PairTrace, b: &PairTrace) -> (f64, &'static str) {
    if (a.head, a.tail) != (b.head, b.tail) {
        return (f64::INFINITY, "pair");
    }
    let fields = [
        ("e_l_h", diff(&a.e_l_h, &b.e_l_h)),
        ("e_l_t", diff(&a.e_l_t, &b.e_l_t)),
        ("e_d_h", diff(&a.e_d_h, &b.e_d_h)),
        ("e_d_t", diff(&a.e_d_t, &b.e_d_t)),
        ("c_h", diff(&a.c_h, &b.c_h)),
        ("c_t", diff(&a.c_t, &b.c_t)),
        ("mention_attn_h", diff_opt(&a.mention_attn_h, &b.mention_attn_h)),
        ("mention_attn_t", diff_opt(&a.mention_attn_t, &b.mention_attn_t)),
        ("concept_attn_h", diff_opt(&a.concept_attn_h, &b.concept_attn_h)),
        ("concept_attn_t", diff_opt(&a.concept_attn_t, &b.concept_attn_t)),
        ("u_l", diff_opt(&a.u_l, &b.u_l)),
        ("u_g", diff_opt(&a.u_g, &b.u_g)),
        ("g", diff_opt(&a.g, &b.g)),
        ("u", diff_opt(&a.u, &b.u)),
        ("alpha", diff_opt(&a.alpha, &b.alpha)),
        ("beta", diff_opt(&a.beta, &b.beta)),
        ("gamma", diff_opt(&a.gamma, &b.gamma)),
        ("sentence_weights", diff_opt(&a.sentence_weights, &b.sentence_weights)),
        ("v", diff(&a.v, &b.v)),
        ("logits", diff(&a.logits, &b.logits)),
        ("scores", diff(&a.scores, &b.scores)),
    ];
    fields
        .into_iter()
        .fold((0.0, "none"), |acc, (n, v)| if v > acc.0 { (v, n) } else { acc })
}
