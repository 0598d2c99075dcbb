use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensorcore::{Graph, ParamStore, Var};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Parameters with more elements than this are subsampled.
    pub sample_above: usize,
    pub sample_size: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            sample_above: 10_000,
            sample_size: 2_000,
            seed: 0,
            floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Elements skipped because the step crossed a max-pool switch.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub params: Vec<ParamCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(store: &ParamStore<f64>, build: &F) -> Result<(f64, Vec<usize>)>
where
    F: for<'g> Fn(&mut Graph<'g, f64>) -> Result<Var>,
{
    let mut graph = Graph::with_params(store);
    let loss = build(&mut graph)?;
    Ok((graph.scalar(loss), graph.selections()))
}

/// Compares backward gradients of `build`'s scalar output against central
/// finite differences, parameter element by parameter element.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    cfg: &GradCheckConfig,
    build: F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>) -> Result<Var>,
{
    let (analytic, selections) = {
        let mut graph = Graph::with_params(store);
        let loss = build(&mut graph)?;
        if !graph.scalar(loss).is_finite() {
            return Err(Error::Numeric("loss is not finite at the check point".into()));
        }
        let selections = graph.selections();
        (graph.backward(loss)?.into_params(), selections)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        params: Vec::new(),
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let n = store.value(id).len();
        let indices: Vec<usize> = if n > cfg.sample_above {
            let mut v = rand::seq::index::sample(&mut rng, n, cfg.sample_size.min(n)).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..n).collect()
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: indices.len(),
            kinks: 0,
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for idx in indices {
            let original = store.value(id)[idx];
            store.value_mut(id)[idx] = original + cfg.eps;
            let plus = evaluate(store, &build);
            store.value_mut(id)[idx] = original - cfg.eps;
            let minus = evaluate(store, &build);
            store.value_mut(id)[idx] = original;
            let ((plus, sel_plus), (minus, sel_minus)) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    param: name,
                    index: idx,
                });
            }
            if sel_plus != selections || sel_minus != selections {
                check.kinks += 1;
                check.checked -= 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.get(id).map_or(0.0, |g| g[idx]);
            if !a.is_finite() {
                return Err(Error::NonFinite {
                    param: name,
                    index: idx,
                });
            }
            let err = relative_error(a, numeric, cfg.floor);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = idx;
            }
        }
        if check.max_rel_error >= report.max_rel_error {
            report.max_rel_error = check.max_rel_error;
            report.worst_param = Some(name);
        }
        report.params.push(check);
    }
    Ok(report)
}
