//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Upper bound on coordinates checked per tensor; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-6, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval_scalar<Fun>(f: &mut Fun, store: &ParamStore<f64>) -> Result<f64>
where
    Fun: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Evaluation(format!("function returned shape {:?}, expected a scalar", v.shape())));
    }
    let s = v.item();
    if !s.is_finite() {
        return Err(Error::Evaluation("function value is not finite".into()));
    }
    Ok(s)
}

/// Checks the gradient of `f` with respect to every trainable parameter of
/// `store`. `f` must be deterministic; it is evaluated in an
/// evaluation-mode graph (dropout off).
pub fn check_params<Fun>(store: &mut ParamStore<f64>, mut f: Fun, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    Fun: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::Evaluation("function value is not finite".into()));
    }
    let grads = g.backward(out)?;
    store.zero_grads();
    store.accumulate(&g, &grads)?;
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|p| p.grad.clone().unwrap_or_else(|| vec![0.0; p.value.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    for pi in 0..store.len() {
        let id = ParamId(pi);
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).value.numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + cfg.step;
            let plus = eval_scalar(&mut f, store);
            store.get_mut(id).value.data_mut()[c] = orig - cfg.step;
            let minus = eval_scalar(&mut f, store);
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.step);
            let err = relative_error(analytic[pi][c], numeric);
            report.coords_checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), c));
            }
        }
    }
    store.zero_grads();
    Ok(report)
}

/// Checks the gradient of `f` with respect to each tensor in `inputs`;
/// returns the maximum relative error over all coordinates.
pub fn grad_check<Fun>(mut f: Fun, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    Fun: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(&format!("input.{i}"), t.clone()))
        .collect::<Result<_>>()?;
    let cfg = GradCheckConfig { step, ..Default::default() };
    let report = check_params(
        &mut store,
        |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            f(g, &vars)
        },
        &cfg,
    )?;
    Ok(report.max_rel_error)
}
