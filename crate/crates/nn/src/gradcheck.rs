//! Finite-difference verification of analytic gradients along random
//! directions in parameter space.

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::params::{ParamId, ParamStore};
use crate::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per direction: `|a - n| / max(|a|, |n|, floor)`.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares `<grad, d>` against a central difference of `loss` along `d`
/// for `directions` random unit directions over the parameters `ids`.
///
/// `grads` must return the analytic gradient at the unperturbed store.
pub fn check_directions<L, G>(
    store: &ParamStore,
    ids: &[ParamId],
    loss: L,
    grads: G,
    directions: usize,
    step: f64,
    rng: &mut impl Rng,
) -> GradCheckReport
where
    L: Fn(&ParamStore) -> f64,
    G: Fn(&ParamStore) -> Vec<(ParamId, Tensor)>,
{
    let analytic_grads = grads(store);
    let lookup = |id: ParamId| analytic_grads.iter().find(|(g, _)| *g == id).map(|(_, t)| t);
    let mut report = GradCheckReport {
        rel_errors: Vec::with_capacity(directions),
        analytic: Vec::with_capacity(directions),
        numeric: Vec::with_capacity(directions),
    };
    let mut work = store.clone();
    for _ in 0..directions {
        let mut dirs: Vec<Tensor> = ids
            .iter()
            .map(|&id| ArrayD::from_shape_fn(store.get(id).raw_dim(), |_| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let norm = dirs.iter().map(|d| d.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        dirs.iter_mut().for_each(|d| *d /= norm);

        let analytic: f64 = ids
            .iter()
            .zip(&dirs)
            .map(|(&id, d)| lookup(id).map_or(0.0, |g| (g * d).sum()))
            .sum();

        let mut eval = |sign: f64| {
            for (&id, d) in ids.iter().zip(&dirs) {
                *work.get_mut(id) = store.get(id) + &(d * (sign * step));
            }
            loss(&work)
        };
        let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * step);
        for &id in ids {
            *work.get_mut(id) = store.get(id).clone();
        }
        let denom = analytic.abs().max(numeric.abs()).max(1e-10);
        report.rel_errors.push((analytic - numeric).abs() / denom);
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    report
}
