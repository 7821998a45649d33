//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor (all of them when smaller).
    pub coords_per_param: usize,
    pub seed: u64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            coords_per_param: 8,
            seed: 0,
            floor: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub checked: usize,
    /// Coordinates whose difference quotients disagree across step sizes,
    /// i.e. the stencil straddles a kink (ReLU at zero); they are not scored.
    pub skipped_kinks: usize,
    /// Coordinates where both gradients are below the stencil's rounding
    /// noise; the relative error carries no information there.
    pub below_noise: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` (one buffer per parameter, in store order) against
/// fourth-order central differences of `loss` on sampled coordinates.
///
/// The closure is evaluated twice at the unperturbed point first; differing
/// results mean it is non-deterministic and the check is refused.
pub fn grad_check<F>(
    mut loss: F,
    analytic: &[Vec<f64>],
    params: &mut ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::invalid("one analytic gradient per parameter expected"));
    }
    let base = loss(params)?;
    let again = loss(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "loss closure returned {base:e} then {again:e} on identical parameters"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        below_noise: 0,
    };
    // A few ulps of the loss, amplified by the stencil's 1/(12h) and weights.
    let noise = 64.0 * f64::EPSILON * base.abs().max(1.0) / opts.step;
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).numel();
        if analytic[id.index()].len() != n {
            return Err(Error::shape("grad_check", "analytic gradient length mismatch"));
        }
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let coarse = difference_quotient(&mut loss, params, id, idx, opts.step)?;
            let fine = difference_quotient(&mut loss, params, id, idx, opts.step * 0.5)?;
            let spread = (coarse - fine).abs();
            if spread > 1e-9 && spread > 1e-3 * coarse.abs().max(fine.abs()) {
                report.skipped_kinks += 1;
                continue;
            }
            let a = analytic[id.index()][idx];
            if a.abs() <= noise && coarse.abs() <= noise {
                report.below_noise += 1;
                continue;
            }
            let rel = relative_error(a, coarse, opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if report.worst.as_ref().map_or(true, |w| rel >= w.rel_error) {
                    report.worst = Some(CoordinateCheck {
                        param: params.name(id).to_string(),
                        index: idx,
                        analytic: a,
                        numeric: coarse,
                        rel_error: rel,
                    });
                }
            }
        }
    }
    Ok(report)
}

fn difference_quotient<F>(
    loss: &mut F,
    params: &mut ParamStore,
    id: ParamId,
    idx: usize,
    h: f64,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let orig = params.get(id).data()[idx];
    let mut at = |offset: f64, params: &mut ParamStore| -> Result<f64> {
        params.get_mut(id).data_mut()[idx] = orig + offset;
        let v = loss(params);
        params.get_mut(id).data_mut()[idx] = orig;
        v
    };
    let f_p2 = at(2.0 * h, params)?;
    let f_p1 = at(h, params)?;
    let f_m1 = at(-h, params)?;
    let f_m2 = at(-2.0 * h, params)?;
    Ok((8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (12.0 * h))
}

/// Runs `build` once with gradients to obtain analytic adjoints, then checks
/// them against finite differences of the same forward computation.
pub fn check_graph<F>(params: &mut ParamStore, build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let loss = build(&mut g, &bound)?;
        let mut grads = g.backward(loss)?;
        params.collect_grads(&mut grads, &bound)
    };
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let loss = build(&mut g, &bound)?;
        Ok(g.value(loss)[0])
    };
    grad_check(eval, &analytic, params, opts)
}
