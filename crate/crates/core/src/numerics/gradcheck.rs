//! Central finite-difference verification of analytic gradients.

use super::params::ParamStore;
use super::{RngStream, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter tensor.
    pub max_coords: usize,
    /// Relative error at which a coordinate is inspected for a kink.
    pub kink_threshold: f64,
    /// Replacement draws allowed per skipped kink coordinate.
    pub retries: usize,
    pub seed: u64,
    /// Further steps tried when a coordinate disagrees at `eps`; the best
    /// agreement counts. Tiny gradients of an O(1) loss need a larger step
    /// to rise above cancellation, a wrong gradient disagrees at every step.
    pub retry_eps: &'static [f64],
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords: 64,
            kink_threshold: 1e-3,
            retries: 4,
            seed: 0x6752_6164,
            retry_eps: &[1e-3, 1e-4, 1e-6],
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub kinks_skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Whether a loss evaluation must also fill parameter gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Want {
    LossOnly,
    LossAndGrad,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences on up to
/// `max_coords` sampled coordinates of every parameter.
///
/// `loss_fn` must be deterministic (reseed any dropout stream inside it) and,
/// when asked for gradients, must leave them in each parameter's `grad`.
/// A disagreeing coordinate is retried at each of `retry_eps`; if it still
/// disagrees and its one-sided differences differ (a ReLU or argmax kink
/// crossed by the perturbation) it is skipped and replaced by a fresh draw.
pub fn grad_check<F>(params: &mut ParamStore<f64>, mut loss_fn: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>, Want) -> Result<f64>,
{
    params.zero_grad();
    let base = loss_fn(params, Want::LossAndGrad)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            what: "loss during gradient check".into(),
        });
    }
    let analytic: Vec<(String, Tensor<f64>)> = params.iter().map(|p| (p.name.clone(), p.grad.clone())).collect();
    let mut rng = RngStream::new(opts.seed);
    let mut report = GradCheckReport::default();

    for (name, grad) in &analytic {
        let n = grad.len();
        let mut coords: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut coords);
        let wanted = opts.max_coords.min(n);
        let mut budget = wanted + opts.retries * wanted;
        let mut done = 0;
        let mut pool = coords.into_iter();
        while done < wanted && budget > 0 {
            let Some(i) = pool.next() else { break };
            budget -= 1;
            let orig = params.value(name)?.data()[i];
            let mut eval_at = |v: f64, params: &mut ParamStore<f64>| -> Result<f64> {
                params.get_mut(name).expect("parameter vanished").value.data_mut()[i] = v;
                let l = loss_fn(params, Want::LossOnly)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("loss while perturbing `{name}`[{i}]"),
                    });
                }
                Ok(l)
            };
            let plus = eval_at(orig + opts.eps, params)?;
            let minus = eval_at(orig - opts.eps, params)?;
            params.get_mut(name).expect("parameter vanished").value.data_mut()[i] = orig;
            let central = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[i];
            let mut err = relative_error(a, central);
            if err > opts.kink_threshold {
                for &h in opts.retry_eps {
                    let plus = eval_at(orig + h, params)?;
                    let minus = eval_at(orig - h, params)?;
                    err = err.min(relative_error(a, (plus - minus) / (2.0 * h)));
                }
                params.get_mut(name).expect("parameter vanished").value.data_mut()[i] = orig;
            }
            if err > opts.kink_threshold {
                let forward = (plus - base) / opts.eps;
                let backward = (base - minus) / opts.eps;
                let asym = (forward - backward).abs();
                if asym > opts.kink_threshold * forward.abs().max(backward.abs()).max(1e-8) {
                    report.kinks_skipped += 1;
                    continue;
                }
            }
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
            report.checked += 1;
            done += 1;
        }
    }
    Ok(report)
}
