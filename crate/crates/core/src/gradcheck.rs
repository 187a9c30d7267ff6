//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter tensor; `None` checks every one.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
    /// Added to the first analytic coordinate; lets callers confirm a broken
    /// gradient is caught.
    pub perturb_analytic: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: None,
            seed: 0,
            perturb_analytic: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamError {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst coordinate of each parameter tensor, in store order.
    pub worst: Vec<ParamError>,
}

impl GradCheckReport {
    /// Parameter tensors sorted by decreasing worst error.
    pub fn offenders(&self) -> Vec<&ParamError> {
        let mut v: Vec<_> = self.worst.iter().collect();
        v.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        v
    }
}

fn eval<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` records a scalar loss on the given tape from the given parameters.
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn gradient_check<F>(mut f: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(Error::Config("finite-difference step must be > 0".into()));
    }
    let first = eval(&mut f, params)?;
    let second = eval(&mut f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut analytic_store = params.clone();
    analytic_store.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = f(&analytic_store, &mut tape)?;
        tape.backward(loss, &mut analytic_store)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut worst = Vec::new();
    let mut checked = 0;
    let mut max_rel_error: f64 = 0.0;
    let mut first_coord = true;

    for id in params.ids() {
        let n = params.get(id).len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let grad = analytic_store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; n]);
        let mut param_worst: Option<ParamError> = None;
        for idx in coords {
            let mut analytic = grad[idx];
            if first_coord {
                if let Some(p) = opts.perturb_analytic {
                    analytic += p;
                }
                first_coord = false;
            }
            let orig = probe.get(id).data()[idx];
            probe.get_mut(id).data_mut()[idx] = orig + opts.step;
            let plus = eval(&mut f, &probe)?;
            probe.get_mut(id).data_mut()[idx] = orig - opts.step;
            let minus = eval(&mut f, &probe)?;
            probe.get_mut(id).data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let rel_error = (analytic - numeric).abs() / analytic.abs().max(1.0);
            checked += 1;
            max_rel_error = max_rel_error.max(rel_error);
            if param_worst.as_ref().is_none_or(|w| rel_error > w.rel_error) {
                param_worst = Some(ParamError {
                    name: params.name(id).to_string(),
                    index: idx,
                    analytic,
                    numeric,
                    rel_error,
                });
            }
        }
        worst.extend(param_worst);
    }

    Ok(GradCheckReport {
        max_rel_error,
        checked,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::cell::Cell;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::new(vec![1], vec![3.0]).unwrap());
        let report = gradient_check(
            |s, tape| {
                let p = tape.param(s, id);
                let sq = tape.mul(p, p)?;
                Ok(tape.sum(sq))
            },
            &store,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn two_logit_cross_entropy() {
        let mut store = ParamStore::new();
        let id = store.insert("logits", Tensor::new(vec![1, 2], vec![0.3, -1.1]).unwrap());
        let loss_fn = |s: &ParamStore, tape: &mut Tape| {
            let l = tape.param(s, id);
            let p = tape.softmax_rows(l)?;
            tape.bce(p, &[1.0])
        };
        let report = gradient_check(loss_fn, &store, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error <= 1e-6, "{}", report.max_rel_error);

        // closed form: d/dz (-log softmax_1) = softmax - onehot
        let mut tape = Tape::new();
        let loss = loss_fn(&store, &mut tape).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let g = store.get(id).grad.clone().unwrap();
        let (e0, e1) = (0.3f64.exp(), (-1.1f64).exp());
        let p1 = e1 / (e0 + e1);
        assert!((g[0] - (1.0 - p1)).abs() < 1e-12);
        assert!((g[1] - (p1 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn nondeterministic_function_rejected() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::new(vec![1], vec![1.0]).unwrap());
        let counter = Cell::new(0.0);
        let err = gradient_check(
            |s, tape| {
                counter.set(counter.get() + 1.0);
                let p = tape.param(s, id);
                let c = tape.constant(Tensor::new(vec![1], vec![counter.get()]).unwrap());
                let y = tape.mul(p, c)?;
                Ok(tape.sum(y))
            },
            &store,
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn perturbation_is_detected() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let opts = GradCheckOptions {
            perturb_analytic: Some(0.5),
            ..Default::default()
        };
        let report = gradient_check(
            |s, tape| {
                let p = tape.param(s, id);
                let sq = tape.mul(p, p)?;
                Ok(tape.sum(sq))
            },
            &store,
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }
}
