//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is
//! independent of every backward rule it is used to verify.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Step used by the acceptance checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`. When both gradients
/// are below `1e-10` in norm the absolute difference is returned instead.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = libm::sqrt(
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>(),
    );
    let na = libm::sqrt(analytic.iter().map(|a| a * a).sum::<f64>());
    let nn = libm::sqrt(numeric.iter().map(|a| a * a).sum::<f64>());
    let scale = na.max(nn);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    /// One relative error per input.
    pub errors: Vec<f64>,
}

impl CheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare the analytic gradient of `f(inputs)` with central differences.
/// `f` receives one gradient-tracking leaf per input tensor and must return
/// a scalar.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| alloc::vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            col.push((plus - minus) / (2.0 * h));
        }
        numeric.push(col);
    }
    let errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect();
    Ok(CheckReport {
        analytic,
        numeric,
        errors,
    })
}

/// Same as [`check_inputs`] but with respect to every trainable parameter of
/// `store`. `f` builds the loss from bound parameters.
pub fn check_params<F>(store: &ParamStore, h: f64, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let out = f(&mut g, &b)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let out = f(&mut g, &b)?;
    let mut grads = g.backward(out)?;
    let collected = store.collect_grads(&b, &mut grads);

    let mut work = store.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        analytic.push(collected[id.index()].clone().unwrap_or_else(|| alloc::vec![0.0; n]));
        let mut col = Vec::with_capacity(n);
        for j in 0..n {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig;
            col.push((plus - minus) / (2.0 * h));
        }
        numeric.push(col);
    }
    let errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect();
    Ok(CheckReport {
        analytic,
        numeric,
        errors,
    })
}
