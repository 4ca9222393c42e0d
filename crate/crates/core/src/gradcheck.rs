//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::{Result, WeakTrError};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Default tolerance on the relative error in 32-bit precision.
pub const DEFAULT_TOLERANCE: f64 = 1e-2;

const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst scalar and its two gradient estimates.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_loss<T, F>(store: &ParamStore<T>, loss_fn: &F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(WeakTrError::shape(format!(
            "gradient check needs a scalar loss, got {:?}",
            v.shape()
        )));
    }
    let v = v.item().as_f64();
    if !v.is_finite() {
        return Err(WeakTrError::Evaluation(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the analytic gradient of `loss_fn` for each parameter in `params`
/// against central differences with step `epsilon`. Parameter values are
/// restored on return; stored gradients are left untouched.
pub fn check_gradient<T, F>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    loss_fn: F,
    epsilon: T,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if epsilon <= T::zero() {
        return Err(WeakTrError::domain("gradient check: epsilon must be positive"));
    }
    eval_loss(store, &loss_fn)?;
    let analytic = analytic_gradients(store, params, &loss_fn)?;
    let numeric = numeric_gradients(store, params, &loss_fn, epsilon)?;
    let names: Vec<String> = params.iter().map(|&id| store.get(id).name.clone()).collect();
    Ok(compare(&names, &analytic, &numeric, tolerance))
}

/// Analytic gradient of `loss_fn` for each parameter in `params`, flattened.
/// Parameters the loss does not touch get zeros.
pub fn analytic_gradients<T, F>(
    store: &ParamStore<T>,
    params: &[ParamId],
    loss_fn: F,
) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let grads = g.backward(loss)?;
    Ok(params
        .iter()
        .map(|&id| match g.bound_param(id).and_then(|v| grads.wrt(&g, v)) {
            Some(t) => t.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; store.value(id).len()],
        })
        .collect())
}

/// Central-difference gradient of `loss_fn` for each parameter in `params`.
pub fn numeric_gradients<T, F>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    loss_fn: F,
    epsilon: T,
) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if epsilon <= T::zero() {
        return Err(WeakTrError::domain("gradient check: epsilon must be positive"));
    }
    let two_eps = 2.0 * epsilon.as_f64();
    let mut out = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.value(id).len();
        let mut fd = Vec::with_capacity(n);
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + epsilon;
            let plus = eval_loss(store, &loss_fn);
            store.get_mut(id).value.data_mut()[j] = orig - epsilon;
            let minus = eval_loss(store, &loss_fn);
            store.get_mut(id).value.data_mut()[j] = orig;
            fd.push((plus? - minus?) / two_eps);
        }
        out.push(fd);
    }
    Ok(out)
}

/// Scores precomputed analytic gradients against a numeric reference.
pub fn compare(
    names: &[String],
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
    tolerance: f64,
) -> GradCheckReport {
    let params: Vec<ParamCheck> = names
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(name, (a, f))| score(name.clone(), a, f))
        .collect();
    let passed = params.iter().all(|p| p.max_rel_error <= tolerance);
    GradCheckReport {
        params,
        tolerance,
        passed,
    }
}

fn score(name: String, analytic: &[f64], numeric: &[f64]) -> ParamCheck {
    let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
    let mut max_abs = 0.0f64;
    for (j, (&a, &f)) in analytic.iter().zip(numeric).enumerate() {
        let err = relative_error(a, f);
        max_abs = max_abs.max((a - f).abs());
        if err > worst.0 || j == 0 {
            worst = (err, j, a, f);
        }
    }
    ParamCheck {
        name,
        max_rel_error: worst.0,
        max_abs_error: max_abs,
        worst_index: worst.1,
        analytic: worst.2,
        numeric: worst.3,
    }
}

/// [`check_gradient`] over every parameter in the store.
pub fn check_all<T, F>(
    store: &mut ParamStore<T>,
    loss_fn: F,
    epsilon: T,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let ids: Vec<_> = store.ids().collect();
    check_gradient(store, &ids, loss_fn, epsilon, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::<f32>::new();
        let x = store.add("x", Tensor::from_f64(&[1], &[3.0]).unwrap());
        let report = check_all(
            &mut store,
            |g, s| {
                let v = g.param(s, x);
                let sq = g.mul(v, v)?;
                Ok(g.mean(sq))
            },
            1e-2,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!((report.params[0].analytic - 6.0).abs() < 1e-6);
        assert!((report.params[0].numeric - 6.0).abs() < 1e-2);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut store = ParamStore::<f32>::new();
        let x = store.add("x", Tensor::from_f64(&[1], &[0.0]).unwrap());
        let report = check_all(
            &mut store,
            |g, s| {
                let v = g.param(s, x);
                let y = g.sigmoid(v);
                Ok(g.mean(y))
            },
            1e-2,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(report.passed);
        assert!((report.params[0].analytic - 0.25).abs() < 1e-7);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        let x = store.add("x", Tensor::from_f64(&[1], &[0.0]).unwrap());
        let err = check_all(
            &mut store,
            |g, s| {
                let v = g.param(s, x);
                let inf = g.constant(Tensor::scalar(f32::INFINITY));
                let y = g.mul(v, inf)?;
                Ok(g.mean(y))
            },
            1e-2,
            DEFAULT_TOLERANCE,
        );
        assert!(matches!(err, Err(WeakTrError::Evaluation(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.01) - 0.01 / 1.01).abs() < 1e-12);
    }
}
