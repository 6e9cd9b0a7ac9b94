//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it shares no code
//! with the backward pass it checks.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation error `O(h²)`.
    TwoPoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, truncation error `O(h⁴)`.
    /// Needed near the `|z|^0.5` kink of power normalization, where the
    /// two-point error at `h = 1e-5` reaches ~1e-6 relative.
    FourPoint,
}

#[derive(Clone, Copy, Debug)]
pub struct FiniteDiff {
    pub step: f64,
    pub stencil: Stencil,
    /// Perturb at most this many evenly spaced entries per tensor.
    pub per_tensor: Option<usize>,
}

impl Default for FiniteDiff {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            stencil: Stencil::TwoPoint,
            per_tensor: None,
        }
    }
}

impl FiniteDiff {
    pub fn four_point() -> Self {
        Self {
            stencil: Stencil::FourPoint,
            ..Self::default()
        }
    }

    pub fn sampled(self, per_tensor: usize) -> Self {
        Self {
            per_tensor: Some(per_tensor),
            ..self
        }
    }

    /// Derivative along one coordinate given `f(x + t)`.
    fn derivative(&self, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        let h = self.step;
        Ok(match self.stencil {
            Stencil::TwoPoint => (f(h)? - f(-h)?) / (2.0 * h),
            Stencil::FourPoint => {
                (-f(2.0 * h)? + 8.0 * f(h)? - 8.0 * f(-h)? + f(-2.0 * h)?) / (12.0 * h)
            }
        })
    }
}

/// Magnitudes below this are compared absolutely rather than relatively.
/// Central differences at step 1e-5 carry ~1e-11 of rounding noise, which
/// would dominate a relative comparison of gradients much smaller than this.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Where the largest error occurred, e.g. `mfb.u[17]`.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst = label();
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn numerical_gradient<T: Scalar>(f: impl Fn(&[T]) -> T, x: &[T], step: T) -> Vec<T> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (step + step)
        })
        .collect()
}

fn sample_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares backward gradients of a scalar-valued graph against central
/// differences on its leaf inputs.
pub fn check_inputs<T, F>(inputs: &[Tensor<T>], build: F, fd: FiniteDiff) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.input(t)).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.scalar(out))
    };
    let mut g = Graph::new();
    let tracked: Vec<Tensor<T>> = inputs
        .iter()
        .map(|t| t.clone().with_requires_grad(true))
        .collect();
    let ids: Vec<NodeId> = tracked.iter().map(|t| g.input(t)).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::new();
    let mut probe = tracked.clone();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id)?;
        for i in sample_indices(probe[k].numel(), fd.per_tensor) {
            let orig = probe[k].data()[i];
            let numeric = fd.derivative(|t| {
                probe[k].data_mut()[i] = orig + T::of(t);
                let v = eval(&probe);
                probe[k].data_mut()[i] = orig;
                Ok(v?.as_f64())
            })?;
            report.record(|| format!("input{k}[{i}]"), analytic[i].as_f64(), numeric);
        }
    }
    Ok(report)
}

/// Compares backward parameter gradients against central differences.
pub fn check_params<T, F>(store: &ParamStore<T>, build: F, fd: FiniteDiff) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<NodeId>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let out = build(&mut g)?;
        g.backward(out)?
    };
    let mut probe = store.clone();
    let eval = |s: &ParamStore<T>| -> Result<T> {
        let mut g = Graph::with_params(s);
        let out = build(&mut g)?;
        Ok(g.scalar(out))
    };
    let mut report = GradCheckReport::new();
    for id in store.ids() {
        let n = store.get(id).numel();
        let zeros = vec![T::zero(); n];
        let analytic = grads.param(id).unwrap_or(&zeros).to_vec();
        for i in sample_indices(n, fd.per_tensor) {
            let orig = probe.get(id).data()[i];
            let numeric = fd.derivative(|t| {
                probe.get_mut(id).data_mut()[i] = orig + T::of(t);
                let v = eval(&probe);
                probe.get_mut(id).data_mut()[i] = orig;
                Ok(v?.as_f64())
            })?;
            report.record(
                || format!("{}[{i}]", store.name(id)),
                analytic[i].as_f64(),
                numeric,
            );
        }
    }
    Ok(report)
}
