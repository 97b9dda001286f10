//! Central finite-difference verification of analytic gradients.

use crate::error::NumericError;
use crate::graph::{Graph, Var};
use crate::par;
use crate::tensor::{Bound, ParamStore};

/// Denominator floor for the relative error, per unit of objective magnitude,
/// so that near-zero gradients are judged on an absolute scale.
pub const SCALE_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Check at most this many evenly strided elements per tensor.
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            max_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn entry(&self, name: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_at(analytic, numeric, 1.0)
}

/// Relative error with the floor scaled by `max(1, |f|)`: the difference
/// quotient carries roundoff of order `|f| * f64::EPSILON / eps`, so a fixed
/// floor would fail zero gradients of large objectives on noise alone.
pub fn relative_error_at(analytic: f64, numeric: f64, objective: f64) -> f64 {
    let floor = SCALE_FLOOR * objective.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64, NumericError>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, NumericError>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let out = f(&mut g, &bound).map_err(|e| NumericError::Evaluation(e.to_string()))?;
    if g.value(out).len() != 1 {
        return Err(NumericError::Evaluation(format!("objective has shape {:?}", g.shape(out))));
    }
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(NumericError::Evaluation(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the analytic gradient of the scalar objective `f` against
/// `(f(p+eps) - f(p-eps)) / 2eps` for every trainable tensor in `store`.
/// Frozen tensors are skipped and do not appear in the report.
pub fn finite_diff_check<F>(store: &ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport, NumericError>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, NumericError> + Sync + Send,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(NumericError::Evaluation(format!("eps {} outside [1e-7, 1e-3]", opts.eps)));
    }
    let mut analytic = store.clone();
    analytic.zero_grad();
    let f0 = {
        let mut g = Graph::new();
        let bound = analytic.bind(&mut g);
        let out = f(&mut g, &bound).map_err(|e| NumericError::Evaluation(e.to_string()))?;
        if !g.scalar(out).is_finite() {
            return Err(NumericError::Evaluation("objective is not finite".into()));
        }
        g.backward(out)?;
        analytic.accumulate_grads(&g, &bound);
        g.scalar(out)
    };

    let mut entries = Vec::new();
    for id in store.ids() {
        let t = store.get(id);
        let Some(grad) = analytic.get(id).grad() else { continue };
        let n = t.len();
        let stride = match opts.max_per_tensor {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let idx: Vec<usize> = (0..n).step_by(stride).collect();
        let numeric = par::map_range(idx.len(), |k| -> Result<f64, NumericError> {
            let i = idx[k];
            let mut plus = store.clone();
            plus.get_mut(id).values_mut()[i] += opts.eps;
            let mut minus = store.clone();
            minus.get_mut(id).values_mut()[i] -= opts.eps;
            Ok((evaluate(&plus, &f)? - evaluate(&minus, &f)?) / (2.0 * opts.eps))
        });
        let mut entry = GradCheckEntry {
            name: store.name(id).to_string(),
            checked: idx.len(),
            max_abs_error: 0.0,
            max_rel_error: 0.0,
        };
        for (k, num) in numeric.into_iter().enumerate() {
            let num = num?;
            let a = grad[idx[k]];
            entry.max_abs_error = entry.max_abs_error.max((a - num).abs());
            entry.max_rel_error = entry.max_rel_error.max(relative_error_at(a, num, f0));
        }
        entries.push(entry);
    }
    Ok(GradCheckReport {
        entries,
        tolerance: opts.tolerance,
    })
}
