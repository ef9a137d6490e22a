//! Finite-difference gradient verification.

use crate::tensor::{ParamSet, Tape, TensorId};

/// Per-parameter outcome of a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    /// Worst relative error across all parameters (0 for an empty set).
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn assert_below(&self, tol: f64) {
        for e in &self.entries {
            assert!(
                e.max_rel_err < tol,
                "gradient of `{}` off by {:.3e} (tolerance {:.1e})",
                e.name,
                e.max_rel_err,
                tol
            );
        }
    }
}

/// Compare analytic gradients of a scalar loss against central finite
/// differences, element by element, for every parameter in `params`.
///
/// `build_loss` must be deterministic: it is re-evaluated many times at
/// perturbed parameter values, so any randomness has to be frozen by the
/// caller before the closure is built.
pub fn grad_check<F>(params: &mut ParamSet, step: f64, build_loss: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamSet) -> TensorId,
{
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = build_loss(&mut tape, params);
    tape.backward(loss, params);
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.tensor
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.tensor.numel()])
        })
        .collect();

    let eval = |params: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let loss = build_loss(&mut tape, params);
        tape.scalar_value(loss)
    };

    let mut entries = Vec::with_capacity(params.len());
    for idx in 0..params.len() {
        let numel = analytic[idx].len();
        let mut worst = 0.0f64;
        for e in 0..numel {
            let original = read_at(params, idx, e);
            write_at(params, idx, e, original + step);
            let f_plus = eval(params);
            write_at(params, idx, e, original - step);
            let f_minus = eval(params);
            write_at(params, idx, e, original);
            let numeric = (f_plus - f_minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[idx][e], numeric));
        }
        entries.push(GradCheckEntry {
            name: params.by_index(idx).name.clone(),
            max_rel_err: worst,
        });
    }
    GradCheckReport { entries }
}

/// Two gradients that are both numerically zero agree exactly; otherwise a
/// relative error with an absolute floor so finite-difference noise on tiny
/// gradients is not amplified into spurious failures.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < 1e-10 && numeric.abs() < 1e-10 {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn read_at(params: &ParamSet, idx: usize, elem: usize) -> f64 {
    params.by_index(idx).tensor.data()[elem]
}

fn write_at(params: &mut ParamSet, idx: usize, elem: usize, value: f64) {
    params.by_index_mut(idx).tensor.data_mut()[elem] = value;
}
