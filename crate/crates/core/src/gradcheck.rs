//! Central finite-difference checks of tape gradients.

use crate::autodiff::{Routing, Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over differentiable coordinates.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because the one-sided slopes disagree, i.e. a ReLU
    /// or max-pool switch lies inside the stencil.
    pub kinks: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            kinks: self.kinks + other.kinks,
        }
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, for every coordinate of every parameter in `store`.
pub fn check<F>(store: &ParamStore, f: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let root = f(&mut tape)?;
        tape.value(root).item()
    };
    let grads = {
        let mut tape = Tape::new(store);
        let root = f(&mut tape)?;
        tape.backward(root, &Routing::all())?
    };
    let f0 = eval(store)?;
    let mut report = GradCheck::default();
    let mut probe = store.clone();
    for (id, param) in store.iter() {
        let analytic = grads.get_or_zeros(id, store);
        for k in 0..param.value.len() {
            let orig = param.value.data()[k];
            probe.get_mut(id).value.data_mut()[k] = orig + h;
            let fp = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig - h;
            let fm = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
            if (fwd - bwd).abs() > 1e-2 * numeric.abs().max(1.0) {
                report.kinks += 1;
                continue;
            }
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel_error(analytic.data()[k], numeric));
        }
    }
    Ok(report)
}
