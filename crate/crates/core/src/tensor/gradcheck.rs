use super::{BoundParams, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Relative-error tolerance away from non-differentiable points.
pub const SMOOTH_TOLERANCE: f64 = 1e-4;
/// Relative-error tolerance for coordinates whose stencil comes within
/// `10·h` of an `abs`/`relu` kink.
pub const KINK_TOLERANCE: f64 = 1e-2;
/// Denominator floor for the relative error. Central differences of an
/// O(10) objective carry ~1e-10 of rounding noise, which would otherwise
/// dominate coordinates whose true gradient is exactly zero (dead relu
/// units).
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |g_ad − g_fd| / max(|g_fd|, |g_ad|, GRAD_FLOOR)
    pub max_rel_error: f64,
    pub max_smooth_error: f64,
    pub max_kink_error: f64,
    pub worst: Option<(String, usize)>,
    /// Reverse-mode and central-difference values at `worst`.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
    pub kink_coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_smooth_error < SMOOTH_TOLERANCE && self.max_kink_error < KINK_TOLERANCE
    }
}

fn evaluate<F>(f: &F, params: &ParamStore) -> Result<(f64, f64)>
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let out = f(&tape, &bound)?;
    Ok((out.item(), tape.kink_margin()))
}

/// Compares reverse-mode gradients of `f` with central differences of step
/// `h` on every parameter coordinate.
///
/// `f` must be a deterministic function of the parameters: any sampling
/// noise it uses has to be fixed outside. Two evaluations at the same point
/// that disagree are reported as a contract error.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape)?;
    let out = f(&tape, &bound)?;
    let base = out.item();
    let base_margin = tape.kink_margin();
    let grads = tape.backward(out)?;
    let (again, _) = evaluate(&f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic: {base} then {again} at identical parameters"
        )));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_smooth_error: 0.0,
        max_kink_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
        kink_coordinates: 0,
    };
    let mut probe = params.clone();
    for (name, g_ad) in grads.params() {
        let original = params.get(name).expect("bound parameter").clone();
        for i in 0..original.len() {
            let x = original.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = x + h;
            let (fp, mp) = evaluate(&f, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x - h;
            let (fm, mm) = evaluate(&f, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = x;

            let fd = (fp - fm) / (2.0 * h);
            let ad = g_ad.data()[i];
            let rel = (ad - fd).abs() / fd.abs().max(ad.abs()).max(GRAD_FLOOR);
            let near_kink = base_margin.min(mp).min(mm) < 10.0 * h;
            report.coordinates += 1;
            if near_kink {
                report.kink_coordinates += 1;
                report.max_kink_error = report.max_kink_error.max(rel);
            } else {
                report.max_smooth_error = report.max_smooth_error.max(rel);
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.worst_values = (ad, fd);
            }
        }
    }
    Ok(report)
}
