//! Central finite differences for checking tape gradients.
//!
//! Only forward evaluations are used here, so these checks stay independent
//! of the reverse sweep they validate.

use rand::seq::index::sample;
use rand::Rng;

use super::{Result, Tape, Tensor, Var};

/// Step for central differences.
pub const EPSILON: f64 = 1e-5;

/// Denominator floor for [`relative_error`]; below this magnitude the
/// comparison degrades to an absolute one.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Outcome of one gradient comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProbeReport {
    pub checked: usize,
    /// Probes discarded because the perturbation crossed a ReLU kink.
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl ProbeReport {
    pub fn merge(&mut self, other: ProbeReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

/// Compares the tape gradient of a scalar function against central
/// differences.
///
/// `build` records the function on a fresh tape given one [`Var`] per input
/// and returns the scalar output. Each input is probed at every coordinate,
/// or at `max_probes` randomly drawn coordinates when it is larger. Probes
/// whose ±ε evaluations change any ReLU's sign pattern are skipped: the
/// function is not differentiable across the kink.
pub fn check_gradients<F, R>(inputs: &[Tensor], build: F, max_probes: usize, rng: &mut R) -> Result<ProbeReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |xs: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape.value(out).item()?, tape.relu_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone().with_grad(true))).collect();
    let out = build(&mut tape, &vars)?;
    let base_signature = tape.relu_signature();
    let grads = tape.backward(out)?;

    let mut report = ProbeReport::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).expect("input is differentiable");
        let coords: Vec<usize> = if input.numel() <= max_probes {
            (0..input.numel()).collect()
        } else {
            sample(rng, input.numel(), max_probes).into_vec()
        };
        for i in coords {
            let mut shifted = inputs.to_vec();
            let mut plus = input.clone();
            plus.data_mut()[i] += EPSILON;
            shifted[k] = plus;
            let (f_plus, sig_plus) = eval(&shifted)?;
            let mut minus = input.clone();
            minus.data_mut()[i] -= EPSILON;
            shifted[k] = minus;
            let (f_minus, sig_minus) = eval(&shifted)?;
            if sig_plus != base_signature || sig_minus != base_signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * EPSILON);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(report)
}
