//! Central finite-difference checking of reverse-mode gradients.
//!
//! The numeric side only evaluates forward passes, so it shares nothing with
//! the backward implementations it checks.

use rand::seq::index::sample;
use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Finite-difference step used by the suite.
pub const FD_STEP: f64 = 1e-4;
/// Maximum admissible relative error.
pub const REL_TOL: f64 = 1e-3;
/// Denominator floor for the relative error.
pub const ABS_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Outcome of checking one loss function against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Coordinates whose probes crossed a non-differentiable point and were
    /// replaced by others.
    pub skipped: usize,
}

/// Compares the tape's gradient of `loss_fn` with respect to every tensor in
/// `inputs` against central differences with step `h`.
///
/// Up to `max_coords` coordinates per tensor are probed, visited in random
/// order. A coordinate whose `x ± h` evaluations change the tape's
/// [`Tape::kink_signature`] straddles a kink, where the two sides of the
/// difference follow different pieces; it is skipped and the next one is
/// taken instead.
pub fn check_gradients<R, F>(
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords: usize,
    rng: &mut R,
    loss_fn: F,
) -> Result<GradCheck>
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok((tape.scalar(loss), tape.kink_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let base = tape.kink_signature();
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[ti])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut taken = 0;
        for i in sample(rng, t.numel(), t.numel()) {
            if taken == max_coords {
                break;
            }
            let orig = t.data()[i];
            probe[ti].data_mut()[i] = orig + h;
            let (up, s_up) = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - h;
            let (down, s_down) = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            if s_up != base || s_down != base {
                skipped += 1;
                continue;
            }
            taken += 1;
            let numeric = (up - down) / (2.0 * h);
            if !numeric.is_finite() || !analytic[i].is_finite() {
                return Err(Error::NonFinite(format!("gradient of input {ti}, coordinate {i}")));
            }
            worst = worst.max(relative_error(analytic[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detects_a_correct_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let report = check_gradients(&[x], FD_STEP, 100, &mut rng, |tape, v| {
            let t = tape.tanh(v[0]);
            Ok(tape.sum(t))
        })
        .unwrap();
        assert_eq!(report.checked, 9);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn probes_across_a_kink_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // 5e-5 sits within one step of the relu kink; -0.5 and 0.5 do not.
        let x = Tensor::<f64>::new(&[1, 1, 1, 3], vec![5e-5, -0.5, 0.5]).unwrap();
        let report = check_gradients(&[x], FD_STEP, 100, &mut rng, |tape, v| {
            let r = tape.relu(v[0]);
            Ok(tape.sum(r))
        })
        .unwrap();
        assert_eq!((report.checked, report.skipped), (2, 1));
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2e-7, 1e-7) - 0.1).abs() < 1e-12);
        assert!((relative_error(1.0, 0.5) - 0.5).abs() < 1e-12);
    }
}
