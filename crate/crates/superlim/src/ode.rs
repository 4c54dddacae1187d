//! Embedded Dormand-Prince 5(4) integrator with adaptive step control.
//!
//! Generic over the scalar so the same stepper drives the real cumulant flow
//! and its characteristic-function (complex) mode. Defaults follow the
//! crate-wide flow tolerances: relative 1e-10, absolute 1e-12.

use num_complex::Complex64;
use std::ops::{Add, Mul, Sub};
use thiserror::Error;

pub const DEFAULT_REL_TOL: f64 = 1e-10;
pub const DEFAULT_ABS_TOL: f64 = 1e-12;
/// Step-size floor relative to the integration span.
const MIN_STEP_FACTOR: f64 = 1e-13;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t}: required step {h} is below the stiffness floor")]
    StepUnderflow { t: f64, h: f64 },
}

/// Scalar admissible in the integrator state.
pub trait OdeScalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> + Send + Sync
{
    fn zero() -> Self;
    fn modulus(self) -> f64;
}

impl OdeScalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl OdeScalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
}

// Dormand-Prince tableau.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const C: [f64; 6] = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
// Difference between the 5th-order weights and the embedded 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rel_tol: DEFAULT_REL_TOL,
            abs_tol: DEFAULT_ABS_TOL,
        }
    }
}

/// Integrate `y' = field(t, y)` from `t0` through every checkpoint in
/// `outputs` (strictly increasing, all >= t0), returning the state at each.
pub fn integrate_checkpoints<S, F>(
    field: &F,
    t0: f64,
    y0: &[S],
    outputs: &[f64],
    opts: &OdeOptions,
) -> Result<Vec<Vec<S>>, OdeError>
where
    S: OdeScalar,
    F: Fn(f64, &[S], &mut [S]),
{
    let dim = y0.len();
    let mut results = Vec::with_capacity(outputs.len());
    let mut t = t0;
    let mut y = y0.to_vec();
    let span = outputs.last().copied().unwrap_or(t0) - t0;
    if span == 0.0 {
        for _ in outputs {
            results.push(y.clone());
        }
        return Ok(results);
    }
    let h_min = span.max(1.0) * MIN_STEP_FACTOR;

    let mut k = vec![vec![S::zero(); dim]; 7];
    let mut y_stage = vec![S::zero(); dim];
    let mut y_new = vec![S::zero(); dim];
    field(t, &y, &mut k[0]);

    // Initial step scaled to the local derivative so stiff transients start
    // gently.
    let y_norm = y.iter().map(|v| v.modulus()).fold(0.0, f64::max);
    let f_norm = k[0].iter().map(|v| v.modulus()).fold(0.0, f64::max);
    let mut h = (span / 100.0)
        .min(0.1)
        .min(0.05 * (y_norm + 1.0) / (f_norm + 1e-300))
        .max(h_min);

    for &t_out in outputs {
        debug_assert!(t_out >= t);
        while t < t_out {
            let clipped = t_out - t < h;
            let mut step = h.min(t_out - t);
            let mut rejected = false;
            loop {
                // Six derivative stages beyond the cached k[0].
                for stage in 0..6 {
                    for i in 0..dim {
                        let mut acc = y[i];
                        for (j, kj) in k.iter().enumerate().take(stage + 1) {
                            let a = A[stage][j];
                            if a != 0.0 {
                                acc = acc + kj[i] * (a * step);
                            }
                        }
                        y_stage[i] = acc;
                    }
                    let (_, tail) = k.split_at_mut(stage + 1);
                    field(t + C[stage] * step, &y_stage, &mut tail[0]);
                }
                // Stage 7 sits at the 5th-order solution, so its state is the
                // step result (FSAL) and its derivative seeds the next step.
                let mut err = 0.0_f64;
                for i in 0..dim {
                    let mut acc = y[i];
                    let mut e = S::zero();
                    for (j, kj) in k.iter().enumerate() {
                        if j < 6 && A[5][j] != 0.0 {
                            acc = acc + kj[i] * (A[5][j] * step);
                        }
                        if E[j] != 0.0 {
                            e = e + kj[i] * (E[j] * step);
                        }
                    }
                    y_new[i] = acc;
                    let scale = opts.abs_tol + opts.rel_tol * y[i].modulus().max(acc.modulus());
                    let contribution = e.modulus() / scale;
                    if !contribution.is_finite() || !acc.modulus().is_finite() {
                        err = f64::INFINITY;
                        break;
                    }
                    err = err.max(contribution);
                }
                if err <= 1.0 {
                    y.copy_from_slice(&y_new);
                    t += step;
                    k.swap(0, 6);
                    if !(clipped && !rejected) {
                        let grow = if err == 0.0 {
                            5.0
                        } else {
                            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                        };
                        h = (step * grow).max(h_min);
                    }
                    break;
                }
                rejected = true;
                step *= if err.is_finite() {
                    (0.9 * err.powf(-0.2)).clamp(0.1, 0.9)
                } else {
                    0.1
                };
                if step < h_min {
                    return Err(OdeError::StepUnderflow { t, h: step });
                }
            }
        }
        results.push(y.clone());
    }
    Ok(results)
}

/// Integrate to a single horizon.
pub fn integrate_to<S, F>(
    field: &F,
    t0: f64,
    y0: &[S],
    t1: f64,
    opts: &OdeOptions,
) -> Result<Vec<S>, OdeError>
where
    S: OdeScalar,
    F: Fn(f64, &[S], &mut [S]),
{
    Ok(integrate_checkpoints(field, t0, y0, &[t1], opts)?
        .pop()
        .expect("one checkpoint requested"))
}
