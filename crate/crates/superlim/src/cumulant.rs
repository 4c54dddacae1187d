//! Nonlinear cumulant flows, the extinction functional, the limiting
//! Laplace/characteristic functionals, and the small-value constants.
//!
//! The forward flow `u' = Qu - phi(., u)` gives the log-Laplace semigroup of
//! the measure-valued process; its fixed point is the extinction functional
//! `v`. The unit-band flow is the same trajectory written through
//! `w = (v - u)/v`, which keeps values in [0,1] and avoids cancellation when
//! tracking it to large times. The scale limit `Phi(theta)` fixes the
//! normalization of the strong limit `W` (the scale constant is pinned to 1).

use crate::model::{eval_phi, eval_phi_complex, Scenario};
use crate::ode::{integrate_checkpoints, integrate_to, OdeError, OdeOptions};
use crate::spectral::{self, SpectralData, SpectralError};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sup-norm change between successive doublings accepted as converged.
pub const PHI_LIMIT_TOL: f64 = 1e-8;
/// Allowed excursion beyond the unit band before flagging a contract breach.
pub const BAND_TOL: f64 = 1e-9;
/// Quadrature refinement threshold for the limit operator.
pub const A_QUAD_TOL: f64 = 1e-8;
/// Offspring probabilities are tabulated until the remaining mass is below
/// this; the remainder is folded into the last retained entry.
pub const OFFSPRING_TRUNCATION: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CumulantError {
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("scenario is not supercritical: {detail}")]
    NotSupercritical { detail: String },
    #[error("unit-band contract violated by {excess:.3e} (tolerance {BAND_TOL:.0e})")]
    BandViolation { excess: f64 },
    #[error(
        "scale limit did not converge by horizon {horizon}; run llogl_check: an infinite \
         r log r reproduction moment prevents this normalization"
    )]
    PhiNonConvergence { horizon: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("degenerate skeleton: branching rate vanishes at site {site}")]
    DegenerateSkeleton { site: usize },
}

/// Extinction functional, extinction probabilities, and solve diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtinctionData {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    /// Fixed-point defect `||V_1 v - v||_inf`.
    pub residual: f64,
    pub newton_converged: bool,
}

/// Right-hand side of the forward flow `u' = Qu - phi(., u)`.
fn v_field(s: &Scenario) -> impl Fn(f64, &[f64], &mut [f64]) + '_ {
    let q = s.motion.rates();
    let d = s.dim();
    move |_t, u, du| {
        for x in 0..d {
            let mut acc = 0.0;
            for y in 0..d {
                acc += q[(x, y)] * u[y];
            }
            du[x] = acc - eval_phi(s, x, u[x]);
        }
    }
}

fn v_field_complex(s: &Scenario) -> impl Fn(f64, &[Complex64], &mut [Complex64]) + '_ {
    let q = s.motion.rates();
    let d = s.dim();
    move |_t, u, du| {
        for x in 0..d {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..d {
                acc += q[(x, y)] * u[y];
            }
            du[x] = acc - eval_phi_complex(s, x, u[x]);
        }
    }
}

/// Right-hand side of the unit-band flow, the forward flow transported
/// through `w = (v - u)/v`:
/// `w'(x) = (phi(x, v(1-w)) - Q(v(1-w))(x)) / v(x)`.
fn w_field<'a>(s: &'a Scenario, v: &'a [f64]) -> impl Fn(f64, &[f64], &mut [f64]) + 'a {
    let q = s.motion.rates();
    let d = s.dim();
    move |_t, w, dw| {
        for x in 0..d {
            let mut acc = 0.0;
            for y in 0..d {
                acc += q[(x, y)] * v[y] * (1.0 - w[y]);
            }
            dw[x] = (eval_phi(s, x, v[x] * (1.0 - w[x])) - acc) / v[x];
        }
    }
}

fn w_field_complex<'a>(
    s: &'a Scenario,
    v: &'a [f64],
) -> impl Fn(f64, &[Complex64], &mut [Complex64]) + 'a {
    let q = s.motion.rates();
    let d = s.dim();
    move |_t, w, dw| {
        for x in 0..d {
            let mut acc = Complex64::new(0.0, 0.0);
            for y in 0..d {
                acc += q[(x, y)] * v[y] * (1.0 - w[y]);
            }
            dw[x] = (eval_phi_complex(s, x, v[x] * (1.0 - w[x])) - acc) / v[x];
        }
    }
}

/// Integrate the forward flow: `V_t f` for non-negative initial data.
pub fn solve_vt(s: &Scenario, f: &[f64], t: f64) -> Result<Vec<f64>, CumulantError> {
    if f.iter().any(|&x| x < 0.0) {
        return Err(CumulantError::Precondition(
            "forward flow requires non-negative initial data".into(),
        ));
    }
    Ok(integrate_to(&v_field(s), 0.0, f, t, &flow_options(f))?)
}

/// `V_t f` at several increasing checkpoints in one pass.
pub fn solve_vt_checkpoints(
    s: &Scenario,
    f: &[f64],
    times: &[f64],
) -> Result<Vec<Vec<f64>>, CumulantError> {
    Ok(integrate_checkpoints(
        &v_field(s),
        0.0,
        f,
        times,
        &flow_options(f),
    )?)
}

/// Complex-argument forward flow (characteristic-function mode).
pub fn solve_vt_complex(
    s: &Scenario,
    f: &[Complex64],
    t: f64,
) -> Result<Vec<Complex64>, CumulantError> {
    let amp = f.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let opts = OdeOptions {
        abs_tol: (1e-12 * amp).max(1e-300),
        ..OdeOptions::default()
    };
    Ok(integrate_to(&v_field_complex(s), 0.0, f, t, &opts)?)
}

/// Tolerances for the forward flow: the absolute floor tracks the initial
/// amplitude so growth out of tiny data stays relatively controlled.
fn flow_options(f: &[f64]) -> OdeOptions {
    let amp = f.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    OdeOptions {
        abs_tol: (1e-12 * amp.min(1.0)).max(1e-300),
        ..OdeOptions::default()
    }
}

/// Solve the extinction functional: flow iteration from a large constant
/// followed by damped Newton on the stationarity condition `Qv = phi(., v)`.
pub fn extinction_v(s: &Scenario) -> Result<ExtinctionData, CumulantError> {
    let d = s.dim();
    let alpha_inf = s
        .branching
        .alpha()
        .iter()
        .fold(0.0_f64, |a, &b| a.max(b.abs()));
    let beta_min = s
        .branching
        .beta()
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let theta0 = if beta_min > 0.0 {
        (100.0 * (1.0 + alpha_inf / beta_min)).min(1e3)
    } else {
        1e3
    };

    let mut u = vec![theta0; d];
    let mut converged = false;
    for _ in 0..500 {
        let next = solve_vt(s, &u, 1.0)?;
        let delta = u
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        u = next;
        let sup = u.iter().fold(0.0_f64, |a, &b| a.max(b));
        if sup < 1e-8 {
            return Err(CumulantError::NotSupercritical {
                detail: "extinction functional collapsed to zero (needs lambda0 > 0)".into(),
            });
        }
        if delta < 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(CumulantError::NotSupercritical {
            detail: "flow iteration for the extinction functional did not settle".into(),
        });
    }

    // Damped Newton polish on F(v) = Qv - phi(., v).
    let q = s.motion.rates();
    let mut v = u.clone();
    let mut newton_converged = false;
    for _ in 0..60 {
        let mut fval = nalgebra::DVector::zeros(d);
        for x in 0..d {
            let mut acc = 0.0;
            for y in 0..d {
                acc += q[(x, y)] * v[y];
            }
            fval[x] = acc - eval_phi(s, x, v[x]);
        }
        if fval.amax() < 1e-13 {
            newton_converged = true;
            break;
        }
        let jac = spectral::twisted_generator(s, &v);
        let Some(step) = jac.lu().solve(&fval) else {
            break;
        };
        for x in 0..d {
            v[x] -= 0.5 * step[x];
        }
        if v.iter().any(|&x| !(x > 0.0)) {
            // Newton left the positive cone; fall back to the flow result.
            v = u.clone();
            break;
        }
    }
    let final_v = if newton_converged { v } else { u };
    let back = solve_vt(s, &final_v, 1.0)?;
    let residual = final_v
        .iter()
        .zip(&back)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let qprob: Vec<f64> = final_v.iter().map(|&x| (-x).exp()).collect();
    Ok(ExtinctionData {
        v: final_v,
        q: qprob,
        residual,
        newton_converged,
    })
}

/// Unit-band flow at a single time: `f` in the band `[0, 1]` entrywise.
pub fn vbar_t(s: &Scenario, v: &[f64], f: &[f64], t: f64) -> Result<Vec<f64>, CumulantError> {
    Ok(vbar_checkpoints(s, v, f, &[t])?.pop().expect("one output"))
}

/// Unit-band flow at several increasing checkpoints.
pub fn vbar_checkpoints(
    s: &Scenario,
    v: &[f64],
    f: &[f64],
    times: &[f64],
) -> Result<Vec<Vec<f64>>, CumulantError> {
    if f.iter()
        .any(|&x| !(-BAND_TOL..=1.0 + BAND_TOL).contains(&x))
    {
        return Err(CumulantError::Precondition(
            "unit-band flow requires values in [0, 1]".into(),
        ));
    }
    let start: Vec<f64> = f.iter().map(|&x| x.clamp(0.0, 1.0)).collect();
    let outs = integrate_checkpoints(&w_field(s, v), 0.0, &start, times, &OdeOptions::default())?;
    let mut clamped = Vec::with_capacity(outs.len());
    for mut w in outs {
        let mut excess = 0.0_f64;
        for wx in &mut w {
            excess = excess.max(-*wx).max(*wx - 1.0);
            *wx = wx.clamp(0.0, 1.0);
        }
        if excess > BAND_TOL {
            return Err(CumulantError::BandViolation { excess });
        }
        clamped.push(w);
    }
    Ok(clamped)
}

/// Complex unit-band flow: `|f| <= 1` entrywise, modulus staying in the band
/// up to tolerance.
pub fn vbar_checkpoints_complex(
    s: &Scenario,
    v: &[f64],
    f: &[Complex64],
    times: &[f64],
) -> Result<Vec<Vec<Complex64>>, CumulantError> {
    if f.iter().any(|z| z.norm() > 1.0 + BAND_TOL) {
        return Err(CumulantError::Precondition(
            "complex unit-band flow requires modulus <= 1".into(),
        ));
    }
    let outs = integrate_checkpoints(
        &w_field_complex(s, v),
        0.0,
        f,
        times,
        &OdeOptions::default(),
    )?;
    for w in &outs {
        let excess = w.iter().map(|z| z.norm() - 1.0).fold(0.0, f64::max);
        if excess > BAND_TOL {
            return Err(CumulantError::BandViolation { excess });
        }
    }
    Ok(outs)
}

pub fn vbar_t_complex(
    s: &Scenario,
    v: &[f64],
    f: &[Complex64],
    t: f64,
) -> Result<Vec<Complex64>, CumulantError> {
    Ok(vbar_checkpoints_complex(s, v, f, &[t])?
        .pop()
        .expect("one output"))
}

/// Generator of the v-transformed motion,
/// `Qbar f = v^{-1}[Q(vf) - f Qv]`; conservative at the exact extinction
/// functional.
pub fn transformed_motion_generator(s: &Scenario, v: &[f64]) -> nalgebra::DMatrix<f64> {
    let d = s.dim();
    let q = s.motion.rates();
    let mut qbar = nalgebra::DMatrix::zeros(d, d);
    for x in 0..d {
        let qv: f64 = (0..d).map(|y| q[(x, y)] * v[y]).sum();
        for y in 0..d {
            qbar[(x, y)] = if x == y {
                q[(x, x)] - qv / v[x]
            } else {
                q[(x, y)] * v[y] / v[x]
            };
        }
    }
    qbar
}

/// The rescaled band flow `y(t) = e^{-lambda0* t} Vbar_t f`, integrated in
/// the rescaled variable so the limit values stay O(1):
/// `y' = (Qbar - lambda0* - b) y + e^{-lambda0* t} phi*_0(e^{lambda0* t} y)`.
///
/// Used for the long-horizon limit checks where the band flow itself decays
/// below the absolute noise floor and would come back amplified.
pub fn vbar_rescaled_checkpoints(
    s: &Scenario,
    coeffs: &SkeletonCoefficients,
    lambda_star: f64,
    f: &[f64],
    times: &[f64],
) -> Result<Vec<Vec<f64>>, CumulantError> {
    if f.iter()
        .any(|&x| !(-BAND_TOL..=1.0 + BAND_TOL).contains(&x))
    {
        return Err(CumulantError::Precondition(
            "unit-band flow requires values in [0, 1]".into(),
        ));
    }
    let qbar = transformed_motion_generator(s, &coeffs.v);
    let d = s.dim();
    let field = move |t: f64, y: &[f64], dy: &mut [f64]| {
        let grow = (lambda_star * t).exp();
        for x in 0..d {
            let mut lin = -lambda_star * y[x] - coeffs.b[x] * y[x];
            for z in 0..d {
                lin += qbar[(x, z)] * y[z];
            }
            let w = (grow * y[x]).clamp(-1.0, 1.0);
            let nonlin = if grow > 0.0 {
                coeffs.phi_star0_stable(s, x, w) / grow
            } else {
                0.0
            };
            dy[x] = lin + nonlin;
        }
    };
    let start: Vec<f64> = f.iter().map(|&x| x.clamp(0.0, 1.0)).collect();
    Ok(integrate_checkpoints(
        &field,
        0.0,
        &start,
        times,
        &OdeOptions::default(),
    )?)
}

/// Branching rate and offspring table of the embedded particle system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonCoefficients {
    pub b: Vec<f64>,
    /// Per site: probabilities of 2, 3, ... offspring, truncated once the
    /// remaining mass is below [`OFFSPRING_TRUNCATION`] and renormalized
    /// into the last entry.
    pub offspring: Vec<Vec<f64>>,
    /// Per-site mass before renormalization (1 up to the truncation).
    pub raw_mass: Vec<f64>,
    pub v: Vec<f64>,
}

impl SkeletonCoefficients {
    /// Reproduction nonlinearity on the unit band:
    /// `phi*(x, lambda) = (phi(x, v(1-lambda)) - (1-lambda) phi(x, v)) / v`.
    pub fn phi_star(&self, s: &Scenario, x: usize, lambda: f64) -> f64 {
        let v = self.v[x];
        (eval_phi(s, x, v * (1.0 - lambda)) - (1.0 - lambda) * eval_phi(s, x, v)) / v
    }

    /// Non-negative part `phi*_0(x, lambda) = phi*(x, lambda) + b(x) lambda`,
    /// equal to `b(x) sum_n p_n lambda^n`.
    pub fn phi_star0(&self, s: &Scenario, x: usize, lambda: f64) -> f64 {
        self.phi_star(s, x, lambda) + self.b[x] * lambda
    }

    /// `phi*_0` without cancellation at tiny arguments: the direct formula
    /// subtracts O(1) quantities, so below 1e-4 the offspring power series
    /// (accurate to the table truncation) takes over.
    pub fn phi_star0_stable(&self, s: &Scenario, x: usize, lambda: f64) -> f64 {
        if lambda.abs() >= 1e-4 {
            return self.phi_star0(s, x, lambda);
        }
        let mut acc = 0.0;
        for &p in self.offspring[x].iter().rev() {
            acc = (acc + p) * lambda;
        }
        self.b[x] * acc * lambda
    }

    /// Mean offspring count at a site.
    pub fn mean_offspring(&self, x: usize) -> f64 {
        self.offspring[x]
            .iter()
            .enumerate()
            .map(|(i, p)| (i + 2) as f64 * p)
            .sum()
    }
}

/// Branching rate `b` and offspring probabilities `(p_n)_{n >= 2}` of the
/// skeleton at a solved extinction functional.
pub fn skeleton_coefficients(
    s: &Scenario,
    v: &[f64],
) -> Result<SkeletonCoefficients, CumulantError> {
    let d = s.dim();
    let mut b = Vec::with_capacity(d);
    let mut offspring = Vec::with_capacity(d);
    let mut raw_mass = Vec::with_capacity(d);
    for x in 0..d {
        let vx = v[x];
        let beta = s.branching.beta()[x];
        let atoms = &s.branching.atoms()[x];
        // (e^{rv} - 1 - rv) e^{-rv} written as 1 - (1 + rv) e^{-rv}.
        let atom_rate: f64 = atoms
            .iter()
            .map(|a| a.w * (1.0 - (1.0 + a.r * vx) * (-a.r * vx).exp()))
            .sum();
        let bx = beta * vx + atom_rate / vx;
        if !(bx > 1e-14) {
            return Err(CumulantError::DegenerateSkeleton { site: x });
        }

        // p_2 carries the quadratic contribution; higher orders are pure
        // atom moments accumulated with the per-atom recursion
        // t_n = w v^{n-1} r^n e^{-vr} / n!.
        let atom2: f64 = atoms
            .iter()
            .map(|a| a.w * a.r * a.r * (-vx * a.r).exp())
            .sum();
        let p2 = (vx / bx) * (beta + 0.5 * atom2);
        let mut probs = vec![p2];
        let mut cum = p2;
        let mut terms: Vec<f64> = atoms
            .iter()
            .map(|a| {
                let rv = a.r * vx;
                a.w * vx * a.r * a.r * rv * (-rv).exp() / 6.0
            })
            .collect();
        let mut n = 3usize;
        while 1.0 - cum > OFFSPRING_TRUNCATION && n < 500 {
            let pn: f64 = terms.iter().sum::<f64>() / bx;
            if pn <= 0.0 {
                break;
            }
            probs.push(pn);
            cum += pn;
            for (term, a) in terms.iter_mut().zip(atoms) {
                *term *= a.r * vx / (n + 1) as f64;
            }
            n += 1;
        }
        let last = probs.last_mut().expect("p2 always present");
        *last += 1.0 - cum;
        raw_mass.push(cum);
        offspring.push(probs);
        b.push(bx);
    }
    Ok(SkeletonCoefficients {
        b,
        offspring,
        raw_mass,
        v: v.to_vec(),
    })
}

/// Horizon cap multiplier for the scale-limit doubling (times 1/lambda0).
const PHI_HORIZON_CAP: f64 = 600.0;

/// Scale limit of the forward flow: `Phi(theta, .) = lim_T V_T(theta
/// e^{-lambda0 T} phi0)`, computed by doubling the horizon until successive
/// values agree within [`PHI_LIMIT_TOL`]. This normalization pins the scale
/// constant of `W` to 1.
pub fn big_phi(s: &Scenario, sd: &SpectralData, theta: f64) -> Result<Vec<f64>, CumulantError> {
    big_phi_capped(s, sd, theta, None)
}

/// [`big_phi`] with an explicit cap on the doubling horizon.
pub fn big_phi_capped(
    s: &Scenario,
    sd: &SpectralData,
    theta: f64,
    horizon_cap: Option<f64>,
) -> Result<Vec<f64>, CumulantError> {
    if theta < 0.0 {
        return Err(CumulantError::Precondition("theta must be >= 0".into()));
    }
    if theta == 0.0 {
        return Ok(vec![0.0; s.dim()]);
    }
    let lambda0 = sd.lambda0;
    if lambda0 <= 0.0 {
        return Err(CumulantError::NotSupercritical {
            detail: format!("lambda0 = {lambda0} <= 0"),
        });
    }
    let phi0_sup = sd.phi0.iter().fold(0.0_f64, |a, &b| a.max(b));
    // Start where the initial amplitude is at most 1e-6.
    let mut t = ((theta * phi0_sup / 1e-6).ln() / lambda0).max(8.0 / lambda0);
    let cap = horizon_cap.unwrap_or(PHI_HORIZON_CAP / lambda0);
    let mut prev: Option<Vec<f64>> = None;
    loop {
        let f0: Vec<f64> = sd
            .phi0
            .iter()
            .map(|&p| theta * (-lambda0 * t).exp() * p)
            .collect();
        let cur = solve_vt(s, &f0, t)?;
        if let Some(p) = &prev {
            let delta = p
                .iter()
                .zip(&cur)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if delta < PHI_LIMIT_TOL {
                return Ok(cur);
            }
        }
        prev = Some(cur);
        t *= 2.0;
        if t > cap {
            return Err(CumulantError::PhiNonConvergence { horizon: cap });
        }
    }
}

/// Laplace transform of the single-ancestor limit:
/// `psi(theta, .) = (v - Phi(theta, .)) / v`.
///
/// Computed through the forward flow (the band flow started next to its
/// unstable fixed point would amplify ODE noise by `e^{lambda0 T}`).
pub fn psi_eval(
    s: &Scenario,
    sd: &SpectralData,
    v: &[f64],
    theta: f64,
) -> Result<Vec<f64>, CumulantError> {
    let phi = big_phi(s, sd, theta)?;
    Ok(phi
        .iter()
        .zip(v)
        .map(|(p, vx)| ((vx - p) / vx).clamp(0.0, 1.0))
        .collect())
}

/// Scale limit at imaginary argument: `Phi(i theta, .) =
/// lim_T V_T(i theta e^{-lambda0 T} phi0)` through the complex forward flow.
pub fn big_phi_imag(
    s: &Scenario,
    sd: &SpectralData,
    theta: f64,
) -> Result<Vec<Complex64>, CumulantError> {
    if theta == 0.0 {
        return Ok(vec![Complex64::new(0.0, 0.0); s.dim()]);
    }
    let lambda0 = sd.lambda0;
    let phi0_sup = sd.phi0.iter().fold(0.0_f64, |a, &b| a.max(b));
    let mut t = ((theta.abs() * phi0_sup / 1e-6).ln() / lambda0).max(8.0 / lambda0);
    let cap = PHI_HORIZON_CAP / lambda0;
    let mut prev: Option<Vec<Complex64>> = None;
    loop {
        let f0: Vec<Complex64> = sd
            .phi0
            .iter()
            .map(|&p| Complex64::new(0.0, theta * (-lambda0 * t).exp() * p))
            .collect();
        let cur = solve_vt_complex(s, &f0, t)?;
        if let Some(p) = &prev {
            let delta = p
                .iter()
                .zip(&cur)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            if delta < PHI_LIMIT_TOL {
                return Ok(cur);
            }
        }
        prev = Some(cur);
        t *= 2.0;
        if t > cap {
            return Err(CumulantError::PhiNonConvergence { horizon: cap });
        }
    }
}

/// Characteristic function of the single-ancestor limit at `i theta`:
/// `psi(i theta, .) = 1 - Phi(i theta, .)/v`, modulus at most 1.
pub fn psi_eval_imag(
    s: &Scenario,
    sd: &SpectralData,
    v: &[f64],
    theta: f64,
) -> Result<Vec<Complex64>, CumulantError> {
    let phi = big_phi_imag(s, sd, theta)?;
    let psi: Vec<Complex64> = phi
        .iter()
        .zip(v)
        .map(|(p, vx)| Complex64::new(1.0, 0.0) - p / vx)
        .collect();
    let excess = psi.iter().map(|z| z.norm() - 1.0).fold(0.0, f64::max);
    if excess > BAND_TOL {
        return Err(CumulantError::BandViolation { excess });
    }
    Ok(psi)
}

/// Laplace transform of the horizon-T ancestor value
/// `e^{-lambda0 T} <phi0/v, Z_T>`; the finite-horizon counterpart of
/// [`psi_eval`], used to quantify horizon bias.
pub fn wz_laplace_at_horizon(
    s: &Scenario,
    sd: &SpectralData,
    v: &[f64],
    theta: f64,
    horizon: f64,
) -> Result<Vec<f64>, CumulantError> {
    let tau = theta * (-sd.lambda0 * horizon).exp();
    // Deviation from full mass, tracked through the forward flow.
    let u0: Vec<f64> = sd
        .phi0
        .iter()
        .zip(v)
        .map(|(p, vx)| vx * (-(-tau * p / vx).exp_m1()))
        .collect();
    let ut = solve_vt(s, &u0, horizon)?;
    Ok(ut
        .iter()
        .zip(v)
        .map(|(u, vx)| (1.0 - u / vx).clamp(0.0, 1.0))
        .collect())
}

/// 16-point Gauss-Legendre rule on [-1, 1] (positive half; mirrored).
const GL16_NODES: [f64; 8] = [
    0.095_012_509_837_637_44,
    0.281_603_550_779_258_9,
    0.458_016_777_657_227_4,
    0.617_876_244_402_643_7,
    0.755_404_408_355_003,
    0.865_631_202_387_831_7,
    0.944_575_023_073_232_6,
    0.989_400_934_991_649_9,
];
const GL16_WEIGHTS: [f64; 8] = [
    0.189_450_610_455_068_5,
    0.182_603_415_044_923_6,
    0.169_156_519_395_002_5,
    0.149_595_988_816_576_7,
    0.124_628_971_255_533_9,
    0.095_158_511_682_492_8,
    0.062_253_523_938_647_89,
    0.027_152_459_411_754_094,
];

fn gl16_points(a: f64, b: f64) -> Vec<(f64, f64)> {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut pts = Vec::with_capacity(16);
    for i in 0..8 {
        pts.push((mid - half * GL16_NODES[i], half * GL16_WEIGHTS[i]));
        pts.push((mid + half * GL16_NODES[i], half * GL16_WEIGHTS[i]));
    }
    pts
}

/// Value and error estimate of the limit operator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OperatorAValue {
    pub value: f64,
    pub quad_error: f64,
    /// Truncation point of the integral.
    pub horizon: f64,
}

/// The limit operator
/// `A(f) = int_0^inf e^{-lambda0* s} <phi*_0(., Vbar_s f), psi0*>_m ds
///  + <f, psi0*>_m`.
///
/// The integrand decays like `e^{lambda0* s}` once the band flow has dropped
/// below 1/2; the integral is truncated where that envelope falls below
/// 1e-12 and evaluated with per-unit Gauss-Legendre panels, doubling the
/// panel count until the change is below [`A_QUAD_TOL`].
pub fn operator_a(
    s: &Scenario,
    sd: &SpectralData,
    coeffs: &SkeletonCoefficients,
    f: &[f64],
) -> Result<OperatorAValue, CumulantError> {
    let sup = f.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    if sup >= 1.0 {
        return Err(CumulantError::Precondition(
            "the limit operator needs ||f||_inf < 1 strictly; at the boundary the defining \
             integral can grow like e^{-lambda0* s}"
                .into(),
        ));
    }
    let v = &coeffs.v;
    let m = s.space.weights();
    let d = s.dim();
    let lambda_star = sd.lambda0_star;
    let boundary_term: f64 = (0..d).map(|x| f[x] * sd.psi0_star[x] * m[x]).sum();
    if sup == 0.0 {
        return Ok(OperatorAValue {
            value: boundary_term,
            quad_error: 0.0,
            horizon: 0.0,
        });
    }

    let integrand_at = |sv: f64, w: &[f64]| -> f64 {
        let pairing: f64 = (0..d)
            .map(|x| coeffs.phi_star0_stable(s, x, w[x]) * sd.psi0_star[x] * m[x])
            .sum();
        (-lambda_star * sv).exp() * pairing
    };

    // Scan on a unit grid until the band flow is safely below 1/2.
    let scan_times: Vec<f64> = (1..=200).map(f64::from).collect();
    let scan = vbar_checkpoints(s, v, f, &scan_times)?;
    let mut anchor = None;
    for (i, w) in scan.iter().enumerate() {
        let wsup = w.iter().fold(0.0_f64, |a, &b| a.max(b));
        if wsup <= 0.45 {
            anchor = Some((scan_times[i], integrand_at(scan_times[i], w)));
            break;
        }
    }
    let Some((s0, g0)) = anchor else {
        return Err(CumulantError::PhiNonConvergence { horizon: 200.0 });
    };
    // Beyond s0 the integrand is bounded by g(s0) e^{lambda0* (s - s0)}.
    let horizon = s0 + ((g0.max(1e-30) / 1e-12).ln() / -lambda_star).max(1.0);

    let mut panels = horizon.ceil() as usize;
    let mut prev: Option<f64> = None;
    loop {
        let mut nodes: Vec<(f64, f64)> = Vec::new();
        for p in 0..panels {
            let a = horizon * p as f64 / panels as f64;
            let b = horizon * (p + 1) as f64 / panels as f64;
            nodes.extend(gl16_points(a, b));
        }
        nodes.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite nodes"));
        let times: Vec<f64> = nodes.iter().map(|n| n.0).collect();
        let states = vbar_checkpoints(s, v, f, &times)?;
        let integral: f64 = nodes
            .iter()
            .zip(&states)
            .map(|((sv, wgt), w)| wgt * integrand_at(*sv, w))
            .sum();
        let value = integral + boundary_term;
        if let Some(p) = prev {
            let err = (value - p).abs();
            if err < A_QUAD_TOL {
                return Ok(OperatorAValue {
                    value,
                    quad_error: err,
                    horizon,
                });
            }
        }
        prev = Some(value);
        panels *= 2;
        if panels > 4096 {
            return Ok(OperatorAValue {
                value: prev.expect("at least one evaluation"),
                quad_error: f64::NAN,
                horizon,
            });
        }
    }
}

/// Small-value exponent and the constant in front of `r^{epsilon0}`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SmallValueConstants {
    pub epsilon0: f64,
    pub a_psi1: f64,
    pub constant: f64,
}

/// `epsilon0 = -lambda0*/lambda0` and the small-value constant
/// `e^{-<v,mu>} A(psi(1)) <v phi0*, mu> / Gamma(epsilon0 + 1)`.
pub fn smallvalue_constants(
    s: &Scenario,
    sd: &SpectralData,
    v: &[f64],
    mu: &[f64],
) -> Result<SmallValueConstants, CumulantError> {
    if sd.lambda0 <= 0.0 {
        return Err(CumulantError::NotSupercritical {
            detail: format!("lambda0 = {} <= 0", sd.lambda0),
        });
    }
    if mu.iter().all(|&x| x == 0.0) {
        return Err(CumulantError::Precondition(
            "initial measure must be non-zero".into(),
        ));
    }
    let epsilon0 = -sd.lambda0_star / sd.lambda0;
    let coeffs = skeleton_coefficients(s, v)?;
    let psi1 = psi_eval(s, sd, v, 1.0)?;
    let a = operator_a(s, sd, &coeffs, &psi1)?;
    let vmu: f64 = v.iter().zip(mu).map(|(a, b)| a * b).sum();
    let vphi_mu: f64 = (0..s.dim()).map(|x| v[x] * sd.phi0_star[x] * mu[x]).sum();
    let constant =
        (-vmu).exp() * a.value * vphi_mu / statrs::function::gamma::gamma(epsilon0 + 1.0);
    Ok(SmallValueConstants {
        epsilon0,
        a_psi1: a.value,
        constant,
    })
}

/// Outcome of the `r log r` reproduction-moment criterion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LlogLCheck {
    pub finite: bool,
    /// The weighted moment; `f64::INFINITY` when divergent.
    pub value: f64,
}

/// Evaluate the `r log r` moment criterion: the eigen-weighted sum over
/// sites of `int_1^inf r log r n(x, dr)`. Atom lists contribute finite
/// sums; a heavy-tail descriptor `c r^{-p} (log r)^{-q}` contributes a
/// divergent integral exactly when `p = 2, q <= 2`.
pub fn llogl_check(s: &Scenario, sd: &SpectralData) -> LlogLCheck {
    let m = s.space.weights();
    let mut value = 0.0;
    for x in 0..s.dim() {
        let weight = m[x] * sd.phi0[x] * sd.psi0[x];
        let site: f64 = s.branching.atoms()[x]
            .iter()
            .filter(|a| a.r > 1.0)
            .map(|a| a.w * a.r * a.r.ln())
            .sum();
        value += weight * site;
    }
    if let Some(tail) = s.branching.tail() {
        // The eigen-weights sum to 1, so the descriptor adds its moment
        // integral directly.
        let p = tail.power;
        let q = tail.log_power;
        let u0 = tail.cutoff.ln();
        let tail_value = if p == 2.0 {
            if q <= 2.0 {
                f64::INFINITY
            } else {
                tail.c * u0.powf(2.0 - q) / (q - 2.0)
            }
        } else {
            // int_{u0}^inf e^{(2-p)u} u^{1-q} du, exponentially decaying.
            let span = 80.0 / (p - 2.0);
            let mut acc = 0.0;
            for (u, w) in gl16_points(u0, u0 + span) {
                acc += w * ((2.0 - p) * u).exp() * u.powf(1.0 - q);
            }
            tail.c * acc
        };
        value += tail_value;
    }
    LlogLCheck {
        finite: value.is_finite(),
        value,
    }
}

/// Norming diagnostics at time `t`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GammaL {
    pub gamma_t: f64,
    pub l_t: f64,
    pub l_tilde: f64,
}

/// `gamma_t = <Phi(e^{-lambda0 t}), psi0>_m`, `L(t) = e^{lambda0 t} gamma_t`
/// (the scale convention makes `L -> 1` in the finite-moment regime), and
/// `Ltilde` at `r = e^{lambda0 t}`.
pub fn gamma_l(s: &Scenario, sd: &SpectralData, t: f64) -> Result<GammaL, CumulantError> {
    let theta = (-sd.lambda0 * t).exp();
    let phi = big_phi(s, sd, theta)?;
    let gamma_t = s.space.inner(&phi, &sd.psi0);
    let l_t = (sd.lambda0 * t).exp() * gamma_t;
    Ok(GammaL {
        gamma_t,
        l_t,
        l_tilde: l_t,
    })
}

/// Slowly-varying envelope `Ltilde(r) = L(log r / lambda0)` for `r >= 1`.
pub fn l_tilde(s: &Scenario, sd: &SpectralData, r: f64) -> Result<f64, CumulantError> {
    if r < 1.0 {
        return Err(CumulantError::Precondition(
            "Ltilde is defined for r >= 1".into(),
        ));
    }
    Ok(gamma_l(s, sd, r.ln() / sd.lambda0)?.l_t)
}

/// Tabulated transforms over a theta grid, with the convergence diagnostic
/// of the scale limit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CumulantTable {
    pub theta_grid: Vec<f64>,
    /// Row per grid point, column per site.
    pub phi: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub complex_grid: Vec<f64>,
    pub psi_complex: Vec<Vec<Complex64>>,
    pub horizon_t: f64,
    pub l0_convention: f64,
    /// `(t, sup over sites of |Phi(e^{-lambda0 t})/(e^{-lambda0 t} L(t) phi0) - 1|)`.
    pub h_diagnostic: Vec<(f64, f64)>,
}

/// Build the table of transforms over the given grids. `horizon_cap`, when
/// given, bounds the doubling horizon of every scale-limit evaluation.
pub fn build_cumulant_table(
    s: &Scenario,
    sd: &SpectralData,
    v: &[f64],
    theta_grid: &[f64],
    complex_grid: &[f64],
    horizon_cap: Option<f64>,
) -> Result<CumulantTable, CumulantError> {
    let mut phi = Vec::with_capacity(theta_grid.len());
    let mut psi = Vec::with_capacity(theta_grid.len());
    for &theta in theta_grid {
        let row = big_phi_capped(s, sd, theta, horizon_cap)?;
        psi.push(
            row.iter()
                .zip(v)
                .map(|(p, vx)| ((vx - p) / vx).clamp(0.0, 1.0))
                .collect(),
        );
        phi.push(row);
    }
    let mut psi_complex = Vec::with_capacity(complex_grid.len());
    for &theta in complex_grid {
        psi_complex.push(psi_eval_imag(s, sd, v, theta)?);
    }
    let mut h_diagnostic = Vec::new();
    for &t in &[2.0, 4.0, 8.0, 16.0] {
        let gl = gamma_l(s, sd, t)?;
        let p = big_phi_capped(s, sd, (-sd.lambda0 * t).exp(), horizon_cap)?;
        let dev = (0..s.dim())
            .map(|x| (p[x] / ((-sd.lambda0 * t).exp() * gl.l_t * sd.phi0[x]) - 1.0).abs())
            .fold(0.0, f64::max);
        h_diagnostic.push((t, dev));
    }
    Ok(CumulantTable {
        theta_grid: theta_grid.to_vec(),
        phi,
        psi,
        complex_grid: complex_grid.to_vec(),
        psi_complex,
        horizon_t: horizon_cap.unwrap_or(PHI_HORIZON_CAP / sd.lambda0),
        l0_convention: 1.0,
        h_diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{feller1, feller_alpha2, log_tail, poissonic, threesite, twosite};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spectral_for(s: &Scenario) -> (SpectralData, ExtinctionData) {
        let ext = extinction_v(s).unwrap();
        let sd = SpectralData::compute(s, &ext.v).unwrap();
        (sd, ext)
    }

    /// Closed-form forward flow for feller1: theta e^t / (1 + theta(e^t - 1)).
    fn feller_vt(theta: f64, t: f64) -> f64 {
        theta * t.exp() / (1.0 + theta * (t.exp() - 1.0))
    }

    #[test]
    fn vt_zero_is_fixed() {
        for s in [feller1(), twosite()] {
            for &t in &[0.5, 3.0] {
                let out = solve_vt(&s, &vec![0.0; s.dim()], t).unwrap();
                assert!(out.iter().all(|&x| x.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn vt_feller_closed_form() {
        let s = feller1();
        for theta in [0.25, 1.0, 3.0] {
            for t in [0.3, 1.0, 2.5] {
                let out = solve_vt(&s, &[theta], t).unwrap();
                assert!(
                    (out[0] - feller_vt(theta, t)).abs() < 1e-9,
                    "theta={theta} t={t}"
                );
            }
        }
        // At theta = 1 the flow sits at the fixed point.
        let out = solve_vt(&s, &[1.0], 1.0).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn extinction_feller_closed_forms() {
        let e = extinction_v(&feller1()).unwrap();
        assert!((e.v[0] - 1.0).abs() < 1e-10);
        assert!((e.q[0] - (-1.0_f64).exp()).abs() < 1e-10);
        assert!(e.residual < 1e-10);

        let e2 = extinction_v(&feller_alpha2()).unwrap();
        assert!((e2.v[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn extinction_poissonic_against_bisection() {
        let e = extinction_v(&poissonic()).unwrap();
        let oracle = crate::spectral::tests::bisect_extinction_root();
        assert!(
            (e.v[0] - oracle).abs() < 1e-12,
            "v = {}, oracle = {oracle}",
            e.v[0]
        );
        assert!(e.q[0] > 0.0 && e.q[0] < 1.0);
    }

    #[test]
    fn extinction_is_flow_fixed_point() {
        for s in [poissonic(), twosite(), threesite()] {
            let e = extinction_v(&s).unwrap();
            for &t in &[1.0, 5.0] {
                let out = solve_vt(&s, &e.v, t).unwrap();
                let defect = out
                    .iter()
                    .zip(&e.v)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(defect < 1e-8, "{} t={t}: defect {defect}", s.name);
            }
        }
    }

    #[test]
    fn subcritical_scenario_rejected() {
        let s = Scenario::assemble(
            "subcritical".into(),
            vec![1.0],
            vec![vec![0.0]],
            vec![-1.0],
            vec![1.0],
            vec![vec![]],
            None,
            vec![1.0],
        )
        .unwrap();
        assert!(matches!(
            extinction_v(&s),
            Err(CumulantError::NotSupercritical { .. })
        ));
    }

    #[test]
    fn vbar_endpoints_are_fixed() {
        for s in [feller1(), twosite(), threesite()] {
            let v = extinction_v(&s).unwrap().v;
            for &t in &[0.5, 2.0, 6.0] {
                let one = vbar_t(&s, &v, &vec![1.0; s.dim()], t).unwrap();
                assert!(one.iter().all(|&x| (x - 1.0).abs() < 1e-10));
                let zero = vbar_t(&s, &v, &vec![0.0; s.dim()], t).unwrap();
                assert!(zero.iter().all(|&x| x.abs() < 1e-10));
            }
        }
    }

    #[test]
    fn vbar_feller_psi_chain() {
        // psi(theta) = v/(v + theta); the band flow advances theta by e^t.
        let s = feller1();
        let out = vbar_t(&s, &[1.0], &[0.5], 2.0_f64.ln()).unwrap();
        assert!((out[0] - 1.0 / 3.0).abs() < 1e-9, "got {}", out[0]);
    }

    #[test]
    fn vbar_matches_defining_formula() {
        // The band flow must agree with (v - V_t(v(1-f)))/v computed through
        // the forward flow.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in [twosite(), threesite()] {
            let v = extinction_v(&s).unwrap().v;
            for _ in 0..5 {
                let f: Vec<f64> = (0..s.dim()).map(|_| rng.random::<f64>()).collect();
                for &t in &[0.5, 2.0] {
                    let direct = vbar_t(&s, &v, &f, t).unwrap();
                    let u0: Vec<f64> = v.iter().zip(&f).map(|(vx, fx)| vx * (1.0 - fx)).collect();
                    let ut = solve_vt(&s, &u0, t).unwrap();
                    for x in 0..s.dim() {
                        let formula = (v[x] - ut[x]) / v[x];
                        assert!((direct[x] - formula).abs() < 1e-8, "{} t={t} x={x}", s.name);
                    }
                }
            }
        }
    }

    #[test]
    fn vbar_band_precondition() {
        let s = feller1();
        assert!(matches!(
            vbar_t(&s, &[1.0], &[1.5], 1.0),
            Err(CumulantError::Precondition(_))
        ));
    }

    #[test]
    fn flow_property_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in [poissonic(), twosite()] {
            for _ in 0..5 {
                let f: Vec<f64> = (0..s.dim()).map(|_| 2.0 * rng.random::<f64>()).collect();
                let (t, u) = (0.8, 1.7);
                let two_step = solve_vt(&s, &solve_vt(&s, &f, u).unwrap(), t).unwrap();
                let one_step = solve_vt(&s, &f, t + u).unwrap();
                for x in 0..s.dim() {
                    assert!((two_step[x] - one_step[x]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn monotonicity_of_flows() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = threesite();
        let v = extinction_v(&s).unwrap().v;
        for _ in 0..10 {
            let f: Vec<f64> = (0..s.dim()).map(|_| rng.random::<f64>()).collect();
            let g: Vec<f64> = f.iter().map(|&x| x + rng.random::<f64>() * 0.5).collect();
            let vf = solve_vt(&s, &f, 1.3).unwrap();
            let vg = solve_vt(&s, &g, 1.3).unwrap();
            for x in 0..s.dim() {
                assert!(vf[x] <= vg[x] + 1e-10);
            }
            // Band flow: monotone and band-preserving.
            let fb: Vec<f64> = f.iter().map(|&x| 0.9 * x).collect();
            let gb: Vec<f64> = fb.iter().map(|&x| (x + 0.05).min(1.0)).collect();
            let bf = vbar_t(&s, &v, &fb, 1.3).unwrap();
            let bg = vbar_t(&s, &v, &gb, 1.3).unwrap();
            for x in 0..s.dim() {
                assert!((0.0..=1.0).contains(&bf[x]));
                assert!(bf[x] <= bg[x] + 1e-10);
            }
        }
    }

    #[test]
    fn skeleton_coefficients_feller() {
        let c = skeleton_coefficients(&feller1(), &[1.0]).unwrap();
        assert!((c.b[0] - 1.0).abs() < 1e-12);
        assert_eq!(c.offspring[0].len(), 1);
        assert!((c.offspring[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn skeleton_coefficients_poissonic_oracle() {
        // Direct evaluation of the defining series at the bisection root.
        let v = crate::spectral::tests::bisect_extinction_root();
        let c = skeleton_coefficients(&poissonic(), &[v]).unwrap();
        assert!((c.b[0] - (v - 1.0)).abs() < 1e-10, "b = {}", c.b[0]);
        let b = v - 1.0;
        let p2 = (v / b) * (0.5 * 2.0 * (-v).exp());
        let p3 = v * v / (6.0 * b) * 2.0 * (-v).exp();
        assert!((c.offspring[0][0] - p2).abs() < 1e-10);
        assert!((c.offspring[0][1] - p3).abs() < 1e-10);
        assert!((p2 - 0.54548).abs() < 1e-4);
        assert!((p3 - 0.28977).abs() < 1e-4);
        // Raw mass reaches 1 up to the truncation threshold.
        assert!((c.raw_mass[0] - 1.0).abs() < 1e-12);
        // Renormalized table sums to exactly one.
        let total: f64 = c.offspring[0].iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn skeleton_rate_bounded() {
        for s in [poissonic(), twosite(), threesite()] {
            let e = extinction_v(&s).unwrap();
            let c = skeleton_coefficients(&s, &e.v).unwrap();
            let m = crate::model::m_bound(&s);
            let vsup = e.v.iter().fold(0.0_f64, |a, &b| a.max(b));
            for &bx in &c.b {
                assert!(bx > 0.0);
                assert!(bx <= m * vsup + m + 1e-9);
            }
        }
    }

    #[test]
    fn phi_star0_quadratic_bound() {
        let s = poissonic();
        let e = extinction_v(&s).unwrap();
        let c = skeleton_coefficients(&s, &e.v).unwrap();
        for i in 0..=20 {
            let lambda = i as f64 / 20.0;
            let val = c.phi_star0(&s, 0, lambda);
            assert!(val >= -1e-12);
            assert!(val <= c.b[0] * lambda * lambda + 1e-12);
        }
    }

    #[test]
    fn degenerate_skeleton_detected() {
        let s = Scenario::assemble(
            "nobranch".into(),
            vec![1.0],
            vec![vec![0.0]],
            vec![1.0],
            vec![0.0],
            vec![vec![]],
            None,
            vec![1.0],
        )
        .unwrap();
        assert!(matches!(
            skeleton_coefficients(&s, &[1.0]),
            Err(CumulantError::DegenerateSkeleton { site: 0 })
        ));
    }

    #[test]
    fn big_phi_feller_closed_form() {
        let s = feller1();
        let (sd, _) = spectral_for(&s);
        for theta in [0.1, 1.0, 10.0, 100.0] {
            let phi = big_phi(&s, &sd, theta).unwrap();
            let expect = theta / (1.0 + theta);
            assert!(
                (phi[0] - expect).abs() < 1e-6,
                "theta={theta}: {} vs {expect}",
                phi[0]
            );
        }
        assert_eq!(big_phi(&s, &sd, 0.0).unwrap(), vec![0.0]);
        // Saturation to v at huge theta.
        let phi = big_phi(&s, &sd, 1e6).unwrap();
        assert!((phi[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn big_phi_self_consistency() {
        // Phi(theta) = V_t(Phi(theta e^{-lambda0 t})).
        for s in [feller1(), poissonic(), twosite()] {
            let (sd, _) = spectral_for(&s);
            for &theta in &[0.5, 2.0] {
                let lhs = big_phi(&s, &sd, theta).unwrap();
                for &t in &[1.0, 2.0] {
                    let inner = big_phi(&s, &sd, theta * (-sd.lambda0 * t).exp()).unwrap();
                    let rhs = solve_vt(&s, &inner, t).unwrap();
                    for x in 0..s.dim() {
                        assert!(
                            (lhs[x] - rhs[x]).abs() < 1e-6,
                            "{} theta={theta} t={t}",
                            s.name
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn psi_matches_phi_route() {
        for s in [feller1(), poissonic(), twosite()] {
            let (sd, ext) = spectral_for(&s);
            for &theta in &[0.3, 1.0, 4.0] {
                let psi = psi_eval(&s, &sd, &ext.v, theta).unwrap();
                let phi = big_phi(&s, &sd, theta).unwrap();
                for x in 0..s.dim() {
                    let formula = (ext.v[x] - phi[x]) / ext.v[x];
                    assert!((psi[x] - formula).abs() < 1e-7, "{} theta={theta}", s.name);
                }
            }
        }
    }

    #[test]
    fn psi_feller_values() {
        let s = feller1();
        let (sd, ext) = spectral_for(&s);
        assert_eq!(psi_eval(&s, &sd, &ext.v, 0.0).unwrap(), vec![1.0]);
        let p1 = psi_eval(&s, &sd, &ext.v, 1.0).unwrap();
        assert!((p1[0] - 0.5).abs() < 1e-8);
        let pi = psi_eval_imag(&s, &sd, &ext.v, 1.0).unwrap();
        assert!((pi[0].norm() - 1.0 / 2.0_f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn psi_self_consistency_band_flow() {
        // psi(theta) = Vbar_t(psi(theta e^{-lambda0 t})).
        for s in [feller1(), poissonic(), twosite(), threesite()] {
            let (sd, ext) = spectral_for(&s);
            for &theta in &[0.1, 1.0, 10.0, 100.0] {
                let lhs = psi_eval(&s, &sd, &ext.v, theta).unwrap();
                for &t in &[1.0, 2.0] {
                    let inner = psi_eval(&s, &sd, &ext.v, theta * (-sd.lambda0 * t).exp()).unwrap();
                    let rhs = vbar_t(&s, &ext.v, &inner, t).unwrap();
                    for x in 0..s.dim() {
                        assert!(
                            (lhs[x] - rhs[x]).abs() < 1e-6,
                            "{} theta={theta} t={t} x={x}: {} vs {}",
                            s.name,
                            lhs[x],
                            rhs[x]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn operator_a_on_zero() {
        let s = feller1();
        let (sd, ext) = spectral_for(&s);
        let coeffs = skeleton_coefficients(&s, &ext.v).unwrap();
        let a = operator_a(&s, &sd, &coeffs, &[0.0]).unwrap();
        assert_eq!(a.value, 0.0);
    }

    #[test]
    fn operator_a_feller_closed_form() {
        // Integral term 1/2 plus boundary term 1/2.
        let s = feller1();
        let (sd, ext) = spectral_for(&s);
        let coeffs = skeleton_coefficients(&s, &ext.v).unwrap();
        let psi1 = psi_eval(&s, &sd, &ext.v, 1.0).unwrap();
        let a = operator_a(&s, &sd, &coeffs, &psi1).unwrap();
        assert!((a.value - 1.0).abs() < 1e-4, "A(psi(1)) = {}", a.value);

        // Scaling: A(psi(theta)) = theta^{-epsilon0} A(psi(1)).
        let psi2 = psi_eval(&s, &sd, &ext.v, 2.0).unwrap();
        let a2 = operator_a(&s, &sd, &coeffs, &psi2).unwrap();
        assert!((a2.value - 0.5).abs() < 1e-4, "A(psi(2)) = {}", a2.value);
    }

    #[test]
    fn operator_a_rejects_boundary() {
        let s = feller1();
        let (sd, ext) = spectral_for(&s);
        let coeffs = skeleton_coefficients(&s, &ext.v).unwrap();
        assert!(matches!(
            operator_a(&s, &sd, &coeffs, &[1.0]),
            Err(CumulantError::Precondition(_))
        ));
    }

    #[test]
    fn smallvalue_feller_closed_form() {
        let s = feller1();
        let (sd, ext) = spectral_for(&s);
        let c = smallvalue_constants(&s, &sd, &ext.v, &s.initial_measure).unwrap();
        assert!((c.epsilon0 - 1.0).abs() < 1e-10);
        assert!((c.constant - (-1.0_f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn smallvalue_poissonic_exponent() {
        let s = poissonic();
        let (sd, ext) = spectral_for(&s);
        let c = smallvalue_constants(&s, &sd, &ext.v, &s.initial_measure).unwrap();
        let oracle = crate::spectral::tests::bisect_extinction_root() - 1.0;
        assert!(
            (c.epsilon0 - oracle).abs() < 1e-8,
            "epsilon0 = {}",
            c.epsilon0
        );
    }

    #[test]
    fn llogl_atomic_and_tails() {
        let s = poissonic();
        let (sd, _) = spectral_for(&s);
        let check = llogl_check(&s, &sd);
        assert!(check.finite);

        let s2 = log_tail(2.0);
        let (sd2, _) = spectral_for(&s2);
        let check2 = llogl_check(&s2, &sd2);
        assert!(!check2.finite);
        assert!(check2.value.is_infinite());

        let s3 = log_tail(3.0);
        let (sd3, _) = spectral_for(&s3);
        let check3 = llogl_check(&s3, &sd3);
        assert!(check3.finite);
        // Closed form: c (ln cutoff)^{2-q} / (q - 2) with c = 0.5, cutoff = 2.
        let expected = 0.5 / 2.0_f64.ln();
        let atom_part = check.value;
        assert!((check3.value - atom_part - expected).abs() < 1e-12);
    }

    #[test]
    fn gamma_l_feller_values() {
        let s = feller1();
        let (sd, _) = spectral_for(&s);
        let g0 = gamma_l(&s, &sd, 0.0).unwrap();
        assert!((g0.gamma_t - 0.5).abs() < 1e-7);
        assert!((g0.l_t - 0.5).abs() < 1e-7);
        assert!((l_tilde(&s, &sd, 1.0).unwrap() - 0.5).abs() < 1e-7);

        let g40 = gamma_l(&s, &sd, 40.0).unwrap();
        assert!((g40.l_t - 1.0).abs() < 1e-6, "L(40) = {}", g40.l_t);

        // Closed form Ltilde(r) = r/(r+1).
        let lt = l_tilde(&s, &sd, 50.0).unwrap();
        assert!((lt - 50.0 / 51.0).abs() < 1e-7);
    }

    #[test]
    fn gamma_ratio_recovers_growth() {
        let s = feller1();
        let (sd, _) = spectral_for(&s);
        let g20 = gamma_l(&s, &sd, 20.0).unwrap();
        let g21 = gamma_l(&s, &sd, 21.0).unwrap();
        let ratio = g20.gamma_t / g21.gamma_t;
        assert!((ratio - 1.0_f64.exp()).abs() < 1e-6, "ratio = {ratio}");
    }

    #[test]
    fn band_flow_sandwiched_by_twisted_semigroup() {
        // T_t* f <= Vbar_t f <= (1 + ||f|| e^{||b|| t}) T_t* f.
        let s = twosite();
        let ext = extinction_v(&s).unwrap();
        let coeffs = skeleton_coefficients(&s, &ext.v).unwrap();
        let b_sup = coeffs.b.iter().fold(0.0_f64, |a, &b| a.max(b));
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let f: Vec<f64> = (0..s.dim()).map(|_| rng.random::<f64>()).collect();
            let f_sup = f.iter().fold(0.0_f64, |a, &b| a.max(b));
            for &t in &[0.5, 1.0, 2.0, 4.0] {
                let vb = vbar_t(&s, &ext.v, &f, t).unwrap();
                let ts = crate::spectral::semigroup_t_star(&s, &ext.v, t);
                for x in 0..s.dim() {
                    let tf: f64 = (0..s.dim()).map(|y| ts[(x, y)] * f[y]).sum();
                    assert!(vb[x] >= tf - 1e-8, "lower bound t={t}");
                    let upper = (1.0 + f_sup * (b_sup * t).exp()) * tf;
                    assert!(vb[x] <= upper + 1e-8, "upper bound t={t}");
                }
            }
        }
    }

    #[test]
    fn band_flow_decay_envelope() {
        // Vbar_t f <= c(a) e^{lambda0* (1-a) t} (phi0*)^{1-a} for f in the
        // a-band, with c(a) = a (1 + c*) <1, psi0*>_m^{1-a}.
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for s in [poissonic(), twosite(), threesite()] {
            let (sd, ext) = spectral_for(&s);
            let fit = crate::spectral::iu_fit_star(&s, &ext.v, 0.5).unwrap();
            let cstar = if fit.is_exact() { 0.0 } else { fit.c };
            let pairing = s.space.inner(&vec![1.0; s.dim()], &sd.psi0_star);
            for &a in &[0.0, 0.25, 0.5] {
                let ca = a * (1.0 + cstar) * pairing.powf(1.0 - a);
                for _ in 0..5 {
                    let f: Vec<f64> = (0..s.dim()).map(|_| a * rng.random::<f64>()).collect();
                    for &t in &[1.0, 2.0, 4.0, 8.0] {
                        let vb = vbar_t(&s, &ext.v, &f, t).unwrap();
                        for x in 0..s.dim() {
                            let bound = ca
                                * (sd.lambda0_star * (1.0 - a) * t).exp()
                                * sd.phi0_star[x].powf(1.0 - a);
                            assert!(
                                vb[x] <= bound + 1e-8,
                                "{} a={a} t={t} x={x}: {} > {bound}",
                                s.name,
                                vb[x]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rescaled_band_flow_converges_to_limit_operator() {
        // e^{-lambda0* t} Vbar_t psi(1) -> A(psi(1)) phi0*: deviations
        // decrease along t in {5, 10, 20} and end below 1e-3.
        for s in [feller1(), poissonic(), twosite(), threesite()] {
            let (sd, ext) = spectral_for(&s);
            let coeffs = skeleton_coefficients(&s, &ext.v).unwrap();
            let psi1 = psi_eval(&s, &sd, &ext.v, 1.0).unwrap();
            let a = operator_a(&s, &sd, &coeffs, &psi1).unwrap();
            let outs =
                vbar_rescaled_checkpoints(&s, &coeffs, sd.lambda0_star, &psi1, &[5.0, 10.0, 20.0])
                    .unwrap();
            let devs: Vec<f64> = outs
                .iter()
                .map(|y| {
                    (0..s.dim())
                        .map(|x| (y[x] - a.value * sd.phi0_star[x]).abs())
                        .fold(0.0, f64::max)
                })
                .collect();
            assert!(
                devs[0] > devs[1] && devs[1] > devs[2],
                "{}: deviations {:?} not decreasing",
                s.name,
                devs
            );
            assert!(devs[2] < 1e-3, "{}: final deviation {}", s.name, devs[2]);
        }
    }

    #[test]
    fn rescaled_flow_matches_band_flow() {
        // At moderate horizons the rescaled and plain routes agree.
        let s = poissonic();
        let (sd, ext) = spectral_for(&s);
        let coeffs = skeleton_coefficients(&s, &ext.v).unwrap();
        let psi1 = psi_eval(&s, &sd, &ext.v, 1.0).unwrap();
        for &t in &[1.0, 3.0, 6.0] {
            let plain = vbar_t(&s, &ext.v, &psi1, t).unwrap();
            let rescaled =
                vbar_rescaled_checkpoints(&s, &coeffs, sd.lambda0_star, &psi1, &[t]).unwrap();
            for x in 0..s.dim() {
                let back = rescaled[0][x] * (sd.lambda0_star * t).exp();
                assert!(
                    (plain[x] - back).abs() < 1e-9,
                    "t={t}: {} vs {back}",
                    plain[x]
                );
            }
        }
    }

    #[test]
    fn extinction_comparable_to_eigenfunction() {
        // C1 phi0 <= v <= C2 phi0 with finite positive constants.
        for s in [poissonic(), twosite(), threesite()] {
            let (sd, ext) = spectral_for(&s);
            let ratios: Vec<f64> = ext.v.iter().zip(&sd.phi0).map(|(v, p)| v / p).collect();
            let c1 = ratios.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            let c2 = ratios.iter().fold(0.0_f64, |a, &b| a.max(b));
            assert!(
                c1 > 0.0 && c2.is_finite() && c1 <= c2,
                "{}: [{c1}, {c2}]",
                s.name
            );
        }
    }

    #[test]
    fn laplace_smallvalue_limit() {
        // theta^{epsilon0} psi(theta, x) -> A(psi(1)) phi0*(x), relative
        // error decreasing along theta in {1e2, 1e3, 1e4}.
        for s in [poissonic(), twosite()] {
            let (sd, ext) = spectral_for(&s);
            let coeffs = skeleton_coefficients(&s, &ext.v).unwrap();
            let psi1 = psi_eval(&s, &sd, &ext.v, 1.0).unwrap();
            let a = operator_a(&s, &sd, &coeffs, &psi1).unwrap();
            let eps0 = -sd.lambda0_star / sd.lambda0;
            let mut prev = f64::INFINITY;
            for &theta in &[1e2, 1e3, 1e4] {
                let psi = psi_eval(&s, &sd, &ext.v, theta).unwrap();
                let rel = (0..s.dim())
                    .map(|x| (theta.powf(eps0) * psi[x] / (a.value * sd.phi0_star[x]) - 1.0).abs())
                    .fold(0.0, f64::max);
                assert!(rel < prev, "{} theta={theta}: rel {rel} >= {prev}", s.name);
                prev = rel;
            }
            assert!(prev < 0.05, "{}: final relative error {prev}", s.name);
        }
    }

    #[test]
    fn cumulant_table_invariants() {
        let s = poissonic();
        let (sd, ext) = spectral_for(&s);
        let grid = [0.0, 0.5, 1.0, 5.0];
        let table = build_cumulant_table(&s, &sd, &ext.v, &grid, &[0.5, 2.0], None).unwrap();
        assert_eq!(table.l0_convention, 1.0);
        for (i, row) in table.phi.iter().enumerate() {
            for (x, &p) in row.iter().enumerate() {
                assert!(p >= -1e-12 && p <= ext.v[x] + 1e-9);
                assert!((table.psi[i][x] - (ext.v[x] - p) / ext.v[x]).abs() < 1e-6);
            }
            if i > 0 {
                for x in 0..s.dim() {
                    assert!(row[x] >= table.phi[i - 1][x] - 1e-9, "monotone in theta");
                }
            }
        }
        for row in &table.psi_complex {
            assert!(row.iter().all(|z| z.norm() <= 1.0 + 1e-9));
        }
        // Scale-limit deviation diagnostic is small at the last time.
        let last_dev = table.h_diagnostic.last().unwrap().1;
        assert!(last_dev < 1e-3, "h diagnostic {last_dev}");
    }
}
