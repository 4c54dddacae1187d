//! Mean and twisted matrix semigroups with their leading eigendata.
//!
//! The mean semigroup is `exp(t(Q + diag(alpha)))`; the twisted one replaces
//! the growth potential by the derivative of the branching mechanism at the
//! extinction functional and has a strictly negative leading eigenvalue.
//! Leading eigenpairs come from power iteration on the matrix exponential
//! (strictly positive for an irreducible generator) polished by inverse
//! iteration. Ultracontractivity constants are fitted, not derived.

use crate::model::{eval_dphi, Scenario};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Residual demanded of both eigen-solves.
pub const EIGEN_RESIDUAL_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error(
        "power iteration failed to converge: residual {residual} after {iterations} iterations"
    )]
    NonConvergence { residual: f64, iterations: usize },
    #[error("extinction functional must be strictly positive, got {value} at site {site}")]
    NonPositiveInput { site: usize, value: f64 },
    #[error(
        "model inconsistency: twisted eigenvalue {lambda0_star} is not negative; \
         the extinction solve it was built from is suspect"
    )]
    TwistedEigenvalueSign { lambda0_star: f64 },
}

/// One fitted ultracontractivity envelope; `gamma` is absent when the
/// rank-one projection is exact and no envelope is needed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IuFitRecord {
    pub delta: f64,
    pub c: f64,
    pub gamma: Option<f64>,
}

/// Leading eigendata of the mean and twisted semigroups plus fitted
/// ultracontractivity constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralData {
    pub lambda0: f64,
    pub phi0: Vec<f64>,
    pub psi0: Vec<f64>,
    pub lambda0_star: f64,
    pub phi0_star: Vec<f64>,
    pub psi0_star: Vec<f64>,
    pub iu_fit: Vec<IuFitRecord>,
}

impl SpectralData {
    /// Full spectral solve at a given extinction functional: both leading
    /// eigentriples plus ultracontractivity fits at a few grid offsets.
    pub fn compute(s: &Scenario, v: &[f64]) -> Result<Self, SpectralError> {
        let (lambda0, phi0, psi0) = eigentriple_t(s)?;
        let (lambda0_star, phi0_star, psi0_star) = eigentriple_star(s, v)?;
        let mut fits = Vec::new();
        for &delta in &[0.5, 1.0] {
            let fit = iu_fit(s, delta)?;
            fits.push(IuFitRecord {
                delta,
                c: fit.c,
                gamma: fit.gamma.is_finite().then_some(fit.gamma),
            });
        }
        Ok(Self {
            lambda0,
            phi0,
            psi0,
            lambda0_star,
            phi0_star,
            psi0_star,
            iu_fit: fits,
        })
    }
}

/// Generator of the mean semigroup: `Q + diag(alpha)`.
pub fn mean_generator(s: &Scenario) -> DMatrix<f64> {
    let mut a = s.motion.rates().clone();
    for (x, &alpha) in s.branching.alpha().iter().enumerate() {
        a[(x, x)] += alpha;
    }
    a
}

/// Generator of the twisted semigroup: `Q - diag(dphi(., v))`.
pub fn twisted_generator(s: &Scenario, v: &[f64]) -> DMatrix<f64> {
    let mut a = s.motion.rates().clone();
    for x in 0..s.dim() {
        a[(x, x)] -= eval_dphi(s, x, v[x]);
    }
    a
}

/// Mean semigroup matrix `T_t = exp(t(Q + diag(alpha)))`, acting on
/// functions: `(T_t f)(x) = sum_y T[(x,y)] f(y)`.
pub fn semigroup_t(s: &Scenario, t: f64) -> DMatrix<f64> {
    debug_assert!(t >= 0.0);
    (mean_generator(s) * t).exp()
}

/// Density of the mean semigroup against the site weights:
/// `q(t,x,y) = T_t[(x,y)] / m(y)`.
pub fn semigroup_density(s: &Scenario, t: f64) -> DMatrix<f64> {
    let mut q = semigroup_t(s, t);
    let m = s.space.weights();
    for x in 0..s.dim() {
        for y in 0..s.dim() {
            q[(x, y)] /= m[y];
        }
    }
    q
}

/// Leading eigenpair (value, right eigenvector, left eigenvector) of an
/// essentially non-negative irreducible matrix.
///
/// Power iteration runs on `exp(G)`, whose entries are strictly positive, so
/// it converges to the Perron pair from the all-ones seed; the pair is then
/// polished by inverse iteration on `G` itself until the residual is below
/// [`EIGEN_RESIDUAL_TOL`]. Vectors are returned unnormalized.
fn perron_pair(g: &DMatrix<f64>) -> Result<(f64, DVector<f64>, DVector<f64>), SpectralError> {
    let d = g.nrows();
    let expg = g.exp();
    let mut right = power_iterate(&expg)?;
    let mut left = power_iterate(&expg.transpose())?;
    // Eigenvalue of G from the converged direction.
    let gr = g * &right;
    let mut lambda = gr.dot(&right) / right.dot(&right);
    // Inverse-iteration polish with a slightly shifted solve.
    for _ in 0..60 {
        let res_r = residual(g, lambda, &right);
        let res_l = residual(&g.transpose(), lambda, &left);
        if res_r < EIGEN_RESIDUAL_TOL / 10.0 && res_l < EIGEN_RESIDUAL_TOL / 10.0 {
            break;
        }
        let shift = lambda + 1e-9;
        let shifted = g - DMatrix::identity(d, d) * shift;
        let lu = shifted.clone().lu();
        if let Some(next) = lu.solve(&right) {
            right = &next / next.amax();
        }
        let lu_t = shifted.transpose().lu();
        if let Some(next) = lu_t.solve(&left) {
            left = &next / next.amax();
        }
        let gr = g * &right;
        lambda = gr.dot(&right) / right.dot(&right);
    }
    let res = residual(g, lambda, &right).max(residual(&g.transpose(), lambda, &left));
    if res > EIGEN_RESIDUAL_TOL {
        return Err(SpectralError::NonConvergence {
            residual: res,
            iterations: 60,
        });
    }
    Ok((lambda, right, left))
}

fn power_iterate(b: &DMatrix<f64>) -> Result<DVector<f64>, SpectralError> {
    let d = b.nrows();
    let mut x = DVector::from_element(d, 1.0);
    let mut last = x.clone();
    for it in 0..20_000 {
        x = b * &x;
        let norm = x.amax();
        if norm == 0.0 || !norm.is_finite() {
            return Err(SpectralError::NonConvergence {
                residual: f64::INFINITY,
                iterations: it,
            });
        }
        x /= norm;
        if (&x - &last).amax() < 1e-13 {
            return Ok(x);
        }
        last = x.clone();
    }
    Ok(x)
}

fn residual(g: &DMatrix<f64>, lambda: f64, x: &DVector<f64>) -> f64 {
    let scale = x.amax();
    ((g * x) - x * lambda).amax() / scale
}

/// Leading eigentriple of the mean semigroup generator, normalized as
/// `||phi0||_{2,m} = 1`, `<phi0, psi0>_m = 1`, first entries positive.
pub fn eigentriple_t(s: &Scenario) -> Result<(f64, Vec<f64>, Vec<f64>), SpectralError> {
    let g = mean_generator(s);
    let (lambda, right, left_raw) = perron_pair(&g)?;
    let m = s.space.weights();
    // The dual generator in the weighted space is D_m^{-1} G^T D_m, so its
    // eigenvector is the plain left eigenvector divided by the weights.
    let mut phi0: Vec<f64> = right.iter().copied().collect();
    let mut psi0: Vec<f64> = left_raw.iter().zip(m).map(|(l, w)| l / w).collect();
    fix_sign(&mut phi0);
    fix_sign(&mut psi0);
    let nrm = s.space.norm2(&phi0);
    for p in &mut phi0 {
        *p /= nrm;
    }
    let pairing = s.space.inner(&phi0, &psi0);
    for p in &mut psi0 {
        *p /= pairing;
    }
    Ok((lambda, phi0, psi0))
}

fn fix_sign(x: &mut [f64]) {
    if x[0] < 0.0 {
        for xi in x {
            *xi = -*xi;
        }
    }
}

/// Leading eigentriple of the twisted semigroup.
///
/// Returns `(lambda0_star, phi0_star, psi0_star)` where the starred vectors
/// are the v-transformed eigenvectors with `<phi0_star, psi0_star>_m = 1`.
/// Fails if the eigenvalue comes out non-negative, which contradicts the
/// model and indicates a bad extinction solve.
pub fn eigentriple_star(
    s: &Scenario,
    v: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>), SpectralError> {
    for (site, &vx) in v.iter().enumerate() {
        if !(vx > 0.0) {
            return Err(SpectralError::NonPositiveInput { site, value: vx });
        }
    }
    let g = twisted_generator(s, v);
    let (lambda_star, right, left_raw) = perron_pair(&g)?;
    if lambda_star >= 0.0 {
        return Err(SpectralError::TwistedEigenvalueSign {
            lambda0_star: lambda_star,
        });
    }
    let m = s.space.weights();
    let mut phi_bar: Vec<f64> = right.iter().copied().collect();
    let mut psi_bar: Vec<f64> = left_raw.iter().zip(m).map(|(l, w)| l / w).collect();
    fix_sign(&mut phi_bar);
    fix_sign(&mut psi_bar);
    let nrm = s.space.norm2(&phi_bar);
    for p in &mut phi_bar {
        *p /= nrm;
    }
    let pairing = s.space.inner(&phi_bar, &psi_bar);
    for p in &mut psi_bar {
        *p /= pairing;
    }
    let phi0_star: Vec<f64> = phi_bar.iter().zip(v).map(|(p, vx)| p / vx).collect();
    let psi0_star: Vec<f64> = psi_bar.iter().zip(v).map(|(p, vx)| p * vx).collect();
    Ok((lambda_star, phi0_star, psi0_star))
}

/// Twisted semigroup matrix `T_t^* = D_v^{-1} exp(t(Q - diag(dphi(., v)))) D_v`.
pub fn semigroup_t_star(s: &Scenario, v: &[f64], t: f64) -> DMatrix<f64> {
    let mut e = (twisted_generator(s, v) * t).exp();
    for x in 0..s.dim() {
        for y in 0..s.dim() {
            e[(x, y)] *= v[y] / v[x];
        }
    }
    e
}

/// Outcome of the ultracontractivity fit: the exponential envelope
/// `ratio(t) <= c e^{-gamma t}` on the fitted grid.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IuFit {
    pub c: f64,
    pub gamma: f64,
}

impl IuFit {
    pub fn is_exact(&self) -> bool {
        self.c == 0.0 && self.gamma.is_infinite()
    }
}

/// Fit the deviation of the rescaled semigroup density from its rank-one
/// projection: least squares of `log max_{x,y} |e^{-lambda0 t} q(t,x,y) /
/// (phi0(x) psi0(y)) - 1|` against `log c - gamma t` over `t` in
/// `[delta, delta + 10]`.
///
/// Grid points already at the floating-point noise floor are excluded; if
/// every point is (the rank-one projection is exact, as in one dimension)
/// the sentinel `(0, +inf)` is returned. The returned `c` is inflated so the
/// envelope holds at every fitted grid point.
pub fn iu_fit(s: &Scenario, delta: f64) -> Result<IuFit, SpectralError> {
    let (lambda0, phi0, psi0) = eigentriple_t(s)?;
    let g = mean_generator(s);
    Ok(fit_projection_envelope(s, &g, lambda0, &phi0, &psi0, delta))
}

/// Same fit for the twisted semigroup; used by the decay-bound checks.
pub fn iu_fit_star(s: &Scenario, v: &[f64], delta: f64) -> Result<IuFit, SpectralError> {
    let (lambda_star, phi0_star, psi0_star) = eigentriple_star(s, v)?;
    let g = twisted_generator(s, v);
    // The ratio is unchanged by the v-transform, so fit on the raw generator
    // with the untransformed eigenvectors.
    let phi_bar: Vec<f64> = phi0_star.iter().zip(v).map(|(p, vx)| p * vx).collect();
    let psi_bar: Vec<f64> = psi0_star.iter().zip(v).map(|(p, vx)| p / vx).collect();
    Ok(fit_projection_envelope(
        s,
        &g,
        lambda_star,
        &phi_bar,
        &psi_bar,
        delta,
    ))
}

const NOISE_FLOOR: f64 = 1e-8;

fn fit_projection_envelope(
    s: &Scenario,
    g: &DMatrix<f64>,
    lambda: f64,
    phi: &[f64],
    psi: &[f64],
    delta: f64,
) -> IuFit {
    let d = s.dim();
    let m = s.space.weights();
    let grid: Vec<f64> = (0..41).map(|i| delta + 0.25 * i as f64).collect();
    let mut points = Vec::new();
    for &t in &grid {
        let e = (g * t).exp();
        let mut ratio: f64 = 0.0;
        for x in 0..d {
            for y in 0..d {
                let q = e[(x, y)] / m[y];
                let dev = ((-lambda * t).exp() * q / (phi[x] * psi[y]) - 1.0).abs();
                ratio = ratio.max(dev);
            }
        }
        if ratio > NOISE_FLOOR {
            points.push((t, ratio.ln()));
        }
    }
    if points.len() < 2 {
        return IuFit {
            c: 0.0,
            gamma: f64::INFINITY,
        };
    }
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let gamma = -slope;
    let mut c = intercept.exp();
    // Inflate c until the envelope covers every fitted point.
    for &(t, log_ratio) in &points {
        let bound = c * (-gamma * t).exp();
        let ratio = log_ratio.exp();
        if ratio > bound {
            c *= ratio / bound;
        }
    }
    IuFit { c, gamma }
}
