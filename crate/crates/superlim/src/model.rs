//! Scenario definition and validation: a finite state space with a reference
//! measure, a sub-Markov motion generator, and a branching triple.
//!
//! Everything downstream (semigroups, cumulant flows, skeleton sampling)
//! consumes a validated [`Scenario`]; validation failures carry the offending
//! field so scenario files can be fixed without reading solver output.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Tolerance for the dual sub-Markov column-sum check.
pub const DUAL_SUBMARKOV_TOL: f64 = 1e-10;
/// Row sums of the rate matrix may exceed 0 by at most this before rejection.
const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read scenario file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse scenario file {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("dimension mismatch: {field} has length {got}, state space has {expected} sites")]
    DimensionMismatch {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invariant violation on {field}: {detail}")]
    Invariant { field: &'static str, detail: String },
}

/// Finite state space: `d` sites carrying the weights of the reference
/// measure `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    weights: Vec<f64>,
}

impl StateSpace {
    pub fn new(weights: Vec<f64>) -> Result<Self, ModelError> {
        if weights.is_empty() {
            return Err(ModelError::Invariant {
                field: "m",
                detail: "state space must have at least one site".into(),
            });
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(ModelError::Invariant {
                    field: "m",
                    detail: format!("weight at site {i} must be a positive real, got {w}"),
                });
            }
        }
        Ok(Self { weights })
    }

    pub fn site_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted inner product `<f, g>_m`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter()
            .zip(g)
            .zip(&self.weights)
            .map(|((a, b), w)| a * b * w)
            .sum()
    }

    /// Weighted L2 norm `||f||_{2,m}`.
    pub fn norm2(&self, f: &[f64]) -> f64 {
        self.inner(f, f).sqrt()
    }
}

/// Motion rate matrix with non-negative off-diagonal entries; any deficit in
/// a row sum is the killing rate at that site (mass sent to the cemetery).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionGenerator {
    rates: DMatrix<f64>,
    row_defect: Vec<f64>,
}

impl MotionGenerator {
    pub fn new(rates: DMatrix<f64>) -> Result<Self, ModelError> {
        let d = rates.nrows();
        if rates.ncols() != d {
            return Err(ModelError::Invariant {
                field: "Q",
                detail: format!("rate matrix must be square, got {}x{}", d, rates.ncols()),
            });
        }
        for i in 0..d {
            for j in 0..d {
                let q = rates[(i, j)];
                if !q.is_finite() {
                    return Err(ModelError::Invariant {
                        field: "Q",
                        detail: format!("non-finite entry at ({i},{j})"),
                    });
                }
                if i != j && q < 0.0 {
                    return Err(ModelError::Invariant {
                        field: "Q",
                        detail: format!("off-diagonal entry ({i},{j}) = {q} is negative"),
                    });
                }
            }
        }
        let mut row_defect = Vec::with_capacity(d);
        for i in 0..d {
            let sum: f64 = rates.row(i).iter().sum();
            if sum > ROW_SUM_TOL {
                return Err(ModelError::Invariant {
                    field: "Q",
                    detail: format!(
                        "row {i} sums to {sum} > 0; rates must be conservative or killing"
                    ),
                });
            }
            row_defect.push((-sum).max(0.0));
        }
        let gen = Self { rates, row_defect };
        if !gen.is_irreducible() {
            return Err(ModelError::Invariant {
                field: "Q",
                detail: "rate matrix is reducible: some site cannot reach some other site".into(),
            });
        }
        Ok(gen)
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn row_defect(&self) -> &[f64] {
        &self.row_defect
    }

    pub fn dim(&self) -> usize {
        self.rates.nrows()
    }

    /// Reachability of every site from every site through positive
    /// off-diagonal rates.
    fn is_irreducible(&self) -> bool {
        let d = self.dim();
        for start in 0..d {
            let mut seen = vec![false; d];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                for j in 0..d {
                    if i != j && !seen[j] && self.rates[(i, j)] > 0.0 {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            if seen.iter().any(|&s| !s) {
                return false;
            }
        }
        true
    }
}

/// One atom of the reproduction measure `n(x, .)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub r: f64,
    pub w: f64,
}

/// Analytic heavy-tail descriptor, density `c r^{-p} (log r)^{-q}` beyond
/// `cutoff`. Accepted for the L log L criterion check only, never sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailDescriptor {
    pub form: String,
    pub c: f64,
    pub power: f64,
    pub log_power: f64,
    pub cutoff: f64,
}

/// Branching triple (alpha, beta, n) with `n(x, .)` a finite atomic measure.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchingTriple {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    atoms: Vec<Vec<Atom>>,
    tail: Option<TailDescriptor>,
}

impl BranchingTriple {
    pub fn new(
        alpha: Vec<f64>,
        beta: Vec<f64>,
        atoms: Vec<Vec<Atom>>,
        tail: Option<TailDescriptor>,
    ) -> Result<Self, ModelError> {
        for (i, &a) in alpha.iter().enumerate() {
            if !a.is_finite() {
                return Err(ModelError::Invariant {
                    field: "alpha",
                    detail: format!("non-finite value at site {i}"),
                });
            }
        }
        for (i, &b) in beta.iter().enumerate() {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(ModelError::Invariant {
                    field: "beta",
                    detail: format!("beta at site {i} must be >= 0, got {b}"),
                });
            }
        }
        for (i, site_atoms) in atoms.iter().enumerate() {
            for atom in site_atoms {
                if !(atom.r > 0.0) || !atom.r.is_finite() {
                    return Err(ModelError::Invariant {
                        field: "atoms",
                        detail: format!("atom size at site {i} must be > 0, got {}", atom.r),
                    });
                }
                if !(atom.w > 0.0) || !atom.w.is_finite() {
                    return Err(ModelError::Invariant {
                        field: "atoms",
                        detail: format!("atom weight at site {i} must be > 0, got {}", atom.w),
                    });
                }
            }
        }
        if let Some(t) = &tail {
            if t.form != "log-heavy" {
                return Err(ModelError::Invariant {
                    field: "tail.form",
                    detail: format!("unknown tail form {:?}", t.form),
                });
            }
            if !(t.c > 0.0) {
                return Err(ModelError::Invariant {
                    field: "tail.c",
                    detail: format!("must be > 0, got {}", t.c),
                });
            }
            if !(t.cutoff > 1.0) {
                return Err(ModelError::Invariant {
                    field: "tail.cutoff",
                    detail: format!("mustexceed 1 so log-weights are positive, got {}", t.cutoff),
                });
            }
            if !(t.power >= 2.0) {
                return Err(ModelError::Invariant {
                    field: "tail.power",
                    detail: format!(
                        "must be >= 2 to keep the r^2 moment finite, got {}",
                        t.power
                    ),
                });
            }
        }
        Ok(Self {
            alpha,
            beta,
            atoms,
            tail,
        })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn atoms(&self) -> &[Vec<Atom>] {
        &self.atoms
    }

    pub fn tail(&self) -> Option<&TailDescriptor> {
        self.tail.as_ref()
    }
}

/// A full model instance: state space, motion, branching, initial measure.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub space: StateSpace,
    pub motion: MotionGenerator,
    pub branching: BranchingTriple,
    pub initial_measure: Vec<f64>,
}

/// Raw scenario file schema; numbers are IEEE doubles throughout.
#[derive(Debug, Serialize, Deserialize)]
struct ScenarioFile {
    name: String,
    m: Vec<f64>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    atoms: Vec<Vec<Atom>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tail: Option<TailDescriptor>,
    mu: Vec<f64>,
}

impl Scenario {
    pub fn dim(&self) -> usize {
        self.space.site_count()
    }

    /// Build and validate a scenario from its raw parts.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        name: String,
        m: Vec<f64>,
        q_rows: Vec<Vec<f64>>,
        alpha: Vec<f64>,
        beta: Vec<f64>,
        atoms: Vec<Vec<Atom>>,
        tail: Option<TailDescriptor>,
        mu: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let space = StateSpace::new(m)?;
        let d = space.site_count();
        if q_rows.len() != d || q_rows.iter().any(|r| r.len() != d) {
            return Err(ModelError::DimensionMismatch {
                field: "Q",
                got: q_rows.iter().map(|r| r.len()).max().unwrap_or(q_rows.len()),
                expected: d,
            });
        }
        let flat: Vec<f64> = q_rows.iter().flatten().copied().collect();
        let motion = MotionGenerator::new(DMatrix::from_row_slice(d, d, &flat))?;
        let check_len = |field: &'static str, len: usize| -> Result<(), ModelError> {
            if len != d {
                Err(ModelError::DimensionMismatch {
                    field,
                    got: len,
                    expected: d,
                })
            } else {
                Ok(())
            }
        };
        check_len("alpha", alpha.len())?;
        check_len("beta", beta.len())?;
        check_len("atoms", atoms.len())?;
        check_len("mu", mu.len())?;
        let branching = BranchingTriple::new(alpha, beta, atoms, tail)?;
        for (i, &v) in mu.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ModelError::Invariant {
                    field: "mu",
                    detail: format!("mass at site {i} must be >= 0, got {v}"),
                });
            }
        }
        Ok(Self {
            name,
            space,
            motion,
            branching,
            initial_measure: mu,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let d = self.dim();
        let file = ScenarioFile {
            name: self.name.clone(),
            m: self.space.weights.clone(),
            q: (0..d)
                .map(|i| (0..d).map(|j| self.motion.rates[(i, j)]).collect())
                .collect(),
            alpha: self.branching.alpha.clone(),
            beta: self.branching.beta.clone(),
            atoms: self.branching.atoms.clone(),
            tail: self.branching.tail.clone(),
            mu: self.initial_measure.clone(),
        };
        serde_json::to_value(file).expect("scenario serialization cannot fail")
    }

    /// Total mass `<v, mu>` for a given functional v.
    pub fn mu_pairing(&self, v: &[f64]) -> f64 {
        v.iter()
            .zip(&self.initial_measure)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Load a scenario from a JSON file and check all structural invariants.
pub fn load_scenario(path: &Path) -> Result<Scenario, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: ScenarioFile = serde_json::from_str(&text).map_err(|source| ModelError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::assemble(
        file.name, file.m, file.q, file.alpha, file.beta, file.atoms, file.tail, file.mu,
    )
}

/// Write a scenario back to its canonical JSON form.
pub fn save_scenario(s: &Scenario, path: &Path) -> Result<(), ModelError> {
    let text = serde_json::to_string_pretty(&s.to_json()).expect("serialization cannot fail");
    std::fs::write(path, text).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `e^{-y} - 1 + y` without cancellation: series below the cutoff, exp_m1
/// above. Direct evaluation loses all relative accuracy for small y, which
/// matters because the flows pass through amplitudes far below 1.
fn reproduction_kernel(y: f64) -> f64 {
    if y.abs() < 1e-2 {
        let c =
            1.0 - y / 3.0 * (1.0 - y / 4.0 * (1.0 - y / 5.0 * (1.0 - y / 6.0 * (1.0 - y / 7.0))));
        0.5 * y * y * c
    } else {
        (-y).exp_m1() + y
    }
}

fn reproduction_kernel_complex(y: Complex64) -> Complex64 {
    if y.norm() < 1e-2 {
        let c =
            1.0 - y / 3.0 * (1.0 - y / 4.0 * (1.0 - y / 5.0 * (1.0 - y / 6.0 * (1.0 - y / 7.0))));
        0.5 * y * y * c
    } else {
        (-y).exp() - 1.0 + y
    }
}

/// Branching mechanism phi(x, z) = -alpha z + beta z^2 + sum w (e^{-zr} - 1 + zr).
pub fn eval_phi(s: &Scenario, x: usize, z: f64) -> f64 {
    debug_assert!(z >= 0.0, "eval_phi requires z >= 0");
    let b = &s.branching;
    let mut acc = -b.alpha[x] * z + b.beta[x] * z * z;
    for atom in &b.atoms[x] {
        acc += atom.w * reproduction_kernel(z * atom.r);
    }
    acc
}

/// Complex-argument branching mechanism (principal branch of the exponential),
/// used by the characteristic-function mode.
pub fn eval_phi_complex(s: &Scenario, x: usize, z: Complex64) -> Complex64 {
    let b = &s.branching;
    let mut acc = -b.alpha[x] * z + b.beta[x] * z * z;
    for atom in &b.atoms[x] {
        acc += atom.w * reproduction_kernel_complex(z * atom.r);
    }
    acc
}

/// Derivative in z of the branching mechanism.
pub fn eval_dphi(s: &Scenario, x: usize, z: f64) -> f64 {
    let b = &s.branching;
    let mut acc = -b.alpha[x] + 2.0 * b.beta[x] * z;
    for atom in &b.atoms[x] {
        acc -= atom.w * atom.r * (-z * atom.r).exp_m1();
    }
    acc
}

/// The bound constant of the branching triple:
/// `M = max_x (|alpha| + beta + sum_k w_k (r_k /\ r_k^2))`.
pub fn m_bound(s: &Scenario) -> f64 {
    (0..s.dim())
        .map(|x| {
            let b = &s.branching;
            let atom_part: f64 = b.atoms[x].iter().map(|a| a.w * a.r.min(a.r * a.r)).sum();
            b.alpha[x].abs() + b.beta[x] + atom_part
        })
        .fold(0.0, f64::max)
}

/// Structural assumption report. Failures are recorded, never thrown;
/// downstream solvers refuse to run on a failed report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub m_bound: f64,
    pub dual_submarkov_ok: bool,
    /// Value of the squared-density integral at t = 1 (always finite here).
    pub square_integral_t1: f64,
    pub square_integrable_ok: bool,
    /// Finite-dimensional semigroups are intrinsically ultracontractive by
    /// inspection; reported rather than assumed.
    pub iu_checkable: bool,
    /// Filled in once the spectral solve has run.
    pub lambda0_positive: Option<bool>,
    pub extinction_proxy_ok: bool,
    /// Continuity requirements with no finite-dimensional content are
    /// recorded as vacuously true.
    pub continuity_vacuous: bool,
    pub failures: Vec<String>,
}

impl AssumptionReport {
    pub fn all_ok(&self) -> bool {
        self.dual_submarkov_ok
            && self.square_integrable_ok
            && self.extinction_proxy_ok
            && self.lambda0_positive.unwrap_or(true)
    }

    pub fn with_lambda0(mut self, lambda0: f64) -> Self {
        let ok = lambda0 > 0.0;
        self.lambda0_positive = Some(ok);
        if !ok {
            self.failures.push(format!(
                "growth-rate assumption fails: lambda0 = {lambda0} <= 0"
            ));
        }
        self
    }
}

/// Check the model assumptions that do not need a spectral solve.
///
/// The dual sub-Markov property is checked at t in {0.5, 1, 2} with
/// tolerance 1e-10 on the weighted column sums of `exp(tQ)`.
pub fn validate_assumptions(s: &Scenario) -> AssumptionReport {
    let d = s.dim();
    let m = s.space.weights();
    let mut failures = Vec::new();

    let mb = m_bound(s);

    let mut dual_ok = true;
    for &t in &[0.5_f64, 1.0, 2.0] {
        let p = (s.motion.rates() * t).exp();
        for y in 0..d {
            let col: f64 = (0..d).map(|x| m[x] * p[(x, y)]).sum();
            if col > m[y] * (1.0 + DUAL_SUBMARKOV_TOL) {
                dual_ok = false;
                failures.push(format!(
                    "dual sub-Markov check fails at t={t}, site {y}: weighted column sum {col} > {}",
                    m[y]
                ));
            }
        }
    }

    // Integral of p(1,x,y)^2 over m x m; finite by construction, reported.
    let p1 = s.motion.rates().exp();
    let mut sq = 0.0;
    for x in 0..d {
        for y in 0..d {
            let dens = p1[(x, y)] / m[y];
            sq += dens * dens * m[x] * m[y];
        }
    }
    let square_ok = sq.is_finite();
    if !square_ok {
        failures.push(format!(
            "squared-density integral at t=1 is not finite: {sq}"
        ));
    }

    let mut proxy_ok = true;
    for x in 0..d {
        if s.branching.beta[x] <= 0.0 && s.branching.atoms[x].is_empty() {
            proxy_ok = false;
            failures.push(format!(
                "extinction proxy fails at site {x}: beta = 0 and no reproduction atoms"
            ));
        }
    }

    AssumptionReport {
        m_bound: mb,
        dual_submarkov_ok: dual_ok,
        square_integral_t1: sq,
        square_integrable_ok: square_ok,
        iu_checkable: true,
        lambda0_positive: None,
        extinction_proxy_ok: proxy_ok,
        continuity_vacuous: true,
        failures,
    }
}
