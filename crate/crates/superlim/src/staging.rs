//! Exact stage-wise sampler for single-site particle counts.
//!
//! Per-particle event simulation costs one event per birth, which is
//! prohibitive at horizons where the expected population reaches millions.
//! For a single site the population at the horizon can be sampled exactly
//! without touching individual events: split the horizon into stages of
//! length at most 1, tabulate the probability mass function of the
//! one-particle count at a stage boundary from its generating function (the
//! unit-band flow evaluated at roots of unity, inverted with an FFT), and
//! advance a population of `n` particles through a stage by decomposing the
//! sum of `n` independent one-particle counts into sequential binomial
//! draws. A stage transition costs a few dozen binomials however large `n`
//! is, and the law of the horizon population is identical to the
//! event-driven construction.

use crate::cumulant::CumulantError;
use crate::model::Scenario;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rustfft::FftPlanner;
use thiserror::Error;

/// Number of generating-function samples per stage table; bounds the
/// representable one-particle count per stage.
const PGF_SAMPLES: usize = 1024;
/// Mass beyond the truncation folded into the last table entry.
const TABLE_TRUNCATION: f64 = 1e-14;
/// Populations at or below this are advanced by direct inverse-CDF draws.
const SMALL_POPULATION: u64 = 32;

#[derive(Debug, Error)]
pub enum StagingError {
    #[error("stage sampler requires a single-site scenario, got {dim} sites")]
    NotSingleSite { dim: usize },
    #[error("population overflow: count exceeded {cap} before the horizon")]
    PopulationOverflow { cap: u64 },
    #[error("stage table is not a probability distribution: {detail}")]
    BadTable { detail: String },
    #[error(transparent)]
    Cumulant(#[from] CumulantError),
}

/// Tabulated one-particle count distribution over one stage, plus the
/// machinery to advance whole populations.
#[derive(Debug, Clone)]
pub struct StageSampler {
    /// `probs[k]` is the probability of count `k + 1` after one stage.
    probs: Vec<f64>,
    cumulative: Vec<f64>,
    pub stage_length: f64,
    pub stages: usize,
    /// Guard against runaway populations (u64 arithmetic headroom).
    pub population_cap: u64,
}

impl StageSampler {
    /// Build the sampler for one-particle evolution over `horizon`, split
    /// into equal stages of length at most 1.
    pub fn build(s: &Scenario, v: &[f64], horizon: f64) -> Result<Self, StagingError> {
        if s.dim() != 1 {
            return Err(StagingError::NotSingleSite { dim: s.dim() });
        }
        let stages = (horizon.ceil() as usize).max(1);
        let stage_length = horizon / stages as f64;

        // Generating function of the one-particle count at the stage end,
        // evaluated at the K-th roots of unity in one batched flow.
        let k = PGF_SAMPLES;
        let grid: Vec<Complex64> = (0..k)
            .map(|j| {
                let angle = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                Complex64::new(angle.cos(), angle.sin())
            })
            .collect();
        let pgf = batched_scalar_band_flow(s, v, &grid, stage_length)?;

        // p_n = (1/K) sum_j pgf(w^j) w^{-jn}: a forward FFT.
        let mut buf = pgf;
        FftPlanner::new().plan_fft_forward(k).process(&mut buf);
        let raw: Vec<f64> = buf.iter().map(|z| z.re / k as f64).collect();

        if raw[0].abs() > 1e-9 {
            return Err(StagingError::BadTable {
                detail: format!("extinction mass {} should vanish", raw[0]),
            });
        }
        // Counts start at 1; truncate once the remaining mass is negligible
        // and fold it into the last retained entry.
        let mut probs = Vec::new();
        let mut cum = 0.0;
        for &p in raw.iter().skip(1) {
            let p = p.max(0.0);
            probs.push(p);
            cum += p;
            if 1.0 - cum < TABLE_TRUNCATION && probs.len() > 1 {
                break;
            }
        }
        if (1.0 - cum).abs() > 1e-6 {
            return Err(StagingError::BadTable {
                detail: format!("table mass {cum} too far from 1"),
            });
        }
        *probs.last_mut().expect("non-empty table") += 1.0 - cum;
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Ok(Self {
            probs,
            cumulative,
            stage_length,
            stages,
            population_cap: 1 << 40,
        })
    }

    /// One-particle count pmf over a stage; index 0 is count 1.
    pub fn stage_pmf(&self) -> &[f64] {
        &self.probs
    }

    /// Draw one single-particle stage count.
    fn draw_one<R: Rng>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&u).expect("finite cdf"))
        {
            Ok(i) | Err(i) => (i + 1) as u64,
        }
    }

    /// Advance a population of `n` independent particles through one stage.
    fn stage_transition<R: Rng>(&self, n: u64, rng: &mut R) -> Result<u64, StagingError> {
        if n == 0 {
            return Ok(0);
        }
        if n <= SMALL_POPULATION {
            let mut total = 0u64;
            for _ in 0..n {
                total += self.draw_one(rng);
            }
            return Ok(total);
        }
        // Sequential binomial decomposition of the multinomial over counts.
        let mut total = 0u64;
        let mut remaining = n;
        let mut mass_left = 1.0f64;
        for (i, &p) in self.probs.iter().enumerate() {
            if remaining == 0 {
                break;
            }
            let is_last = i + 1 == self.probs.len();
            let ratio = if is_last {
                1.0
            } else {
                (p / mass_left).clamp(0.0, 1.0)
            };
            let hits = if is_last {
                remaining
            } else {
                Binomial::new(remaining, ratio)
                    .expect("ratio in [0,1]")
                    .sample(rng)
            };
            total += hits * (i as u64 + 1);
            remaining -= hits;
            mass_left -= p;
            if mass_left <= 0.0 && remaining > 0 {
                total += remaining * (i as u64 + 1);
                remaining = 0;
            }
        }
        if total > self.population_cap {
            return Err(StagingError::PopulationOverflow {
                cap: self.population_cap,
            });
        }
        Ok(total)
    }

    /// Sample the population at the horizon from `n0` initial particles.
    pub fn sample_population<R: Rng>(&self, n0: u64, rng: &mut R) -> Result<u64, StagingError> {
        let mut n = n0;
        for _ in 0..self.stages {
            n = self.stage_transition(n, rng)?;
        }
        Ok(n)
    }
}

/// Integrate `K` independent copies of the scalar unit-band flow with
/// initial values `grid`, in a single vector solve.
fn batched_scalar_band_flow(
    s: &Scenario,
    v: &[f64],
    grid: &[Complex64],
    t: f64,
) -> Result<Vec<Complex64>, StagingError> {
    // Independent components are a d=1 band flow each; reuse the flow by
    // chunking to keep memory modest while amortizing stepping.
    let mut out = Vec::with_capacity(grid.len());
    for chunk in grid.chunks(256) {
        let result = batched_chunk(s, v, chunk, t)?;
        out.extend(result);
    }
    Ok(out)
}

fn batched_chunk(
    s: &Scenario,
    v: &[f64],
    chunk: &[Complex64],
    t: f64,
) -> Result<Vec<Complex64>, StagingError> {
    use crate::ode::{integrate_to, OdeOptions};
    let q00 = s.motion.rates()[(0, 0)];
    let v0 = v[0];
    let field = move |_t: f64, w: &[Complex64], dw: &mut [Complex64]| {
        for (i, &wi) in w.iter().enumerate() {
            let u = v0 * (Complex64::new(1.0, 0.0) - wi);
            dw[i] = (crate::model::eval_phi_complex(s, 0, u) - q00 * u) / v0;
        }
    };
    let out =
        integrate_to(&field, 0.0, chunk, t, &OdeOptions::default()).map_err(CumulantError::from)?;
    let excess = out.iter().map(|z| z.norm() - 1.0).fold(0.0, f64::max);
    if excess > 1e-8 {
        return Err(StagingError::BadTable {
            detail: format!("generating-function modulus exceeded 1 by {excess}"),
        });
    }
    Ok(out)
}
