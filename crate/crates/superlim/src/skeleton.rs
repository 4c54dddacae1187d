//! The embedded branching particle system and the samplers built on it.
//!
//! Particles move with the conservative transformed generator, branch at
//! site-dependent rates into at least two offspring, and never die. The
//! strong limit `W` is sampled through its compound Poisson representation:
//! a Poisson number of ancestors, each contributing an independent copy of
//! the skeleton limit, realized at a finite horizon. Two equal-in-law
//! backends produce the horizon values: exact event-driven simulation (any
//! dimension) and the stage-wise count sampler (single site, constant cost
//! per draw regardless of the population).

use crate::cumulant::{CumulantError, ExtinctionData, SkeletonCoefficients};
use crate::model::Scenario;
use crate::rng::par_replicates;
use crate::spectral::SpectralData;
use crate::staging::{StageSampler, StagingError};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

/// Default particle cap for event-driven runs.
pub const DEFAULT_POPULATION_CAP: usize = 10_000_000;
/// Conservativity defect accepted when building the transformed generator.
pub const CONSERVATIVITY_TOL: f64 = 1e-8;
/// Mass-defect threshold signalling convolution aliasing.
pub const DENSITY_MASS_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error(
        "transformed generator is not conservative (defect {defect:.3e}); \
         the extinction functional it was built from is inconsistent"
    )]
    Conservativity { defect: f64 },
    #[error(
        "population cap {cap} exceeded at time {time:.3}; rerun with a smaller horizon \
         or a larger cap"
    )]
    PopulationCap { cap: usize, time: f64 },
    #[error("initial measure must not be identically zero for limit sampling")]
    ZeroMeasure,
    #[error("density grid too coarse: convolution mass defect {defect:.3e} exceeds {DENSITY_MASS_TOL:.0e}")]
    GridAliasing { defect: f64 },
    #[error(transparent)]
    Staging(#[from] StagingError),
    #[error(transparent)]
    Cumulant(#[from] CumulantError),
    #[error("batch file {path}: {detail}")]
    BatchFile { path: String, detail: String },
}

/// The particle system's static data: transformed motion, branching rates,
/// offspring tables, and cached normalization.
#[derive(Debug, Clone)]
pub struct SkeletonModel {
    pub scenario_name: String,
    pub qbar: DMatrix<f64>,
    pub b: Vec<f64>,
    /// Cumulative offspring table per site; entry `i` covers count `i + 2`.
    pub offspring_cdf: Vec<Vec<f64>>,
    pub lambda0: f64,
    pub phi0_over_v: Vec<f64>,
    pub conservativity_defect: f64,
    /// Total jump rate per site (`-qbar` diagonal).
    jump_rate: Vec<f64>,
    /// Cumulative jump target table per site.
    jump_targets: Vec<Vec<(usize, f64)>>,
}

/// Build the skeleton from the solved extinction functional: the motion is
/// the v-transform `Qbar f = v^{-1}[Q(vf) - f Qv]`, conservative up to the
/// quality of the extinction solve.
pub fn build_skeleton(
    s: &Scenario,
    ext: &ExtinctionData,
    coeffs: &SkeletonCoefficients,
    sd: &SpectralData,
) -> Result<SkeletonModel, SkeletonError> {
    let d = s.dim();
    let v = &ext.v;
    let qbar = crate::cumulant::transformed_motion_generator(s, v);
    let mut defect = 0.0_f64;
    for x in 0..d {
        let row: f64 = (0..d).map(|y| qbar[(x, y)]).sum();
        defect = defect.max(row.abs());
    }
    if defect > CONSERVATIVITY_TOL {
        return Err(SkeletonError::Conservativity { defect });
    }

    let mut offspring_cdf = Vec::with_capacity(d);
    for probs in &coeffs.offspring {
        let mut acc = 0.0;
        let mut cdf = Vec::with_capacity(probs.len());
        for &p in probs {
            acc += p;
            cdf.push(acc);
        }
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        offspring_cdf.push(cdf);
    }
    let mut jump_rate = Vec::with_capacity(d);
    let mut jump_targets = Vec::with_capacity(d);
    for x in 0..d {
        let rate = -qbar[(x, x)];
        jump_rate.push(rate.max(0.0));
        let mut acc = 0.0;
        let mut targets = Vec::new();
        if rate > 0.0 {
            for y in 0..d {
                if y != x && qbar[(x, y)] > 0.0 {
                    acc += qbar[(x, y)] / rate;
                    targets.push((y, acc));
                }
            }
            if let Some(last) = targets.last_mut() {
                last.1 = 1.0;
            }
        }
        jump_targets.push(targets);
    }
    let phi0_over_v: Vec<f64> = sd.phi0.iter().zip(v).map(|(p, vx)| p / vx).collect();
    Ok(SkeletonModel {
        scenario_name: s.name.clone(),
        qbar,
        b: coeffs.b.clone(),
        offspring_cdf,
        lambda0: sd.lambda0,
        phi0_over_v,
        conservativity_defect: defect,
        jump_rate,
        jump_targets,
    })
}

/// One particle: current site and birth time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub site: usize,
    pub birth_time: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Event {
    Jump {
        time: f64,
        from: usize,
        to: usize,
    },
    Branch {
        time: f64,
        site: usize,
        count: usize,
    },
}

/// State of one simulated skeleton realization.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    pub time: f64,
    pub particles: Vec<Particle>,
    pub event_log: Option<Vec<Event>>,
}

impl ParticleSystem {
    pub fn counts(&self, d: usize) -> Vec<u64> {
        let mut counts = vec![0u64; d];
        for p in &self.particles {
            counts[p.site] += 1;
        }
        counts
    }

    /// Normalized limit functional at the system's horizon.
    pub fn wz_value(&self, model: &SkeletonModel) -> f64 {
        let weight: f64 = self
            .particles
            .iter()
            .map(|p| model.phi0_over_v[p.site])
            .sum();
        (-model.lambda0 * self.time).exp() * weight
    }
}

/// Inverse-CDF offspring draw; counts start at 2. Deterministic given the
/// generator state.
pub fn sample_offspring<R: Rng>(model: &SkeletonModel, x: usize, rng: &mut R) -> usize {
    let cdf = &model.offspring_cdf[x];
    let u: f64 = rng.random();
    for (i, &c) in cdf.iter().enumerate() {
        if u <= c {
            return i + 2;
        }
    }
    cdf.len() + 1
}

#[derive(Debug, Clone, Copy)]
pub struct SimulateOptions {
    pub population_cap: usize,
    pub record_events: bool,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            population_cap: DEFAULT_POPULATION_CAP,
            record_events: false,
        }
    }
}

/// Event-driven simulation from a single ancestor: each particle carries
/// independent exponential jump and branch clocks, realized through
/// site-aggregated rates. Exact in distribution; no time discretization.
pub fn simulate_skeleton<R: Rng>(
    model: &SkeletonModel,
    x0: usize,
    horizon: f64,
    rng: &mut R,
    opts: &SimulateOptions,
) -> Result<ParticleSystem, SkeletonError> {
    let d = model.phi0_over_v.len();
    let mut particles = vec![Particle {
        site: x0,
        birth_time: 0.0,
    }];
    let mut by_site: Vec<Vec<usize>> = vec![Vec::new(); d];
    by_site[x0].push(0);
    let mut counts = vec![0u64; d];
    counts[x0] = 1;
    let mut log = opts.record_events.then(Vec::new);
    let mut t = 0.0;

    loop {
        let total_rate: f64 = (0..d)
            .map(|x| counts[x] as f64 * (model.jump_rate[x] + model.b[x]))
            .sum();
        if total_rate <= 0.0 {
            break;
        }
        t += Exp::new(total_rate).expect("positive rate").sample(rng);
        if t > horizon {
            break;
        }
        // Select the site of the event.
        let mut pick: f64 = rng.random::<f64>() * total_rate;
        let mut site = d - 1;
        for x in 0..d {
            let r = counts[x] as f64 * (model.jump_rate[x] + model.b[x]);
            if pick < r {
                site = x;
                break;
            }
            pick -= r;
        }
        let branch = rng.random::<f64>() * (model.jump_rate[site] + model.b[site]) < model.b[site];
        let pos = rng.random_range(0..by_site[site].len());
        let idx = by_site[site][pos];
        if branch {
            let n_off = sample_offspring(model, site, rng);
            // Parent slot becomes the first offspring.
            particles[idx].birth_time = t;
            for _ in 1..n_off {
                particles.push(Particle {
                    site,
                    birth_time: t,
                });
                by_site[site].push(particles.len() - 1);
            }
            counts[site] += (n_off - 1) as u64;
            if particles.len() > opts.population_cap {
                return Err(SkeletonError::PopulationCap {
                    cap: opts.population_cap,
                    time: t,
                });
            }
            if let Some(log) = &mut log {
                log.push(Event::Branch {
                    time: t,
                    site,
                    count: n_off,
                });
            }
        } else {
            let u: f64 = rng.random();
            let targets = &model.jump_targets[site];
            let mut to = targets.last().map(|p| p.0).unwrap_or(site);
            for &(y, c) in targets {
                if u <= c {
                    to = y;
                    break;
                }
            }
            by_site[site].swap_remove(pos);
            by_site[to].push(idx);
            particles[idx].site = to;
            counts[site] -= 1;
            counts[to] += 1;
            if let Some(log) = &mut log {
                log.push(Event::Jump {
                    time: t,
                    from: site,
                    to,
                });
            }
        }
    }
    Ok(ParticleSystem {
        time: horizon,
        particles,
        event_log: log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Wz,
    Y,
    W,
}

/// A batch of seeded Monte Carlo draws with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleBatch {
    pub scenario_name: String,
    pub kind: BatchKind,
    pub horizon_t: f64,
    pub seed: u64,
    pub values: Vec<f64>,
    /// Ancestor site per draw (single-ancestor kinds).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ancestor_sites: Option<Vec<u32>>,
    /// Ancestor count per draw (compound kind).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ancestor_counts: Option<Vec<u32>>,
}

/// Which sampling backend realizes the horizon values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// Stage-wise exact count sampling; single-site scenarios only.
    Staged,
    /// Per-particle event simulation.
    EventDriven,
    /// Staged when the scenario is single-site, events otherwise.
    Auto,
}

fn resolve_backend(backend: Backend, d: usize) -> Backend {
    match backend {
        Backend::Auto => {
            if d == 1 {
                Backend::Staged
            } else {
                Backend::EventDriven
            }
        }
        other => other,
    }
}

/// Sample the normalized skeleton limit `e^{-lambda0 T} <phi0/v, Z_T>` from
/// a fixed ancestor site.
///
/// The batch realizes the horizon-T functional, not the limit itself; the
/// replacement bias scales like `e^{-lambda0 T}`, so limit-quality batches
/// need `e^{-lambda0 T} < 1e-5`. Shorter horizons remain exact in
/// distribution for the horizon functional and are fine for moment checks.
pub fn sample_wz(
    s: &Scenario,
    ext: &ExtinctionData,
    coeffs: &SkeletonCoefficients,
    sd: &SpectralData,
    x0: usize,
    horizon: f64,
    seed: u64,
    n_samples: usize,
    backend: Backend,
) -> Result<SampleBatch, SkeletonError> {
    let model = build_skeleton(s, ext, coeffs, sd)?;
    let d = s.dim();
    let values = match resolve_backend(backend, d) {
        Backend::Staged => {
            let sampler = StageSampler::build(s, &ext.v, horizon)?;
            let scale = (-sd.lambda0 * horizon).exp() * model.phi0_over_v[0];
            let draws = par_replicates(seed, n_samples, |_i, rng| {
                sampler.sample_population(1, rng).map(|z| scale * z as f64)
            });
            draws.into_iter().collect::<Result<Vec<_>, _>>()?
        }
        _ => {
            let opts = SimulateOptions::default();
            let draws = par_replicates(seed, n_samples, |_i, rng| {
                simulate_skeleton(&model, x0, horizon, rng, &opts).map(|ps| ps.wz_value(&model))
            });
            draws.into_iter().collect::<Result<Vec<_>, _>>()?
        }
    };
    Ok(SampleBatch {
        scenario_name: s.name.clone(),
        kind: BatchKind::Wz,
        horizon_t: horizon,
        seed,
        values,
        // Fixed ancestor: a single entry stands for every draw.
        ancestor_sites: Some(vec![x0 as u32]),
        ancestor_counts: None,
    })
}

/// Ancestor-site distribution of the compound representation:
/// `P(site = x) = v(x) mu(x) / <v, mu>`.
fn ancestor_cdf(v: &[f64], mu: &[f64]) -> (f64, Vec<f64>) {
    let total: f64 = v.iter().zip(mu).map(|(a, b)| a * b).sum();
    let mut acc = 0.0;
    let cdf = v
        .iter()
        .zip(mu)
        .map(|(a, b)| {
            acc += a * b / total;
            acc
        })
        .collect();
    (total, cdf)
}

/// Sample single-ancestor limits `Y` with ancestor sites drawn from the
/// normalized `v mu` law.
pub fn sample_y(
    s: &Scenario,
    ext: &ExtinctionData,
    coeffs: &SkeletonCoefficients,
    sd: &SpectralData,
    horizon: f64,
    seed: u64,
    n_samples: usize,
    backend: Backend,
) -> Result<SampleBatch, SkeletonError> {
    if s.initial_measure.iter().all(|&x| x == 0.0) {
        return Err(SkeletonError::ZeroMeasure);
    }
    let model = build_skeleton(s, ext, coeffs, sd)?;
    let d = s.dim();
    let (_, site_cdf) = ancestor_cdf(&ext.v, &s.initial_measure);
    let resolved = resolve_backend(backend, d);
    let sampler = match resolved {
        Backend::Staged => Some(StageSampler::build(s, &ext.v, horizon)?),
        _ => None,
    };
    let decay = (-sd.lambda0 * horizon).exp();
    let opts = SimulateOptions::default();
    let draws = par_replicates(
        seed,
        n_samples,
        |_i, rng| -> Result<(f64, u32), SkeletonError> {
            let u: f64 = rng.random();
            let site = site_cdf.iter().position(|&c| u <= c).unwrap_or(d - 1);
            let value = if let Some(sampler) = &sampler {
                decay * model.phi0_over_v[0] * sampler.sample_population(1, rng)? as f64
            } else {
                simulate_skeleton(&model, site, horizon, rng, &opts)?.wz_value(&model)
            };
            Ok((value, site as u32))
        },
    );
    let mut values = Vec::with_capacity(n_samples);
    let mut sites = Vec::with_capacity(n_samples);
    for r in draws {
        let (val, site) = r?;
        values.push(val);
        sites.push(site);
    }
    Ok(SampleBatch {
        scenario_name: s.name.clone(),
        kind: BatchKind::Y,
        horizon_t: horizon,
        seed,
        values,
        ancestor_sites: Some(sites),
        ancestor_counts: None,
    })
}

/// Sample the strong limit `W` via its compound Poisson representation:
/// `N ~ Poisson(<v, mu>)` ancestors at sites `~ v mu`, each contributing an
/// independent skeleton limit at the horizon. Horizon bias as in
/// [`sample_wz`].
pub fn sample_w(
    s: &Scenario,
    ext: &ExtinctionData,
    coeffs: &SkeletonCoefficients,
    sd: &SpectralData,
    horizon: f64,
    seed: u64,
    n_samples: usize,
    backend: Backend,
) -> Result<SampleBatch, SkeletonError> {
    if s.initial_measure.iter().all(|&x| x == 0.0) {
        return Err(SkeletonError::ZeroMeasure);
    }
    let model = build_skeleton(s, ext, coeffs, sd)?;
    let d = s.dim();
    let (vmu, site_cdf) = ancestor_cdf(&ext.v, &s.initial_measure);
    let poisson = Poisson::new(vmu).expect("positive mass");
    let resolved = resolve_backend(backend, d);
    let sampler = match resolved {
        Backend::Staged => Some(StageSampler::build(s, &ext.v, horizon)?),
        _ => None,
    };
    let decay = (-sd.lambda0 * horizon).exp();
    let opts = SimulateOptions::default();
    let draws = par_replicates(
        seed,
        n_samples,
        |_i, rng| -> Result<(f64, u32), SkeletonError> {
            let n: f64 = poisson.sample(rng);
            let n = n as u64;
            if n == 0 {
                return Ok((0.0, 0));
            }
            let value = if let Some(sampler) = &sampler {
                // All ancestors share the single site; independent lines merge
                // into one population by the branching property.
                decay * model.phi0_over_v[0] * sampler.sample_population(n, rng)? as f64
            } else {
                let mut acc = 0.0;
                for _ in 0..n {
                    let u: f64 = rng.random();
                    let site = site_cdf.iter().position(|&c| u <= c).unwrap_or(d - 1);
                    acc += simulate_skeleton(&model, site, horizon, rng, &opts)?.wz_value(&model);
                }
                acc
            };
            Ok((value, n as u32))
        },
    );
    let mut values = Vec::with_capacity(n_samples);
    let mut counts = Vec::with_capacity(n_samples);
    for r in draws {
        let (val, n) = r?;
        values.push(val);
        counts.push(n);
    }
    Ok(SampleBatch {
        scenario_name: s.name.clone(),
        kind: BatchKind::W,
        horizon_t: horizon,
        seed,
        values,
        ancestor_sites: None,
        ancestor_counts: Some(counts),
    })
}

/// Compound density assembled from a kernel estimate of the single-ancestor
/// density: Poisson-weighted convolution powers evaluated with FFTs on a
/// zero-padded uniform grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensitySeries {
    pub grid: Vec<f64>,
    /// Kernel density estimate of the single-ancestor law.
    pub g_hat: Vec<f64>,
    /// Compound density on the positive axis.
    pub f_mu: Vec<f64>,
    /// |integral of f_mu - (1 - e^{-<v,mu>})|.
    pub mass_defect: f64,
    pub terms: usize,
}

/// Evaluate the compound density series from single-ancestor samples.
///
/// `mu_mass` is `<v, mu>`; the series is truncated once the Poisson weight
/// drops below 1e-12, and a mass defect beyond [`DENSITY_MASS_TOL`] is
/// reported as aliasing (grid too short or too coarse).
pub fn density_series(
    y_samples: &[f64],
    mu_mass: f64,
    y_max: f64,
    n_grid: usize,
) -> Result<DensitySeries, SkeletonError> {
    let h = y_max / n_grid as f64;
    let grid: Vec<f64> = (0..n_grid).map(|i| (i as f64 + 0.5) * h).collect();
    let g_hat = crate::stats::gaussian_kde_reflected(y_samples, &grid);

    // Spectra over a 2x zero-padded grid to keep linear convolutions linear.
    let padded = 2 * n_grid;
    let fft = FftPlanner::new().plan_fft_forward(padded);
    let ifft = FftPlanner::new().plan_fft_inverse(padded);
    let mut g_spec: Vec<Complex64> = g_hat
        .iter()
        .map(|&x| Complex64::new(x, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)).take(padded - n_grid))
        .collect();
    fft.process(&mut g_spec);

    // Accumulate sum_k w_k g^{*k} in the spectral domain:
    // spectrum(g^{*k}) = G (hG)^{k-1}.
    let mut power: Vec<Complex64> = g_spec.clone();
    let mut acc = vec![Complex64::new(0.0, 0.0); padded];
    let mut weight = mu_mass * (-mu_mass).exp();
    let mut k = 1usize;
    loop {
        for i in 0..padded {
            acc[i] += weight * power[i];
        }
        k += 1;
        weight *= mu_mass / k as f64;
        if weight < 1e-12 {
            break;
        }
        for i in 0..padded {
            power[i] *= h * g_spec[i];
        }
    }
    ifft.process(&mut acc);
    let f_mu: Vec<f64> = acc[..n_grid]
        .iter()
        .map(|z| (z.re / padded as f64).max(0.0))
        .collect();

    let mass: f64 = f_mu.iter().sum::<f64>() * h;
    let expected = 1.0 - (-mu_mass).exp();
    let mass_defect = (mass - expected).abs();
    if mass_defect > DENSITY_MASS_TOL {
        return Err(SkeletonError::GridAliasing {
            defect: mass_defect,
        });
    }
    Ok(DensitySeries {
        grid,
        g_hat,
        f_mu,
        mass_defect,
        terms: k - 1,
    })
}

/// Write a batch as CSV (one value per row, metadata in the header comment)
/// plus a JSON sidecar carrying the full batch record.
pub fn write_batch(
    dir: &Path,
    stem: &str,
    batch: &SampleBatch,
) -> Result<Vec<String>, SkeletonError> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let json_path = dir.join(format!("{stem}.json"));
    let mk_err = |path: &Path, e: std::io::Error| SkeletonError::BatchFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let mut out = String::with_capacity(batch.values.len() * 20 + 128);
    out.push_str(&format!(
        "# scenario={} kind={} horizon={} seed={} samples={}\n",
        batch.scenario_name,
        match batch.kind {
            BatchKind::Wz => "wz",
            BatchKind::Y => "y",
            BatchKind::W => "w",
        },
        batch.horizon_t,
        batch.seed,
        batch.values.len()
    ));
    out.push_str("value\n");
    for v in &batch.values {
        out.push_str(&format!("{v}\n"));
    }
    let mut f = std::fs::File::create(&csv_path).map_err(|e| mk_err(&csv_path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| mk_err(&csv_path, e))?;
    let json = serde_json::to_string(batch).expect("batch serializes");
    std::fs::write(&json_path, json).map_err(|e| mk_err(&json_path, e))?;
    Ok(vec![
        csv_path.display().to_string(),
        json_path.display().to_string(),
    ])
}

/// Read a batch back from its JSON sidecar (preferred) or bare CSV.
pub fn read_batch(path: &Path) -> Result<SampleBatch, SkeletonError> {
    let mk_err = |detail: String| SkeletonError::BatchFile {
        path: path.display().to_string(),
        detail,
    };
    let sidecar = path.with_extension("json");
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| mk_err(e.to_string()))?;
        return serde_json::from_str(&text).map_err(|e| mk_err(e.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| mk_err(e.to_string()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| mk_err("empty file".into()))?;
    let mut meta = std::collections::HashMap::new();
    for tok in header.trim_start_matches('#').split_whitespace() {
        if let Some((k, v)) = tok.split_once('=') {
            meta.insert(k.to_string(), v.to_string());
        }
    }
    let mut values = Vec::new();
    for line in lines {
        if line == "value" || line.is_empty() {
            continue;
        }
        values.push(
            line.parse::<f64>()
                .map_err(|e| mk_err(format!("bad value {line:?}: {e}")))?,
        );
    }
    let kind = match meta.get("kind").map(String::as_str) {
        Some("w") => BatchKind::W,
        Some("y") => BatchKind::Y,
        _ => BatchKind::Wz,
    };
    Ok(SampleBatch {
        scenario_name: meta.get("scenario").cloned().unwrap_or_default(),
        kind,
        horizon_t: meta
            .get("horizon")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0.0),
        seed: meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0),
        values,
        ancestor_sites: None,
        ancestor_counts: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cumulant::{extinction_v, skeleton_coefficients};
    use crate::rng::replicate_rng;
    use crate::scenarios::{feller1, poissonic, threesite, twosite};
    use crate::spectral::semigroup_t;

    struct Setup {
        s: Scenario,
        ext: ExtinctionData,
        coeffs: SkeletonCoefficients,
        sd: SpectralData,
    }

    fn setup(s: Scenario) -> Setup {
        let ext = extinction_v(&s).unwrap();
        let coeffs = skeleton_coefficients(&s, &ext.v).unwrap();
        let sd = SpectralData::compute(&s, &ext.v).unwrap();
        Setup { s, ext, coeffs, sd }
    }

    fn model(setup: &Setup) -> SkeletonModel {
        build_skeleton(&setup.s, &setup.ext, &setup.coeffs, &setup.sd).unwrap()
    }

    #[test]
    fn feller_skeleton_is_binary_at_unit_rate() {
        let su = setup(feller1());
        let m = model(&su);
        assert_eq!(m.qbar[(0, 0)], 0.0);
        assert!((m.b[0] - 1.0).abs() < 1e-12);
        let mut rng = replicate_rng(1, 0);
        for _ in 0..50 {
            assert_eq!(sample_offspring(&m, 0, &mut rng), 2);
        }
    }

    #[test]
    fn transformed_generator_rows_vanish() {
        for s in [twosite(), threesite()] {
            let su = setup(s);
            let m = model(&su);
            let d = su.s.dim();
            for x in 0..d {
                let row: f64 = (0..d).map(|y| m.qbar[(x, y)]).sum();
                assert!(row.abs() < 1e-10, "row {x} sums to {row}");
                for y in 0..d {
                    if x != y {
                        let expect = su.s.motion.rates()[(x, y)] * su.ext.v[y] / su.ext.v[x];
                        assert!((m.qbar[(x, y)] - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn mean_generator_identity() {
        // Qbar + diag(b (mean offspring - 1)) = D_v^{-1} (Q + diag alpha) D_v.
        for s in [poissonic(), twosite(), threesite()] {
            let su = setup(s);
            let m = model(&su);
            let d = su.s.dim();
            let a = crate::spectral::mean_generator(&su.s);
            for x in 0..d {
                for y in 0..d {
                    let lhs = m.qbar[(x, y)]
                        + if x == y {
                            m.b[x] * (su.coeffs.mean_offspring(x) - 1.0)
                        } else {
                            0.0
                        };
                    let rhs = a[(x, y)] * su.ext.v[y] / su.ext.v[x];
                    assert!(
                        (lhs - rhs).abs() < 1e-8,
                        "{} ({x},{y}): {lhs} vs {rhs}",
                        su.s.name
                    );
                }
            }
        }
    }

    #[test]
    fn offspring_frequencies_match_table() {
        let su = setup(poissonic());
        let m = model(&su);
        let mut rng = replicate_rng(7, 0);
        let n = 200_000;
        let mut two = 0usize;
        for _ in 0..n {
            if sample_offspring(&m, 0, &mut rng) == 2 {
                two += 1;
            }
        }
        let p2 = su.coeffs.offspring[0][0];
        let freq = two as f64 / n as f64;
        let sigma = (p2 * (1.0 - p2) / n as f64).sqrt();
        assert!((freq - p2).abs() < 3.0 * sigma, "{freq} vs {p2}");
    }

    #[test]
    fn simulate_at_zero_horizon() {
        let su = setup(twosite());
        let m = model(&su);
        let mut rng = replicate_rng(3, 0);
        let ps = simulate_skeleton(&m, 1, 0.0, &mut rng, &SimulateOptions::default()).unwrap();
        assert_eq!(ps.particles.len(), 1);
        assert_eq!(ps.particles[0].site, 1);
    }

    #[test]
    fn yule_growth_mean() {
        // Binary splitting at unit rate: E |Z_t| = e^t.
        let su = setup(feller1());
        let m = model(&su);
        let t = 3.0;
        let n = 10_000;
        let opts = SimulateOptions::default();
        let values = par_replicates(17, n, |_i, rng| {
            simulate_skeleton(&m, 0, t, rng, &opts)
                .unwrap()
                .particles
                .len() as f64
        });
        let mean: f64 = values.iter().sum::<f64>() / n as f64 * (-t as f64).exp();
        // Normalized variance of e^{-t} Z_t is 1 - e^{-t}.
        let band = 3.0 * (1.0 - (-t as f64).exp()).sqrt() / (n as f64).sqrt();
        assert!((mean - 1.0).abs() < band, "mean {mean} band {band}");
    }

    #[test]
    fn skeleton_first_moments_match_semigroup() {
        // E <g, Z_t> = v^{-1} T_t (v g) for indicator g, within 3 empirical
        // standard errors.
        for s in [twosite(), threesite()] {
            let su = setup(s);
            let m = model(&su);
            let d = su.s.dim();
            let n = 6_000;
            let opts = SimulateOptions::default();
            for &t in &[1.0, 2.0] {
                let tt = semigroup_t(&su.s, t);
                for x0 in 0..d {
                    let counts = par_replicates(29 + x0 as u64, n, |_i, rng| {
                        simulate_skeleton(&m, x0, t, rng, &opts).unwrap().counts(d)
                    });
                    for g in 0..d {
                        let vals: Vec<f64> = counts.iter().map(|c| c[g] as f64).collect();
                        let mean: f64 = vals.iter().sum::<f64>() / n as f64;
                        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                            / (n as f64 - 1.0);
                        let expect = tt[(x0, g)] * su.ext.v[g] / su.ext.v[x0];
                        let band = 3.0 * (var / n as f64).sqrt() + 1e-9;
                        assert!(
                            (mean - expect).abs() < band,
                            "{} t={t} x0={x0} g={g}: {mean} vs {expect} band {band}",
                            su.s.name
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn population_cap_reported() {
        let su = setup(feller1());
        let m = model(&su);
        let mut rng = replicate_rng(5, 0);
        let opts = SimulateOptions {
            population_cap: 50,
            record_events: false,
        };
        let err = simulate_skeleton(&m, 0, 12.0, &mut rng, &opts).unwrap_err();
        assert!(matches!(err, SkeletonError::PopulationCap { cap: 50, .. }));
    }

    #[test]
    fn staged_and_event_backends_agree_in_law() {
        let su = setup(poissonic());
        let t = 6.0;
        let n = 3_000;
        let staged = sample_wz(
            &su.s,
            &su.ext,
            &su.coeffs,
            &su.sd,
            0,
            t,
            101,
            n,
            Backend::Staged,
        )
        .unwrap();
        let events = sample_wz(
            &su.s,
            &su.ext,
            &su.coeffs,
            &su.sd,
            0,
            t,
            202,
            n,
            Backend::EventDriven,
        )
        .unwrap();
        let mut a = staged.values.clone();
        let mut b = events.values.clone();
        let d = crate::staging::tests::two_sample_ks(&mut a, &mut b);
        let threshold = 1.95 * (2.0 / n as f64).sqrt();
        assert!(d < threshold, "KS {d} vs {threshold}");
    }

    #[test]
    fn wz_batch_mean_is_martingale_mean() {
        for s in [feller1(), poissonic()] {
            let su = setup(s);
            let batch = sample_wz(
                &su.s,
                &su.ext,
                &su.coeffs,
                &su.sd,
                0,
                10.0,
                31,
                40_000,
                Backend::Auto,
            )
            .unwrap();
            let mean: f64 = batch.values.iter().sum::<f64>() / batch.values.len() as f64;
            let var: f64 = batch
                .values
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / (batch.values.len() as f64 - 1.0);
            let expect = su.sd.phi0[0] / su.ext.v[0];
            let band = 3.0 * (var / batch.values.len() as f64).sqrt();
            assert!(
                (mean - expect).abs() < band,
                "{}: {mean} vs {expect} band {band}",
                su.s.name
            );
        }
    }

    #[test]
    fn yule_limit_is_standard_exponential() {
        // Binary unit-rate skeleton: the horizon value converges to Exp(1).
        let su = setup(feller1());
        let batch = sample_wz(
            &su.s,
            &su.ext,
            &su.coeffs,
            &su.sd,
            0,
            12.0,
            47,
            100_000,
            Backend::Staged,
        )
        .unwrap();
        let mut sorted = batch.values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks = 0.0_f64;
        let n = sorted.len() as f64;
        for (i, &x) in sorted.iter().enumerate() {
            let cdf = 1.0 - (-x).exp();
            ks = ks.max((cdf - i as f64 / n).abs());
            ks = ks.max((cdf - (i as f64 + 1.0) / n).abs());
        }
        assert!(ks < 0.01, "Kolmogorov distance {ks}");
    }

    #[test]
    fn wz_laplace_matches_transform() {
        // Empirical e^{-theta WZ} against the horizon transform, 3 sigma.
        let su = setup(poissonic());
        let t = 10.0;
        let batch = sample_wz(
            &su.s,
            &su.ext,
            &su.coeffs,
            &su.sd,
            0,
            t,
            53,
            50_000,
            Backend::Staged,
        )
        .unwrap();
        for &theta in &[0.5, 1.0, 2.0, 5.0] {
            let psi = crate::cumulant::psi_eval(&su.s, &su.sd, &su.ext.v, theta).unwrap()[0];
            let vals: Vec<f64> = batch.values.iter().map(|&w| (-theta * w).exp()).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (vals.len() as f64 - 1.0);
            let band = 3.0 * (var / vals.len() as f64).sqrt();
            assert!(
                (mean - psi).abs() < band + 1e-4,
                "theta={theta}: {mean} vs {psi}"
            );
        }
    }

    #[test]
    fn w_zero_mass_matches_extinction() {
        let su = setup(feller1());
        let n = 100_000;
        let batch = sample_w(
            &su.s,
            &su.ext,
            &su.coeffs,
            &su.sd,
            10.0,
            61,
            n,
            Backend::Auto,
        )
        .unwrap();
        let zeros = batch.values.iter().filter(|&&v| v == 0.0).count() as f64;
        let p = (-su.ext.v[0]).exp();
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (zeros / n as f64 - p).abs() < 3.0 * sigma,
            "{} vs {p}",
            zeros / n as f64
        );
        // Doubling the measure squares the zero probability.
        let mut s2 = su.s.clone();
        s2.initial_measure = vec![2.0];
        let batch2 =
            sample_w(&s2, &su.ext, &su.coeffs, &su.sd, 10.0, 62, n, Backend::Auto).unwrap();
        let zeros2 = batch2.values.iter().filter(|&&v| v == 0.0).count() as f64;
        let p2 = (-2.0 * su.ext.v[0]).exp();
        let sigma2 = (p2 * (1.0 - p2) / n as f64).sqrt();
        assert!((zeros2 / n as f64 - p2).abs() < 3.0 * sigma2);
    }

    #[test]
    fn w_mean_matches_eigenfunction() {
        let su = setup(feller1());
        let n = 200_000;
        let batch = sample_w(
            &su.s,
            &su.ext,
            &su.coeffs,
            &su.sd,
            12.0,
            71,
            n,
            Backend::Auto,
        )
        .unwrap();
        let mean: f64 = batch.values.iter().sum::<f64>() / n as f64;
        let var: f64 = batch
            .values
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n as f64 - 1.0);
        let band = 3.0 * (var / n as f64).sqrt();
        assert!((mean - 1.0).abs() < band, "mean {mean} band {band}");
    }

    #[test]
    fn w_laplace_matches_compound_transform() {
        let su = setup(poissonic());
        let n = 100_000;
        let batch = sample_w(
            &su.s,
            &su.ext,
            &su.coeffs,
            &su.sd,
            12.0,
            83,
            n,
            Backend::Auto,
        )
        .unwrap();
        let vmu = su.s.mu_pairing(&su.ext.v);
        for &theta in &[0.5, 1.0, 3.0] {
            let psi = crate::cumulant::psi_eval(&su.s, &su.sd, &su.ext.v, theta).unwrap()[0];
            let analytic = (-(vmu * (1.0 - psi))).exp();
            let vals: Vec<f64> = batch.values.iter().map(|&w| (-theta * w).exp()).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (vals.len() as f64 - 1.0);
            let band = 3.0 * (var / vals.len() as f64).sqrt();
            assert!(
                (mean - analytic).abs() < band + 1e-4,
                "theta={theta}: {mean} vs {analytic}"
            );
        }
    }

    #[test]
    fn multisite_w_sampling_runs() {
        let su = setup(twosite());
        let batch = sample_w(
            &su.s,
            &su.ext,
            &su.coeffs,
            &su.sd,
            4.0,
            91,
            4_000,
            Backend::Auto,
        )
        .unwrap();
        assert_eq!(batch.values.len(), 4_000);
        let mean: f64 = batch.values.iter().sum::<f64>() / 4000.0;
        let expect: f64 = su
            .sd
            .phi0
            .iter()
            .zip(&su.s.initial_measure)
            .map(|(p, m)| p * m)
            .sum();
        // Loose 4-sigma-ish check; the horizon is short.
        assert!((mean - expect).abs() < 0.2, "{mean} vs {expect}");
    }

    #[test]
    fn staged_sampler_matches_horizon_transform_exactly() {
        // Against the finite-horizon transform there is no replacement
        // bias, so the only slack is Monte Carlo noise: a sharp test of the
        // stage-wise sampler itself.
        let su = setup(poissonic());
        let t = 7.0;
        let n = 200_000;
        let batch = sample_wz(
            &su.s,
            &su.ext,
            &su.coeffs,
            &su.sd,
            0,
            t,
            977,
            n,
            Backend::Staged,
        )
        .unwrap();
        for &theta in &[0.5, 1.0, 2.0, 5.0, 10.0] {
            let analytic =
                crate::cumulant::wz_laplace_at_horizon(&su.s, &su.sd, &su.ext.v, theta, t).unwrap()
                    [0];
            let vals: Vec<f64> = batch.values.iter().map(|&w| (-theta * w).exp()).collect();
            let mean: f64 = vals.iter().sum::<f64>() / n as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
            let band = 3.0 * (var / n as f64).sqrt();
            assert!(
                (mean - analytic).abs() < band,
                "theta={theta}: empirical {mean} vs horizon transform {analytic} (band {band})"
            );
        }
    }

    #[test]
    fn horizon_doubling_shift_within_noise() {
        // Doubling the horizon moves the batch law by less than the
        // Monte Carlo resolution once e^{-lambda0 T} is small.
        let su = setup(poissonic());
        let n = 30_000;
        let a = sample_wz(
            &su.s,
            &su.ext,
            &su.coeffs,
            &su.sd,
            0,
            12.0,
            131,
            n,
            Backend::Staged,
        )
        .unwrap();
        let b = sample_wz(
            &su.s,
            &su.ext,
            &su.coeffs,
            &su.sd,
            0,
            24.0,
            132,
            n,
            Backend::Staged,
        )
        .unwrap();
        let mut av = a.values.clone();
        let mut bv = b.values.clone();
        let d = crate::staging::tests::two_sample_ks(&mut av, &mut bv);
        let threshold = 1.95 * (2.0 / n as f64).sqrt();
        assert!(d < threshold, "KS {d} vs {threshold}");
    }

    #[test]
    fn event_log_records_history() {
        let su = setup(twosite());
        let m = model(&su);
        let mut rng = replicate_rng(37, 0);
        let opts = SimulateOptions {
            record_events: true,
            ..SimulateOptions::default()
        };
        let ps = simulate_skeleton(&m, 0, 2.0, &mut rng, &opts).unwrap();
        let log = ps.event_log.as_ref().expect("log requested");
        let branches = log
            .iter()
            .filter(|e| matches!(e, Event::Branch { .. }))
            .count();
        let born: usize = log
            .iter()
            .map(|e| match e {
                Event::Branch { count, .. } => count - 1,
                Event::Jump { .. } => 0,
            })
            .sum();
        assert_eq!(ps.particles.len(), 1 + born);
        assert!(branches > 0 || ps.particles.len() == 1);
        for e in log {
            let t = match e {
                Event::Branch { time, .. } | Event::Jump { time, .. } => *time,
            };
            assert!(t >= 0.0 && t <= 2.0);
        }
    }

    #[test]
    fn identical_seeds_reproduce_across_thread_counts() {
        let su = setup(poissonic());
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                sample_w(
                    &su.s,
                    &su.ext,
                    &su.coeffs,
                    &su.sd,
                    8.0,
                    99,
                    20_000,
                    Backend::Auto,
                )
                .unwrap()
                .values
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn density_series_feller_profile() {
        // Single-ancestor law for the binary unit-rate skeleton is Exp(1);
        // the compound density approaches e^{-<v,mu>} near zero and carries
        // total mass 1 - e^{-<v,mu>}.
        let su = setup(feller1());
        let y = sample_y(
            &su.s,
            &su.ext,
            &su.coeffs,
            &su.sd,
            12.0,
            111,
            200_000,
            Backend::Auto,
        )
        .unwrap();
        let series = density_series(&y.values, 1.0, 16.0, 1 << 11).unwrap();
        assert!(series.mass_defect < DENSITY_MASS_TOL);
        // Lower bound by the first term holds pointwise by construction.
        let w1 = 1.0 * (-1.0_f64).exp();
        for (f, g) in series.f_mu.iter().zip(&series.g_hat) {
            assert!(*f >= g * w1 - 1e-12);
        }
        // Near-zero limit e^{-1}.
        let near_zero = series.f_mu[1];
        assert!(
            (near_zero - (-1.0_f64).exp()).abs() < 0.05,
            "f(0+) = {near_zero}"
        );
    }

    #[test]
    fn batch_roundtrip_through_files() {
        let su = setup(feller1());
        let batch = sample_w(
            &su.s,
            &su.ext,
            &su.coeffs,
            &su.sd,
            6.0,
            7,
            500,
            Backend::Auto,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_batch(dir.path(), "w_batch", &batch).unwrap();
        assert_eq!(files.len(), 2);
        let back = read_batch(&dir.path().join("w_batch.csv")).unwrap();
        assert_eq!(back.values, batch.values);
        assert_eq!(back.seed, batch.seed);
        assert_eq!(back.kind, BatchKind::W);
    }
}
