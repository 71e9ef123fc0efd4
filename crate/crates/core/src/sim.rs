//! Monte Carlo ensembles of the nominal and true closed loops, and the
//! empirical checks run on them.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DiscreteModel, SystemModel, UncertaintyFunctions};
use crate::error::{check_dim, Error, Result};
use crate::l1drac::{build_theta_ad, integrate_true_path, ControlParams, LoopGrid};
use crate::linalg;
use crate::planner::{BoundaryConditions, Schedule};
use crate::risk::empirical_cvar_with_se;
use crate::rng::StreamKey;
use crate::safety::SafeSet;
use crate::wasserstein::{empirical_w2, gaussian_w2};

/// Two-sided 95% normal quantile used by the Wilson interval.
pub const WILSON_Z: f64 = 1.959963984540054;

/// States of `N` paths on the planner grid, stored path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub n_paths: usize,
    pub k_prime: usize,
    pub n: usize,
    pub delta_t: f64,
    pub seed: u64,
    /// Stream tag; with the seed and the path index it identifies every draw.
    pub tag: String,
    data: Vec<f64>,
}

impl PathEnsemble {
    /// Pack paths of equal length whose states all have dimension `n`.
    ///
    /// # Panics
    /// If the paths are ragged or a state has the wrong dimension.
    pub fn from_paths(
        paths: Vec<Vec<DVector<f64>>>,
        n: usize,
        delta_t: f64,
        seed: u64,
        tag: &str,
    ) -> Self {
        let k_prime = paths.first().map_or(0, |p| p.len().saturating_sub(1));
        assert!(
            paths
                .iter()
                .all(|p| p.len() == k_prime + 1 && p.iter().all(|x| x.len() == n)),
            "paths must share one length and state dimension"
        );
        let mut data = Vec::with_capacity(paths.len() * (k_prime + 1) * n);
        for p in &paths {
            for x in p {
                data.extend(x.iter());
            }
        }
        Self {
            n_paths: paths.len(),
            k_prime,
            n,
            delta_t,
            seed,
            tag: tag.to_string(),
            data,
        }
    }

    pub fn state(&self, path: usize, k: usize) -> DVector<f64> {
        let off = (path * (self.k_prime + 1) + k) * self.n;
        DVector::from_row_slice(&self.data[off..off + self.n])
    }

    /// All paths at step `k`.
    pub fn states_at(&self, k: usize) -> Vec<DVector<f64>> {
        (0..self.n_paths).map(|p| self.state(p, k)).collect()
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Raw little-endian `f64` array (path, step, coordinate) plus a JSON sidecar.
    pub fn write(&self, bin: &Path, sidecar: &Path, scenario_hash: &str) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(bin, bytes)?;
        let meta = EnsembleSidecar {
            shape: [self.n_paths, self.k_prime + 1, self.n],
            dtype: "f64le".into(),
            seed: self.seed,
            tag: self.tag.clone(),
            delta_t: self.delta_t,
            scenario_hash: scenario_hash.to_string(),
        };
        std::fs::write(sidecar, serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    /// Inverse of [`PathEnsemble::write`]; the sidecar must describe the file.
    pub fn read(bin: &Path, sidecar: &Path) -> Result<(Self, EnsembleSidecar)> {
        let meta: EnsembleSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
        if meta.dtype != "f64le" {
            return Err(Error::invalid(format!(
                "unsupported ensemble dtype {}",
                meta.dtype
            )));
        }
        let bytes = std::fs::read(bin)?;
        let [n_paths, steps, n] = meta.shape;
        if steps == 0 || bytes.len() != n_paths * steps * n * 8 {
            return Err(Error::invalid(format!(
                "ensemble file holds {} bytes, sidecar shape {:?} needs {}",
                bytes.len(),
                meta.shape,
                n_paths * steps * n * 8
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let ens = Self {
            n_paths,
            k_prime: steps - 1,
            n,
            delta_t: meta.delta_t,
            seed: meta.seed,
            tag: meta.tag.clone(),
            data,
        };
        Ok((ens, meta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSidecar {
    pub shape: [usize; 3],
    pub dtype: String,
    pub seed: u64,
    pub tag: String,
    pub delta_t: f64,
    pub scenario_hash: String,
}

fn check_schedule(schedule: &Schedule, k_prime: usize, n: usize, m: usize) -> Result<()> {
    check_dim("schedule length", k_prime, schedule.k_prime())?;
    check_dim("schedule state dimension", n, schedule.n)?;
    for v in &schedule.feedforward {
        check_dim("schedule input", m, v.len())?;
    }
    Ok(())
}

fn initial_state(
    keys: &StreamKey,
    path: usize,
    boundary: &BoundaryConditions,
    root: &DMatrix<f64>,
) -> DVector<f64> {
    &boundary.mu0 + root * keys.initial(path, boundary.mu0.len())
}

/// Ensemble of the nominal recursion `x⁺ = (I + ΔT A)x + ΔT B u + A_σ Δw`.
pub fn simulate_nominal(
    dm: &DiscreteModel,
    schedule: &Schedule,
    boundary: &BoundaryConditions,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_nominal_tagged(dm, schedule, boundary, n_paths, seed, "nominal")
}

/// [`simulate_nominal`] on an explicitly named stream family.
pub fn simulate_nominal_tagged(
    dm: &DiscreteModel,
    schedule: &Schedule,
    boundary: &BoundaryConditions,
    n_paths: usize,
    seed: u64,
    tag: &str,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be >= 1"));
    }
    check_schedule(schedule, dm.k_prime, dm.n(), dm.m())?;
    boundary.validate(dm.n())?;
    let keys = StreamKey::new(seed, tag);
    let root = linalg::psd_sqrt(&boundary.sigma0);
    let paths: Vec<Vec<DVector<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let x0 = initial_state(&keys, p, boundary, &root);
            let mut x = x0.clone();
            let mut out = Vec::with_capacity(dm.k_prime + 1);
            let mut hist = Vec::with_capacity(dm.k_prime);
            out.push(x.clone());
            for k in 0..dm.k_prime {
                let dw = keys.increments(p, k, 1, dm.n_w(), dm.delta_t).remove(0);
                let u = schedule.input(k, &x0, &hist);
                x = dm.step(&x, &u, &dw);
                out.push(x.clone());
                hist.push(dw);
            }
            out
        })
        .collect();
    Ok(PathEnsemble::from_paths(
        paths,
        dm.n(),
        dm.delta_t,
        seed,
        tag,
    ))
}

/// Ensemble of the true plant under `U = U* + U_L1` (or `U*` alone).
///
/// The disturbance feedback of the schedule acts on increments reconstructed
/// from the measured grid states,
/// `ŵ_i = A_σ⁺ (x_{i+1} − x_i − ΔT (A x_i + B U*_i))`, which equals the
/// true increment on the nominal plant when `A_σ` has full column rank.
#[allow(clippy::too_many_arguments)]
pub fn simulate_true(
    model: &SystemModel,
    uncertainty: &(dyn UncertaintyFunctions + Sync),
    schedule: &Schedule,
    l1: Option<&ControlParams>,
    substeps: usize,
    boundary_true: &BoundaryConditions,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be >= 1"));
    }
    let k_prime = schedule.k_prime();
    check_schedule(schedule, k_prime, model.n(), model.m())?;
    boundary_true.validate(model.n())?;
    let grid = LoopGrid {
        delta_t: schedule.delta_t,
        k_prime,
        substeps,
    };
    if substeps == 0 {
        return Err(Error::invalid("substeps must be >= 1"));
    }
    if let Some(p) = l1 {
        grid.samples_every(p)?;
    }
    let theta = build_theta_ad(model)?;
    let a_sigma_pinv = linalg::pinv(&model.a_sigma);
    let keys = StreamKey::new(seed, "true");
    let root = linalg::psd_sqrt(&boundary_true.sigma0);
    let dt = grid.dt();
    let delta_t = schedule.delta_t;
    let paths: Result<Vec<Vec<DVector<f64>>>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let x0 = initial_state(&keys, p, boundary_true, &root);
            let mut hist: Vec<DVector<f64>> = Vec::with_capacity(k_prime);
            let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;
            let mut u_star = |i: usize, x: &DVector<f64>| {
                if let Some((xp, up)) = prev.take() {
                    let drift = (&model.a_mu * &xp + &model.b * &up) * delta_t;
                    hist.push(&a_sigma_pinv * (x - &xp - drift));
                }
                let u = schedule.input(i, &x0, &hist);
                prev = Some((x.clone(), u.clone()));
                u
            };
            let mut noise = |i: usize| keys.increments(p, i, substeps, model.n_w(), dt);
            let recs = integrate_true_path(
                model,
                uncertainty,
                &grid,
                l1,
                &theta,
                &x0,
                &mut u_star,
                &mut noise,
            )?;
            Ok(recs.into_iter().map(|r| r.x).collect())
        })
        .collect();
    Ok(PathEnsemble::from_paths(
        paths?,
        model.n(),
        delta_t,
        seed,
        "true",
    ))
}

/// Binomial proportion with its Wilson 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateInterval {
    pub count: usize,
    pub n: usize,
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn wilson_interval(count: usize, n: usize) -> RateInterval {
    let nf = n as f64;
    let p = count as f64 / nf;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = WILSON_Z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    RateInterval {
        count,
        n,
        rate: p,
        // the endpoints are exact at 0 and n; round-off would leave ~1e-18
        lower: if count == 0 {
            0.0
        } else {
            (center - half).max(0.0)
        },
        upper: if count == n {
            1.0
        } else {
            (center + half).min(1.0)
        },
    }
}

/// Fraction of paths outside the safe set at each step.
pub fn violation_rate(ensemble: &PathEnsemble, safe_set: &SafeSet) -> Result<Vec<RateInterval>> {
    check_dim("safe set dimension", ensemble.n, safe_set.dim())?;
    (0..=ensemble.k_prime)
        .map(|k| {
            let mut count = 0;
            for p in 0..ensemble.n_paths {
                if !safe_set.contains(&ensemble.state(p, k))? {
                    count += 1;
                }
            }
            Ok(wilson_interval(count, ensemble.n_paths))
        })
        .collect()
}

/// Empirical W₂ of the first `samples` paths with a standard error from
/// `blocks` disjoint sub-blocks.
pub fn w2_with_se(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
    samples: usize,
    blocks: usize,
) -> Result<(f64, f64)> {
    let n = samples.min(a.len()).min(b.len());
    let full = empirical_w2(&a[..n], &b[..n])?;
    let size = n / blocks.max(1);
    if blocks < 2 || size == 0 {
        return Ok((full, 0.0));
    }
    let vals: Vec<f64> = (0..blocks)
        .map(|i| empirical_w2(&a[i * size..(i + 1) * size], &b[i * size..(i + 1) * size]))
        .collect::<Result<_>>()?;
    let mean = vals.iter().sum::<f64>() / blocks as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (blocks - 1) as f64;
    Ok((full, (var / blocks as f64).sqrt()))
}

/// Everything the report needs besides the two ensembles.
#[derive(Debug, Clone)]
pub struct ValidationContext<'a> {
    pub safe_set: &'a SafeSet,
    /// Regions constraining each state `0 ..= k'`.
    pub regions_of_state: Vec<Vec<usize>>,
    /// Tail mass per region and face.
    pub face_risks: Vec<Vec<f64>>,
    pub planned_means: &'a [DVector<f64>],
    pub planned_covs: &'a [DMatrix<f64>],
    pub mu_t: &'a DVector<f64>,
    pub sigma_t: &'a DMatrix<f64>,
    pub delta_s: f64,
    pub rho: f64,
    pub w2_samples: usize,
    pub w2_blocks: usize,
    pub l1_enabled: bool,
    pub scenario_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvarEstimate {
    pub region: usize,
    /// `None` for the max-over-faces loss of the region.
    pub face: Option<usize>,
    pub tail_mass: f64,
    pub cvar: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub k: usize,
    pub t: f64,
    pub true_mean: Vec<f64>,
    pub true_cov: Vec<Vec<f64>>,
    pub nominal_mean: Vec<f64>,
    pub nominal_cov: Vec<Vec<f64>>,
    pub w2_true_nominal: f64,
    pub w2_true_nominal_se: f64,
    /// Closed-form W₂ between the true ensemble's moments and the plan.
    pub w2_true_planned: f64,
    pub violation_true: RateInterval,
    pub violation_nominal: RateInterval,
    pub cvar: Vec<CvarEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalCheck {
    pub mean_error: f64,
    /// `sqrt(tr Σ̂ / N)`, the RMS standard error of the mean vector.
    pub mean_se: f64,
    /// Largest eigenvalue of `Σ̂_{k'} − Σ_T`.
    pub cov_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub schema_version: u32,
    pub scenario_hash: String,
    pub seed: u64,
    pub n_paths: usize,
    pub w2_samples: usize,
    pub l1_enabled: bool,
    pub delta_s: f64,
    pub rho: f64,
    pub steps: Vec<StepReport>,
    pub terminal_nominal: TerminalCheck,
    pub terminal_true: TerminalCheck,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl SimulationReport {
    pub fn max_w2(&self) -> (f64, f64) {
        self.steps
            .iter()
            .map(|s| (s.w2_true_nominal, s.w2_true_nominal_se))
            .fold(
                (f64::NEG_INFINITY, 0.0),
                |a, b| if b.0 > a.0 { b } else { a },
            )
    }

    /// Parse and validate; any structural problem is a malformed report.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self =
            serde_json::from_str(text).map_err(|e| Error::MalformedReport(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::MalformedReport(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        if self.steps.is_empty() {
            return Err(Error::MalformedReport("report has no steps".into()));
        }
        for s in &self.steps {
            for r in [&s.violation_true, &s.violation_nominal] {
                if !(0.0..=1.0).contains(&r.rate) {
                    return Err(Error::MalformedReport(format!(
                        "violation rate out of range at step {}",
                        s.k
                    )));
                }
            }
            if !(s.w2_true_nominal >= 0.0) {
                return Err(Error::MalformedReport(format!(
                    "negative W2 at step {}",
                    s.k
                )));
            }
        }
        Ok(())
    }
}

fn terminal(states: &[DVector<f64>], mu_t: &DVector<f64>, sigma_t: &DMatrix<f64>) -> TerminalCheck {
    let (mean, cov) = linalg::sample_moments(states, mu_t.len());
    TerminalCheck {
        mean_error: (&mean - mu_t).norm(),
        mean_se: (cov.trace().max(0.0) / states.len() as f64).sqrt(),
        cov_excess: linalg::max_eigenvalue(&(cov - sigma_t)),
    }
}

pub fn build_report(
    nominal: &PathEnsemble,
    truth: &PathEnsemble,
    ctx: &ValidationContext,
) -> Result<SimulationReport> {
    check_dim("ensemble steps", nominal.k_prime, truth.k_prime)?;
    check_dim(
        "regions per state",
        nominal.k_prime + 1,
        ctx.regions_of_state.len(),
    )?;
    check_dim(
        "planned means",
        nominal.k_prime + 1,
        ctx.planned_means.len(),
    )?;
    let n = nominal.n;
    let steps: Vec<StepReport> = (0..=nominal.k_prime)
        .into_par_iter()
        .map(|k| {
            let tx = truth.states_at(k);
            let nx = nominal.states_at(k);
            let (tm, tc) = linalg::sample_moments(&tx, n);
            let (nm, nc) = linalg::sample_moments(&nx, n);
            let (w2, se) = w2_with_se(&tx, &nx, ctx.w2_samples, ctx.w2_blocks)?;
            let w2p = gaussian_w2(
                &tm,
                &linalg::symmetrize(&tc),
                &ctx.planned_means[k],
                &ctx.planned_covs[k],
            )?;
            let count = |xs: &[DVector<f64>]| -> Result<usize> {
                let mut c = 0;
                for x in xs {
                    if !ctx.safe_set.contains(x)? {
                        c += 1;
                    }
                }
                Ok(c)
            };
            let mut cvar = Vec::new();
            for &j in &ctx.regions_of_state[k] {
                let reg = &ctx.safe_set.regions()[j];
                let worst: Vec<f64> = tx.iter().map(|x| reg.max_face_value(x)).collect();
                let (c, s) = empirical_cvar_with_se(&worst, ctx.delta_s)?;
                cvar.push(CvarEstimate {
                    region: j,
                    face: None,
                    tail_mass: ctx.delta_s,
                    cvar: c,
                    se: s,
                });
                for (l, h) in reg.faces().iter().enumerate() {
                    let vals: Vec<f64> = tx.iter().map(|x| h.value(x)).collect();
                    let tail = ctx.face_risks[j][l];
                    let (c, s) = empirical_cvar_with_se(&vals, tail)?;
                    cvar.push(CvarEstimate {
                        region: j,
                        face: Some(l),
                        tail_mass: tail,
                        cvar: c,
                        se: s,
                    });
                }
            }
            Ok(StepReport {
                k,
                t: k as f64 * nominal.delta_t,
                true_mean: tm.iter().copied().collect(),
                true_cov: linalg::matrix_to_rows(&tc),
                nominal_mean: nm.iter().copied().collect(),
                nominal_cov: linalg::matrix_to_rows(&nc),
                w2_true_nominal: w2,
                w2_true_nominal_se: se,
                w2_true_planned: w2p,
                violation_true: wilson_interval(count(&tx)?, tx.len()),
                violation_nominal: wilson_interval(count(&nx)?, nx.len()),
                cvar,
            })
        })
        .collect::<Result<_>>()?;
    let kp = nominal.k_prime;
    Ok(SimulationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario_hash: ctx.scenario_hash.clone(),
        seed: truth.seed,
        n_paths: truth.n_paths,
        w2_samples: ctx.w2_samples.min(truth.n_paths).min(nominal.n_paths),
        l1_enabled: ctx.l1_enabled,
        delta_s: ctx.delta_s,
        rho: ctx.rho,
        steps,
        terminal_nominal: terminal(&nominal.states_at(kp), ctx.mu_t, ctx.sigma_t),
        terminal_true: terminal(&truth.states_at(kp), ctx.mu_t, ctx.sigma_t),
    })
}

/// Every way the report falls short of the safety guarantee; empty when it holds.
///
/// Per step, the Wilson upper bound of the violation rate must not exceed
/// `delta_s`, and the empirical CVaR of each assigned region's max-face loss
/// at tail mass `delta_s` must be at most two standard errors above zero.
pub fn safety_failures(report: &SimulationReport, delta_s: f64) -> Vec<String> {
    let mut out = Vec::new();
    for s in &report.steps {
        if s.violation_true.upper > delta_s {
            out.push(format!(
                "step {}: violation upper bound {:.4} > {delta_s}",
                s.k, s.violation_true.upper
            ));
        }
        for c in s.cvar.iter().filter(|c| c.face.is_none()) {
            if c.cvar > 2.0 * c.se {
                out.push(format!(
                    "step {}: region {} CVaR {:.4e} > 2 SE ({:.4e})",
                    s.k,
                    c.region,
                    c.cvar,
                    2.0 * c.se
                ));
            }
        }
    }
    out
}

/// True when [`safety_failures`] finds nothing.
pub fn verify_safety(report: &SimulationReport, delta_s: f64) -> bool {
    safety_failures(report, delta_s).is_empty()
}

/// Ornstein–Uhlenbeck fixture `dX = −a X dt + s dW` for strong-order checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuFixture {
    pub a: f64,
    pub s: f64,
    pub x0: f64,
    pub horizon: f64,
}

/// Strong error of Euler–Maruyama against the exact OU path.
///
/// The exact solution is sampled on a fine grid of `2^fine_log2` steps,
/// drawing each exact transition jointly with its Brownian increment. For
/// each coarse level `j` (step `2^j` fine steps) the Euler–Maruyama path is
/// driven by the summed increments and held piecewise constant between its
/// grid points. The error is the root mean square over paths and fine-grid
/// times of the gap between the two. Returns `(step, error)` pairs.
pub fn ou_strong_errors(
    fx: &OuFixture,
    fine_log2: u32,
    levels: &[u32],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if n_paths == 0 || levels.iter().any(|&j| j > fine_log2) {
        return Err(Error::invalid(
            "need paths and coarse levels no finer than the reference",
        ));
    }
    let steps = 1usize << fine_log2;
    let h = fx.horizon / steps as f64;
    let decay = (-fx.a * h).exp();
    // joint law of (ΔW, ∫ e^{−a(h−u)} dW_u) over one fine step
    let var_w = h;
    let var_i = (1.0 - (-2.0 * fx.a * h).exp()) / (2.0 * fx.a);
    let cov = (1.0 - decay) / fx.a;
    let l11 = var_w.sqrt();
    let l21 = cov / l11;
    let l22 = (var_i - l21 * l21).max(0.0).sqrt();
    let keys = StreamKey::new(seed, "ou-strong-order");
    let sums: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let z = keys.normals(p as u64, 1, 2 * steps);
            let mut exact = Vec::with_capacity(steps + 1);
            let mut dws = Vec::with_capacity(steps);
            let mut x = fx.x0;
            exact.push(x);
            for i in 0..steps {
                let (z1, z2) = (z[2 * i], z[2 * i + 1]);
                dws.push(l11 * z1);
                x = decay * x + fx.s * (l21 * z1 + l22 * z2);
                exact.push(x);
            }
            levels
                .iter()
                .map(|&j| {
                    let stride = 1usize << j;
                    let hc = h * stride as f64;
                    let mut y = fx.x0;
                    let mut acc = 0.0;
                    for blk in 0..steps / stride {
                        let mut dw = 0.0;
                        for i in blk * stride..(blk + 1) * stride {
                            acc += (exact[i] - y).powi(2);
                            dw += dws[i];
                        }
                        y += -fx.a * y * hc + fx.s * dw;
                    }
                    acc += (exact[steps] - y).powi(2);
                    acc / (steps + 1) as f64
                })
                .collect()
        })
        .collect();
    Ok(levels
        .iter()
        .enumerate()
        .map(|(li, &j)| {
            let mse = sums.iter().map(|s| s[li]).sum::<f64>() / n_paths as f64;
            (h * (1usize << j) as f64, mse.sqrt())
        })
        .collect())
}

/// Least-squares slope of `log error` against `log step`.
pub fn fit_order(points: &[(f64, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{discretize, NoUncertainty};
    use crate::safety::box_region;

    fn model(a_sigma: f64) -> SystemModel {
        SystemModel::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]),
            DMatrix::identity(2, 2) * a_sigma,
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap()
    }

    fn open_loop(kp: usize, n: usize, n_w: usize) -> Schedule {
        Schedule {
            delta_t: 0.1,
            n,
            n_w,
            mu0: DVector::zeros(n),
            feedforward: (0..kp)
                .map(|k| DVector::from_element(1, (k as f64 * 0.3).cos()))
                .collect(),
            feedback: (0..kp).map(|k| DMatrix::zeros(1, n + n_w * k)).collect(),
        }
    }

    fn bc(s0: f64) -> BoundaryConditions {
        BoundaryConditions {
            mu0: DVector::from_vec(vec![1.0, -0.5]),
            mu_t: DVector::zeros(2),
            sigma0: DMatrix::identity(2, 2) * s0,
            sigma_t: DMatrix::identity(2, 2),
        }
    }

    #[test]
    fn deterministic_nominal_matches_rollout() {
        let dm = discretize(&model(0.0), 0.1, 8).unwrap();
        let s = open_loop(8, 2, 2);
        let e = simulate_nominal(&dm, &s, &bc(0.0), 5, 1).unwrap();
        let roll = dm.rollout(&bc(0.0).mu0, &s.feedforward, &vec![DVector::zeros(2); 8]);
        for p in 0..5 {
            for k in 0..=8 {
                assert_eq!(e.state(p, k), roll[k]);
            }
        }
    }

    #[test]
    fn one_step_mean_within_three_se() {
        let dm = discretize(&model(0.4), 0.1, 1).unwrap();
        let s = open_loop(1, 2, 2);
        let b = bc(0.2);
        let e = simulate_nominal(&dm, &s, &b, 10_000, 9).unwrap();
        let (mean, cov) = linalg::sample_moments(&e.states_at(1), 2);
        let exact = &dm.transition * &b.mu0 + &dm.input * &s.feedforward[0];
        for i in 0..2 {
            let se = (cov[(i, i)] / 1e4).sqrt();
            assert!((mean[i] - exact[i]).abs() <= 3.0 * se);
        }
    }

    #[test]
    fn seeds_are_reproducible_across_thread_counts() {
        let dm = discretize(&model(0.3), 0.1, 6).unwrap();
        let s = open_loop(6, 2, 2);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_nominal(&dm, &s, &bc(0.1), 64, 4).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn nominal_and_true_agree_without_uncertainty() {
        // substeps = 1, L1 off, no uncertainty: the true integrator is the nominal recursion
        let m = model(0.3);
        let dm = discretize(&m, 0.1, 5).unwrap();
        let s = open_loop(5, 2, 2);
        let b = bc(0.0);
        let t = simulate_true(&m, &NoUncertainty { m: 1, n_w: 2 }, &s, None, 1, &b, 20, 3).unwrap();
        let n = simulate_nominal_tagged(&dm, &s, &b, 20, 3, "true").unwrap();
        for p in 0..20 {
            for k in 0..=5 {
                assert!((t.state(p, k) - n.state(p, k)).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn disturbance_reconstruction_realizes_feedback() {
        // with invertible A_σ the reconstructed increments equal the drawn ones,
        // so a feedback schedule gives the same grid states in both simulators
        let m = SystemModel::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.0, 0.2]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap();
        let dm = discretize(&m, 0.1, 4).unwrap();
        let mut s = open_loop(4, 2, 2);
        s.mu0 = bc(0.1).mu0;
        for (k, g) in s.feedback.iter_mut().enumerate() {
            *g = DMatrix::from_fn(1, 2 + 2 * k, |_, j| 0.1 * (j as f64 + 1.0));
        }
        let b = bc(0.1);
        let t = simulate_true(&m, &NoUncertainty { m: 1, n_w: 2 }, &s, None, 1, &b, 10, 5).unwrap();
        let n = simulate_nominal_tagged(&dm, &s, &b, 10, 5, "true").unwrap();
        for p in 0..10 {
            assert!((t.state(p, 4) - n.state(p, 4)).amax() < 1e-10);
        }
    }

    #[test]
    fn wilson_bounds() {
        let r = wilson_interval(0, 100);
        assert_eq!(r.rate, 0.0);
        assert_eq!(r.lower, 0.0);
        assert!(r.upper > 0.0 && r.upper < 0.05);
        let r = wilson_interval(50, 100);
        assert!((r.rate - 0.5).abs() < 1e-15);
        assert!(r.lower < 0.5 && r.upper > 0.5);
        assert!((0.5 - r.lower - (r.upper - 0.5)).abs() < 1e-12);
        assert_eq!(wilson_interval(7, 7).upper, 1.0);
    }

    #[test]
    fn violation_rate_examples() {
        let set = SafeSet::new(vec![box_region(&[-1.0, -1.0], &[1.0, 1.0]).unwrap()]).unwrap();
        let inside = vec![vec![DVector::zeros(2), DVector::zeros(2)]; 10];
        let e = PathEnsemble::from_paths(inside, 2, 0.1, 0, "t");
        assert!(violation_rate(&e, &set)
            .unwrap()
            .iter()
            .all(|r| r.count == 0));
        let half: Vec<Vec<DVector<f64>>> = (0..10)
            .map(|p| vec![DVector::from_element(2, if p % 2 == 0 { 0.0 } else { 3.0 })])
            .collect();
        let e = PathEnsemble::from_paths(half, 2, 0.1, 0, "t");
        let r = violation_rate(&e, &set).unwrap()[0];
        assert_eq!(r.rate, 0.5);
        assert!(r.lower < 0.5 && r.upper > 0.5);
    }

    #[test]
    fn ou_grid_and_interpolant_orders() {
        let fx = OuFixture {
            a: 1.0,
            s: 0.5,
            x0: 1.0,
            horizon: 1.0,
        };
        let pts = ou_strong_errors(&fx, 10, &[3, 4, 5, 6, 7], 400, 2).unwrap();
        let order = fit_order(&pts);
        assert!((0.4..0.65).contains(&order), "{order}");
    }

    #[test]
    fn fit_order_recovers_slope() {
        let pts: Vec<(f64, f64)> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&h: &f64| (h, 3.0 * h.powf(0.7)))
            .collect();
        assert!((fit_order(&pts) - 0.7).abs() < 1e-12);
    }
}
