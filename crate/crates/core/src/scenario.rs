//! Scenario files: one JSON document describing a planning and validation run.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conic::BnbOptions;
use crate::dynamics::{discretize, DiscreteModel, SystemModel};
use crate::error::{Error, Result};
use crate::l1drac::{compute_rho, ControlParams, LyapunovCert, RhoBreakdown, RhoCertificateInputs};
use crate::linalg::matrix_from_rows;
use crate::planner::{BoundaryConditions, PlannerProblem};
use crate::risk::{AmbiguityRadius, RiskParams};
use crate::safety::{axis_box_region, ConvexRegion, HalfSpace, SafeSet};
use crate::uncertainty::{RegisteredUncertainty, UncertaintySpec};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub system: SystemSpec,
    #[serde(default)]
    pub uncertainty: UncertaintySpec,
    pub safe_set: SafeSetSpec,
    pub boundary: BoundarySpec,
    pub horizon: HorizonSpec,
    pub risk: RiskSpec,
    #[serde(default)]
    pub ambiguity: AmbiguitySpec,
    pub l1drac: L1Spec,
    pub cost: CostSpec,
    #[serde(default)]
    pub planner: PlannerSpec,
    pub monte_carlo: MonteCarloSpec,
    #[serde(default)]
    pub render: RenderSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub a_mu: Rows,
    pub a_sigma: Rows,
    pub b: Rows,
    /// Static gain `K` closed into the drift, `A_mu ← A_mu + B K`.
    #[serde(default)]
    pub prestabilizing_gain: Option<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafeSetSpec {
    pub regions: Vec<RegionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionSpec {
    /// `lo ≤ z[axes] ≤ hi`
    Box {
        axes: Vec<usize>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Polytope {
        faces: Vec<FaceSpec>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    #[default]
    Le,
    Ge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceSpec {
    pub c: Vec<f64>,
    pub d: f64,
    #[serde(default)]
    pub sense: Sense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub cov: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub initial: GaussianSpec,
    pub terminal: GaussianSpec,
    /// Initial law of the true plant; the planned one when absent.
    #[serde(default)]
    pub true_initial: Option<GaussianSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSpec {
    pub t: f64,
    pub delta_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskSpec {
    pub delta_s: f64,
    /// Per-region, per-face shares of `delta_s`; uniform when absent.
    #[serde(default)]
    pub face_weights: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmbiguitySpec {
    /// Configured radius. When absent the certified radius is used.
    #[serde(default)]
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L1Spec {
    pub omega: f64,
    pub t_s: f64,
    pub lambda_s: f64,
    /// Integration steps per planner step in the true-plant simulation.
    pub substeps: usize,
    #[serde(default)]
    pub certificate: Option<RhoCertificateInputs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub q: Rows,
    pub r: Rows,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerSpec {
    #[serde(default)]
    pub big_m: Option<f64>,
    #[serde(default = "default_gap_tol")]
    pub gap_tol: f64,
    #[serde(default = "default_backoff")]
    pub margin_backoff: f64,
}

fn default_gap_tol() -> f64 {
    1e-6
}

fn default_backoff() -> f64 {
    1e-6
}

impl Default for PlannerSpec {
    fn default() -> Self {
        Self {
            big_m: None,
            gap_tol: default_gap_tol(),
            margin_backoff: default_backoff(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSpec {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default = "default_w2_samples")]
    pub w2_samples: usize,
    #[serde(default = "default_w2_blocks")]
    pub w2_blocks: usize,
}

fn default_w2_samples() -> usize {
    2000
}

fn default_w2_blocks() -> usize {
    5
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSpec {
    /// State coordinates drawn on the horizontal and vertical axes.
    #[serde(default)]
    pub projection: Option<[usize; 2]>,
}

fn err(field: &str, message: impl Into<String>) -> Error {
    Error::Scenario {
        field: field.to_string(),
        message: message.into(),
    }
}

fn matrix(field: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(err(field, "entries must be finite"));
    }
    matrix_from_rows(rows).ok_or_else(|| err(field, "rows have different lengths"))
}

fn vector(field: &str, v: &[f64]) -> Result<DVector<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(err(field, "entries must be finite"));
    }
    Ok(DVector::from_row_slice(v))
}

/// Everything a run needs, validated and assembled from a scenario.
#[derive(Debug, Clone)]
pub struct BuiltScenario {
    pub scenario: Scenario,
    pub hash: String,
    /// Model with the prestabilizing gain closed in.
    pub model: SystemModel,
    pub dm: DiscreteModel,
    pub uncertainty: RegisteredUncertainty,
    pub safe_set: SafeSet,
    pub boundary: BoundaryConditions,
    pub boundary_true: BoundaryConditions,
    pub risk: RiskParams,
    pub rho: AmbiguityRadius,
    /// Certified radius, when the certificate could be composed.
    pub certified: Option<RhoBreakdown>,
    pub l1: ControlParams,
    pub substeps: usize,
    pub problem: PlannerProblem,
}

impl BuiltScenario {
    pub fn bnb_options(&self) -> BnbOptions {
        BnbOptions {
            gap_tol: self.scenario.planner.gap_tol,
            ..BnbOptions::default()
        }
    }

    /// Per-region, per-face tail masses.
    pub fn face_risks(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.safe_set.n_regions())
            .map(|j| {
                (0..self.safe_set.regions()[j].n_faces())
                    .map(|l| self.problem.face_risk(j, l))
                    .collect()
            })
            .collect()
    }
}

impl Scenario {
    /// Parse JSON, naming the offending field path and line on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            err(&path, format!("{inner}"))
        })?;
        if s.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(err(
                "schema_version",
                format!(
                    "unsupported version {}, expected {SCENARIO_SCHEMA_VERSION}",
                    s.schema_version
                ),
            ));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical serialization, so formatting does not matter.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn k_prime(&self) -> Result<usize> {
        let h = &self.horizon;
        if !(h.t > 0.0 && h.delta_t > 0.0 && h.t.is_finite()) {
            return Err(err("horizon", "t and delta_t must be positive"));
        }
        let ratio = h.t / h.delta_t;
        let k = ratio.round();
        if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
            return Err(err(
                "horizon",
                format!("delta_t = {} does not divide t = {}", h.delta_t, h.t),
            ));
        }
        Ok(k as usize)
    }

    /// Validate every field and assemble the model objects.
    pub fn build(&self) -> Result<BuiltScenario> {
        let sys = &self.system;
        let raw = SystemModel::new(
            matrix("system.a_mu", &sys.a_mu)?,
            matrix("system.a_sigma", &sys.a_sigma)?,
            matrix("system.b", &sys.b)?,
        )
        .map_err(|e| err("system", e.to_string()))?;
        let model = match &sys.prestabilizing_gain {
            Some(k) => raw
                .with_static_feedback(&matrix("system.prestabilizing_gain", k)?)
                .map_err(|e| err("system.prestabilizing_gain", e.to_string()))?,
            None => raw,
        };
        let (n, m, n_w) = (model.n(), model.m(), model.n_w());
        let k_prime = self.k_prime()?;
        let dm = discretize(&model, self.horizon.delta_t, k_prime)
            .map_err(|e| err("horizon", e.to_string()))?;
        let uncertainty = RegisteredUncertainty::new(&self.uncertainty, n, m, n_w)
            .map_err(|e| err("uncertainty", e.to_string()))?;

        let mut regions = Vec::with_capacity(self.safe_set.regions.len());
        for (j, r) in self.safe_set.regions.iter().enumerate() {
            let field = format!("safe_set.regions[{j}]");
            let region = match r {
                RegionSpec::Box { axes, lo, hi } => axis_box_region(n, axes, lo, hi),
                RegionSpec::Polytope { faces } => faces
                    .iter()
                    .map(|f| {
                        let c = vector(&field, &f.c)?;
                        match f.sense {
                            Sense::Le => HalfSpace::new(c, f.d),
                            Sense::Ge => HalfSpace::from_ge(c, f.d),
                        }
                    })
                    .collect::<Result<Vec<_>>>()
                    .and_then(ConvexRegion::new),
            }
            .map_err(|e| err(&field, e.to_string()))?;
            regions.push(region);
        }
        let safe_set = SafeSet::new(regions).map_err(|e| err("safe_set", e.to_string()))?;

        let gaussian = |field: &str, g: &GaussianSpec| -> Result<(DVector<f64>, DMatrix<f64>)> {
            let mean = vector(field, &g.mean)?;
            let cov = matrix(field, &g.cov)?;
            if mean.len() != n || cov.shape() != (n, n) {
                return Err(err(
                    field,
                    format!("expected a mean of length {n} and an {n} × {n} covariance"),
                ));
            }
            Ok((mean, cov))
        };
        let (mu0, sigma0) = gaussian("boundary.initial", &self.boundary.initial)?;
        let (mu_t, sigma_t) = gaussian("boundary.terminal", &self.boundary.terminal)?;
        let boundary = BoundaryConditions {
            mu0,
            mu_t,
            sigma0,
            sigma_t,
        };
        boundary
            .validate(n)
            .map_err(|e| err("boundary", e.to_string()))?;
        let boundary_true = match &self.boundary.true_initial {
            Some(g) => {
                let (mu0, sigma0) = gaussian("boundary.true_initial", g)?;
                let b = BoundaryConditions {
                    mu0,
                    sigma0,
                    ..boundary.clone()
                };
                b.validate(n)
                    .map_err(|e| err("boundary.true_initial", e.to_string()))?;
                b
            }
            None => boundary.clone(),
        };

        let risk =
            RiskParams::new(self.risk.delta_s).map_err(|e| err("risk.delta_s", e.to_string()))?;
        let l1s = &self.l1drac;
        let l1 = ControlParams::new(l1s.omega, l1s.t_s, l1s.lambda_s)
            .map_err(|e| err("l1drac", e.to_string()))?;
        if l1s.substeps == 0 {
            return Err(err("l1drac.substeps", "must be >= 1"));
        }
        let grid = crate::l1drac::LoopGrid {
            delta_t: dm.delta_t,
            k_prime,
            substeps: l1s.substeps,
        };
        grid.samples_every(&l1)
            .map_err(|e| err("l1drac.substeps", e.to_string()))?;
        let cert_inputs = l1s.certificate.unwrap_or_else(|| {
            RhoCertificateInputs::with_defaults(
                &uncertainty.bounds(),
                &model.a_sigma,
                dm.delta_t,
                k_prime,
            )
        });
        cert_inputs
            .validate()
            .map_err(|e| err("l1drac.certificate", e.to_string()))?;
        let certified = LyapunovCert::solve(&model.a_mu, &DMatrix::identity(n, n))
            .and_then(|c| compute_rho(&l1, &cert_inputs, &c))
            .ok();
        let rho = match (self.ambiguity.radius, &certified) {
            (Some(r), _) => AmbiguityRadius::new(r).map_err(|e| err("ambiguity.radius", e.to_string()))?,
            (None, Some(c)) => AmbiguityRadius::new(c.rho)?,
            (None, None) => {
                return Err(err(
                    "ambiguity.radius",
                    "no radius configured and the certificate could not be composed (parameter conditions or Lyapunov solve failed)",
                ))
            }
        };

        let mut problem = PlannerProblem::new(
            dm.clone(),
            matrix("cost.q", &self.cost.q)?,
            matrix("cost.r", &self.cost.r)?,
            boundary.clone(),
            safe_set.clone(),
            risk,
            rho,
        )
        .map_err(|e| err("cost", e.to_string()))?;
        problem.big_m = self.planner.big_m;
        problem.margin_backoff = self.planner.margin_backoff;
        if let Some(w) = &self.risk.face_weights {
            problem.face_risks = Some(
                w.iter()
                    .map(|ws| crate::safety::allocate_risk_weighted(risk.delta_s, ws))
                    .collect::<Result<_>>()
                    .map_err(|e| err("risk.face_weights", e.to_string()))?,
            );
        }
        problem
            .validate()
            .map_err(|e| err("planner", e.to_string()))?;
        if !(self.planner.gap_tol >= 0.0) {
            return Err(err("planner.gap_tol", "must be >= 0"));
        }
        if self.monte_carlo.n_paths == 0 {
            return Err(err("monte_carlo.n_paths", "must be >= 1"));
        }
        if let Some([a, b]) = self.render.projection {
            if a >= n || b >= n {
                return Err(err(
                    "render.projection",
                    format!("indices must be below {n}"),
                ));
            }
        }
        Ok(BuiltScenario {
            scenario: self.clone(),
            hash: self.hash(),
            model,
            dm,
            uncertainty,
            safe_set,
            boundary,
            boundary_true,
            risk,
            rho,
            certified,
            l1,
            substeps: l1s.substeps,
            problem,
        })
    }
}
