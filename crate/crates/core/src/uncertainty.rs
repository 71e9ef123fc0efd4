//! Registry of parametric uncertainty families.
//!
//! Scenario files cannot carry code, so the drift and diffusion
//! uncertainties are sums of a few declarative terms. Each term knows its
//! own Lipschitz and growth constants in closed form and the sum reports the
//! added constants.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{UncertaintyBounds, UncertaintyFunctions};
use crate::error::{Error, Result};
use crate::linalg::{matrix_from_rows, spectral_norm};

/// Largest slope of `r ↦ (1 + r²)^{1/4}`, attained at `r = √2`.
pub const STATE_NORM_SLOPE: f64 = 0.310_201_619_700_699_87;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftTerm {
    /// `h(x) = value`
    Constant { value: Vec<f64> },
    /// `h(x) = clamp(W x, -saturation, saturation)` componentwise.
    LinearSaturated { w: Vec<Vec<f64>>, saturation: f64 },
    /// `h(x) = amplitude ⊙ sin(W x + phase)`
    Sinusoidal {
        amplitude: Vec<f64>,
        w: Vec<Vec<f64>>,
        phase: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionTerm {
    /// `H(x) = value` (m × n_w).
    Constant { value: Vec<Vec<f64>> },
    /// `H(x) = scale · (1 + |x|²)^{1/4} · shape`
    StateNorm { scale: f64, shape: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySpec {
    #[serde(default)]
    pub drift: Vec<DriftTerm>,
    #[serde(default)]
    pub diffusion: Vec<DiffusionTerm>,
}

#[derive(Debug, Clone)]
enum Drift {
    Constant(DVector<f64>),
    LinearSaturated(DMatrix<f64>, f64),
    Sinusoidal(DVector<f64>, DMatrix<f64>, DVector<f64>),
}

#[derive(Debug, Clone)]
enum Diffusion {
    Constant(DMatrix<f64>),
    StateNorm(f64, DMatrix<f64>),
}

/// Compiled uncertainty: evaluates `H_mu`, `H_sigma` and carries their bounds.
#[derive(Debug, Clone)]
pub struct RegisteredUncertainty {
    n: usize,
    m: usize,
    n_w: usize,
    drift: Vec<Drift>,
    diffusion: Vec<Diffusion>,
    bounds: UncertaintyBounds,
}

fn mat(field: &str, rows: &[Vec<f64>], r: usize, c: usize) -> Result<DMatrix<f64>> {
    let m = matrix_from_rows(rows)
        .ok_or_else(|| Error::scenario(field, "rows have different lengths"))?;
    if m.nrows() != r || m.ncols() != c {
        return Err(Error::scenario(
            field,
            format!("expected {r}x{c}, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::scenario(field, "non-finite entry"));
    }
    Ok(m)
}

fn vec_of(field: &str, v: &[f64], len: usize) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(Error::scenario(
            field,
            format!("expected length {len}, got {}", v.len()),
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::scenario(field, "non-finite entry"));
    }
    Ok(DVector::from_column_slice(v))
}

impl RegisteredUncertainty {
    /// Compile a spec for a system with state dim `n`, input dim `m`, noise dim `n_w`.
    pub fn new(spec: &UncertaintySpec, n: usize, m: usize, n_w: usize) -> Result<Self> {
        let mut bounds = UncertaintyBounds::default();
        let mut drift = Vec::new();
        for (i, t) in spec.drift.iter().enumerate() {
            let f = |s: &str| format!("uncertainty.drift[{i}].{s}");
            match t {
                DriftTerm::Constant { value } => {
                    let v = vec_of(&f("value"), value, m)?;
                    bounds.delta_mu += v.norm();
                    drift.push(Drift::Constant(v));
                }
                DriftTerm::LinearSaturated { w, saturation } => {
                    let w = mat(&f("w"), w, m, n)?;
                    if !(*saturation >= 0.0 && saturation.is_finite()) {
                        return Err(Error::scenario(f("saturation"), "must be finite and >= 0"));
                    }
                    bounds.l_mu += spectral_norm(&w);
                    bounds.delta_mu += (m as f64).sqrt() * saturation;
                    drift.push(Drift::LinearSaturated(w, *saturation));
                }
                DriftTerm::Sinusoidal {
                    amplitude,
                    w,
                    phase,
                } => {
                    let a = vec_of(&f("amplitude"), amplitude, m)?;
                    let w = mat(&f("w"), w, m, n)?;
                    let p = vec_of(&f("phase"), phase, m)?;
                    bounds.l_mu += spectral_norm(&(DMatrix::from_diagonal(&a) * &w));
                    bounds.delta_mu += a.norm();
                    drift.push(Drift::Sinusoidal(a, w, p));
                }
            }
        }
        let mut diffusion = Vec::new();
        for (i, t) in spec.diffusion.iter().enumerate() {
            let f = |s: &str| format!("uncertainty.diffusion[{i}].{s}");
            match t {
                DiffusionTerm::Constant { value } => {
                    let v = mat(&f("value"), value, m, n_w)?;
                    bounds.delta_sigma += v.norm();
                    diffusion.push(Diffusion::Constant(v));
                }
                DiffusionTerm::StateNorm { scale, shape } => {
                    let e = mat(&f("shape"), shape, m, n_w)?;
                    if !(*scale >= 0.0 && scale.is_finite()) {
                        return Err(Error::scenario(f("scale"), "must be finite and >= 0"));
                    }
                    let fro = scale * e.norm();
                    bounds.delta_sigma += fro;
                    bounds.l_sigma += fro * STATE_NORM_SLOPE;
                    diffusion.push(Diffusion::StateNorm(*scale, e));
                }
            }
        }
        Ok(Self {
            n,
            m,
            n_w,
            drift,
            diffusion,
            bounds,
        })
    }

    /// Closed-form Lipschitz and growth constants of the registered terms.
    pub fn bounds(&self) -> UncertaintyBounds {
        self.bounds
    }

    pub fn is_zero(&self) -> bool {
        self.drift.is_empty() && self.diffusion.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }
}

impl UncertaintyFunctions for RegisteredUncertainty {
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for t in &self.drift {
            match t {
                Drift::Constant(v) => out += v,
                Drift::LinearSaturated(w, s) => out += (w * x).map(|v| v.clamp(-s, *s)),
                Drift::Sinusoidal(a, w, p) => {
                    out += a.component_mul(&(w * x + p).map(f64::sin));
                }
            }
        }
        out
    }

    fn diffusion(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.m, self.n_w);
        for t in &self.diffusion {
            match t {
                Diffusion::Constant(v) => out += v,
                Diffusion::StateNorm(s, e) => {
                    out += e * (s * (1.0 + x.norm_squared()).powf(0.25));
                }
            }
        }
        out
    }
}

/// Worst observed ratios against the registered bounds; every entry ≤ 1
/// means the sampled states are consistent with the bounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub drift_growth: f64,
    pub diffusion_growth: f64,
    pub drift_lipschitz: f64,
    pub diffusion_lipschitz: f64,
}

impl BoundCheck {
    pub fn passes(&self) -> bool {
        let tol = 1.0 + 1e-9;
        self.drift_growth <= tol
            && self.diffusion_growth <= tol
            && self.drift_lipschitz <= tol
            && self.diffusion_lipschitz <= tol
    }
}

fn ratio(value: f64, bound: f64) -> f64 {
    if value <= 1e-300 {
        0.0
    } else if bound <= 0.0 {
        f64::INFINITY
    } else {
        value / bound
    }
}

/// Spot-check `funcs` against `bounds` on random states of scale `radius`.
pub fn spot_check_bounds(
    funcs: &dyn UncertaintyFunctions,
    bounds: &UncertaintyBounds,
    n: usize,
    radius: f64,
    samples: usize,
    seed: u64,
) -> BoundCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        DVector::from_fn(n, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * radius
        })
    };
    let mut out = BoundCheck::default();
    for _ in 0..samples {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let (ha, hb) = (funcs.drift(&a), funcs.drift(&b));
        let (ga, gb) = (funcs.diffusion(&a), funcs.diffusion(&b));
        let grow = (1.0 + a.norm_squared()).sqrt();
        out.drift_growth = out
            .drift_growth
            .max(ratio(ha.norm(), bounds.delta_mu * grow));
        out.diffusion_growth = out
            .diffusion_growth
            .max(ratio(ga.norm(), bounds.delta_sigma * grow.sqrt()));
        let dist = (&a - &b).norm();
        out.drift_lipschitz = out
            .drift_lipschitz
            .max(ratio((ha - hb).norm(), bounds.l_mu * dist));
        out.diffusion_lipschitz = out
            .diffusion_lipschitz
            .max(ratio((ga - gb).norm(), bounds.l_sigma * dist));
    }
    out
}
