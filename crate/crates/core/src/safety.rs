//! Safe set as a union of convex polytopes.
//!
//! A face `(c, d)` keeps `cᵀz ≤ d`. Faces written the other way round in a
//! scenario (`sense: ge`) are negated when the scenario is loaded.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::conic::{solve_relaxation, ConeProgram, LinExpr, SolveStatus};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub c: DVector<f64>,
    pub d: f64,
}

impl HalfSpace {
    pub fn new(c: DVector<f64>, d: f64) -> Result<Self> {
        if c.iter().all(|v| *v == 0.0) {
            return Err(Error::invalid("half-space normal must be nonzero"));
        }
        if c.iter().any(|v| !v.is_finite()) || !d.is_finite() {
            return Err(Error::invalid("half-space must be finite"));
        }
        Ok(Self { c, d })
    }

    /// Build from `cᵀz ≥ d` by negation.
    pub fn from_ge(c: DVector<f64>, d: f64) -> Result<Self> {
        Self::new(-c, -d)
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// `cᵀz − d`; nonpositive on the safe side.
    pub fn value(&self, z: &DVector<f64>) -> f64 {
        self.c.dot(z) - self.d
    }

    /// Signed Euclidean distance to the face, positive on the safe side.
    pub fn margin(&self, z: &DVector<f64>) -> f64 {
        -self.value(z) / self.c.norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexRegion {
    half_spaces: Vec<HalfSpace>,
}

impl ConvexRegion {
    /// Validates dimensions and nonemptiness.
    pub fn new(half_spaces: Vec<HalfSpace>) -> Result<Self> {
        let region = Self::new_unchecked(half_spaces)?;
        if !region.is_nonempty()? {
            return Err(Error::invalid("region is empty"));
        }
        Ok(region)
    }

    /// Validates dimensions only.
    pub fn new_unchecked(half_spaces: Vec<HalfSpace>) -> Result<Self> {
        let Some(first) = half_spaces.first() else {
            return Err(Error::invalid("region needs at least one face"));
        };
        let n = first.dim();
        for h in &half_spaces {
            check_dim("face normal", n, h.dim())?;
        }
        Ok(Self { half_spaces })
    }

    pub fn faces(&self) -> &[HalfSpace] {
        &self.half_spaces
    }

    pub fn n_faces(&self) -> usize {
        self.half_spaces.len()
    }

    pub fn dim(&self) -> usize {
        self.half_spaces[0].dim()
    }

    pub fn contains(&self, z: &DVector<f64>) -> Result<bool> {
        check_dim("point", self.dim(), z.len())?;
        Ok(self.half_spaces.iter().all(|h| h.value(z) <= 0.0))
    }

    /// Smallest face margin; nonnegative iff the point is inside.
    pub fn min_margin(&self, z: &DVector<f64>) -> f64 {
        self.half_spaces
            .iter()
            .map(|h| h.margin(z))
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest face value `cᵀz − d`; the loss whose tail the safety check uses.
    pub fn max_face_value(&self, z: &DVector<f64>) -> f64 {
        self.half_spaces
            .iter()
            .map(|h| h.value(z))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Support function `max uᵀz` over the region; `None` when unbounded along `u`.
    pub fn support(&self, u: &DVector<f64>) -> Result<Option<f64>> {
        check_dim("support direction", self.dim(), u.len())?;
        let mut p = ConeProgram::new();
        let z = p.add_vars(self.dim());
        for h in &self.half_spaces {
            let mut e = LinExpr::constant(h.d);
            for (i, &zi) in z.iter().enumerate() {
                e.add_term(zi, -h.c[i]);
            }
            p.add_nonneg(e);
        }
        for (i, &zi) in z.iter().enumerate() {
            p.set_objective(zi, -u[i]);
        }
        let r = solve_relaxation(&p)?;
        match r.status {
            SolveStatus::Optimal => Ok(Some(-r.objective)),
            SolveStatus::Unbounded => Ok(None),
            SolveStatus::Infeasible => Err(Error::invalid("support of an empty region")),
            SolveStatus::NumericalFailure => {
                Err(Error::Numerical(format!("support LP: {}", r.message)))
            }
        }
    }

    /// Feasibility LP `{z : C z ≤ d}`, solved with the conic backend.
    pub fn is_nonempty(&self) -> Result<bool> {
        let mut p = ConeProgram::new();
        let z = p.add_vars(self.dim());
        for h in &self.half_spaces {
            // d - cᵀz >= 0
            let mut e = LinExpr::constant(h.d);
            for (i, &zi) in z.iter().enumerate() {
                e.add_term(zi, -h.c[i]);
            }
            p.add_nonneg(e);
        }
        let r = solve_relaxation(&p)?;
        match r.status {
            SolveStatus::Optimal => Ok(true),
            SolveStatus::Infeasible => Ok(false),
            SolveStatus::Unbounded => Ok(true),
            SolveStatus::NumericalFailure => Err(Error::Numerical(format!(
                "region feasibility check: {}",
                r.message
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeSet {
    regions: Vec<ConvexRegion>,
}

impl SafeSet {
    pub fn new(regions: Vec<ConvexRegion>) -> Result<Self> {
        let Some(first) = regions.first() else {
            return Err(Error::invalid("safe set needs at least one region"));
        };
        let n = first.dim();
        for r in &regions {
            check_dim("region dimension", n, r.dim())?;
        }
        Ok(Self { regions })
    }

    pub fn regions(&self) -> &[ConvexRegion] {
        &self.regions
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn dim(&self) -> usize {
        self.regions[0].dim()
    }

    pub fn contains(&self, z: &DVector<f64>) -> Result<bool> {
        check_dim("point", self.dim(), z.len())?;
        Ok(self.regions.iter().any(|r| r.contains(z).unwrap_or(false)))
    }

    /// `max_j min_l (d − cᵀz)/|c|`; positive iff `z` is strictly safe.
    pub fn min_signed_margin(&self, z: &DVector<f64>) -> Result<f64> {
        check_dim("point", self.dim(), z.len())?;
        Ok(self
            .regions
            .iter()
            .map(|r| r.min_margin(z))
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Axis-aligned bounding box of the union, if every region is bounded
    /// along every axis. Computed by LPs.
    pub fn bounding_box(&self) -> Result<Option<(DVector<f64>, DVector<f64>)>> {
        let n = self.dim();
        let mut lo = DVector::from_element(n, f64::INFINITY);
        let mut hi = DVector::from_element(n, f64::NEG_INFINITY);
        for r in &self.regions {
            for axis in 0..n {
                for sign in [1.0, -1.0] {
                    let mut p = ConeProgram::new();
                    let z = p.add_vars(n);
                    for h in r.faces() {
                        let mut e = LinExpr::constant(h.d);
                        for (i, &zi) in z.iter().enumerate() {
                            e.add_term(zi, -h.c[i]);
                        }
                        p.add_nonneg(e);
                    }
                    p.set_objective(z[axis], sign);
                    let s = solve_relaxation(&p)?;
                    match s.status {
                        SolveStatus::Optimal => {
                            let v = s.x[z[axis]];
                            if sign > 0.0 {
                                lo[axis] = lo[axis].min(v);
                            } else {
                                hi[axis] = hi[axis].max(v);
                            }
                        }
                        SolveStatus::Unbounded => return Ok(None),
                        _ => {
                            return Err(Error::Numerical(format!("bounding box LP: {}", s.message)))
                        }
                    }
                }
            }
        }
        Ok(Some((lo, hi)))
    }
}

/// Uniform split of the risk budget over the faces of a region.
pub fn allocate_risk(delta_s: f64, n_l: usize) -> Result<f64> {
    if !(delta_s > 0.0 && delta_s < 1.0) {
        return Err(Error::invalid(format!(
            "delta_s must lie in (0, 1), got {delta_s}"
        )));
    }
    if n_l == 0 {
        return Err(Error::invalid("a region needs at least one face"));
    }
    Ok(delta_s / n_l as f64)
}

/// Weighted split: `weights` are per-face risks that must sum to `delta_s`.
pub fn allocate_risk_weighted(delta_s: f64, weights: &[f64]) -> Result<Vec<f64>> {
    allocate_risk(delta_s, weights.len())?;
    if weights.iter().any(|w| !(*w > 0.0 && *w < 1.0)) {
        return Err(Error::invalid("face risks must lie in (0, 1)"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - delta_s).abs() > 1e-12 * delta_s.max(1.0) {
        return Err(Error::invalid(format!(
            "face risks sum to {sum}, expected {delta_s}"
        )));
    }
    Ok(weights.to_vec())
}

/// Box `lo ≤ z ≤ hi` as four (or 2n) faces.
pub fn box_region(lo: &[f64], hi: &[f64]) -> Result<ConvexRegion> {
    check_dim("box bounds", lo.len(), hi.len())?;
    let n = lo.len();
    let mut faces = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        faces.push(HalfSpace::new(e.clone(), hi[i])?);
        faces.push(HalfSpace::new(-e, -lo[i])?);
    }
    ConvexRegion::new(faces)
}

/// Box on selected coordinates of an `dim`-dimensional space; the other
/// coordinates are unconstrained.
pub fn axis_box_region(dim: usize, axes: &[usize], lo: &[f64], hi: &[f64]) -> Result<ConvexRegion> {
    check_dim("box lower bounds", axes.len(), lo.len())?;
    check_dim("box upper bounds", axes.len(), hi.len())?;
    let mut faces = Vec::with_capacity(2 * axes.len());
    for (k, &i) in axes.iter().enumerate() {
        if i >= dim {
            return Err(Error::invalid(format!(
                "box axis {i} out of range for dimension {dim}"
            )));
        }
        let mut e = DVector::zeros(dim);
        e[i] = 1.0;
        faces.push(HalfSpace::new(e.clone(), hi[k])?);
        faces.push(HalfSpace::new(-e, -lo[k])?);
    }
    ConvexRegion::new(faces)
}
