//! Gaussian and Wasserstein distributionally robust CVaR of half-space losses.
//!
//! For the loss `cᵀX − d` with `X ~ N(μ, Σ)` and tail mass `r`,
//!
//! ```text
//! CVaR    = cᵀμ − d + φ(Φ⁻¹(1 − r)) / r · sqrt(cᵀΣc)
//! DR-CVaR = CVaR + |c|₂ ρ / sqrt(r)
//! ```
//!
//! where the robust version is the worst case over the 2-Wasserstein ball of
//! radius `ρ` around the Gaussian.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::safety::{allocate_risk, ConvexRegion};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Risk budget of the safety requirement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskParams {
    pub delta_s: f64,
}

impl RiskParams {
    pub fn new(delta_s: f64) -> Result<Self> {
        allocate_risk(delta_s, 1)?;
        Ok(Self { delta_s })
    }

    /// Per-face tail mass `δ_s / n_l`.
    pub fn face_risk(&self, n_l: usize) -> Result<f64> {
        allocate_risk(self.delta_s, n_l)
    }
}

/// Radius of the 2-Wasserstein ambiguity ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityRadius(f64);

impl AmbiguityRadius {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::invalid(format!(
                "rho must be finite and >= 0, got {rho}"
            )));
        }
        Ok(Self(rho))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Acklam's rational approximation followed by one Newton step.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!(
            "quantile level must lie in (0, 1), got {p}"
        )));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    // Newton on Φ(x) = p; the upper tail is refined through the complement
    // so small 1 − p keeps its precision.
    let step = if x > 0.0 {
        ((1.0 - p) - 0.5 * libm::erfc(x * std::f64::consts::FRAC_1_SQRT_2)) / std_normal_pdf(x)
    } else {
        (std_normal_cdf(x) - p) / std_normal_pdf(x)
    };
    Ok(x - step)
}

/// `φ(Φ⁻¹(1 − r)) / r`, the Gaussian CVaR multiplier of the standard deviation.
pub fn cvar_coefficient(face_risk: f64) -> Result<f64> {
    let z = std_normal_quantile(1.0 - face_risk)?;
    Ok(std_normal_pdf(z) / face_risk)
}

/// `|c|₂ / sqrt(r)`, the multiplier of ρ in the robust term.
pub fn radius_coefficient(c: &DVector<f64>, face_risk: f64) -> f64 {
    c.norm() / face_risk.sqrt()
}

fn quad_form(c: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let v = (c.transpose() * sigma * c)[(0, 0)];
    if v < -1e-12 {
        return Err(Error::invalid(format!(
            "covariance is not PSD along the face normal (cᵀΣc = {v:e})"
        )));
    }
    Ok(v.max(0.0))
}

fn check_inputs(c: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>, fr: f64) -> Result<()> {
    check_dim("mean", c.len(), mu.len())?;
    check_dim("covariance rows", c.len(), sigma.nrows())?;
    check_dim("covariance cols", c.len(), sigma.ncols())?;
    if !(fr > 0.0 && fr < 1.0) {
        return Err(Error::invalid(format!(
            "face risk must lie in (0, 1), got {fr}"
        )));
    }
    Ok(())
}

pub fn gaussian_cvar_halfspace(
    c: &DVector<f64>,
    d: f64,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    face_risk: f64,
) -> Result<f64> {
    check_inputs(c, mu, sigma, face_risk)?;
    let var = quad_form(c, sigma)?;
    let mean = c.dot(mu) - d;
    if var == 0.0 {
        return Ok(mean);
    }
    Ok(mean + cvar_coefficient(face_risk)? * var.sqrt())
}

pub fn dr_cvar_halfspace(
    c: &DVector<f64>,
    d: f64,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    face_risk: f64,
    rho: AmbiguityRadius,
) -> Result<f64> {
    let g = gaussian_cvar_halfspace(c, d, mu, sigma, face_risk)?;
    if rho.value() == 0.0 {
        return Ok(g);
    }
    Ok(g + radius_coefficient(c, face_risk) * rho.value())
}

/// Per-face DR-CVaR values of a region under the uniform risk split.
/// Feasible iff every value is `≤ 0`.
pub fn union_bound_feasible(
    region: &ConvexRegion,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    delta_s: f64,
    rho: AmbiguityRadius,
) -> Result<(bool, Vec<f64>)> {
    let fr = allocate_risk(delta_s, region.n_faces())?;
    let weights = vec![fr; region.n_faces()];
    union_bound_feasible_weighted(region, mu, sigma, &weights, rho)
}

/// As [`union_bound_feasible`] with explicit per-face risks.
pub fn union_bound_feasible_weighted(
    region: &ConvexRegion,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    face_risks: &[f64],
    rho: AmbiguityRadius,
) -> Result<(bool, Vec<f64>)> {
    check_dim("face risks", region.n_faces(), face_risks.len())?;
    let margins = region
        .faces()
        .iter()
        .zip(face_risks)
        .map(|(h, &fr)| dr_cvar_halfspace(&h.c, h.d, mu, sigma, fr, rho))
        .collect::<Result<Vec<_>>>()?;
    Ok((margins.iter().all(|m| *m <= 0.0), margins))
}

/// Number of samples in the upper tail of mass `tail_mass` out of `n`.
pub fn tail_count(n: usize, tail_mass: f64) -> usize {
    let raw = tail_mass * n as f64;
    // guard against 0.05 * 10000 landing a hair above an integer
    let k = (raw * (1.0 - 1e-12)).ceil() as usize;
    k.clamp(1, n)
}

/// Sample CVaR: mean of the worst `⌈tail_mass·N⌉` samples.
pub fn empirical_cvar(samples: &[f64], tail_mass: f64) -> Result<f64> {
    Ok(empirical_cvar_with_se(samples, tail_mass)?.0)
}

/// Sample CVaR together with the standard error of the tail mean.
pub fn empirical_cvar_with_se(samples: &[f64], tail_mass: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("empirical CVaR of an empty sample"));
    }
    if !(tail_mass > 0.0 && tail_mass < 1.0) {
        return Err(Error::invalid(format!(
            "tail mass must lie in (0, 1), got {tail_mass}"
        )));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("sample contains NaN"));
    }
    let n = samples.len();
    let k = tail_count(n, tail_mass);
    let mut v = samples.to_vec();
    // worst k values end up in v[n-k..]
    v.select_nth_unstable_by(n - k, |a, b| a.total_cmp(b));
    let tail = &v[n - k..];
    let mean = tail.iter().sum::<f64>() / k as f64;
    let se = if k > 1 {
        let var = tail.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
        (var / k as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e1() -> DVector<f64> {
        DVector::from_vec(vec![1.0, 0.0])
    }

    #[test]
    fn pdf_at_zero() {
        assert!((std_normal_pdf(0.0) - 0.398_942_280_4).abs() < 1e-10);
    }

    #[test]
    fn quantile_round_trip() {
        assert_eq!(std_normal_quantile(0.5).unwrap(), 0.0);
        for p in [1e-10, 0.01, 0.024, 0.3, 0.5, 0.7, 0.99, 1.0 - 1e-8] {
            let x = std_normal_quantile(p).unwrap();
            assert!(
                (std_normal_cdf(x) - p).abs() < 1e-9 * p.max(1e-3),
                "p = {p}"
            );
        }
        assert!(std_normal_quantile(0.0).is_err());
        assert!(std_normal_quantile(1.0).is_err());
    }

    #[test]
    fn quantile_known_values() {
        // tabulated to 16 digits
        let q = std_normal_quantile(0.975).unwrap();
        assert!((q - 1.959_963_984_540_054).abs() < 1e-12, "{q:e}");
        assert!((std_normal_quantile(0.95).unwrap() - 1.644_853_626_951_472_2).abs() < 1e-12);
    }

    #[test]
    fn standard_tail_value() {
        let s = DMatrix::identity(2, 2);
        let v = gaussian_cvar_halfspace(&e1(), 0.0, &DVector::zeros(2), &s, 0.05).unwrap();
        assert!((v - 2.0627).abs() < 1e-3, "{v}");
    }

    #[test]
    fn zero_variance_cases() {
        let z = DMatrix::zeros(2, 2);
        let mu = DVector::from_vec(vec![0.7, 3.0]);
        let v = gaussian_cvar_halfspace(&e1(), 0.2, &mu, &z, 0.05).unwrap();
        assert_eq!(v, 0.7 - 0.2);
        let v = gaussian_cvar_halfspace(&e1(), 0.7, &mu, &z, 0.05).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn robust_term() {
        let s = DMatrix::identity(2, 2) * 0.3;
        let mu = DVector::from_vec(vec![0.1, 0.0]);
        let g = gaussian_cvar_halfspace(&e1(), 1.0, &mu, &s, 0.04).unwrap();
        let r0 = dr_cvar_halfspace(
            &e1(),
            1.0,
            &mu,
            &s,
            0.04,
            AmbiguityRadius::new(0.0).unwrap(),
        )
        .unwrap();
        let r = dr_cvar_halfspace(
            &e1(),
            1.0,
            &mu,
            &s,
            0.04,
            AmbiguityRadius::new(0.2).unwrap(),
        )
        .unwrap();
        assert_eq!(g, r0);
        assert!((r - g - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_psd_rejected() {
        let s = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        assert!(gaussian_cvar_halfspace(&e1(), 0.0, &DVector::zeros(2), &s, 0.05).is_err());
    }

    #[test]
    fn corridor_union_bound() {
        // corridor |y| <= 1
        let region = crate::safety::box_region(&[-10.0, -1.0], &[10.0, 1.0]).unwrap();
        let mu = DVector::zeros(2);
        let s = DMatrix::identity(2, 2) * 1e-4;
        let small = AmbiguityRadius::new(0.01).unwrap();
        let (ok, m) = union_bound_feasible(&region, &mu, &s, 0.05, small).unwrap();
        assert!(ok);
        // direct face-by-face evaluation
        for (h, v) in region.faces().iter().zip(&m) {
            let d = dr_cvar_halfspace(&h.c, h.d, &mu, &s, 0.0125, small).unwrap();
            assert_eq!(*v, d);
        }
        // the faces have slack 1 at the center, so rho > sqrt(fr) kills it
        let big = AmbiguityRadius::new(0.0125f64.sqrt() * 1.01).unwrap();
        let (ok, _) = union_bound_feasible(&region, &mu, &DMatrix::zeros(2, 2), 0.05, big).unwrap();
        assert!(!ok);
        let edge = AmbiguityRadius::new(0.0125f64.sqrt() * 0.99).unwrap();
        let (ok, _) =
            union_bound_feasible(&region, &mu, &DMatrix::zeros(2, 2), 0.05, edge).unwrap();
        assert!(ok);
    }

    #[test]
    fn empirical_cvar_small_cases() {
        assert_eq!(empirical_cvar(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 3.5);
        assert_eq!(empirical_cvar(&[2.5; 7], 0.1).unwrap(), 2.5);
        assert!(empirical_cvar(&[], 0.1).is_err());
        assert_eq!(tail_count(10_000, 0.05), 500);
        assert_eq!(tail_count(3, 0.05), 1);
    }

    fn cov_strategy() -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-1.0f64..1.0, 4).prop_map(|v| {
            let l = DMatrix::from_row_slice(2, 2, &v);
            &l * l.transpose()
        })
    }

    proptest! {
        #[test]
        fn robust_dominates(
            c in proptest::collection::vec(-2.0f64..2.0, 2),
            mu in proptest::collection::vec(-2.0f64..2.0, 2),
            s in cov_strategy(),
            d in -1.0f64..1.0,
            fr in 0.001f64..0.5,
            rho in 0.0f64..1.0,
        ) {
            let c = DVector::from_vec(c);
            prop_assume!(c.norm() > 1e-6);
            let mu = DVector::from_vec(mu);
            let g = gaussian_cvar_halfspace(&c, d, &mu, &s, fr).unwrap();
            let r = dr_cvar_halfspace(&c, d, &mu, &s, fr, AmbiguityRadius::new(rho).unwrap()).unwrap();
            prop_assert!(r >= g);
            prop_assert_eq!(r == g, rho == 0.0);
        }

        #[test]
        fn scale_covariance(
            c in proptest::collection::vec(-2.0f64..2.0, 2),
            mu in proptest::collection::vec(-2.0f64..2.0, 2),
            s in cov_strategy(),
            d in -1.0f64..1.0,
            t in 0.1f64..10.0,
            rho in 0.0f64..1.0,
        ) {
            let c = DVector::from_vec(c);
            prop_assume!(c.norm() > 1e-6);
            let mu = DVector::from_vec(mu);
            let rho = AmbiguityRadius::new(rho).unwrap();
            let a = dr_cvar_halfspace(&c, d, &mu, &s, 0.02, rho).unwrap();
            let b = dr_cvar_halfspace(&(&c * t), d * t, &mu, &s, 0.02, rho).unwrap();
            prop_assert!((b - t * a).abs() <= 1e-9 * (1.0 + b.abs()));
            let ga = gaussian_cvar_halfspace(&c, d, &mu, &s, 0.02).unwrap();
            let gb = gaussian_cvar_halfspace(&(&c * t), d * t, &mu, &s, 0.02).unwrap();
            prop_assert!((gb - t * ga).abs() <= 1e-9 * (1.0 + gb.abs()));
        }

        #[test]
        fn translation(
            c in proptest::collection::vec(-2.0f64..2.0, 2),
            mu in proptest::collection::vec(-2.0f64..2.0, 2),
            v in proptest::collection::vec(-2.0f64..2.0, 2),
            s in cov_strategy(),
            rho in 0.0f64..1.0,
        ) {
            let c = DVector::from_vec(c);
            prop_assume!(c.norm() > 1e-6);
            let mu = DVector::from_vec(mu);
            let v = DVector::from_vec(v);
            let rho = AmbiguityRadius::new(rho).unwrap();
            let a = dr_cvar_halfspace(&c, 0.3, &mu, &s, 0.05, rho).unwrap();
            let b = dr_cvar_halfspace(&c, 0.3, &(&mu + &v), &s, 0.05, rho).unwrap();
            prop_assert!((b - a - c.dot(&v)).abs() <= 1e-12 * (1.0 + a.abs() + b.abs()));
        }

        #[test]
        fn robust_strictly_increasing_in_rho(r1 in 0.0f64..1.0, dr in 1e-6f64..1.0) {
            let s = DMatrix::identity(2, 2);
            let mu = DVector::zeros(2);
            let a = dr_cvar_halfspace(&e1(), 0.0, &mu, &s, 0.05, AmbiguityRadius::new(r1).unwrap()).unwrap();
            let b = dr_cvar_halfspace(&e1(), 0.0, &mu, &s, 0.05, AmbiguityRadius::new(r1 + dr).unwrap()).unwrap();
            prop_assert!(b > a);
        }
    }
}
