//! L1 adaptive augmentation and the ambiguity-radius certificate.
//!
//! The loop has three pieces running on a fine clock `dt`:
//!
//! * predictor `dX̂ = [−λ_s X̃ + f(X) + B (U_L1 + Λ̂)] dt`, with `X̃ = X̂ − X`
//!   and `f(X) = A_mu X + B U*`,
//! * piecewise-constant adaptation `Λ̂ = λ_s (1 − e^{λ_s T_s})⁻¹ Θ_ad X̃(i T_s)`
//!   on `[i T_s, (i+1) T_s)`, zero on the first interval,
//! * low-pass filter `U̇_L1 = −ω (U_L1 + Λ̂)`, stepped exactly.
//!
//! The certified radius is `ρ = ρ_r + ρ_a + Δ_Aσ` with
//! `ρ_r = sqrt(α₂/α₁)·gap + Δ_Aσ + ε`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dynamics::{SystemModel, UncertaintyBounds, UncertaintyFunctions};
use crate::error::{check_dim, Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlParams {
    pub omega: f64,
    pub t_s: f64,
    pub lambda_s: f64,
}

impl ControlParams {
    pub fn new(omega: f64, t_s: f64, lambda_s: f64) -> Result<Self> {
        let p = Self {
            omega,
            t_s,
            lambda_s,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("omega", self.omega),
            ("t_s", self.t_s),
            ("lambda_s", self.lambda_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// `P`, `Q` with `A_muᵀP + P A_mu = −Q` and the eigenvalue bounds of `P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCert {
    pub p_mat: DMatrix<f64>,
    pub q_mat: DMatrix<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl LyapunovCert {
    /// Solve the Lyapunov equation for a Hurwitz `a` and symmetric PD `q`.
    pub fn solve(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        check_dim("lyapunov q", n, q.nrows())?;
        if linalg::min_eigenvalue(q) <= 0.0 {
            return Err(Error::invalid("Q must be positive definite"));
        }
        // vec(AᵀP + PA) = (I ⊗ Aᵀ + Aᵀ ⊗ I) vec(P)
        let eye = DMatrix::<f64>::identity(n, n);
        let at = a.transpose();
        let big = eye.kronecker(&at) + at.kronecker(&eye);
        let rhs = -DVector::from_column_slice(q.as_slice());
        let sol = big
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::invalid("Lyapunov equation is singular (A_mu not Hurwitz)"))?;
        let p = linalg::symmetrize(&DMatrix::from_column_slice(n, n, sol.as_slice()));
        let alpha1 = linalg::min_eigenvalue(&p);
        let alpha2 = linalg::max_eigenvalue(&p);
        if !(alpha1 > 0.0) {
            return Err(Error::invalid(
                "A_mu is not Hurwitz: Lyapunov solution is not PD",
            ));
        }
        Ok(Self {
            p_mat: p,
            q_mat: q.clone(),
            alpha1,
            alpha2,
        })
    }

    /// `|AᵀP + PA + Q|_max`
    pub fn residual(&self, a: &DMatrix<f64>) -> f64 {
        (a.transpose() * &self.p_mat + &self.p_mat * a + &self.q_mat)
            .abs()
            .max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoCertificateInputs {
    pub p_order: u32,
    pub delta_star: f64,
    /// `L_{2p}` distance between the true and nominal initial states.
    pub init_gap: f64,
    pub delta_a_sigma: f64,
    pub rho_a: f64,
    pub epsilon: f64,
    pub zeta1_coeff: f64,
    pub zeta2_coeff: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Optional additive allowance for discretization error.
    #[serde(default)]
    pub inflation: f64,
}

impl RhoCertificateInputs {
    /// Non-normative defaults: unit ζ coefficients, β from the uncertainty
    /// bounds, `Δ_Aσ = |A_σ|_F sqrt(ΔT k')`.
    pub fn with_defaults(
        bounds: &UncertaintyBounds,
        a_sigma: &DMatrix<f64>,
        delta_t: f64,
        k_prime: usize,
    ) -> Self {
        Self {
            p_order: 1,
            delta_star: 0.0,
            init_gap: 0.0,
            delta_a_sigma: default_delta_a_sigma(a_sigma, delta_t, k_prime),
            rho_a: 0.0,
            epsilon: 0.0,
            zeta1_coeff: 1.0,
            zeta2_coeff: 1.0,
            beta1: 1.0 / (bounds.l_mu + bounds.delta_mu + 1.0),
            beta2: 1.0 / (bounds.l_sigma + bounds.delta_sigma + 1.0),
            inflation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_order == 0 {
            return Err(Error::invalid("p_order must be >= 1"));
        }
        let vals = [
            ("delta_star", self.delta_star),
            ("init_gap", self.init_gap),
            ("delta_a_sigma", self.delta_a_sigma),
            ("rho_a", self.rho_a),
            ("epsilon", self.epsilon),
            ("zeta1_coeff", self.zeta1_coeff),
            ("zeta2_coeff", self.zeta2_coeff),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("inflation", self.inflation),
        ];
        for (name, v) in vals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

pub fn default_delta_a_sigma(a_sigma: &DMatrix<f64>, delta_t: f64, k_prime: usize) -> f64 {
    a_sigma.norm() * (delta_t * k_prime as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterCheck {
    pub pass: bool,
    /// `β₁ − ζ₁/√ω`
    pub slack1: f64,
    /// `β₂ − ζ₂ √T_s`
    pub slack2: f64,
}

pub fn verify_parameter_conditions(
    params: &ControlParams,
    inputs: &RhoCertificateInputs,
) -> ParameterCheck {
    let slack1 = inputs.beta1 - inputs.zeta1_coeff / params.omega.sqrt();
    let slack2 = inputs.beta2 - inputs.zeta2_coeff * params.t_s.sqrt();
    ParameterCheck {
        pass: slack1 > 0.0 && slack2 > 0.0,
        slack1,
        slack2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoBreakdown {
    pub rho_r: f64,
    pub rho: f64,
    pub check: ParameterCheck,
}

/// Compose the certified radius. Fails when the parameter conditions do not hold.
pub fn compute_rho(
    params: &ControlParams,
    inputs: &RhoCertificateInputs,
    cert: &LyapunovCert,
) -> Result<RhoBreakdown> {
    inputs.validate()?;
    let check = verify_parameter_conditions(params, inputs);
    if !check.pass {
        return Err(Error::invalid(format!(
            "parameter conditions violated: slack1 = {:.6e}, slack2 = {:.6e}",
            check.slack1, check.slack2
        )));
    }
    Ok(compose_rho(inputs, cert, check))
}

fn compose_rho(
    inputs: &RhoCertificateInputs,
    cert: &LyapunovCert,
    check: ParameterCheck,
) -> RhoBreakdown {
    let rho_r = (cert.alpha2 / cert.alpha1).sqrt() * inputs.init_gap
        + inputs.delta_a_sigma
        + inputs.epsilon;
    let rho = rho_r + inputs.rho_a + inputs.delta_a_sigma + inputs.inflation;
    RhoBreakdown { rho_r, rho, check }
}

/// `Θ_ad = [I_m 0] B̄⁻¹` with `B̄ = [B, B⊥]`, `B⊥` an orthonormal basis of `range(B)^⊥`.
pub fn build_theta_ad(model: &SystemModel) -> Result<DMatrix<f64>> {
    let b = &model.b;
    let (n, m) = b.shape();
    if linalg::rank(b) != m {
        return Err(Error::invalid("B must have full column rank"));
    }
    let mut bbar = DMatrix::zeros(n, n);
    bbar.view_mut((0, 0), (n, m)).copy_from(b);
    if m < n {
        // eigenvectors of the projector onto range(B)^⊥ with eigenvalue 1
        let proj = DMatrix::identity(n, n) - b * linalg::pinv(b);
        let eig = SymmetricEigen::new(linalg::symmetrize(&proj));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| {
            eig.eigenvalues[j]
                .total_cmp(&eig.eigenvalues[i])
                .then(i.cmp(&j))
        });
        for (k, &i) in idx.iter().take(n - m).enumerate() {
            bbar.set_column(m + k, &eig.eigenvectors.column(i));
        }
    }
    let inv = bbar
        .try_inverse()
        .ok_or_else(|| Error::Numerical("[B, B⊥] is singular".into()))?;
    Ok(inv.rows(0, m).into_owned())
}

/// `λ_s (1 − e^{λ_s T_s})⁻¹`, negative for positive parameters.
pub fn adaptation_gain(params: &ControlParams) -> f64 {
    params.lambda_s / (1.0 - (params.lambda_s * params.t_s).exp())
}

/// Estimate held on the next sampling interval.
pub fn adaptation_update(
    x_tilde_at_sample: &DVector<f64>,
    params: &ControlParams,
    theta_ad: &DMatrix<f64>,
) -> DVector<f64> {
    theta_ad * x_tilde_at_sample * adaptation_gain(params)
}

/// State of one adaptive loop.
#[derive(Debug, Clone, PartialEq)]
pub struct L1DracState {
    pub u_l1: DVector<f64>,
    pub lambda_hat: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub theta_ad: DMatrix<f64>,
}

impl L1DracState {
    /// Predictor starts on the plant state; filter and estimate at zero.
    pub fn new(theta_ad: DMatrix<f64>, x0: &DVector<f64>) -> Self {
        let m = theta_ad.nrows();
        Self {
            u_l1: DVector::zeros(m),
            lambda_hat: DVector::zeros(m),
            x_hat: x0.clone(),
            theta_ad,
        }
    }

    /// Exact zero-order-hold step of `u̇ = −ω (u + Λ̂)`.
    pub fn filter_step(&mut self, params: &ControlParams, dt: f64) -> Result<()> {
        check_step(dt)?;
        let e = (-params.omega * dt).exp();
        self.u_l1 = &self.u_l1 * e + &self.lambda_hat * (e - 1.0);
        Ok(())
    }

    /// Euler step of the predictor given the plant state `x` and baseline input `u_star`.
    pub fn predictor_step(
        &mut self,
        model: &SystemModel,
        u_star: &DVector<f64>,
        x: &DVector<f64>,
        params: &ControlParams,
        dt: f64,
    ) -> Result<()> {
        check_step(dt)?;
        let f = known_drift(model, x, u_star);
        self.predictor_step_with_drift(model, &f, x, params, dt);
        Ok(())
    }

    /// Predictor step with the known drift `f` supplied by the caller.
    pub fn predictor_step_with_drift(
        &mut self,
        model: &SystemModel,
        f: &DVector<f64>,
        x: &DVector<f64>,
        params: &ControlParams,
        dt: f64,
    ) {
        let x_tilde = &self.x_hat - x;
        let drive = &self.u_l1 + &self.lambda_hat;
        let rate = -x_tilde * params.lambda_s + f + &model.b * drive;
        self.x_hat += rate * dt;
    }

    pub fn sample(&mut self, x: &DVector<f64>, params: &ControlParams) {
        let x_tilde = &self.x_hat - x;
        self.lambda_hat = adaptation_update(&x_tilde, params, &self.theta_ad);
    }
}

fn check_step(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("step must be positive, got {dt}")));
    }
    Ok(())
}

/// `f(X) = A_mu X + B U*`: the nominal drift under the baseline input.
pub fn known_drift(model: &SystemModel, x: &DVector<f64>, u_star: &DVector<f64>) -> DVector<f64> {
    &model.a_mu * x + &model.b * u_star
}

/// Time grid of the true-plant integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopGrid {
    pub delta_t: f64,
    pub k_prime: usize,
    /// Fine steps per planner step.
    pub substeps: usize,
}

impl LoopGrid {
    pub fn dt(&self) -> f64 {
        self.delta_t / self.substeps as f64
    }

    /// Fine steps per sampling period; errors unless `dt` divides `T_s`.
    pub fn samples_every(&self, params: &ControlParams) -> Result<usize> {
        if self.substeps == 0 {
            return Err(Error::invalid("substeps must be >= 1"));
        }
        let ratio = params.t_s / self.dt();
        let r = ratio.round();
        if r < 1.0 || (ratio - r).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::invalid(format!(
                "simulation step {} does not divide T_s = {}",
                self.dt(),
                params.t_s
            )));
        }
        Ok(r as usize)
    }
}

/// Loop variables at a planner grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopRecord {
    pub x: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub lambda_hat: DVector<f64>,
    pub u_l1: DVector<f64>,
    pub u_star: DVector<f64>,
    /// `U* + U_L1` applied at the start of the step.
    pub u: DVector<f64>,
}

/// Integrate one path of the true plant under `U = U* + U_L1`.
///
/// `u_star(i, x_i)` gives the baseline input on `[iΔT, (i+1)ΔT)` from the
/// grid state; `noise(i)` returns the `substeps` Brownian increments (each
/// already scaled by `sqrt(dt)`) for that step. The known drift
/// `A_mu x_i + B U*_i` is held over each planner step so that, with no
/// uncertainty and no augmentation, the grid states coincide with the
/// nominal Euler–Maruyama recursion. Returns `k' + 1` records.
#[allow(clippy::too_many_arguments)]
pub fn integrate_true_path(
    model: &SystemModel,
    uncertainty: &dyn UncertaintyFunctions,
    grid: &LoopGrid,
    l1: Option<&ControlParams>,
    theta_ad: &DMatrix<f64>,
    x0: &DVector<f64>,
    u_star: &mut dyn FnMut(usize, &DVector<f64>) -> DVector<f64>,
    noise: &mut dyn FnMut(usize) -> Vec<DVector<f64>>,
) -> Result<Vec<LoopRecord>> {
    let dt = grid.dt();
    let every = match l1 {
        Some(p) => grid.samples_every(p)?,
        None => usize::MAX,
    };
    let mut state = L1DracState::new(theta_ad.clone(), x0);
    let mut x = x0.clone();
    let mut records = Vec::with_capacity(grid.k_prime + 1);
    let mut tick = 0usize;
    let sample_due = |tick: usize| tick > 0 && tick.is_multiple_of(every);
    for i in 0..grid.k_prime {
        // a sampling instant on the grid is applied before the record
        if let Some(p) = l1 {
            if sample_due(tick) {
                state.sample(&x, p);
            }
        }
        let us = u_star(i, &x);
        records.push(LoopRecord {
            x: x.clone(),
            x_hat: state.x_hat.clone(),
            lambda_hat: state.lambda_hat.clone(),
            u_l1: state.u_l1.clone(),
            u: &us + &state.u_l1,
            u_star: us.clone(),
        });
        let f = known_drift(model, &x, &us);
        let dws = noise(i);
        if dws.len() != grid.substeps {
            return Err(Error::invalid(
                "noise source returned the wrong number of increments",
            ));
        }
        for (j, dw) in dws.iter().enumerate() {
            if let Some(p) = l1 {
                if j > 0 && sample_due(tick) {
                    state.sample(&x, p);
                }
            }
            let matched = &state.u_l1 + uncertainty.drift(&x);
            let diff = &model.a_sigma + &model.b * uncertainty.diffusion(&x);
            let x_next = &x + (&f + &model.b * matched) * dt + diff * dw;
            if let Some(p) = l1 {
                state.predictor_step_with_drift(model, &f, &x, p, dt);
                state.filter_step(p, dt)?;
            }
            x = x_next;
            tick += 1;
        }
    }
    records.push(LoopRecord {
        x: x.clone(),
        x_hat: state.x_hat.clone(),
        lambda_hat: state.lambda_hat.clone(),
        u_l1: state.u_l1.clone(),
        u_star: DVector::zeros(model.m()),
        u: state.u_l1.clone(),
    });
    Ok(records)
}

/// Single path with an open-loop schedule `U*_0 .. U*_{k'-1}` and noise drawn
/// from the seeded stream of path 0.
#[allow(clippy::too_many_arguments)]
pub fn run_l1drac_loop(
    model: &SystemModel,
    uncertainty: &dyn UncertaintyFunctions,
    u_star_schedule: &[DVector<f64>],
    params: Option<&ControlParams>,
    x0: &DVector<f64>,
    delta_t: f64,
    substeps: usize,
    seed: u64,
) -> Result<Vec<LoopRecord>> {
    if u_star_schedule.is_empty() {
        return Err(Error::invalid("schedule must cover at least one step"));
    }
    for u in u_star_schedule {
        check_dim("schedule input", model.m(), u.len())?;
    }
    let grid = LoopGrid {
        delta_t,
        k_prime: u_star_schedule.len(),
        substeps,
    };
    if substeps == 0 || !(delta_t > 0.0) {
        return Err(Error::invalid("delta_t and substeps must be positive"));
    }
    let theta = build_theta_ad(model)?;
    let streams = crate::rng::StreamKey::new(seed, "l1drac-loop");
    let mut rng_noise = |i: usize| streams.increments(0, i, substeps, model.n_w(), grid.dt());
    let mut sched = |i: usize, _x: &DVector<f64>| u_star_schedule[i].clone();
    integrate_true_path(
        model,
        uncertainty,
        &grid,
        params,
        &theta,
        x0,
        &mut sched,
        &mut rng_noise,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NoUncertainty;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn double_integrator() -> SystemModel {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -1.4]);
        let s = DMatrix::identity(2, 2) * 0.1;
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        SystemModel::new(a, s, b).unwrap()
    }

    #[test]
    fn theta_recovers_identity() {
        let m = double_integrator();
        let t = build_theta_ad(&m).unwrap();
        assert!(((&t * &m.b)[(0, 0)] - 1.0).abs() < 1e-12);

        let sq = SystemModel::new(
            DMatrix::identity(3, 3) * -1.0,
            DMatrix::identity(3, 3),
            DMatrix::identity(3, 3),
        )
        .unwrap();
        let t = build_theta_ad(&sq).unwrap();
        assert!((t - DMatrix::identity(3, 3)).abs().max() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
            let model =
                SystemModel::new(-DMatrix::identity(4, 4), DMatrix::identity(4, 4), b).unwrap();
            let t = build_theta_ad(&model).unwrap();
            assert!((&t * &model.b - DMatrix::identity(2, 2)).abs().max() < 1e-10);
        }
    }

    #[test]
    fn adaptation_coefficient() {
        let p = ControlParams::new(1.0, 0.01, 1.0).unwrap();
        let g = adaptation_gain(&p);
        assert!((g - 1.0 / (1.0 - 0.01f64.exp())).abs() < 1e-12);
        assert!((g + 99.50).abs() < 5e-3, "{g}");
        let theta = DMatrix::identity(2, 2);
        assert_eq!(
            adaptation_update(&DVector::zeros(2), &p, &theta),
            DVector::zeros(2)
        );
    }

    #[test]
    fn filter_fixed_point_and_zero() {
        let p = ControlParams::new(5.0, 0.01, 1.0).unwrap();
        let mut s = L1DracState::new(DMatrix::identity(1, 1), &DVector::zeros(1));
        for _ in 0..100 {
            s.filter_step(&p, 0.01).unwrap();
        }
        assert_eq!(s.u_l1[0], 0.0);
        s.lambda_hat = DVector::from_element(1, 2.0);
        for k in 1..=400 {
            s.filter_step(&p, 0.01).unwrap();
            let t = 0.01 * k as f64;
            let closed = -2.0 * (1.0 - (-5.0 * t).exp());
            assert!((s.u_l1[0] - closed).abs() < 1e-12);
        }
        assert!((s.u_l1[0] + 2.0).abs() < 1e-6);
        assert!(s.filter_step(&p, 0.0).is_err());
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn filter_matches_convolution_quadrature() {
        let omega = 10.0;
        let dt = 0.001;
        let p = ControlParams::new(omega, 0.01, 1.0).unwrap();
        // estimate switching every 10 fine steps
        let lam = |t: f64| {
            let i = (t / 0.01 + 1e-9).floor() as i64;
            (i as f64 * 0.7).sin() + 0.3
        };
        let mut s = L1DracState::new(DMatrix::identity(1, 1), &DVector::zeros(1));
        s.u_l1[0] = 0.5;
        let mut max_err: f64 = 0.0;
        for k in 0..200 {
            let t0 = k as f64 * dt;
            s.lambda_hat[0] = lam(t0);
            s.filter_step(&p, dt).unwrap();
            let t = t0 + dt;
            // u(t) = e^{-ωt} u0 - ω ∫ e^{-ω(t-τ)} Λ̂(τ) dτ, piecewise over sample intervals
            let mut integral = 0.0;
            let mut a = 0.0;
            while a < t - 1e-12 {
                let b = ((a / 0.01 + 1e-9).floor() + 1.0) * 0.01;
                let b = b.min(t);
                let v = lam(a);
                integral += simpson(|tau| (-omega * (t - tau)).exp() * v, a, b, 64);
                a = b;
            }
            let exact = (-omega * t).exp() * 0.5 - omega * integral;
            max_err = max_err.max((s.u_l1[0] - exact).abs());
        }
        assert!(max_err <= 1e-8, "{max_err:e}");
    }

    #[test]
    fn predictor_tracks_deterministic_plant() {
        let m = SystemModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -1.4]),
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap();
        let sched: Vec<_> = (0..20)
            .map(|i| DVector::from_element(1, (i as f64 * 0.3).cos()))
            .collect();
        let p = ControlParams::new(20.0, 0.01, 10.0).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let unc = NoUncertainty { m: 1, n_w: 2 };
        let path = run_l1drac_loop(&m, &unc, &sched, Some(&p), &x0, 0.1, 10, 1).unwrap();
        for r in &path {
            assert!((&r.x_hat - &r.x).norm() < 1e-12);
            assert!(r.u_l1.norm() <= 1e-6);
        }
    }

    #[test]
    fn predictor_error_contraction() {
        let m = double_integrator();
        let p = ControlParams::new(1.0, 0.01, 50.0).unwrap();
        let mut s = L1DracState::new(
            build_theta_ad(&m).unwrap(),
            &DVector::from_vec(vec![1.0, 1.0]),
        );
        let x = DVector::zeros(2);
        let u = DVector::zeros(1);
        let dt = 0.001;
        let before = &s.x_hat - &x;
        s.predictor_step(&m, &u, &x, &p, dt).unwrap();
        // frozen plant at the origin with f(0) = 0 except A_mu x̂ does not enter
        let after = &s.x_hat - &x;
        let ratio = after.norm() / before.norm();
        assert!((ratio - (1.0 - 50.0 * dt)).abs() < 1e-12);
    }

    #[test]
    fn predictor_equilibrium_under_constant_disturbance() {
        // dX̃/dt = -λ X̃ + B (Λ̂ - h) vanishes at λ X̃ = B (Λ̂ - h) when the
        // plant drift is the known drift plus B h.
        let m = double_integrator();
        let p = ControlParams::new(1.0, 0.01, 4.0).unwrap();
        let h = 0.3;
        let lam_hat = 0.1;
        let x = DVector::from_vec(vec![0.2, -0.1]);
        let u = DVector::zeros(1);
        let f = known_drift(&m, &x, &u);
        let x_tilde = (&m.b * (lam_hat - h)) / p.lambda_s;
        let mut s = L1DracState::new(build_theta_ad(&m).unwrap(), &(&x + &x_tilde));
        s.lambda_hat[0] = lam_hat;
        let plant_rate = &f + &m.b * h;
        let xhat_rate = -&x_tilde * p.lambda_s + &f + &m.b * lam_hat;
        assert!((xhat_rate - plant_rate).norm() < 1e-14);
        s.predictor_step(&m, &u, &x, &p, 1e-3).unwrap();
    }

    #[test]
    fn lyapunov_certificate() {
        let m = double_integrator();
        let q = DMatrix::identity(2, 2);
        let c = LyapunovCert::solve(&m.a_mu, &q).unwrap();
        assert!(c.residual(&m.a_mu) < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let v = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let quad = (v.transpose() * &c.p_mat * &v)[(0, 0)];
            assert!(c.alpha1 * v.norm_squared() <= quad + 1e-12);
            assert!(quad <= c.alpha2 * v.norm_squared() + 1e-12);
        }
        assert!(LyapunovCert::solve(&DMatrix::identity(2, 2), &q).is_err());
    }

    fn inputs() -> RhoCertificateInputs {
        RhoCertificateInputs {
            p_order: 1,
            delta_star: 0.0,
            init_gap: 0.0,
            delta_a_sigma: 0.3,
            rho_a: 0.2,
            epsilon: 0.1,
            zeta1_coeff: 1.0,
            zeta2_coeff: 1.0,
            beta1: 1.0,
            beta2: 1.0,
            inflation: 0.0,
        }
    }

    fn iso_cert(ratio: f64) -> LyapunovCert {
        LyapunovCert {
            p_mat: DMatrix::identity(1, 1),
            q_mat: DMatrix::identity(1, 1),
            alpha1: 1.0,
            alpha2: ratio,
        }
    }

    #[test]
    fn rho_composition() {
        let p = ControlParams::new(100.0, 0.01, 1.0).unwrap();
        let r = compute_rho(&p, &inputs(), &iso_cert(1.0)).unwrap();
        assert!((r.rho_r - 0.4).abs() < 1e-15);
        assert!((r.rho - 0.9).abs() < 1e-15);

        let mut i = inputs();
        i.init_gap = 0.5;
        i.delta_a_sigma = 0.0;
        i.epsilon = 0.0;
        i.rho_a = 0.0;
        let r = compute_rho(&p, &i, &iso_cert(4.0)).unwrap();
        assert!((r.rho_r - 1.0).abs() < 1e-15);

        i.init_gap = 0.0;
        i.epsilon = 1e-12;
        let r = compute_rho(&p, &i, &iso_cert(4.0)).unwrap();
        assert!(r.rho < 1e-11);

        i.inflation = 0.25;
        let r = compute_rho(&p, &i, &iso_cert(4.0)).unwrap();
        assert!((r.rho - 0.25).abs() < 1e-11);
    }

    #[test]
    fn parameter_conditions() {
        let mut i = inputs();
        let p = ControlParams::new(4.0, 0.01, 1.0).unwrap();
        let c = verify_parameter_conditions(&p, &i);
        assert!(c.pass && (c.slack1 - 0.5).abs() < 1e-15);

        i.beta2 = 0.1;
        let p = ControlParams::new(100.0, 0.04, 1.0).unwrap();
        let c = verify_parameter_conditions(&p, &i);
        assert!(!c.pass && (c.slack2 + 0.1).abs() < 1e-15);
        assert!(compute_rho(&p, &i, &iso_cert(1.0)).is_err());

        let lo = verify_parameter_conditions(&ControlParams::new(4.0, 0.01, 1.0).unwrap(), &i);
        let hi = verify_parameter_conditions(&ControlParams::new(9.0, 0.01, 1.0).unwrap(), &i);
        assert!(hi.slack1 > lo.slack1);
    }

    #[test]
    fn estimate_is_zero_on_first_interval_and_piecewise_constant() {
        let m = double_integrator();
        let unc = crate::uncertainty::RegisteredUncertainty::new(
            &crate::uncertainty::UncertaintySpec {
                drift: vec![crate::uncertainty::DriftTerm::Constant { value: vec![0.4] }],
                diffusion: vec![],
            },
            2,
            1,
            2,
        )
        .unwrap();
        let p = ControlParams::new(30.0, 0.02, 2.0).unwrap();
        let theta = build_theta_ad(&m).unwrap();
        let grid = LoopGrid {
            delta_t: 0.01,
            k_prime: 40,
            substeps: 1,
        };
        let x0 = DVector::zeros(2);
        let mut sched = |_: usize, _: &DVector<f64>| DVector::zeros(1);
        let mut noise = |_: usize| vec![DVector::zeros(2)];
        let recs = integrate_true_path(
            &m,
            &unc,
            &grid,
            Some(&p),
            &theta,
            &x0,
            &mut sched,
            &mut noise,
        )
        .unwrap();
        // records at t = 0, 0.01: inside [0, T_s)
        assert_eq!(recs[0].lambda_hat[0], 0.0);
        assert_eq!(recs[1].lambda_hat[0], 0.0);
        for k in 1..20 {
            // grid points 2k and 2k+1 lie in the same sampling interval
            assert_eq!(recs[2 * k].lambda_hat, recs[2 * k + 1].lambda_hat);
        }
        // the printed law settles at e^{-λ T_s} times the matched disturbance
        let target = 0.4 * (-p.lambda_s * p.t_s).exp();
        assert!(
            (recs[40].lambda_hat[0] - target).abs() < 0.01,
            "{}",
            recs[40].lambda_hat[0]
        );
    }

    #[test]
    fn step_must_divide_sampling_period() {
        let m = double_integrator();
        let sched = vec![DVector::zeros(1); 3];
        let p = ControlParams::new(10.0, 0.015, 1.0).unwrap();
        let unc = NoUncertainty { m: 1, n_w: 2 };
        let e = run_l1drac_loop(&m, &unc, &sched, Some(&p), &DVector::zeros(2), 0.1, 10, 0);
        assert!(e.is_err());
    }

    #[test]
    fn loop_is_deterministic() {
        let m = double_integrator();
        let sched: Vec<_> = (0..10)
            .map(|i| DVector::from_element(1, i as f64 * 0.1))
            .collect();
        let p = ControlParams::new(10.0, 0.01, 5.0).unwrap();
        let unc = NoUncertainty { m: 1, n_w: 2 };
        let x0 = DVector::from_vec(vec![0.5, 0.0]);
        let a = run_l1drac_loop(&m, &unc, &sched, Some(&p), &x0, 0.1, 10, 42).unwrap();
        let b = run_l1drac_loop(&m, &unc, &sched, Some(&p), &x0, 0.1, 10, 42).unwrap();
        assert_eq!(a, b);
        let c = run_l1drac_loop(&m, &unc, &sched, Some(&p), &x0, 0.1, 10, 43).unwrap();
        assert_ne!(a, c);
    }
}
