//! Linear stochastic plant models.
//!
//! The true plant is `dX = [A_mu X + B (U + H_mu(X))] dt + [A_sigma + B H_sigma(X)] dW`;
//! the nominal plant drops `H_mu` and `H_sigma`. Both are discretized with
//! explicit Euler–Maruyama on the planner grid, and the nominal one-step map
//! is stacked over the horizon into the lifted form used by the planner:
//!
//! ```text
//! X = cal_a_mu x0 + b_hat U + cal_a_sigma W,   X = [x_1; ...; x_k'],  U = [u_0; ...; u_{k'-1}]
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Known part of the plant.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub a_mu: DMatrix<f64>,
    pub a_sigma: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl SystemModel {
    pub fn new(a_mu: DMatrix<f64>, a_sigma: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a_mu.nrows();
        if n == 0 || !a_mu.is_square() {
            return Err(Error::invalid("a_mu must be a nonempty square matrix"));
        }
        check_dim("a_sigma rows", n, a_sigma.nrows())?;
        check_dim("b rows", n, b.nrows())?;
        if a_sigma.ncols() == 0 {
            return Err(Error::invalid("a_sigma needs at least one noise column"));
        }
        if b.ncols() == 0 || b.ncols() > n {
            return Err(Error::invalid("b must have between 1 and n columns"));
        }
        if linalg::rank(&b) != b.ncols() {
            return Err(Error::invalid("b must have full column rank"));
        }
        Ok(Self { a_mu, a_sigma, b })
    }

    pub fn n(&self) -> usize {
        self.a_mu.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_w(&self) -> usize {
        self.a_sigma.ncols()
    }

    /// Replace the drift by the pre-closed loop `A_mu + B K`.
    pub fn with_static_feedback(mut self, gain: &DMatrix<f64>) -> Result<Self> {
        check_dim("feedback gain rows", self.m(), gain.nrows())?;
        check_dim("feedback gain cols", self.n(), gain.ncols())?;
        self.a_mu += &self.b * gain;
        Ok(self)
    }
}

/// Lipschitz and growth constants of the uncertain drift and diffusion.
///
/// `|H_mu(a)|^2 <= delta_mu^2 (1 + |a|^2)` and
/// `|H_sigma(a)|_F^2 <= delta_sigma^2 (1 + |a|^2)^(1/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct UncertaintyBounds {
    pub l_mu: f64,
    pub l_sigma: f64,
    pub delta_mu: f64,
    pub delta_sigma: f64,
}

impl UncertaintyBounds {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l_mu, self.l_sigma, self.delta_mu, self.delta_sigma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "uncertainty bounds must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

/// The unknown drift and diffusion terms. Only the simulator evaluates them.
pub trait UncertaintyFunctions: Send + Sync {
    /// `H_mu(x)`, an m-vector.
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `H_sigma(x)`, an m × n_w matrix.
    fn diffusion(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// No uncertainty: the true plant equals the nominal one.
#[derive(Debug, Clone, Copy)]
pub struct NoUncertainty {
    pub m: usize,
    pub n_w: usize,
}

impl UncertaintyFunctions for NoUncertainty {
    fn drift(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.m)
    }

    fn diffusion(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.m, self.n_w)
    }
}

/// One Euler–Maruyama step of the nominal plant on the grid `delta_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub delta_t: f64,
    pub k_prime: usize,
    /// `I + delta_t A_mu`
    pub transition: DMatrix<f64>,
    /// `delta_t B`
    pub input: DMatrix<f64>,
    /// `A_sigma`; increments are `N(0, delta_t I)`.
    pub noise: DMatrix<f64>,
}

pub fn discretize(model: &SystemModel, delta_t: f64, k_prime: usize) -> Result<DiscreteModel> {
    if !(delta_t > 0.0) || !delta_t.is_finite() {
        return Err(Error::invalid(format!(
            "delta_t must be positive, got {delta_t}"
        )));
    }
    if k_prime == 0 {
        return Err(Error::invalid("horizon must contain at least one step"));
    }
    let n = model.n();
    Ok(DiscreteModel {
        delta_t,
        k_prime,
        transition: DMatrix::identity(n, n) + &model.a_mu * delta_t,
        input: &model.b * delta_t,
        noise: model.a_sigma.clone(),
    })
}

impl DiscreteModel {
    pub fn n(&self) -> usize {
        self.transition.nrows()
    }

    pub fn m(&self) -> usize {
        self.input.ncols()
    }

    pub fn n_w(&self) -> usize {
        self.noise.ncols()
    }

    pub fn horizon(&self) -> f64 {
        self.delta_t * self.k_prime as f64
    }

    /// `x + dt (A x + B u) + A_sigma dw`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, dw: &DVector<f64>) -> DVector<f64> {
        &self.transition * x + &self.input * u + &self.noise * dw
    }

    /// States `x_0 ..= x_{k'}` of the step-by-step recursion.
    pub fn rollout(
        &self,
        x0: &DVector<f64>,
        inputs: &[DVector<f64>],
        increments: &[DVector<f64>],
    ) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(inputs.len() + 1);
        out.push(x0.clone());
        for (u, dw) in inputs.iter().zip(increments) {
            let next = self.step(out.last().unwrap(), u, dw);
            out.push(next);
        }
        out
    }
}

/// Stacked-horizon maps of the nominal plant.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedModel {
    pub n: usize,
    pub m: usize,
    pub n_w: usize,
    pub k_prime: usize,
    /// (n k') × n, block k is `transition^(k+1)`.
    pub cal_a_mu: DMatrix<f64>,
    /// (n k') × (m k'), block (k, i) is `transition^(k-i) input` for i <= k.
    pub b_hat: DMatrix<f64>,
    /// (n k') × (n_w k'), block (k, i) is `transition^(k-i) noise` for i <= k.
    pub cal_a_sigma: DMatrix<f64>,
}

pub fn build_lifted(dm: &DiscreteModel) -> LiftedModel {
    let (n, m, n_w, kp) = (dm.n(), dm.m(), dm.n_w(), dm.k_prime);
    // powers[p] = transition^p
    let mut powers = Vec::with_capacity(kp + 1);
    powers.push(DMatrix::<f64>::identity(n, n));
    for p in 1..=kp {
        let next = &dm.transition * &powers[p - 1];
        powers.push(next);
    }
    let mut cal_a_mu = DMatrix::zeros(n * kp, n);
    let mut b_hat = DMatrix::zeros(n * kp, m * kp);
    let mut cal_a_sigma = DMatrix::zeros(n * kp, n_w * kp);
    for k in 0..kp {
        cal_a_mu
            .view_mut((k * n, 0), (n, n))
            .copy_from(&powers[k + 1]);
        for i in 0..=k {
            let p = &powers[k - i];
            b_hat
                .view_mut((k * n, i * m), (n, m))
                .copy_from(&(p * &dm.input));
            cal_a_sigma
                .view_mut((k * n, i * n_w), (n, n_w))
                .copy_from(&(p * &dm.noise));
        }
    }
    LiftedModel {
        n,
        m,
        n_w,
        k_prime: kp,
        cal_a_mu,
        b_hat,
        cal_a_sigma,
    }
}

impl LiftedModel {
    /// Stacked states `[x_1; ...; x_k']`.
    pub fn stacked(&self, x0: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.cal_a_mu * x0 + &self.b_hat * u + &self.cal_a_sigma * w
    }

    /// `n × n` block of the stacked state vector for state index `k` in `1..=k'`.
    pub fn state_rows(&self, k: usize) -> std::ops::Range<usize> {
        (k - 1) * self.n..k * self.n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn integrator_with_constant_input() {
        let n = 2;
        let model = SystemModel::new(
            DMatrix::zeros(n, n),
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n),
        )
        .unwrap();
        let dm = discretize(&model, 0.1, 10).unwrap();
        let u = vec![DVector::from_element(n, 1.0); 10];
        let w = vec![DVector::zeros(n); 10];
        let xs = dm.rollout(&DVector::zeros(n), &u, &w);
        for (k, x) in xs.iter().enumerate() {
            for v in x.iter() {
                assert!((v - 0.1 * k as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_step() {
        let model = SystemModel::new(
            -DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!(discretize(&model, 0.0, 5).is_err());
        assert!(discretize(&model, -0.1, 5).is_err());
        assert!(discretize(&model, 0.1, 0).is_err());
    }

    #[test]
    fn rejects_rank_deficient_input() {
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 0.0, 0.0]);
        assert!(SystemModel::new(DMatrix::zeros(3, 3), DMatrix::identity(3, 3), b).is_err());
    }

    #[test]
    fn single_step_lift_is_one_step_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = SystemModel::new(
            random_matrix(&mut rng, 3, 3),
            random_matrix(&mut rng, 3, 2),
            random_matrix(&mut rng, 3, 2),
        )
        .unwrap();
        let dm = discretize(&model, 0.05, 1).unwrap();
        let lifted = build_lifted(&dm);
        assert_eq!(lifted.cal_a_mu, dm.transition);
        assert_eq!(lifted.b_hat, dm.input);
        assert_eq!(lifted.cal_a_sigma, dm.noise);
    }

    #[test]
    fn free_response_is_matrix_powers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = SystemModel::new(
            random_matrix(&mut rng, 3, 3),
            random_matrix(&mut rng, 3, 3),
            random_matrix(&mut rng, 3, 1),
        )
        .unwrap();
        let dm = discretize(&model, 0.1, 3).unwrap();
        let lifted = build_lifted(&dm);
        let x0 = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let stacked = lifted.stacked(&x0, &DVector::zeros(3), &DVector::zeros(9));
        let mut x = x0.clone();
        for k in 1..=3 {
            x = &dm.transition * x;
            let block = stacked.rows((k - 1) * 3, 3);
            assert!((block - &x).amax() < 1e-12);
        }
    }

    #[test]
    fn lifted_matches_recursion_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, m, n_w, kp) = (4, 2, 3, 5);
        let model = SystemModel::new(
            random_matrix(&mut rng, n, n),
            random_matrix(&mut rng, n, n_w),
            random_matrix(&mut rng, n, m),
        )
        .unwrap();
        let dm = discretize(&model, 0.1, kp).unwrap();
        let lifted = build_lifted(&dm);
        let x0 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let us: Vec<_> = (0..kp)
            .map(|_| DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let ws: Vec<_> = (0..kp)
            .map(|_| DVector::from_fn(n_w, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let xs = dm.rollout(&x0, &us, &ws);
        let u_stack = DVector::from_iterator(m * kp, us.iter().flat_map(|u| u.iter().copied()));
        let w_stack = DVector::from_iterator(n_w * kp, ws.iter().flat_map(|w| w.iter().copied()));
        let stacked = lifted.stacked(&x0, &u_stack, &w_stack);
        for k in 1..=kp {
            let diff = stacked.rows((k - 1) * n, n) - &xs[k];
            assert!(diff.amax() <= 1e-12, "step {k}: {}", diff.amax());
        }
    }

    #[test]
    fn lifted_blocks_are_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = SystemModel::new(
            random_matrix(&mut rng, 2, 2),
            random_matrix(&mut rng, 2, 2),
            random_matrix(&mut rng, 2, 1),
        )
        .unwrap();
        let dm = discretize(&model, 0.2, 6).unwrap();
        let l = build_lifted(&dm);
        // State x_k (block row k-1) cannot depend on inputs or increments with time index >= k.
        for k in 1..=6 {
            for j in k..6 {
                assert_eq!(l.b_hat.view(((k - 1) * 2, j), (2, 1)).amax(), 0.0);
                assert_eq!(l.cal_a_sigma.view(((k - 1) * 2, j * 2), (2, 2)).amax(), 0.0);
            }
        }
    }
}
