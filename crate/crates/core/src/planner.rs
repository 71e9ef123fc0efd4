//! Distributionally robust covariance steering.
//!
//! Inputs use disturbance feedback
//!
//! ```text
//! u_k = v_k + K_k s,   s = [x_0 − μ_0; w_0; ...; w_{k'−1}],   Cov(s) = S = diag(Σ_0, ΔT I)
//! ```
//!
//! with `K_k` acting only on `x_0 − μ_0` and `w_0 .. w_{k−1}`. The state
//! deviation is `x_k − μ_k = Ỹ_k S^{−1/2} s` where the factors follow
//!
//! ```text
//! Ỹ_0 = [Σ_0^{1/2}, 0],   Ỹ_{k+1} = Ā Ỹ_k + ΔT B K_k S^{1/2} + [0 .. A_σ sqrt(ΔT) in block w_k]
//! ```
//!
//! so `Σ_k = Ỹ_k Ỹ_kᵀ`. Everything in the program is affine in
//! `(μ, v, K, Ỹ)` apart from the cone constraints: one second-order cone per
//! (state, face normal) bounds `sqrt(cᵀΣ_k c)`, the expected cost sits in an
//! epigraph cone, and `Σ_{k'} ⪯ Σ_T` is split into one small semidefinite
//! block per column group of `Ỹ_{k'}`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{
    branch_and_bound, BnbOptions, ConeProgram, LinExpr, Residuals, SolveStats, SolveStatus,
};
use crate::dynamics::{build_lifted, DiscreteModel, LiftedModel};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::risk::{cvar_coefficient, dr_cvar_halfspace, AmbiguityRadius, RiskParams};
use crate::safety::SafeSet;

/// State means and covariances at `k = 0 ..= k'`.
pub type Moments = (Vec<DVector<f64>>, Vec<DMatrix<f64>>);

/// Fallback Big-M when a region is unbounded along a face normal.
pub const FALLBACK_BIG_M: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub mu0: DVector<f64>,
    pub mu_t: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub sigma_t: DMatrix<f64>,
}

impl BoundaryConditions {
    pub fn validate(&self, n: usize) -> Result<()> {
        check_dim("mu0", n, self.mu0.len())?;
        check_dim("mu_t", n, self.mu_t.len())?;
        for (name, s) in [("sigma0", &self.sigma0), ("sigma_t", &self.sigma_t)] {
            check_dim("covariance rows", n, s.nrows())?;
            check_dim("covariance cols", n, s.ncols())?;
            if !linalg::is_psd(s, 1e-10) {
                return Err(Error::invalid(format!("{name} must be symmetric PSD")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PlannerProblem {
    pub dm: DiscreteModel,
    pub lifted: LiftedModel,
    /// Per-step state weights for `x_1 .. x_{k'}` (the blocks of the stacked 𝒬).
    pub q_blocks: Vec<DMatrix<f64>>,
    /// Per-step input weights for `u_0 .. u_{k'−1}` (the blocks of ℛ).
    pub r_blocks: Vec<DMatrix<f64>>,
    pub boundary: BoundaryConditions,
    pub safe_set: SafeSet,
    pub risk: RiskParams,
    pub rho: AmbiguityRadius,
    /// `None` computes a per-face value from the geometry.
    pub big_m: Option<f64>,
    /// Optional per-region, per-face risks (each region's entries sum to δ_s).
    pub face_risks: Option<Vec<Vec<f64>>>,
    /// Extra tightening of every face constraint, absorbing solver tolerance.
    pub margin_backoff: f64,
}

impl PlannerProblem {
    pub fn new(
        dm: DiscreteModel,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        boundary: BoundaryConditions,
        safe_set: SafeSet,
        risk: RiskParams,
        rho: AmbiguityRadius,
    ) -> Result<Self> {
        let kp = dm.k_prime;
        let lifted = build_lifted(&dm);
        let p = Self {
            lifted,
            q_blocks: vec![q; kp],
            r_blocks: vec![r; kp],
            dm,
            boundary,
            safe_set,
            risk,
            rho,
            big_m: None,
            face_risks: None,
            margin_backoff: 1e-6,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.dm.n()
    }

    pub fn k_prime(&self) -> usize {
        self.dm.k_prime
    }

    /// Block-diagonal stacked state weight 𝒬.
    pub fn stacked_q(&self) -> DMatrix<f64> {
        linalg::block_diag(&self.q_blocks)
    }

    /// Block-diagonal stacked input weight ℛ.
    pub fn stacked_r(&self) -> DMatrix<f64> {
        linalg::block_diag(&self.r_blocks)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, kp) = (self.dm.n(), self.dm.m(), self.dm.k_prime);
        self.boundary.validate(n)?;
        check_dim("safe set dimension", n, self.safe_set.dim())?;
        check_dim("state weight count", kp, self.q_blocks.len())?;
        check_dim("input weight count", kp, self.r_blocks.len())?;
        for q in &self.q_blocks {
            check_dim("state weight", n, q.nrows())?;
            if !linalg::is_psd(q, 1e-12) || linalg::min_eigenvalue(q) <= 0.0 {
                return Err(Error::invalid(
                    "state weights must be symmetric positive definite",
                ));
            }
        }
        for r in &self.r_blocks {
            check_dim("input weight", m, r.nrows())?;
            if !linalg::is_psd(r, 1e-12) || linalg::min_eigenvalue(r) <= 0.0 {
                return Err(Error::invalid(
                    "input weights must be symmetric positive definite",
                ));
            }
        }
        if let Some(mv) = self.big_m {
            if !(mv > 0.0 && mv.is_finite()) {
                return Err(Error::invalid("big_m must be positive"));
            }
        }
        if let Some(fr) = &self.face_risks {
            check_dim("face risk regions", self.safe_set.n_regions(), fr.len())?;
            for (reg, w) in self.safe_set.regions().iter().zip(fr) {
                crate::safety::allocate_risk_weighted(self.risk.delta_s, w)?;
                check_dim("face risks", reg.n_faces(), w.len())?;
            }
        }
        if !(self.margin_backoff >= 0.0) {
            return Err(Error::invalid("margin_backoff must be >= 0"));
        }
        Ok(())
    }

    /// Tail mass used for face `l` of region `j`.
    pub fn face_risk(&self, j: usize, l: usize) -> Result<f64> {
        match &self.face_risks {
            Some(w) => Ok(w[j][l]),
            None => self.risk.face_risk(self.safe_set.regions()[j].n_faces()),
        }
    }

    fn noise_cols(&self) -> usize {
        self.n() + self.dm.n_w() * self.dm.k_prime
    }
}

/// Feedforward, disturbance feedback and region assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerDecision {
    /// Stacked feedforward `[v_0; ...; v_{k'−1}]`.
    pub v: DVector<f64>,
    /// `(m k') × (n + n_w k')`, block-lower-triangular on the noise columns.
    pub k_gain: DMatrix<f64>,
    /// `n_o × k'` binary assignment; column k covers states k and k + 1.
    pub o_assign: DMatrix<f64>,
}

impl PlannerDecision {
    /// Column `k`'s region index.
    pub fn region_of_column(&self, k: usize) -> usize {
        let col = self.o_assign.column(k);
        (0..col.len())
            .max_by(|&a, &b| col[a].total_cmp(&col[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    /// Regions constraining state `e`: columns `e − 1` and `e`.
    pub fn regions_of_state(&self, e: usize) -> Vec<usize> {
        let kp = self.o_assign.ncols();
        let mut out = Vec::new();
        if e >= 1 && e - 1 < kp {
            out.push(self.region_of_column(e - 1));
        }
        if e < kp {
            out.push(self.region_of_column(e));
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// True when every nonzero of the gain respects the information pattern.
    pub fn is_causal(&self, n: usize, m: usize, n_w: usize) -> bool {
        let kp = self.k_gain.nrows() / m.max(1);
        for k in 0..kp {
            let allowed = n + n_w * k;
            for r in k * m..(k + 1) * m {
                for c in allowed..self.k_gain.ncols() {
                    if self.k_gain[(r, c)] != 0.0 {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// DR-CVaR value of one face at one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceMargin {
    pub region: usize,
    pub face: usize,
    pub step: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerSolution {
    pub decision: PlannerDecision,
    pub planned_means: Vec<DVector<f64>>,
    pub planned_covs: Vec<DMatrix<f64>>,
    pub objective: f64,
    /// Margins of every face of every region assigned to each state.
    pub face_margins: Vec<FaceMargin>,
    pub stats: SolveStats,
    pub residuals: Residuals,
    /// Big-M and surd caps used in the final solve.
    pub big_m_rounds: usize,
}

impl PlannerSolution {
    pub fn max_margin(&self) -> f64 {
        self.face_margins
            .iter()
            .map(|f| f.value)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Dense oracle route: moments of all states `0 ..= k'` from the decision.
pub fn propagate_moments(
    lifted: &LiftedModel,
    decision: &PlannerDecision,
    boundary: &BoundaryConditions,
    delta_t: f64,
) -> Result<Moments> {
    let (n, m, n_w, kp) = (lifted.n, lifted.m, lifted.n_w, lifted.k_prime);
    let r = n + n_w * kp;
    check_dim("feedforward", m * kp, decision.v.len())?;
    check_dim("gain rows", m * kp, decision.k_gain.nrows())?;
    check_dim("gain cols", r, decision.k_gain.ncols())?;
    boundary.validate(n)?;
    let mean = &lifted.cal_a_mu * &boundary.mu0 + &lifted.b_hat * &decision.v;
    // deviation = (G + B̂ K) s with G = [𝒜_μ, 𝒜_σ]
    let mut g = DMatrix::zeros(n * kp, r);
    g.view_mut((0, 0), (n * kp, n)).copy_from(&lifted.cal_a_mu);
    g.view_mut((0, n), (n * kp, n_w * kp))
        .copy_from(&lifted.cal_a_sigma);
    let t = g + &lifted.b_hat * &decision.k_gain;
    let mut s = DMatrix::zeros(r, r);
    s.view_mut((0, 0), (n, n)).copy_from(&boundary.sigma0);
    for i in n..r {
        s[(i, i)] = delta_t;
    }
    let mut means = vec![boundary.mu0.clone()];
    let mut covs = vec![boundary.sigma0.clone()];
    for k in 1..=kp {
        let rows = lifted.state_rows(k);
        means.push(mean.rows(rows.start, n).into_owned());
        let tk = t.rows(rows.start, n);
        covs.push(linalg::symmetrize(&(tk * &s * tk.transpose())));
    }
    Ok((means, covs))
}

/// Canonical face normals: unit length, first nonzero entry positive.
#[derive(Debug, Clone)]
struct NormalTable {
    units: Vec<DVector<f64>>,
    /// (region, face) -> (normal index, signed scale so that c = scale · unit)
    faces: BTreeMap<(usize, usize), (usize, f64)>,
}

fn normal_table(set: &SafeSet) -> NormalTable {
    let mut units: Vec<DVector<f64>> = Vec::new();
    let mut faces = BTreeMap::new();
    for (j, reg) in set.regions().iter().enumerate() {
        for (l, h) in reg.faces().iter().enumerate() {
            let norm = h.c.norm();
            let mut u = &h.c / norm;
            let first = u.iter().find(|v| v.abs() > 1e-12).copied().unwrap_or(1.0);
            let sign = if first < 0.0 { -1.0 } else { 1.0 };
            u *= sign;
            let idx = match units.iter().position(|w| (w - &u).amax() < 1e-12) {
                Some(i) => i,
                None => {
                    units.push(u);
                    units.len() - 1
                }
            };
            faces.insert((j, l), (idx, sign * norm));
        }
    }
    NormalTable { units, faces }
}

/// Range of `uᵀz` over the union of regions for each canonical normal.
fn normal_ranges(set: &SafeSet, table: &NormalTable) -> Result<Vec<Option<(f64, f64)>>> {
    table
        .units
        .iter()
        .map(|u| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for reg in set.regions() {
                let (Some(a), Some(b)) = (reg.support(&-u)?, reg.support(u)?) else {
                    return Ok(None);
                };
                lo = lo.min(-a);
                hi = hi.max(b);
            }
            Ok(Some((lo, hi)))
        })
        .collect()
}

/// Variable layout of an assembled program.
#[derive(Debug, Clone)]
pub struct AssemblyMap {
    pub n: usize,
    pub m: usize,
    pub n_w: usize,
    pub k_prime: usize,
    /// `mu[k][i]` for states `0 ..= k'`.
    pub mu: Vec<Vec<LinExpr>>,
    pub v: Vec<Vec<usize>>,
    /// `k_vars[k]` is `m × (n + n_w k)` row-major variable indices.
    pub k_vars: Vec<Vec<Vec<usize>>>,
    /// `y[k]` is `n × (n + n_w k)` row-major expressions for `Ỹ_k`.
    pub y: Vec<Vec<Vec<LinExpr>>>,
    /// `o[j][k]`
    pub o: Vec<Vec<usize>>,
    /// Surd variables `t[(state, normal)]`, states `1 ..= k'`.
    pub t: BTreeMap<(usize, usize), usize>,
    pub tau: usize,
    /// Cap on each canonical normal's surd.
    pub t_caps: Vec<f64>,
    /// Big-M per (region, face).
    pub big_m: BTreeMap<(usize, usize), f64>,
}

type ExprMat = Vec<Vec<LinExpr>>;

fn const_times(a: &DMatrix<f64>, x: &ExprMat) -> ExprMat {
    let cols = x.first().map_or(0, |r| r.len());
    (0..a.nrows())
        .map(|i| {
            (0..cols)
                .map(|j| {
                    let mut e = LinExpr::default();
                    for l in 0..a.ncols() {
                        e.add_scaled(&x[l][j], a[(i, l)]);
                    }
                    e.compact()
                })
                .collect()
        })
        .collect()
}

/// `K_k S^{1/2}` as expressions, `m × (n + n_w k)`.
fn gain_times_sqrt_s(
    kv: &[Vec<usize>],
    sigma0_sqrt: &DMatrix<f64>,
    n: usize,
    sqrt_dt: f64,
) -> ExprMat {
    kv.iter()
        .map(|row| {
            (0..row.len())
                .map(|c| {
                    let mut e = LinExpr::default();
                    if c < n {
                        for l in 0..n {
                            e.add_term(row[l], sigma0_sqrt[(l, c)]);
                        }
                    } else {
                        e.add_term(row[c], sqrt_dt);
                    }
                    e
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Caps<'a> {
    t_caps: &'a [f64],
    m_scale: f64,
}

/// Build the mixed-integer conic program.
pub fn assemble(problem: &PlannerProblem) -> Result<(ConeProgram, AssemblyMap)> {
    problem.validate()?;
    let table = normal_table(&problem.safe_set);
    let ranges = normal_ranges(&problem.safe_set, &table)?;
    let caps: Vec<f64> = ranges
        .iter()
        .map(|r| r.map_or(FALLBACK_BIG_M / 10.0, |(lo, hi)| (hi - lo).max(1e-3)))
        .collect();
    assemble_with(
        problem,
        &table,
        &ranges,
        Caps {
            t_caps: &caps,
            m_scale: 1.0,
        },
    )
}

fn assemble_with(
    problem: &PlannerProblem,
    table: &NormalTable,
    ranges: &[Option<(f64, f64)>],
    caps: Caps,
) -> Result<(ConeProgram, AssemblyMap)> {
    let dm = &problem.dm;
    let (n, m, n_w, kp) = (dm.n(), dm.m(), dm.n_w(), dm.k_prime);
    let bd = &problem.boundary;
    let sqrt_dt = dm.delta_t.sqrt();
    let sigma0_sqrt = linalg::psd_sqrt(&bd.sigma0);
    let rho = problem.rho.value();
    let mut p = ConeProgram::new();

    // means
    let mut mu: Vec<Vec<LinExpr>> = vec![bd.mu0.iter().map(|&c| LinExpr::constant(c)).collect()];
    let mut v = Vec::with_capacity(kp);
    for k in 0..kp {
        let vk = p.add_vars(m);
        let next = p.add_vars(n);
        for i in 0..n {
            // μ_{k+1} − Ā μ_k − ΔT B v_k = 0
            let mut e = LinExpr::var(next[i]);
            for l in 0..n {
                e.add_scaled(&mu[k][l], -dm.transition[(i, l)]);
            }
            for l in 0..m {
                e.add_term(vk[l], -dm.input[(i, l)]);
            }
            p.add_equality(e.compact());
        }
        v.push(vk);
        mu.push(next.iter().map(|&x| LinExpr::var(x)).collect());
    }
    for i in 0..n {
        let mut e = mu[kp][i].clone();
        e.constant -= bd.mu_t[i];
        p.add_equality(e);
    }

    // deviation factors and gains
    let mut y: Vec<ExprMat> = Vec::with_capacity(kp + 1);
    let mut y0: ExprMat = vec![vec![LinExpr::default(); n]; n];
    for i in 0..n {
        for j in 0..n {
            y0[i][j] = LinExpr::constant(sigma0_sqrt[(i, j)]);
        }
    }
    y.push(y0);
    let mut k_vars = Vec::with_capacity(kp);
    for k in 0..kp {
        let rk = n + n_w * k;
        let kv: Vec<Vec<usize>> = (0..m).map(|_| p.add_vars(rk)).collect();
        let ks = gain_times_sqrt_s(&kv, &sigma0_sqrt, n, sqrt_dt);
        let ay = const_times(&dm.transition, &y[k]);
        let bks = const_times(&dm.input, &ks);
        let mut next: ExprMat = vec![vec![LinExpr::default(); rk + n_w]; n];
        for i in 0..n {
            for c in 0..rk {
                let var = p.add_free();
                let mut e = LinExpr::var(var);
                e.add_scaled(&ay[i][c], -1.0);
                e.add_scaled(&bks[i][c], -1.0);
                p.add_equality(e.compact());
                next[i][c] = LinExpr::var(var);
            }
            for c in 0..n_w {
                next[i][rk + c] = LinExpr::constant(dm.noise[(i, c)] * sqrt_dt);
            }
        }
        y.push(next);
        k_vars.push(kv);
    }

    // expected cost epigraph: τ ≥ |z|², as |(2z, τ − 1)| ≤ τ + 1
    let mut z: Vec<LinExpr> = Vec::new();
    for k in 1..=kp {
        let qh = linalg::psd_sqrt(&problem.q_blocks[k - 1]);
        let mu_col: ExprMat = mu[k].iter().map(|e| vec![e.clone()]).collect();
        for row in const_times(&qh, &mu_col) {
            z.extend(row);
        }
        for row in const_times(&qh, &y[k]) {
            z.extend(row);
        }
    }
    for k in 0..kp {
        let rh = linalg::psd_sqrt(&problem.r_blocks[k]);
        let v_col: ExprMat = v[k].iter().map(|&x| vec![LinExpr::var(x)]).collect();
        for row in const_times(&rh, &v_col) {
            z.extend(row);
        }
        let ks = gain_times_sqrt_s(&k_vars[k], &sigma0_sqrt, n, sqrt_dt);
        for row in const_times(&rh, &ks) {
            z.extend(row);
        }
    }
    let tau = p.add_var(0.0, f64::INFINITY);
    p.set_objective(tau, 1.0);
    let mut head = LinExpr::var(tau);
    head.constant = 1.0;
    let mut tail = Vec::with_capacity(z.len() + 1);
    let mut tm1 = LinExpr::var(tau);
    tm1.constant = -1.0;
    tail.push(tm1);
    tail.extend(
        z.into_iter()
            .filter(|e| !e.terms.is_empty() || e.constant != 0.0)
            .map(|e| e.scaled(2.0)),
    );
    p.add_soc(head, tail);

    // terminal covariance Σ_{k'} = Σ_g Y_g Y_gᵀ ⪯ Σ_T via Z_g ⪰ Y_g Y_gᵀ
    let yt = &y[kp];
    let mut groups: Vec<(usize, usize)> = vec![(0, n)];
    for j in 0..kp {
        groups.push((n + j * n_w, n_w));
    }
    let sym_idx = |i: usize, j: usize| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        b * (b + 1) / 2 + a
    };
    let mut z_sum: Vec<LinExpr> = vec![LinExpr::default(); n * (n + 1) / 2];
    for &(start, width) in &groups {
        let zg = p.add_vars(n * (n + 1) / 2);
        let order = n + width;
        let mut entries = Vec::with_capacity(order * (order + 1) / 2);
        for col in 0..order {
            for row in 0..=col {
                let e = if col < n {
                    LinExpr::var(zg[sym_idx(row, col)])
                } else if row < n {
                    yt[row][start + col - n].clone()
                } else {
                    LinExpr::constant(if row == col { 1.0 } else { 0.0 })
                };
                entries.push(e);
            }
        }
        p.add_psd(order, entries);
        for (s, &zv) in z_sum.iter_mut().zip(&zg) {
            s.add_term(zv, 1.0);
        }
    }
    let mut term = Vec::with_capacity(n * (n + 1) / 2);
    for col in 0..n {
        for row in 0..=col {
            let mut e = z_sum[sym_idx(row, col)].scaled(-1.0);
            e.constant += bd.sigma_t[(row, col)];
            term.push(e);
        }
    }
    p.add_psd(n, term);

    // surds t_{e,u} ≥ |Ỹ_eᵀ u| with caps, and implied mean ranges
    let mut t = BTreeMap::new();
    for e in 1..=kp {
        for (ui, u) in table.units.iter().enumerate() {
            let tv = p.add_var(0.0, caps.t_caps[ui]);
            let cols = y[e][0].len();
            let tail: Vec<LinExpr> = (0..cols)
                .map(|c| {
                    let mut ex = LinExpr::default();
                    for i in 0..n {
                        if u[i] != 0.0 {
                            ex.add_scaled(&y[e][i][c], u[i]);
                        }
                    }
                    ex.compact()
                })
                .filter(|ex| !ex.terms.is_empty() || ex.constant != 0.0)
                .collect();
            p.add_soc(LinExpr::var(tv), tail);
            t.insert((e, ui), tv);
            if let Some((lo, hi)) = ranges[ui] {
                let mut proj = LinExpr::default();
                for i in 0..n {
                    proj.add_scaled(&mu[e][i], u[i]);
                }
                let proj = proj.compact();
                p.add_le(&proj, &LinExpr::constant(hi));
                p.add_le(&LinExpr::constant(lo), &proj);
            }
        }
    }

    // assignment columns and Big-M face constraints
    let n_o = problem.safe_set.n_regions();
    let o: Vec<Vec<usize>> = (0..n_o)
        .map(|_| (0..kp).map(|_| p.add_binary()).collect())
        .collect();
    for k in 0..kp {
        p.add_assignment_group((0..n_o).map(|j| o[j][k]).collect());
    }
    let mut big_m = BTreeMap::new();
    for (j, reg) in problem.safe_set.regions().iter().enumerate() {
        for (l, h) in reg.faces().iter().enumerate() {
            let fr = problem.face_risk(j, l)?;
            let kappa = cvar_coefficient(fr)?;
            let (ui, scale) = table.faces[&(j, l)];
            let cn = h.c.norm();
            let robust = cn * rho / fr.sqrt() + problem.margin_backoff * cn.max(1.0);
            let mv = match (problem.big_m, ranges[ui]) {
                (Some(mv), _) => mv,
                (None, Some((lo, hi))) => {
                    let max_proj = if scale > 0.0 { scale * hi } else { scale * lo };
                    let raw = max_proj - h.d + kappa * cn * caps.t_caps[ui] + robust;
                    (raw.max(0.0) + 10.0) * caps.m_scale
                }
                (None, None) => FALLBACK_BIG_M * caps.m_scale,
            };
            big_m.insert((j, l), mv);
            for k in 0..kp {
                for e in [k, k + 1] {
                    // M (1 − O) − (cᵀμ_e − d + κ |c| t + robust) ≥ 0
                    let mut ex = LinExpr::constant(mv + h.d - robust);
                    ex.add_term(o[j][k], -mv);
                    for i in 0..n {
                        ex.add_scaled(&mu[e][i], -h.c[i]);
                    }
                    if e == 0 {
                        let s0 =
                            (table.units[ui].transpose() * &bd.sigma0 * &table.units[ui])[(0, 0)];
                        ex.constant -= kappa * cn * s0.max(0.0).sqrt();
                    } else {
                        ex.add_term(t[&(e, ui)], -kappa * cn);
                    }
                    p.add_nonneg(ex.compact());
                }
            }
        }
    }

    let map = AssemblyMap {
        n,
        m,
        n_w,
        k_prime: kp,
        mu,
        v,
        k_vars,
        y,
        o,
        t,
        tau,
        t_caps: caps.t_caps.to_vec(),
        big_m,
    };
    Ok((p, map))
}

fn extract_decision(map: &AssemblyMap, x: &[f64], r: usize) -> PlannerDecision {
    let (m, kp) = (map.m, map.k_prime);
    let mut v = DVector::zeros(m * kp);
    let mut k_gain = DMatrix::zeros(m * kp, r);
    for k in 0..kp {
        for i in 0..m {
            v[k * m + i] = x[map.v[k][i]];
            for (c, &var) in map.k_vars[k][i].iter().enumerate() {
                k_gain[(k * m + i, c)] = x[var];
            }
        }
    }
    let n_o = map.o.len();
    let mut o_assign = DMatrix::zeros(n_o, kp);
    for j in 0..n_o {
        for k in 0..kp {
            o_assign[(j, k)] = if x[map.o[j][k]] > 0.5 { 1.0 } else { 0.0 };
        }
    }
    PlannerDecision {
        v,
        k_gain,
        o_assign,
    }
}

/// DR-CVaR values of every face of every region assigned to each state.
pub fn face_margins(
    problem: &PlannerProblem,
    decision: &PlannerDecision,
    means: &[DVector<f64>],
    covs: &[DMatrix<f64>],
) -> Result<Vec<FaceMargin>> {
    let mut out = Vec::new();
    for e in 0..means.len() {
        for j in decision.regions_of_state(e) {
            let reg = &problem.safe_set.regions()[j];
            for (l, h) in reg.faces().iter().enumerate() {
                let value = dr_cvar_halfspace(
                    &h.c,
                    h.d,
                    &means[e],
                    &covs[e],
                    problem.face_risk(j, l)?,
                    problem.rho,
                )?;
                out.push(FaceMargin {
                    region: j,
                    face: l,
                    step: e,
                    value,
                });
            }
        }
    }
    Ok(out)
}

/// Face whose robust tightening leaves the least room inside its region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceDiagnostic {
    pub region: usize,
    pub face: usize,
    /// Robust term minus the widest slack any point of the region has on the face.
    pub excess: f64,
}

/// Per region, the face that is hardest to satisfy even with zero covariance.
pub fn diagnose_faces(problem: &PlannerProblem) -> Result<Vec<FaceDiagnostic>> {
    let mut out = Vec::new();
    for (j, reg) in problem.safe_set.regions().iter().enumerate() {
        let mut worst: Option<FaceDiagnostic> = None;
        for (l, h) in reg.faces().iter().enumerate() {
            let fr = problem.face_risk(j, l)?;
            let robust = h.c.norm() * problem.rho.value() / fr.sqrt();
            // widest slack d − cᵀz over the region
            let slack = match reg.support(&-&h.c)? {
                Some(s) => h.d + s,
                None => f64::INFINITY,
            };
            let excess = robust - slack;
            if worst.as_ref().is_none_or(|w| excess > w.excess) {
                worst = Some(FaceDiagnostic {
                    region: j,
                    face: l,
                    excess,
                });
            }
        }
        out.extend(worst);
    }
    Ok(out)
}

fn infeasible_error(problem: &PlannerProblem, context: &str) -> Error {
    let diag = diagnose_faces(problem).unwrap_or_default();
    let worst = diag
        .iter()
        .map(|d| {
            format!(
                "region {} face {} (excess {:.4e})",
                d.region, d.face, d.excess
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Error::Infeasible(format!("{context}; most violated face per region: {worst}"))
}

/// Plan: assemble, branch and bound, recompute moments and margins.
///
/// The surd caps and Big-M values are doubled and the program re-solved when
/// the solution presses against either, so the reported optimum is the
/// optimum of the uncapped program.
pub fn solve(problem: &PlannerProblem, opts: &BnbOptions) -> Result<PlannerSolution> {
    problem.validate()?;
    let n = problem.n();
    let r = problem.noise_cols();
    let table = normal_table(&problem.safe_set);
    let ranges = normal_ranges(&problem.safe_set, &table)?;
    let mut t_caps: Vec<f64> = ranges
        .iter()
        .map(|r| r.map_or(FALLBACK_BIG_M / 10.0, |(lo, hi)| (hi - lo).max(1e-3)))
        .collect();
    let mut m_scale = 1.0;
    // the initial state does not depend on the decision
    let start_ok = problem
        .safe_set
        .regions()
        .iter()
        .enumerate()
        .any(|(j, reg)| {
            reg.faces().iter().enumerate().all(|(l, h)| {
                problem
                    .face_risk(j, l)
                    .ok()
                    .and_then(|fr| {
                        dr_cvar_halfspace(
                            &h.c,
                            h.d,
                            &problem.boundary.mu0,
                            &problem.boundary.sigma0,
                            fr,
                            problem.rho,
                        )
                        .ok()
                    })
                    .is_some_and(|v| v + problem.margin_backoff * h.c.norm().max(1.0) <= 0.0)
            })
        });
    if !start_ok {
        return Err(infeasible_error(
            problem,
            "initial distribution violates every region",
        ));
    }
    // interior-point solutions may sit a hair outside the cone; the backoff
    // grows until the recomputed margins come out nonpositive
    let mut backed = problem.clone();
    for round in 1..=8 {
        let (prog, map) = assemble_with(
            &backed,
            &table,
            &ranges,
            Caps {
                t_caps: &t_caps,
                m_scale,
            },
        )?;
        let res = branch_and_bound(&prog, opts)?;
        match res.status {
            SolveStatus::Optimal => {}
            SolveStatus::Infeasible => {
                return Err(infeasible_error(
                    problem,
                    "no region assignment admits a feasible plan",
                ))
            }
            SolveStatus::Unbounded => {
                return Err(Error::Numerical("planner relaxation unbounded".into()))
            }
            SolveStatus::NumericalFailure => {
                return Err(Error::Numerical(format!(
                    "planner solve failed: {}",
                    res.message
                )))
            }
        }
        let x = &res.x;
        let decision = extract_decision(&map, x, r);
        let (means, covs) = propagate_moments(
            &problem.lifted,
            &decision,
            &problem.boundary,
            problem.dm.delta_t,
        )?;

        // caps and Big-M must be slack at the solution
        let mut tight = false;
        for (e, cov) in covs.iter().enumerate().skip(1) {
            for (ui, u) in table.units.iter().enumerate() {
                let surd = (u.transpose() * cov * u)[(0, 0)].max(0.0).sqrt();
                if surd >= 0.999 * t_caps[ui] {
                    t_caps[ui] *= 2.0;
                    tight = true;
                }
                let _ = e;
            }
        }
        for (j, reg) in problem.safe_set.regions().iter().enumerate() {
            for (l, h) in reg.faces().iter().enumerate() {
                let mv = map.big_m[&(j, l)];
                for k in 0..map.k_prime {
                    if decision.o_assign[(j, k)] > 0.5 {
                        continue;
                    }
                    for e in [k, k + 1] {
                        let val = dr_cvar_halfspace(
                            &h.c,
                            h.d,
                            &means[e],
                            &covs[e],
                            problem.face_risk(j, l)?,
                            problem.rho,
                        )?;
                        if val >= 0.999 * mv {
                            tight = true;
                        }
                    }
                }
            }
        }
        if tight && problem.big_m.is_none() {
            m_scale *= 2.0;
            continue;
        }
        let face_margins = face_margins(problem, &decision, &means, &covs)?;
        let worst = face_margins
            .iter()
            .map(|f| f.value)
            .fold(f64::NEG_INFINITY, f64::max);
        if worst > 0.0 {
            backed.margin_backoff = (backed.margin_backoff * 10.0).max(4.0 * worst);
            continue;
        }
        let residuals = prog.residuals(x);
        let objective = res.objective;
        let _ = n;
        return Ok(PlannerSolution {
            decision,
            planned_means: means,
            planned_covs: covs,
            objective,
            face_margins,
            stats: res.stats,
            residuals,
            big_m_rounds: round,
        });
    }
    Err(Error::Numerical(
        "Big-M / surd caps or face margins kept binding after 8 rounds".into(),
    ))
}

/// Zero-order-hold control schedule extracted from a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub delta_t: f64,
    pub n: usize,
    pub n_w: usize,
    pub mu0: DVector<f64>,
    /// `v_k`, the feedforward part.
    pub feedforward: Vec<DVector<f64>>,
    /// `K_k`, `m × (n + n_w k)`, acting on `[x_0 − μ_0; w_0; ..; w_{k−1}]`.
    pub feedback: Vec<DMatrix<f64>>,
}

impl Schedule {
    pub fn k_prime(&self) -> usize {
        self.feedforward.len()
    }

    /// `U*_k = v_k + K_k [x_0 − μ_0; w_0; ..; w_{k−1}]`; `noise` holds at least `k` increments.
    pub fn input(&self, k: usize, x0: &DVector<f64>, noise: &[DVector<f64>]) -> DVector<f64> {
        let kk = &self.feedback[k];
        let mut u = self.feedforward[k].clone();
        if kk.ncols() == 0 {
            return u;
        }
        let dev = x0 - &self.mu0;
        u += kk.columns(0, self.n) * dev;
        for (j, w) in noise.iter().take(k).enumerate() {
            u += kk.columns(self.n + j * self.n_w, self.n_w) * w;
        }
        u
    }

    /// Same schedule with every feedback gain removed.
    pub fn feedforward_only(&self) -> Self {
        let mut s = self.clone();
        for k in s.feedback.iter_mut() {
            *k = DMatrix::zeros(k.nrows(), k.ncols());
        }
        s
    }

    /// Zero-order hold: the feedforward input active at time `t`.
    pub fn feedforward_at(&self, t: f64) -> &DVector<f64> {
        let k = ((t / self.delta_t).floor().max(0.0) as usize).min(self.k_prime() - 1);
        &self.feedforward[k]
    }
}

pub fn extract_schedule(
    solution: &PlannerSolution,
    dm: &DiscreteModel,
    mu0: &DVector<f64>,
) -> Schedule {
    let (n, m, n_w, kp) = (dm.n(), dm.m(), dm.n_w(), dm.k_prime);
    let d = &solution.decision;
    Schedule {
        delta_t: dm.delta_t,
        n,
        n_w,
        mu0: mu0.clone(),
        feedforward: (0..kp).map(|k| d.v.rows(k * m, m).into_owned()).collect(),
        feedback: (0..kp)
            .map(|k| d.k_gain.view((k * m, 0), (m, n + n_w * k)).into_owned())
            .collect(),
    }
}
