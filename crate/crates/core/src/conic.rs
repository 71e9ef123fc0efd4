//! Mixed-integer conic programs.
//!
//! A [`ConeProgram`] has a linear objective, affine equalities, affine maps
//! into nonnegative / second-order / positive-semidefinite cones, variable
//! bounds and a set of binary variables, optionally grouped into
//! exactly-one assignment columns. Continuous relaxations are handed to
//! Clarabel; [`branch_and_bound`] drives the search over the binaries.
//!
//! Cone conventions, for an affine row vector `r(x)`:
//! * nonnegative: every row `>= 0`
//! * second-order: `r[0] >= |r[1..]|_2`
//! * psd of order `d`: the rows are the upper-triangle entries of a
//!   symmetric `d × d` matrix in column-major order
//!   (`(0,0), (0,1), (1,1), (0,2), ...`) and that matrix is PSD.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse affine expression `sum coef * x[var] + constant`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(i: usize) -> Self {
        Self {
            terms: vec![(i, 1.0)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, var: usize, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.terms.push((var, coef));
        }
        self
    }

    pub fn add_scaled(&mut self, other: &LinExpr, scale: f64) -> &mut Self {
        if scale != 0.0 {
            for &(v, c) in &other.terms {
                self.terms.push((v, c * scale));
            }
            self.constant += other.constant * scale;
        }
        self
    }

    pub fn scaled(&self, scale: f64) -> LinExpr {
        let mut out = LinExpr::default();
        out.add_scaled(self, scale);
        out
    }

    /// Merge duplicate variables and drop exact zeros.
    pub fn compact(mut self) -> Self {
        self.terms.sort_by_key(|t| t.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for (v, c) in self.terms {
            match merged.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => merged.push((v, c)),
            }
        }
        merged.retain(|t| t.1 != 0.0);
        self.terms = merged;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConeKind {
    NonNegative,
    SecondOrder,
    Psd { order: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeConstraint {
    pub kind: ConeKind,
    pub rows: Vec<LinExpr>,
}

impl ConeConstraint {
    /// Distance-style violation of the cone at `x` (0 when inside).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let vals: Vec<f64> = self.rows.iter().map(|r| r.eval(x)).collect();
        cone_violation(self.kind, &vals)
    }
}

fn cone_violation(kind: ConeKind, vals: &[f64]) -> f64 {
    match kind {
        ConeKind::NonNegative => vals.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max),
        ConeKind::SecondOrder => {
            let norm = vals[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm - vals[0]).max(0.0)
        }
        ConeKind::Psd { order } => {
            let m = unpack_upper(vals, order);
            (-crate::linalg::min_eigenvalue(&m)).max(0.0)
        }
    }
}

fn unpack_upper(vals: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut idx = 0;
    for j in 0..d {
        for i in 0..=j {
            m[(i, j)] = vals[idx];
            m[(j, i)] = vals[idx];
            idx += 1;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: u64,
    pub nodes: u64,
    pub relaxations: u64,
    pub max_depth: usize,
    pub root_bound: Option<f64>,
    pub best_bound: Option<f64>,
    /// Child bounds that came out below their parent's bound beyond tolerance.
    pub bound_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// Finite iff `status == Optimal`.
    pub objective: f64,
    /// Cone slacks and duals of the compiled standard form (relaxations only).
    #[serde(skip)]
    pub slack: Vec<f64>,
    #[serde(skip)]
    pub dual: Vec<f64>,
    pub stats: SolveStats,
    pub message: String,
}

impl SolveResult {
    fn failed(status: SolveStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            x: Vec::new(),
            objective: f64::NAN,
            slack: Vec::new(),
            dual: Vec::new(),
            stats: SolveStats::default(),
            message: message.into(),
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Feasibility of a point re-checked outside the solver.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub equality: f64,
    pub cone: f64,
    pub bound: f64,
    pub integrality: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.equality
            .max(self.cone)
            .max(self.bound)
            .max(self.integrality)
    }
}

/// Residuals of the KKT system of a relaxation in compiled standard form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
    pub gap: f64,
    pub slack_cone: f64,
    pub dual_cone: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        [
            self.primal,
            self.dual,
            self.complementarity,
            self.gap,
            self.slack_cone,
            self.dual_cone,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConeProgram {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub objective_constant: f64,
    /// Each expression is constrained to equal zero.
    pub equalities: Vec<LinExpr>,
    pub cones: Vec<ConeConstraint>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub binaries: Vec<usize>,
    /// Exactly-one columns; every member must also be listed in `binaries`.
    pub assignment_groups: Vec<Vec<usize>>,
}

impl ConeProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, lower: f64, upper: f64) -> usize {
        self.num_vars += 1;
        self.objective.push(0.0);
        self.lower.push(lower);
        self.upper.push(upper);
        self.num_vars - 1
    }

    pub fn add_free(&mut self) -> usize {
        self.add_var(f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn add_vars(&mut self, count: usize) -> Vec<usize> {
        (0..count).map(|_| self.add_free()).collect()
    }

    pub fn add_binary(&mut self) -> usize {
        let v = self.add_var(0.0, 1.0);
        self.binaries.push(v);
        v
    }

    /// Adds the group and its sum-to-one equality.
    pub fn add_assignment_group(&mut self, members: Vec<usize>) {
        let mut e = LinExpr::constant(-1.0);
        for &v in &members {
            e.add_term(v, 1.0);
        }
        self.equalities.push(e);
        self.assignment_groups.push(members);
    }

    pub fn add_equality(&mut self, e: LinExpr) {
        self.equalities.push(e);
    }

    /// `e >= 0`
    pub fn add_nonneg(&mut self, e: LinExpr) {
        self.cones.push(ConeConstraint {
            kind: ConeKind::NonNegative,
            rows: vec![e],
        });
    }

    /// `lhs <= rhs` for affine expressions.
    pub fn add_le(&mut self, lhs: &LinExpr, rhs: &LinExpr) {
        let mut e = rhs.clone();
        e.add_scaled(lhs, -1.0);
        self.add_nonneg(e);
    }

    /// `head >= |tail|_2`
    pub fn add_soc(&mut self, head: LinExpr, tail: Vec<LinExpr>) {
        let mut rows = Vec::with_capacity(tail.len() + 1);
        rows.push(head);
        rows.extend(tail);
        self.cones.push(ConeConstraint {
            kind: ConeKind::SecondOrder,
            rows,
        });
    }

    /// Symmetric matrix given by its upper triangle (`entries[j][i]` for `i <= j`) is PSD.
    pub fn add_psd(&mut self, order: usize, upper_colmajor: Vec<LinExpr>) {
        debug_assert_eq!(upper_colmajor.len(), order * (order + 1) / 2);
        self.cones.push(ConeConstraint {
            kind: ConeKind::Psd { order },
            rows: upper_colmajor,
        });
    }

    pub fn set_objective(&mut self, var: usize, coef: f64) {
        self.objective[var] = coef;
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective_constant
            + self
                .objective
                .iter()
                .zip(x)
                .map(|(c, v)| c * v)
                .sum::<f64>()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars;
        if self.objective.len() != n || self.lower.len() != n || self.upper.len() != n {
            return Err(Error::invalid(
                "objective/bounds length differs from variable count",
            ));
        }
        let check = |e: &LinExpr| e.terms.iter().all(|&(v, c)| v < n && c.is_finite());
        if !self.equalities.iter().all(check) {
            return Err(Error::invalid("equality references an unknown variable"));
        }
        for c in &self.cones {
            if !c.rows.iter().all(check) {
                return Err(Error::invalid("cone row references an unknown variable"));
            }
            let ok = match c.kind {
                ConeKind::NonNegative => !c.rows.is_empty(),
                ConeKind::SecondOrder => !c.rows.is_empty(),
                ConeKind::Psd { order } => order > 0 && c.rows.len() == order * (order + 1) / 2,
            };
            if !ok {
                return Err(Error::invalid("cone has inconsistent dimension"));
            }
        }
        if self.binaries.iter().any(|&b| b >= n) {
            return Err(Error::invalid("binary index out of range"));
        }
        for g in &self.assignment_groups {
            if g.is_empty() || g.iter().any(|v| !self.binaries.contains(v)) {
                return Err(Error::invalid("assignment group member is not a binary"));
            }
        }
        for i in 0..n {
            if self.lower[i] > self.upper[i] || self.lower[i].is_nan() || self.upper[i].is_nan() {
                return Err(Error::invalid(format!("variable {i} has empty bounds")));
            }
        }
        Ok(())
    }

    /// Constraint residuals of `x`, including integrality of the binaries.
    pub fn residuals(&self, x: &[f64]) -> Residuals {
        let equality = self
            .equalities
            .iter()
            .map(|e| e.eval(x).abs())
            .fold(0.0, f64::max);
        let cone = self
            .cones
            .iter()
            .map(|c| c.violation(x))
            .fold(0.0, f64::max);
        let bound = (0..self.num_vars)
            .map(|i| (self.lower[i] - x[i]).max(x[i] - self.upper[i]).max(0.0))
            .fold(0.0, f64::max);
        let integrality = self
            .binaries
            .iter()
            .map(|&b| x[b].abs().min((1.0 - x[b]).abs()))
            .fold(0.0, f64::max);
        Residuals {
            equality,
            cone,
            bound,
            integrality,
        }
    }

    /// Plain-text dump of the program (layout documented in `docs/conic-format.md`).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "CONEPROG 1");
        let _ = writeln!(s, "VARS {}", self.num_vars);
        let nz: Vec<_> = self
            .objective
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .collect();
        let _ = writeln!(s, "OBJ {} {:e}", nz.len(), self.objective_constant);
        for (i, c) in nz {
            let _ = writeln!(s, "  {i} {c:e}");
        }
        let _ = writeln!(s, "BOUNDS");
        for i in 0..self.num_vars {
            if self.lower[i].is_finite() || self.upper[i].is_finite() {
                let _ = writeln!(s, "  {i} {:e} {:e}", self.lower[i], self.upper[i]);
            }
        }
        let write_row = |s: &mut String, e: &LinExpr| {
            let _ = write!(s, "  {:e} {}", e.constant, e.terms.len());
            for (v, c) in &e.terms {
                let _ = write!(s, " {v}:{c:e}");
            }
            let _ = writeln!(s);
        };
        let _ = writeln!(s, "EQ {}", self.equalities.len());
        for e in &self.equalities {
            write_row(&mut s, e);
        }
        for c in &self.cones {
            match c.kind {
                ConeKind::NonNegative => {
                    let _ = writeln!(s, "CONE NONNEG {}", c.rows.len());
                }
                ConeKind::SecondOrder => {
                    let _ = writeln!(s, "CONE SOC {}", c.rows.len());
                }
                ConeKind::Psd { order } => {
                    let _ = writeln!(s, "CONE PSD {order}");
                }
            }
            for r in &c.rows {
                write_row(&mut s, r);
            }
        }
        let bins: Vec<String> = self.binaries.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(s, "BINARY {} {}", self.binaries.len(), bins.join(" "));
        for g in &self.assignment_groups {
            let m: Vec<String> = g.iter().map(|b| b.to_string()).collect();
            let _ = writeln!(s, "GROUP {} {}", g.len(), m.join(" "));
        }
        let _ = writeln!(s, "END");
        s
    }
}

// ---------------------------------------------------------------------------
// Standard-form compilation: A x + s = b, s in K.

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum BoundSide {
    Lower,
    Upper,
}

struct Compiled {
    a: CscMatrix<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
    kinds: Vec<(ConeKindC, usize, usize)>,
    /// (variable, side) -> row index of the bound row.
    bound_rows: BTreeMap<(usize, BoundSide), usize>,
    q: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
enum ConeKindC {
    Zero,
    NonNeg,
    Soc,
    Psd(usize),
}

struct Triplets {
    rows: usize,
    entries: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
}

impl Triplets {
    /// Append the row `s = expr(x)`, i.e. `A row = -coef`, `b = constant`.
    fn push_expr(&mut self, e: &LinExpr, scale: f64) {
        for &(v, c) in &e.terms {
            self.entries.push((self.rows, v, -c * scale));
        }
        self.b.push(e.constant * scale);
        self.rows += 1;
    }
}

fn to_csc(m: usize, n: usize, mut entries: Vec<(usize, usize, f64)>) -> CscMatrix<f64> {
    entries.sort_by_key(|e| (e.1, e.0));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(entries.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(entries.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in entries {
        if last == Some((r, c)) {
            *nzval.last_mut().unwrap() += v;
            continue;
        }
        rowval.push(r);
        nzval.push(v);
        colptr[c + 1] += 1;
        last = Some((r, c));
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

fn compile(prog: &ConeProgram) -> Compiled {
    let mut t = Triplets {
        rows: 0,
        entries: Vec::new(),
        b: Vec::new(),
    };
    let mut cones = Vec::new();
    let mut kinds = Vec::new();

    // equalities plus fixed variables
    let start = t.rows;
    for e in &prog.equalities {
        t.push_expr(e, 1.0);
    }
    if t.rows > start {
        cones.push(SupportedConeT::ZeroConeT(t.rows - start));
        kinds.push((ConeKindC::Zero, start, t.rows - start));
    }

    // bounds as nonnegative rows; binaries are relaxed to [0, 1]
    let mut bound_rows = BTreeMap::new();
    let start = t.rows;
    let is_bin: std::collections::BTreeSet<usize> = prog.binaries.iter().copied().collect();
    for i in 0..prog.num_vars {
        let (mut lo, mut hi) = (prog.lower[i], prog.upper[i]);
        if is_bin.contains(&i) {
            lo = lo.max(0.0);
            hi = hi.min(1.0);
        }
        if lo.is_finite() || is_bin.contains(&i) {
            let mut e = LinExpr::var(i);
            e.constant = -lo;
            bound_rows.insert((i, BoundSide::Lower), t.rows);
            t.push_expr(&e, 1.0);
        }
        if hi.is_finite() || is_bin.contains(&i) {
            let mut e = LinExpr::constant(hi);
            e.add_term(i, -1.0);
            bound_rows.insert((i, BoundSide::Upper), t.rows);
            t.push_expr(&e, 1.0);
        }
    }
    for c in prog
        .cones
        .iter()
        .filter(|c| c.kind == ConeKind::NonNegative)
    {
        for r in &c.rows {
            t.push_expr(r, 1.0);
        }
    }
    if t.rows > start {
        cones.push(SupportedConeT::NonnegativeConeT(t.rows - start));
        kinds.push((ConeKindC::NonNeg, start, t.rows - start));
    }

    for c in &prog.cones {
        let start = t.rows;
        match c.kind {
            ConeKind::NonNegative => continue,
            ConeKind::SecondOrder => {
                for r in &c.rows {
                    t.push_expr(r, 1.0);
                }
                cones.push(SupportedConeT::SecondOrderConeT(c.rows.len()));
                kinds.push((ConeKindC::Soc, start, c.rows.len()));
            }
            ConeKind::Psd { order } => {
                let mut idx = 0;
                for j in 0..order {
                    for i in 0..=j {
                        let scale = if i == j {
                            1.0
                        } else {
                            std::f64::consts::SQRT_2
                        };
                        t.push_expr(&c.rows[idx], scale);
                        idx += 1;
                    }
                }
                cones.push(SupportedConeT::PSDTriangleConeT(order));
                kinds.push((ConeKindC::Psd(order), start, c.rows.len()));
            }
        }
    }
    let a = to_csc(t.rows, prog.num_vars, t.entries);
    Compiled {
        a,
        b: t.b,
        cones,
        kinds,
        bound_rows,
        q: prog.objective.clone(),
    }
}

/// Fixings applied to binaries in a branch-and-bound node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fixing {
    One(usize),
    Zero(usize),
}

fn node_rhs(c: &Compiled, fixings: &[Fixing]) -> Vec<f64> {
    let mut b = c.b.clone();
    for f in fixings {
        match *f {
            // x >= 1  <=>  s = x - 1
            Fixing::One(v) => b[c.bound_rows[&(v, BoundSide::Lower)]] = -1.0,
            // x <= 0  <=>  s = 0 - x
            Fixing::Zero(v) => b[c.bound_rows[&(v, BoundSide::Upper)]] = 0.0,
        }
    }
    b
}

/// Interior-point tolerances tried in turn: tight first, then the solver
/// defaults when the tight run stalls before converging.
const TOLERANCES: [f64; 2] = [1e-9, 1e-8];

fn run_clarabel(prog: &ConeProgram, c: &Compiled, b: &[f64]) -> SolveResult {
    let n = prog.num_vars;
    let p = CscMatrix::<f64>::zeros((n, n));
    let mut iterations = 0;
    let mut last = None;
    for tol in TOLERANCES {
        let settings = match DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(300)
            .chordal_decomposition_enable(false)
            .tol_gap_abs(tol)
            .tol_gap_rel(tol)
            .tol_feas(tol)
            .build()
        {
            Ok(s) => s,
            Err(e) => return SolveResult::failed(SolveStatus::NumericalFailure, format!("{e:?}")),
        };
        let mut solver = match DefaultSolver::new(&p, &c.q, &c.a, b, &c.cones, settings) {
            Ok(s) => s,
            Err(e) => return SolveResult::failed(SolveStatus::NumericalFailure, format!("{e:?}")),
        };
        solver.solve();
        iterations += solver.solution.iterations as u64;
        let stalled = matches!(
            solver.solution.status,
            SolverStatus::InsufficientProgress
                | SolverStatus::MaxIterations
                | SolverStatus::NumericalError
        );
        last = Some(solver.solution);
        if !stalled {
            break;
        }
    }
    let sol = last.expect("at least one tolerance is tried");
    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        _ => SolveStatus::NumericalFailure,
    };
    let mut stats = SolveStats {
        iterations,
        relaxations: 1,
        ..Default::default()
    };
    if status != SolveStatus::Optimal {
        let mut r = SolveResult::failed(status, format!("{:?}", sol.status));
        r.stats = stats;
        return r;
    }
    let x = sol.x.clone();
    let objective = prog.objective_value(&x);
    stats.root_bound = Some(objective);
    stats.best_bound = Some(objective);
    SolveResult {
        status,
        x,
        objective,
        slack: sol.s.clone(),
        dual: sol.z.clone(),
        stats,
        message: format!("{:?}", sol.status),
    }
}

/// Solve the continuous relaxation (binaries relaxed to `[0, 1]`).
pub fn solve_relaxation(prog: &ConeProgram) -> Result<SolveResult> {
    prog.validate()?;
    let compiled = compile(prog);
    Ok(run_clarabel(prog, &compiled, &compiled.b))
}

/// KKT residuals of a relaxation result in the compiled standard form.
pub fn kkt_residuals(prog: &ConeProgram, res: &SolveResult) -> Option<KktResiduals> {
    if !res.is_optimal() || res.dual.is_empty() {
        return None;
    }
    let c = compile(prog);
    let (x, s, z) = (&res.x, &res.slack, &res.dual);
    let m = c.b.len();
    let mut ax = vec![0.0; m];
    let mut atz = vec![0.0; prog.num_vars];
    for col in 0..prog.num_vars {
        for idx in c.a.colptr[col]..c.a.colptr[col + 1] {
            let r = c.a.rowval[idx];
            let v = c.a.nzval[idx];
            ax[r] += v * x[col];
            atz[col] += v * z[r];
        }
    }
    let primal = (0..m)
        .map(|i| (ax[i] + s[i] - c.b[i]).abs())
        .fold(0.0, f64::max);
    let dual = (0..prog.num_vars)
        .map(|j| (c.q[j] + atz[j]).abs())
        .fold(0.0, f64::max);
    let complementarity = s.iter().zip(z).map(|(a, b)| a * b).sum::<f64>().abs();
    let pobj: f64 = c.q.iter().zip(x).map(|(a, b)| a * b).sum();
    let dobj: f64 = -c.b.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
    let gap = (pobj - dobj).abs() / (1.0 + pobj.abs().max(dobj.abs()));
    let mut slack_cone: f64 = 0.0;
    let mut dual_cone: f64 = 0.0;
    for &(kind, start, len) in &c.kinds {
        let sv = &s[start..start + len];
        let zv = &z[start..start + len];
        let (vs, vz) = match kind {
            ConeKindC::Zero => (sv.iter().map(|v| v.abs()).fold(0.0, f64::max), 0.0),
            ConeKindC::NonNeg => (
                cone_violation(ConeKind::NonNegative, sv),
                cone_violation(ConeKind::NonNegative, zv),
            ),
            ConeKindC::Soc => (
                cone_violation(ConeKind::SecondOrder, sv),
                cone_violation(ConeKind::SecondOrder, zv),
            ),
            ConeKindC::Psd(order) => {
                let unscale = |v: &[f64]| -> Vec<f64> {
                    let mut out = Vec::with_capacity(v.len());
                    let mut idx = 0;
                    for j in 0..order {
                        for i in 0..=j {
                            let f = if i == j {
                                1.0
                            } else {
                                std::f64::consts::FRAC_1_SQRT_2
                            };
                            out.push(v[idx] * f);
                            idx += 1;
                        }
                    }
                    out
                };
                (
                    cone_violation(ConeKind::Psd { order }, &unscale(sv)),
                    cone_violation(ConeKind::Psd { order }, &unscale(zv)),
                )
            }
        };
        slack_cone = slack_cone.max(vs);
        dual_cone = dual_cone.max(vz);
    }
    Some(KktResiduals {
        primal,
        dual,
        complementarity,
        gap,
        slack_cone,
        dual_cone,
    })
}

// ---------------------------------------------------------------------------
// Branch and bound

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnbOptions {
    /// Relative optimality gap.
    pub gap_tol: f64,
    /// Nodes whose relaxations are solved together. Results depend on this
    /// value but never on the number of worker threads.
    pub batch_size: usize,
    pub max_nodes: u64,
    pub integrality_tol: f64,
}

impl Default for BnbOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-6,
            batch_size: 8,
            max_nodes: 200_000,
            integrality_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    id: u64,
    bound: f64,
    depth: usize,
    fixings: Vec<Fixing>,
}

/// Branching candidate: either an assignment column or a lone binary.
#[derive(Debug, Clone, Copy)]
enum Branch {
    Group { group: usize, member: usize },
    Single(usize),
}

fn binary_key(prog: &ConeProgram, x: &[f64]) -> Vec<u8> {
    prog.binaries.iter().map(|&b| (x[b] > 0.5) as u8).collect()
}

fn pick_branch(prog: &ConeProgram, x: &[f64], tol: f64) -> Option<Branch> {
    let mut best: Option<(f64, Branch)> = None;
    let grouped: std::collections::BTreeSet<usize> =
        prog.assignment_groups.iter().flatten().copied().collect();
    for (gi, g) in prog.assignment_groups.iter().enumerate() {
        // member with the largest value, ties to the lowest index
        let (mi, vmax) = g
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| {
                if x[v] > acc.1 + 1e-12 {
                    (i, x[v])
                } else {
                    acc
                }
            });
        let frac = g
            .iter()
            .map(|&v| x[v].abs().min((1.0 - x[v]).abs()))
            .fold(0.0, f64::max);
        if frac <= tol {
            continue;
        }
        let score = 1.0 - vmax;
        if best.is_none_or(|(s, _)| score > s + 1e-12) {
            best = Some((
                score,
                Branch::Group {
                    group: gi,
                    member: mi,
                },
            ));
        }
    }
    for &b in &prog.binaries {
        if grouped.contains(&b) {
            continue;
        }
        let frac = x[b].abs().min((1.0 - x[b]).abs());
        if frac <= tol {
            continue;
        }
        if best.is_none_or(|(s, _)| frac > s + 1e-12) {
            best = Some((frac, Branch::Single(b)));
        }
    }
    best.map(|(_, b)| b)
}

fn children(prog: &ConeProgram, branch: Branch) -> [Vec<Fixing>; 2] {
    match branch {
        Branch::Group { group, member } => {
            let g = &prog.assignment_groups[group];
            let mut fix = vec![Fixing::One(g[member])];
            fix.extend(
                g.iter()
                    .enumerate()
                    .filter(|(i, _)| *i != member)
                    .map(|(_, &v)| Fixing::Zero(v)),
            );
            [fix, vec![Fixing::Zero(g[member])]]
        }
        Branch::Single(v) => [vec![Fixing::One(v)], vec![Fixing::Zero(v)]],
    }
}

fn fix_all(prog: &ConeProgram, x: &[f64]) -> Vec<Fixing> {
    prog.binaries
        .iter()
        .map(|&b| {
            if x[b] > 0.5 {
                Fixing::One(b)
            } else {
                Fixing::Zero(b)
            }
        })
        .collect()
}

/// Rounding used for the first incumbent: every column takes its largest
/// member, lone binaries round to nearest.
fn round_fixings(prog: &ConeProgram, x: &[f64]) -> Vec<Fixing> {
    let mut fixed = std::collections::BTreeMap::new();
    for g in &prog.assignment_groups {
        let best = g
            .iter()
            .copied()
            .fold(None::<usize>, |acc, v| match acc {
                Some(a) if x[a] >= x[v] - 1e-12 => Some(a),
                _ => Some(v),
            })
            .unwrap();
        for &v in g {
            fixed.insert(v, v == best);
        }
    }
    for &b in &prog.binaries {
        fixed.entry(b).or_insert(x[b] > 0.5);
    }
    fixed
        .into_iter()
        .map(|(v, one)| if one { Fixing::One(v) } else { Fixing::Zero(v) })
        .collect()
}

struct Incumbent {
    x: Vec<f64>,
    objective: f64,
    key: Vec<u8>,
}

fn better(prog: &ConeProgram, cand: &SolveResult, inc: &Option<Incumbent>) -> bool {
    match inc {
        None => true,
        Some(i) => {
            let tie = 1e-9 * (1.0 + i.objective.abs());
            if cand.objective < i.objective - tie {
                true
            } else if cand.objective <= i.objective + tie {
                binary_key(prog, &cand.x) < i.key
            } else {
                false
            }
        }
    }
}

/// Best-first branch and bound over the binaries of `prog`.
///
/// Node relaxations inside a batch run on the rayon pool; the outcome only
/// depends on `opts`, so runs with different thread counts agree exactly.
pub fn branch_and_bound(prog: &ConeProgram, opts: &BnbOptions) -> Result<SolveResult> {
    prog.validate()?;
    let compiled = compile(prog);
    let mut stats = SolveStats::default();

    let solve_fixed = |fixings: &[Fixing]| -> SolveResult {
        let b = node_rhs(&compiled, fixings);
        run_clarabel(prog, &compiled, &b)
    };

    let root = solve_fixed(&[]);
    stats.iterations += root.stats.iterations;
    stats.relaxations += 1;
    stats.nodes += 1;
    match root.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => {
            let mut r = SolveResult::failed(SolveStatus::Infeasible, "root relaxation infeasible");
            r.stats = stats;
            return Ok(r);
        }
        other => {
            let mut r = SolveResult::failed(other, format!("root relaxation: {}", root.message));
            r.stats = stats;
            return Ok(r);
        }
    }
    stats.root_bound = Some(root.objective);
    if prog.binaries.is_empty() {
        let mut r = root;
        r.stats = stats;
        return Ok(r);
    }

    let mut incumbent: Option<Incumbent> = None;
    let offer = |cand: SolveResult, incumbent: &mut Option<Incumbent>, stats: &mut SolveStats| {
        stats.iterations += cand.stats.iterations;
        stats.relaxations += 1;
        if cand.is_optimal() && better(prog, &cand, incumbent) {
            let key = binary_key(prog, &cand.x);
            *incumbent = Some(Incumbent {
                objective: cand.objective,
                x: cand.x,
                key,
            });
        }
    };

    // rounding heuristic at the root
    offer(
        solve_fixed(&round_fixings(prog, &root.x)),
        &mut incumbent,
        &mut stats,
    );

    let mut next_id = 1u64;
    let mut open: Vec<Node> = Vec::new();
    let mut pending: Vec<(Node, SolveResult)> = vec![(
        Node {
            id: 0,
            bound: root.objective,
            depth: 0,
            fixings: Vec::new(),
        },
        root,
    )];
    let mut status = SolveStatus::Optimal;
    let mut message = String::new();

    loop {
        // Expand solved nodes in deterministic order.
        for (node, res) in pending.drain(..) {
            stats.max_depth = stats.max_depth.max(node.depth);
            if !res.is_optimal() {
                if res.status == SolveStatus::NumericalFailure {
                    message = format!("node {} relaxation failed: {}", node.id, res.message);
                }
                continue;
            }
            let scale = 1.0 + node.bound.abs();
            if res.objective < node.bound - 1e-6 * scale {
                stats.bound_violations += 1;
            }
            let bound = res.objective.max(node.bound);
            if let Some(inc) = &incumbent {
                if bound >= inc.objective - opts.gap_tol * inc.objective.abs().max(1.0) {
                    continue;
                }
            }
            match pick_branch(prog, &res.x, opts.integrality_tol) {
                None => {
                    offer(
                        solve_fixed(&fix_all(prog, &res.x)),
                        &mut incumbent,
                        &mut stats,
                    );
                }
                Some(branch) => {
                    for extra in children(prog, branch) {
                        let mut fixings = node.fixings.clone();
                        fixings.extend(extra);
                        open.push(Node {
                            id: next_id,
                            bound,
                            depth: node.depth + 1,
                            fixings,
                        });
                        next_id += 1;
                    }
                }
            }
        }

        // prune and order the frontier
        if let Some(inc) = &incumbent {
            let cut = inc.objective - opts.gap_tol * inc.objective.abs().max(1.0);
            open.retain(|n| n.bound < cut);
        }
        if open.is_empty() {
            break;
        }
        if stats.nodes >= opts.max_nodes {
            status = SolveStatus::NumericalFailure;
            message = format!("node limit {} reached", opts.max_nodes);
            break;
        }
        open.sort_by(|a, b| match b.bound.partial_cmp(&a.bound) {
            Some(Ordering::Equal) | None => b.id.cmp(&a.id),
            Some(o) => o,
        });
        let take = opts.batch_size.max(1).min(open.len());
        let batch: Vec<Node> = (0..take).map(|_| open.pop().unwrap()).collect();
        stats.nodes += batch.len() as u64;
        let results: Vec<SolveResult> = batch.par_iter().map(|n| solve_fixed(&n.fixings)).collect();
        for r in &results {
            stats.iterations += r.stats.iterations;
            stats.relaxations += 1;
        }
        pending = batch.into_iter().zip(results).collect();
    }

    let best_open = open.iter().map(|n| n.bound).fold(f64::INFINITY, f64::min);
    match incumbent {
        Some(inc) => {
            stats.best_bound = Some(best_open.min(inc.objective));
            Ok(SolveResult {
                status,
                objective: inc.objective,
                x: inc.x,
                slack: Vec::new(),
                dual: Vec::new(),
                stats,
                message,
            })
        }
        None => {
            let st = if status == SolveStatus::Optimal && message.is_empty() {
                SolveStatus::Infeasible
            } else {
                SolveStatus::NumericalFailure
            };
            let mut r = SolveResult::failed(
                st,
                if message.is_empty() {
                    "every assignment is infeasible".to_string()
                } else {
                    message
                },
            );
            r.stats = stats;
            Ok(r)
        }
    }
}

/// Reference search: solve the program for every valid binary assignment.
/// Exponential; intended for small instances in tests.
pub fn enumerate_assignments(prog: &ConeProgram) -> Result<SolveResult> {
    prog.validate()?;
    let compiled = compile(prog);
    let grouped: std::collections::BTreeSet<usize> =
        prog.assignment_groups.iter().flatten().copied().collect();
    let singles: Vec<usize> = prog
        .binaries
        .iter()
        .copied()
        .filter(|b| !grouped.contains(b))
        .collect();
    let mut radices: Vec<usize> = prog.assignment_groups.iter().map(|g| g.len()).collect();
    radices.extend(std::iter::repeat_n(2, singles.len()));
    let total: usize = radices.iter().product();
    let mut best: Option<Incumbent> = None;
    let mut stats = SolveStats::default();
    for code in 0..total {
        let mut rem = code;
        let mut fixings = Vec::new();
        for (i, &r) in radices.iter().enumerate() {
            let digit = rem % r;
            rem /= r;
            if i < prog.assignment_groups.len() {
                for (j, &v) in prog.assignment_groups[i].iter().enumerate() {
                    fixings.push(if j == digit {
                        Fixing::One(v)
                    } else {
                        Fixing::Zero(v)
                    });
                }
            } else {
                let v = singles[i - prog.assignment_groups.len()];
                fixings.push(if digit == 1 {
                    Fixing::One(v)
                } else {
                    Fixing::Zero(v)
                });
            }
        }
        let res = run_clarabel(prog, &compiled, &node_rhs(&compiled, &fixings));
        stats.relaxations += 1;
        stats.nodes += 1;
        stats.iterations += res.stats.iterations;
        if res.is_optimal() && better(prog, &res, &best) {
            let key = binary_key(prog, &res.x);
            best = Some(Incumbent {
                objective: res.objective,
                x: res.x,
                key,
            });
        }
    }
    Ok(match best {
        Some(b) => SolveResult {
            status: SolveStatus::Optimal,
            x: b.x,
            objective: b.objective,
            slack: Vec::new(),
            dual: Vec::new(),
            stats,
            message: String::new(),
        },
        None => {
            let mut r =
                SolveResult::failed(SolveStatus::Infeasible, "every assignment is infeasible");
            r.stats = stats;
            r
        }
    })
}
