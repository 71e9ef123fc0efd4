//! 2-Wasserstein distances: closed form between Gaussians and exact between
//! equal-size empirical measures.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Largest sample count accepted by [`empirical_w2`].
pub const MAX_EXACT_SAMPLES: usize = 4096;

/// `W₂(N(μ₁, Σ₁), N(μ₂, Σ₂))`.
pub fn gaussian_w2(
    mu1: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    sigma2: &DMatrix<f64>,
) -> Result<f64> {
    let n = mu1.len();
    check_dim("second mean", n, mu2.len())?;
    for s in [sigma1, sigma2] {
        check_dim("covariance rows", n, s.nrows())?;
        check_dim("covariance cols", n, s.ncols())?;
        let tol = 1e-9 * (1.0 + s.abs().max());
        if !linalg::is_psd(s, tol) {
            return Err(Error::invalid("covariance is not symmetric PSD"));
        }
    }
    let r2 = linalg::psd_sqrt(sigma2);
    let cross = linalg::psd_sqrt(&(&r2 * sigma1 * &r2));
    let tr = (sigma1 + sigma2 - cross * 2.0).trace();
    Ok(((mu1 - mu2).norm_squared() + tr).max(0.0).sqrt())
}

/// Exact `W₂` between the uniform empirical measures on `a` and `b`.
///
/// Both samples must have the same size `N ≤ 4096`; the optimal coupling is
/// a permutation, found by solving the assignment problem on squared
/// distances.
pub fn empirical_w2(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("empirical W2 of an empty sample"));
    }
    check_dim("sample count", a.len(), b.len())?;
    if a.len() > MAX_EXACT_SAMPLES {
        return Err(Error::invalid(format!(
            "exact W2 is limited to {MAX_EXACT_SAMPLES} samples, got {}",
            a.len()
        )));
    }
    let dim = a[0].len();
    for p in a.iter().chain(b) {
        check_dim("sample dimension", dim, p.len())?;
    }
    let n = a.len();
    // Translating one sample adds a row term plus a column term to the cost,
    // so the optimal permutation is that of the centered samples; centering
    // only spares the solver from discovering the offset through its duals.
    let mean = |s: &[DVector<f64>]| s.iter().fold(DVector::zeros(dim), |acc, p| acc + p) / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let flat = |s: &[DVector<f64>], m: &DVector<f64>| -> Vec<f64> {
        s.iter()
            .flat_map(|p| (p - m).iter().copied().collect::<Vec<_>>())
            .collect()
    };
    let (ca, cb) = (flat(a, &ma), flat(b, &mb));
    let mut cost = vec![0.0; n * n];
    for (i, row) in cost.chunks_exact_mut(n).enumerate() {
        let p = &ca[i * dim..(i + 1) * dim];
        for (j, c) in row.iter_mut().enumerate() {
            let q = &cb[j * dim..(j + 1) * dim];
            *c = p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    let assign = linear_sum_assignment(&cost, n);
    // Summed in sorted order so that swapping the arguments, which visits
    // the same pairs in another order, gives a bit-identical value.
    let mut pair: Vec<f64> = assign
        .iter()
        .enumerate()
        .map(|(i, &j)| (&a[i] - &b[j]).norm_squared())
        .collect();
    pair.sort_unstable_by(f64::total_cmp);
    let total: f64 = pair.iter().sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

/// Minimum-cost perfect matching on a dense `n × n` row-major cost matrix.
/// Returns `col[i]`, the column assigned to row `i`.
///
/// Jonker–Volgenant: column reduction with reduction transfer, then shortest
/// augmenting paths for the rows still free. Augmenting row reduction is left
/// out since it measured slower on sample clouds. Exact; `O(n³)` worst case.
pub fn linear_sum_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n × n");
    if n == 0 {
        return Vec::new();
    }
    let mut jv = Jv {
        n,
        cost,
        x: vec![NONE; n],
        y: vec![NONE; n],
        v: vec![0.0; n],
    };
    let free = jv.column_reduction();
    jv.augment(&free);
    jv.x
}

const NONE: usize = usize::MAX;

struct Jv<'a> {
    n: usize,
    cost: &'a [f64],
    /// column of each row
    x: Vec<usize>,
    /// row of each column
    y: Vec<usize>,
    /// column duals
    v: Vec<f64>,
}

impl Jv<'_> {
    fn c(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.n + j]
    }

    fn column_reduction(&mut self) -> Vec<usize> {
        let n = self.n;
        self.v.fill(f64::INFINITY);
        let mut argmin = vec![0; n];
        for i in 0..n {
            for j in 0..n {
                let c = self.c(i, j);
                if c < self.v[j] {
                    self.v[j] = c;
                    argmin[j] = i;
                }
            }
        }
        let mut unique = vec![true; n];
        for j in (0..n).rev() {
            let i = argmin[j];
            if self.x[i] == NONE {
                self.x[i] = j;
                self.y[j] = i;
            } else {
                unique[i] = false;
                self.y[j] = NONE;
            }
        }
        let mut free = Vec::new();
        for i in 0..n {
            if self.x[i] == NONE {
                free.push(i);
            } else if unique[i] {
                // reduction transfer
                let j = self.x[i];
                let mut min = f64::INFINITY;
                for j2 in 0..n {
                    if j2 != j {
                        min = min.min(self.c(i, j2) - self.v[j2]);
                    }
                }
                if min.is_finite() {
                    self.v[j] -= min;
                }
            }
        }
        free
    }

    fn augment(&mut self, free: &[usize]) {
        let n = self.n;
        let mut pred = vec![0; n];
        let mut cols: Vec<usize> = (0..n).collect();
        let mut d = vec![0.0; n];
        for &fi in free {
            let mut j = self.find_path(fi, &mut pred, &mut cols, &mut d);
            loop {
                let i = pred[j];
                self.y[j] = i;
                std::mem::swap(&mut j, &mut self.x[i]);
                if i == fi {
                    break;
                }
            }
        }
    }

    /// Dijkstra over reduced costs from row `start`; returns a free column.
    fn find_path(
        &mut self,
        start: usize,
        pred: &mut [usize],
        cols: &mut [usize],
        d: &mut [f64],
    ) -> usize {
        let n = self.n;
        for (k, c) in cols.iter_mut().enumerate() {
            *c = k;
        }
        for j in 0..n {
            d[j] = self.c(start, j) - self.v[j];
            pred[j] = start;
        }
        // cols[..lo] are done, cols[lo..hi] hold the current minimum, cols[hi..] are todo
        let (mut lo, mut hi) = (0, 0);
        let mut ready = 0;
        let final_j = 'search: loop {
            if lo == hi {
                ready = lo;
                let mut mind = d[cols[lo]];
                hi = lo + 1;
                // the range is fixed at entry; `hi` grows as ties are swapped in
                #[allow(clippy::mut_range_bound)]
                for k in hi..n {
                    let j = cols[k];
                    if d[j] <= mind {
                        if d[j] < mind {
                            hi = lo;
                            mind = d[j];
                        }
                        cols[k] = cols[hi];
                        cols[hi] = j;
                        hi += 1;
                    }
                }
                for &j in &cols[lo..hi] {
                    if self.y[j] == NONE {
                        break 'search j;
                    }
                }
            }
            // scan the rows matched to the current minimum columns
            while lo != hi {
                let j = cols[lo];
                lo += 1;
                let i = self.y[j];
                let mind = d[j];
                let h = self.c(i, j) - self.v[j] - mind;
                let mut k = hi;
                while k < n {
                    let j = cols[k];
                    let red = self.c(i, j) - self.v[j] - h;
                    if red < d[j] {
                        d[j] = red;
                        pred[j] = i;
                        if red == mind {
                            if self.y[j] == NONE {
                                // columns in cols[..ready] get their duals updated below
                                let mind = d[cols[lo - 1]];
                                for &c in &cols[..ready] {
                                    self.v[c] += d[c] - mind;
                                }
                                return j;
                            }
                            cols[k] = cols[hi];
                            cols[hi] = j;
                            hi += 1;
                        }
                    }
                    k += 1;
                }
            }
        };
        let mind = d[cols[lo]];
        for &c in &cols[..ready] {
            self.v[c] += d[c] - mind;
        }
        final_j
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook Hungarian method with potentials, one Dijkstra per row.
    fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
        assert_eq!(cost.len(), n * n, "cost matrix must be n × n");
        const NONE: usize = usize::MAX;
        let mut u = vec![0.0f64; n];
        let mut v = vec![0.0f64; n];
        // row_of[j]: row matched to column j
        let mut row_of = vec![NONE; n];
        let mut way = vec![NONE; n];
        let mut minv = vec![0.0f64; n];
        let mut used = vec![false; n];
        for i in 0..n {
            minv.fill(f64::INFINITY);
            used.fill(false);
            way.fill(NONE);
            let mut row = i;
            let mut col = NONE;
            loop {
                let base = &cost[row * n..(row + 1) * n];
                let ur = if col == NONE { u[i] } else { u[row] };
                let mut delta = f64::INFINITY;
                let mut next = NONE;
                for j in 0..n {
                    if used[j] {
                        continue;
                    }
                    let cur = base[j] - ur - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = col;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        next = j;
                    }
                }
                // dual update over the tree
                u[i] += delta;
                for j in 0..n {
                    if used[j] {
                        u[row_of[j]] += delta;
                        v[j] -= delta;
                    } else {
                        minv[j] -= delta;
                    }
                }
                used[next] = true;
                col = next;
                if row_of[col] == NONE {
                    break;
                }
                row = row_of[col];
            }
            // augment along the recorded path
            loop {
                let prev = way[col];
                if prev == NONE {
                    row_of[col] = i;
                    break;
                }
                row_of[col] = row_of[prev];
                col = prev;
            }
        }
        let mut out = vec![0; n];
        for (j, &r) in row_of.iter().enumerate() {
            out[r] = j;
        }
        out
    }

    fn brute_force(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(cost, n, row + 1, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=7 {
            for _ in 0..20 {
                let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(-5.0..5.0)).collect();
                let a = linear_sum_assignment(&cost, n);
                let mut seen = a.clone();
                seen.sort_unstable();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                let got: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
                assert!((got - brute_force(&cost, n)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jonker_volgenant_matches_hungarian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &n in &[8, 30, 120] {
            for round in 0..10 {
                // integer costs force ties and degenerate reductions
                let cost: Vec<f64> = (0..n * n)
                    .map(|_| {
                        if round % 2 == 0 {
                            rng.random_range(0..5) as f64
                        } else {
                            rng.random_range(-1.0..1.0)
                        }
                    })
                    .collect();
                let total = |a: &[usize]| {
                    a.iter()
                        .enumerate()
                        .map(|(i, &j)| cost[i * n + j])
                        .sum::<f64>()
                };
                let a = linear_sum_assignment(&cost, n);
                let mut seen = a.clone();
                seen.sort_unstable();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                assert!((total(&a) - total(&hungarian(&cost, n))).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gaussian_examples() {
        let z = DVector::zeros(1);
        let one = DMatrix::identity(1, 1);
        assert!(
            (gaussian_w2(&z, &one, &DVector::from_element(1, 3.0), &one).unwrap() - 3.0).abs()
                < 1e-12
        );
        let z2 = DVector::zeros(2);
        let w = gaussian_w2(
            &z2,
            &(DMatrix::identity(2, 2) * 4.0),
            &z2,
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        assert!((w - 2f64.sqrt()).abs() < 1e-12);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert!(gaussian_w2(&z2, &s, &z2, &s).unwrap() < 1e-7);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(gaussian_w2(&z2, &bad, &z2, &s).is_err());
    }

    #[test]
    fn empirical_trivial_cases() {
        let a = vec![DVector::from_vec(vec![1.0, 2.0])];
        let b = vec![DVector::from_vec(vec![4.0, 6.0])];
        assert!((empirical_w2(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        let pts: Vec<_> = (0..10)
            .map(|i| DVector::from_vec(vec![i as f64, (i * i) as f64]))
            .collect();
        let mut shuffled = pts.clone();
        shuffled.reverse();
        assert_eq!(empirical_w2(&pts, &shuffled).unwrap(), 0.0);
        assert!(empirical_w2(&[], &[]).is_err());
        assert!(empirical_w2(&pts, &pts[..3]).is_err());
    }
}
