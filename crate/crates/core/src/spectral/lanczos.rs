//! Lanczos with full reorthogonalization, locking and explicit restarts.
//!
//! Each round builds a Krylov basis orthogonal to the already locked vectors
//! and locks the converged prefix of the smallest Ritz pairs. A single Krylov
//! sequence sees only one direction per eigenspace, so once `k` pairs are
//! locked a verification round from a fresh random start checks that nothing
//! below the largest locked eigenvalue was missed; a missed (degenerate) pair
//! is pulled in and the largest one dropped.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{dense::tridiagonal_eigen, symmetric_eigen, SpectralBasis};
use crate::error::SpectralError;
use crate::graph::Laplacian;
use crate::rng;

#[derive(Debug, Clone)]
pub struct LanczosOptions {
    /// Converged when `|L y - θ y| <= tol * max(1, |θ|)`.
    pub tol: f64,
    /// Restart budget; `None` means `10 * k`.
    pub max_restarts: Option<usize>,
    /// Krylov dimension per round; `None` picks from `k` and `n`.
    pub max_basis: Option<usize>,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        LanczosOptions {
            tol: 1e-10,
            max_restarts: None,
            max_basis: None,
        }
    }
}

pub fn eig_lanczos(lap: &Laplacian, k: usize, seed: u64) -> Result<SpectralBasis, SpectralError> {
    eig_lanczos_with(lap, k, seed, &LanczosOptions::default())
}

struct RitzPair {
    value: f64,
    vector: Vec<f64>,
    residual: f64,
}

struct Solver<'a> {
    lap: &'a Laplacian,
    n: usize,
    tol: f64,
    locked: Vec<(f64, Vec<f64>)>,
    rng: rng::Rng,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl Solver<'_> {
    fn converged(&self, value: f64, residual: f64) -> bool {
        residual <= self.tol * value.abs().max(1.0)
    }

    /// Two passes of classical Gram-Schmidt against the locked set and `basis`.
    fn orthogonalize(&self, w: &mut [f64], basis: &[Vec<f64>]) {
        for _ in 0..2 {
            for (_, v) in &self.locked {
                let c = dot(v, w);
                axpy(-c, v, w);
            }
            for q in basis {
                let c = dot(q, w);
                axpy(-c, q, w);
            }
        }
    }

    /// Random unit vector orthogonal to the locked set and `basis`; `None` once
    /// those already span the whole space.
    fn fresh_vector(&mut self, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
        for _ in 0..4 {
            let mut v: Vec<f64> = (0..self.n).map(|_| self.rng.sample(StandardNormal)).collect();
            self.orthogonalize(&mut v, basis);
            let nv = norm(&v);
            if nv > 1e-8 {
                v.iter_mut().for_each(|x| *x /= nv);
                return Some(v);
            }
        }
        None
    }

    /// One Lanczos round from `start`. Returns the Ritz pairs (ascending) of
    /// the final Krylov basis, grown until the `want` smallest converge or the
    /// dimension hits `max_dim`.
    fn round(&mut self, start: Vec<f64>, want: usize, max_dim: usize) -> Vec<RitzPair> {
        let mut start = start;
        self.orthogonalize(&mut start, &[]);
        let ns = norm(&start);
        let first = if ns > 1e-8 {
            start.iter().map(|x| x / ns).collect()
        } else {
            match self.fresh_vector(&[]) {
                Some(v) => v,
                None => return Vec::new(),
            }
        };

        let mut basis: Vec<Vec<f64>> = vec![first];
        let mut alpha: Vec<f64> = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let mut w = vec![0.0; self.n];
        let mut next_check = want.max(8).min(max_dim);
        loop {
            let j = basis.len() - 1;
            self.lap.matvec_into(&basis[j], &mut w);
            let a = dot(&basis[j], &w);
            alpha.push(a);
            self.orthogonalize(&mut w, &basis);
            let b = norm(&w);
            let m = basis.len();

            let exhausted = m >= max_dim;
            let mut next: Option<Vec<f64>> = None;
            let mut last_beta = b;
            if !exhausted {
                if b > 1e-10 * a.abs().max(1.0) {
                    next = Some(w.iter().map(|x| x / b).collect());
                } else {
                    // Invariant subspace found; continue in its complement.
                    last_beta = 0.0;
                    next = self.fresh_vector(&basis);
                }
            }

            if exhausted || next.is_none() || m >= next_check {
                let (vals, vecs) =
                    tridiagonal_eigen(&alpha, &beta).expect("tridiagonal QL converges");
                let residual_of = |i: usize| (last_beta * vecs[(m - 1) * m + i]).abs();
                let done = exhausted
                    || next.is_none()
                    || (0..want.min(m)).all(|i| self.converged(vals[i], residual_of(i)));
                if done {
                    return (0..m)
                        .map(|i| {
                            let mut y = vec![0.0; self.n];
                            for (r, q) in basis.iter().enumerate() {
                                axpy(vecs[r * m + i], q, &mut y);
                            }
                            RitzPair {
                                value: vals[i],
                                vector: y,
                                residual: if next.is_none() && !exhausted {
                                    0.0
                                } else {
                                    residual_of(i)
                                },
                            }
                        })
                        .collect();
                }
                next_check = (next_check + next_check / 2).max(next_check + 4).min(max_dim);
            }
            beta.push(last_beta);
            basis.push(next.expect("checked above"));
        }
    }

    fn lock(&mut self, pair: RitzPair) {
        let mut v = pair.vector;
        self.orthogonalize(&mut v, &[]);
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let mut lv = vec![0.0; self.n];
        self.lap.matvec_into(&v, &mut lv);
        let value = dot(&v, &lv);
        self.locked.push((value, v));
    }

    fn max_locked(&self) -> f64 {
        self.locked.iter().map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn eig_lanczos_with(
    lap: &Laplacian,
    k: usize,
    seed: u64,
    opts: &LanczosOptions,
) -> Result<SpectralBasis, SpectralError> {
    let n = lap.n();
    if k == 0 || k >= n {
        return Err(SpectralError::InvalidK { k, n });
    }
    let max_restarts = opts.max_restarts.unwrap_or(10 * k);
    let mut solver = Solver {
        lap,
        n,
        tol: opts.tol,
        locked: Vec::with_capacity(k + 1),
        rng: rng::stream(seed, "lanczos"),
    };
    let dim_for = |want: usize, locked: usize| {
        let room = n - locked;
        opts.max_basis
            .unwrap_or_else(|| (4 * want + 60).max(160))
            .min(room)
            .max(1)
    };

    let mut restarts = 0;
    let mut start = solver.fresh_vector(&[]).expect("n >= 2");
    loop {
        let want = k - solver.locked.len();
        let verifying = want == 0;
        let round_want = want.max(1);
        let pairs = solver.round(start, round_want, dim_for(round_want, solver.locked.len()));

        if verifying {
            let Some(lowest) = pairs.first() else { break };
            let threshold = solver.max_locked();
            if !solver.converged(lowest.value, lowest.residual) {
                restarts += 1;
                if restarts > max_restarts {
                    return Err(SpectralError::NoConvergence {
                        k,
                        converged: k,
                        restarts,
                    });
                }
                start = pairs.into_iter().next().unwrap().vector;
                continue;
            }
            if lowest.value >= threshold - super::DEGENERACY_TOL {
                break;
            }
            // A pair below the locked set was missed: swap it in.
            let pair = pairs.into_iter().next().unwrap();
            solver.lock(pair);
            let worst = solver
                .locked
                .iter()
                .enumerate()
                .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .unwrap();
            solver.locked.remove(worst);
            restarts += 1;
            start = solver.fresh_vector(&[]).unwrap_or_else(|| vec![1.0; n]);
            continue;
        }

        let mut newly = 0;
        let mut pending = Vec::new();
        for pair in pairs.into_iter().take(want) {
            if pending.is_empty() && solver.converged(pair.value, pair.residual) {
                solver.lock(pair);
                newly += 1;
            } else {
                pending.push(pair);
            }
        }
        if solver.locked.len() == k {
            start = solver.fresh_vector(&[]).unwrap_or_else(|| vec![1.0; n]);
            continue;
        }
        if newly == 0 {
            restarts += 1;
            if restarts > max_restarts {
                return Err(SpectralError::NoConvergence {
                    k,
                    converged: solver.locked.len(),
                    restarts,
                });
            }
        }
        let mut combo = vec![0.0; n];
        for p in &pending {
            axpy(1.0, &p.vector, &mut combo);
        }
        start = combo;
    }

    // Rayleigh-Ritz on the locked span fixes ordering and degenerate blocks.
    let mut y = Array2::zeros((n, k));
    for (c, (_, v)) in solver.locked.iter().enumerate() {
        for r in 0..n {
            y[[r, c]] = v[r];
        }
    }
    let ly = lap.mul_dense(y.view());
    let t = y.t().dot(&ly);
    let t = (&t + &t.t()) * 0.5;
    let (vals, s) = symmetric_eigen(t.as_slice().expect("standard layout"), k)?;
    let s = Array2::from_shape_vec((k, k), s).expect("k x k");
    let basis = SpectralBasis::from_parts(Array1::from(vals), y.dot(&s))?;

    let residuals = basis.residuals(lap);
    let bad = basis
        .eigenvalues()
        .iter()
        .zip(residuals.iter())
        .filter(|(l, r)| **r > 1e-6 * l.abs().max(1.0))
        .count();
    if bad > 0 {
        return Err(SpectralError::NoConvergence {
            k,
            converged: k - bad,
            restarts,
        });
    }
    Ok(basis)
}
