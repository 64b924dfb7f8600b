//! Laplacian eigendecomposition and the graph Fourier transform.

mod dense;
mod lanczos;

pub use lanczos::{eig_lanczos, eig_lanczos_with, LanczosOptions};

pub(crate) use dense::symmetric_eigen;

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::SpectralError;
use crate::graph::Laplacian;

/// Largest operator handled by [`eig_dense`] unless overridden.
pub const DENSE_SIZE_CAP: usize = 2000;

/// Eigenvalues closer than this are treated as one degenerate block.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Ascending eigenvalues with orthonormal eigenvectors as columns, possibly
/// truncated to the `k` smallest.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    eigenvalues: Array1<f64>,
    eigenvectors: Array2<f64>,
}

impl SpectralBasis {
    /// Wraps precomputed eigenpairs after canonicalizing signs and order.
    pub fn from_parts(eigenvalues: Array1<f64>, eigenvectors: Array2<f64>) -> Result<Self, SpectralError> {
        if eigenvectors.ncols() != eigenvalues.len() {
            return Err(SpectralError::DimensionMismatch {
                expected: eigenvalues.len(),
                found: eigenvectors.ncols(),
            });
        }
        let mut b = SpectralBasis {
            eigenvalues,
            eigenvectors,
        };
        b.canonicalize();
        Ok(b)
    }

    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.eigenvalues
    }

    /// `n x k` matrix `U`.
    pub fn eigenvectors(&self) -> &Array2<f64> {
        &self.eigenvectors
    }

    /// Ambient node count.
    pub fn n(&self) -> usize {
        self.eigenvectors.nrows()
    }

    /// Number of retained components.
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_full(&self) -> bool {
        self.k() == self.n()
    }

    pub fn vector(&self, i: usize) -> ArrayView1<'_, f64> {
        self.eigenvectors.column(i)
    }

    /// Keeps the first `k` components.
    pub fn truncate(&self, k: usize) -> Result<SpectralBasis, SpectralError> {
        if k == 0 || k > self.k() {
            return Err(SpectralError::TruncateOutOfRange {
                k,
                available: self.k(),
            });
        }
        Ok(SpectralBasis {
            eigenvalues: self.eigenvalues.slice(ndarray::s![..k]).to_owned(),
            eigenvectors: self.eigenvectors.slice(ndarray::s![.., ..k]).to_owned(),
        })
    }

    /// `x̂ = Uᵀ x`.
    pub fn gft(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, SpectralError> {
        if x.len() != self.n() {
            return Err(SpectralError::DimensionMismatch {
                expected: self.n(),
                found: x.len(),
            });
        }
        Ok(self.eigenvectors.t().dot(&x))
    }

    /// `x = U x̂`.
    pub fn igft(&self, xhat: ArrayView1<f64>) -> Result<Array1<f64>, SpectralError> {
        if xhat.len() != self.k() {
            return Err(SpectralError::DimensionMismatch {
                expected: self.k(),
                found: xhat.len(),
            });
        }
        Ok(self.eigenvectors.dot(&xhat))
    }

    /// Column-wise transform of a signal matrix, `Uᵀ X`.
    pub fn gft_matrix(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, SpectralError> {
        if x.nrows() != self.n() {
            return Err(SpectralError::DimensionMismatch {
                expected: self.n(),
                found: x.nrows(),
            });
        }
        Ok(self.eigenvectors.t().dot(&x))
    }

    /// `max |UᵀU - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.eigenvectors.t().dot(&self.eigenvectors);
        gram.indexed_iter()
            .map(|((i, j), &g)| (g - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    /// `|L υ_i - λ_i υ_i|₂` for every retained component.
    pub fn residuals(&self, lap: &Laplacian) -> Array1<f64> {
        let lu = lap.mul_dense(self.eigenvectors.view());
        Array1::from_iter((0..self.k()).map(|i| {
            let lam = self.eigenvalues[i];
            lu.column(i)
                .iter()
                .zip(self.eigenvectors.column(i))
                .map(|(a, b)| (a - lam * b).powi(2))
                .sum::<f64>()
                .sqrt()
        }))
    }

    /// Largest entry by magnitude positive (lowest index wins ties), then order
    /// by eigenvalue and, inside a degenerate block, vectors lexicographically.
    fn canonicalize(&mut self) {
        for mut col in self.eigenvectors.columns_mut() {
            let mut best = 0;
            let mut best_abs = -1.0;
            for (i, &x) in col.iter().enumerate() {
                if x.abs() > best_abs {
                    best_abs = x.abs();
                    best = i;
                }
            }
            if best_abs > 0.0 && col[best] < 0.0 {
                col.mapv_inplace(|x| -x);
            }
        }
        let k = self.k();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| self.eigenvalues[a].total_cmp(&self.eigenvalues[b]));
        // Values stay ascending; only vectors move inside a degenerate block.
        let sorted: Array1<f64> = order.iter().map(|&i| self.eigenvalues[i]).collect();
        let mut start = 0;
        while start < k {
            let mut end = start + 1;
            while end < k
                && self.eigenvalues[order[end]] - self.eigenvalues[order[end - 1]] < DEGENERACY_TOL
            {
                end += 1;
            }
            if end - start > 1 {
                let vecs = &self.eigenvectors;
                order[start..end].sort_by(|&a, &b| lex_cmp(vecs.column(a), vecs.column(b)));
            }
            start = end;
        }
        self.eigenvalues = sorted;
        self.eigenvectors = self.eigenvectors.select(Axis(1), &order);
    }
}

fn lex_cmp(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Full eigendecomposition with the default size cap.
pub fn eig_dense(lap: &Laplacian) -> Result<SpectralBasis, SpectralError> {
    eig_dense_capped(lap, DENSE_SIZE_CAP)
}

pub fn eig_dense_capped(lap: &Laplacian, cap: usize) -> Result<SpectralBasis, SpectralError> {
    let n = lap.n();
    if n > cap {
        return Err(SpectralError::SizeCapExceeded { n, cap });
    }
    let dense = lap.to_dense();
    let (vals, vecs) = symmetric_eigen(dense.as_slice().expect("standard layout"), n)?;
    let vecs = Array2::from_shape_vec((n, n), vecs).expect("n x n eigenvectors");
    SpectralBasis::from_parts(Array1::from(vals), vecs)
}

/// Solver choice for [`decompose`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Dense,
    Lanczos,
    /// Dense when it fits under the cap and `k` is a large fraction of `n`.
    Auto,
}

/// The `k` smallest eigenpairs (`None` means all) with the chosen solver.
pub fn decompose(
    lap: &Laplacian,
    k: Option<usize>,
    solver: Solver,
    seed: u64,
) -> Result<SpectralBasis, SpectralError> {
    let n = lap.n();
    let k = k.unwrap_or(n).min(n);
    let use_dense = match solver {
        Solver::Dense => true,
        Solver::Lanczos => k >= n,
        Solver::Auto => n <= DENSE_SIZE_CAP && (k >= n || n <= 600 || 4 * k >= n),
    };
    if use_dense {
        let full = eig_dense(lap)?;
        if k == n {
            Ok(full)
        } else {
            full.truncate(k)
        }
    } else {
        eig_lanczos(lap, k, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_laplacian, Graph};
    use ndarray::array;

    fn path3() -> Laplacian {
        build_laplacian(&Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap())
    }

    #[test]
    fn path_spectrum() {
        // Characteristic polynomial of [[1,-1,0],[-1,2,-1],[0,-1,1]] is -λ(λ-1)(λ-3).
        let b = eig_dense(&path3()).unwrap();
        let want = [0.0, 1.0, 3.0];
        for (l, w) in b.eigenvalues().iter().zip(want) {
            assert!((l - w).abs() < 1e-12);
        }
        let c = 1.0 / 3f64.sqrt();
        for x in b.vector(0) {
            assert!((x - c).abs() < 1e-12);
        }
        // L·(1,0,-1) = (1,0,-1): second eigenvector is (1,0,-1)/√2 up to sign.
        let lv = path3().matvec(array![1.0, 0.0, -1.0].view());
        assert_eq!(lv, array![1.0, 0.0, -1.0]);
        assert!((b.vector(1)[0].abs() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(b.vector(1)[1].abs() < 1e-12);
    }

    #[test]
    fn zero_laplacian() {
        let lap = build_laplacian(&Graph::from_edges(3, &[]).unwrap());
        let b = eig_dense(&lap).unwrap();
        assert_eq!(b.eigenvalues().to_vec(), vec![0.0, 0.0, 0.0]);
        assert!(b.orthonormality_error() < 1e-15);
    }

    #[test]
    fn triangle_spectrum() {
        // trace 6 = 0 + 3 + 3; constant vector spans the kernel.
        let lap = build_laplacian(&Graph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap());
        let b = eig_dense(&lap).unwrap();
        for (l, w) in b.eigenvalues().iter().zip([0.0, 3.0, 3.0]) {
            assert!((l - w).abs() < 1e-12);
        }
    }

    #[test]
    fn gft_examples() {
        let b = eig_dense(&path3()).unwrap();
        let xhat = b.gft(b.vector(1)).unwrap();
        for (i, v) in xhat.iter().enumerate() {
            let want = if i == 1 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
        assert_eq!(b.gft(Array1::zeros(3).view()).unwrap(), Array1::<f64>::zeros(3));

        let xhat = b.gft(array![1.0, 0.0, -1.0].view()).unwrap();
        assert!(xhat[0].abs() < 1e-12 && xhat[2].abs() < 1e-12);
        assert!((xhat[1].abs() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn igft_inverts_full_basis() {
        let b = eig_dense(&path3()).unwrap();
        let x = array![0.3, -1.2, 2.5];
        let back = b.igft(b.gft(x.view()).unwrap().view()).unwrap();
        for (a, c) in back.iter().zip(&x) {
            assert!((a - c).abs() < 1e-12);
        }
        let e1 = array![1.0, 0.0, 0.0];
        for v in b.igft(e1.view()).unwrap() {
            assert!((v - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn truncated_round_trip_is_projection() {
        let b = eig_dense(&path3()).unwrap();
        let t = b.truncate(2).unwrap();
        let x = array![0.3, -1.2, 2.5];
        let got = t.igft(t.gft(x.view()).unwrap().view()).unwrap();
        let u = t.eigenvectors();
        let want = u.dot(&u.t()).dot(&x);
        for (a, c) in got.iter().zip(&want) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn truncate_examples() {
        let b = eig_dense(&path3()).unwrap();
        assert_eq!(b.truncate(3).unwrap(), b);
        let one = b.truncate(1).unwrap();
        assert_eq!(one.k(), 1);
        assert!(one.eigenvalues()[0].abs() < 1e-12);
        let x = array![0.3, -1.2, 2.5];
        let full = b.gft(x.view()).unwrap();
        let part = b.truncate(2).unwrap().gft(x.view()).unwrap();
        assert_eq!(part.to_vec(), full.to_vec()[..2].to_vec());
        assert!(matches!(
            b.truncate(4),
            Err(SpectralError::TruncateOutOfRange { k: 4, available: 3 })
        ));
        assert!(b.truncate(0).is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let b = eig_dense(&path3()).unwrap().truncate(2).unwrap();
        assert!(b.gft(Array1::zeros(2).view()).is_err());
        assert!(b.igft(Array1::zeros(3).view()).is_err());
    }

    #[test]
    fn size_cap() {
        assert_eq!(
            eig_dense_capped(&path3(), 2),
            Err(SpectralError::SizeCapExceeded { n: 3, cap: 2 })
        );
    }

    #[test]
    fn canonical_sign_rule() {
        let b = eig_dense(&path3()).unwrap();
        for col in b.eigenvectors().columns() {
            let (mut best, mut best_abs) = (0, -1.0);
            for (i, &x) in col.iter().enumerate() {
                if x.abs() > best_abs + 1e-12 {
                    best = i;
                    best_abs = x.abs();
                }
            }
            assert!(col[best] > 0.0);
        }
    }
}
