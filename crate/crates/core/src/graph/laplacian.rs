use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::Graph;

/// Which Laplacian to build from the adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaplacianKind {
    /// `L = D - A`.
    #[default]
    Combinatorial,
    /// `L = I - D^{-1/2} A D^{-1/2}`; isolated nodes get a zero row.
    SymNormalized,
}

/// Sparse symmetric Laplacian in CSR layout. Column indices within a row are
/// sorted, so every product below has a fixed reduction order.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    n: usize,
    kind: LaplacianKind,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

/// Builds the combinatorial Laplacian `D - A`.
pub fn build_laplacian(g: &Graph) -> Laplacian {
    Laplacian::new(g, LaplacianKind::Combinatorial)
}

impl Laplacian {
    pub fn new(g: &Graph, kind: LaplacianKind) -> Self {
        let n = g.n_nodes();
        let adj = g.adjacency();
        let deg: Vec<f64> = adj.iter().map(|a| a.len() as f64).collect();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(n + 2 * g.n_edges());
        let mut values = Vec::with_capacity(n + 2 * g.n_edges());
        indptr.push(0);
        for i in 0..n {
            let mut diag_written = false;
            let diag = match kind {
                LaplacianKind::Combinatorial => deg[i],
                LaplacianKind::SymNormalized => {
                    if deg[i] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            for &j in &adj[i] {
                if !diag_written && j > i {
                    indices.push(i);
                    values.push(diag);
                    diag_written = true;
                }
                let off = match kind {
                    LaplacianKind::Combinatorial => -1.0,
                    LaplacianKind::SymNormalized => -1.0 / (deg[i] * deg[j]).sqrt(),
                };
                indices.push(j);
                values.push(off);
            }
            if !diag_written {
                indices.push(i);
                values.push(diag);
            }
            indptr.push(indices.len());
        }
        Laplacian {
            n,
            kind,
            indptr,
            indices,
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> LaplacianKind {
        self.kind
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `i`, including the diagonal.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn diagonal(&self) -> Array1<f64> {
        Array1::from_iter((0..self.n).map(|i| self.get(i, i)))
    }

    pub fn row_sums(&self) -> Array1<f64> {
        Array1::from_iter((0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()))
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[[i, j]] = v;
            }
        }
        m
    }

    /// `y = L x`.
    pub fn matvec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.n, "matvec dimension mismatch");
        Array1::from_iter((0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()))
    }

    pub(crate) fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    /// `L X` for a dense `n x f` matrix.
    pub fn mul_dense(&self, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n, "mul_dense dimension mismatch");
        let mut out = Array2::zeros((self.n, x.ncols()));
        for i in 0..self.n {
            let mut out_row = out.row_mut(i);
            for (j, v) in self.row(i) {
                out_row.scaled_add(v, &x.row(j));
            }
        }
        out
    }
}
