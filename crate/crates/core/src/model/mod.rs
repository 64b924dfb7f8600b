//! Polynomial spectral-filter GNN, task head and optimizer.
//!
//! Layer `ℓ` computes `U diag(g_ℓ(λ)) Uᵀ Z W_ℓ` with `g_ℓ(λ) = Σ_p c_p λ^p`,
//! followed by ReLU except on the last layer. With a full basis this equals
//! the spatial form `Σ_p c_p L^p Z W_ℓ`, which the pre-training loop uses to
//! avoid decomposing every sampled view.

mod adam;

pub use adam::{adam_step, AdamConfig, AdamState};

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::ModelError;
use crate::graph::{Laplacian, LaplacianKind};
use crate::rng;
use crate::spectral::SpectralBasis;

/// Ordered, named trainable arrays. The order is the contract shared by
/// optimizer state and checkpoints.
pub trait Parameters {
    fn named_arrays(&self) -> Vec<(String, &Array2<f64>)>;
    fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>>;

    fn param_count(&self) -> usize {
        self.named_arrays().iter().map(|(_, a)| a.len()).sum()
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.named_arrays().iter().map(|(_, a)| a.dim()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Polynomial order `P` of each filter.
    pub filter_degree: usize,
    pub head_hidden: usize,
    pub head_out: usize,
    pub laplacian: LaplacianKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            hidden_dim: 128,
            num_layers: 2,
            filter_degree: 2,
            head_hidden: 128,
            head_out: 128,
            laplacian: LaplacianKind::Combinatorial,
        }
    }
}

/// `g(λ) = Σ_p c_p λ^p`, stored as a `1 x (P+1)` row.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    coeffs: Array2<f64>,
}

impl FilterKernel {
    pub fn new(coeffs: &[f64]) -> Self {
        assert!(!coeffs.is_empty(), "filter needs at least c_0");
        FilterKernel {
            coeffs: Array2::from_shape_vec((1, coeffs.len()), coeffs.to_vec()).unwrap(),
        }
    }

    /// `g(λ) = 1`.
    pub fn identity(degree: usize) -> Self {
        let mut c = vec![0.0; degree + 1];
        c[0] = 1.0;
        Self::new(&c)
    }

    pub fn degree(&self) -> usize {
        self.coeffs.ncols() - 1
    }

    pub fn coeffs(&self) -> &Array2<f64> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut Array2<f64> {
        &mut self.coeffs
    }

    pub fn response(&self, lambda: f64) -> f64 {
        self.coeffs
            .row(0)
            .iter()
            .rev()
            .fold(0.0, |acc, c| acc * lambda + c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralLayer {
    pub filter: FilterKernel,
    /// `F_ℓ x F_{ℓ+1}` channel mixing.
    pub weight: Array2<f64>,
}

/// Two-layer perceptron `ReLU(Z W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

/// Uniform in `±1/√fan_in`.
fn uniform_init(rows: usize, cols: usize, rng: &mut rng::Rng) -> Array2<f64> {
    let a = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
}

impl Head {
    pub fn new(input: usize, hidden: usize, output: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "head-init");
        Head {
            w1: uniform_init(input, hidden, &mut rng),
            b1: Array2::zeros((1, hidden)),
            w2: uniform_init(hidden, output, &mut rng),
            b2: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn bind(&self, tape: &mut Tape<'_>, trainable: bool) -> BoundHead {
        BoundHead {
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
        }
    }
}

impl Parameters for Head {
    fn named_arrays(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("head.w1".into(), &self.w1),
            ("head.b1".into(), &self.b1),
            ("head.w2".into(), &self.w2),
            ("head.b2".into(), &self.b2),
        ]
    }

    fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BoundHead {
    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Backbone layers plus the pre-training projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<SpectralLayer>,
    pub head: Head,
    pub frozen: bool,
    pub laplacian: LaplacianKind,
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    /// `(filter coefficients, channel weight)` per layer.
    pub layers: Vec<(Var, Var)>,
    pub head: BoundHead,
}

impl BoundModel {
    pub fn backbone_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(c, w)| [c, w]).collect()
    }

    /// Same order as [`Parameters::named_arrays`] on [`ModelParams`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.backbone_vars();
        v.extend(self.head.vars());
        v
    }
}

impl ModelParams {
    /// Uniform(±1/√fan_in) weights and identity filters (`g(λ) = 1`).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "model-init");
        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut fan_in = cfg.input_dim;
        for _ in 0..cfg.num_layers {
            layers.push(SpectralLayer {
                filter: FilterKernel::identity(cfg.filter_degree),
                weight: uniform_init(fan_in, cfg.hidden_dim, &mut rng),
            });
            fan_in = cfg.hidden_dim;
        }
        ModelParams {
            layers,
            head: Head::new(fan_in, cfg.head_hidden, cfg.head_out, rng::derive_seed(seed, "head", 0)),
            frozen: false,
            laplacian: cfg.laplacian,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.nrows())
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Checks that layer dimensions chain and the head fits the last layer.
    pub fn check(&self) -> Result<(), ModelError> {
        for pair in self.layers.windows(2) {
            if pair[0].weight.ncols() != pair[1].weight.nrows() {
                return Err(ModelError::Shape {
                    context: "layer chain",
                    expected: (pair[0].weight.ncols(), pair[1].weight.ncols()),
                    found: pair[1].weight.dim(),
                });
            }
        }
        if self.head.input_dim() != self.embedding_dim() {
            return Err(ModelError::Shape {
                context: "head input",
                expected: (self.embedding_dim(), self.head.w1.ncols()),
                found: self.head.w1.dim(),
            });
        }
        Ok(())
    }

    /// Binds backbone (trainable unless frozen) and head to a tape.
    pub fn bind(&self, tape: &mut Tape<'_>, head_trainable: bool) -> BoundModel {
        let trainable = !self.frozen;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.filter.coeffs.clone(), trainable),
                    tape.leaf(l.weight.clone(), trainable),
                )
            })
            .collect();
        BoundModel {
            layers,
            head: self.head.bind(tape, head_trainable),
        }
    }

    pub fn backbone_arrays(&self) -> Vec<(String, &Array2<f64>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layer{i}.filter"), &l.filter.coeffs),
                    (format!("layer{i}.weight"), &l.weight),
                ]
            })
            .collect()
    }

    pub fn backbone_count(&self) -> usize {
        self.backbone_arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// Rebuilds parameters from arrays in [`Parameters::named_arrays`] order.
    pub fn from_arrays(
        arrays: &[Array2<f64>],
        num_layers: usize,
        frozen: bool,
        laplacian: LaplacianKind,
    ) -> Result<Self, ModelError> {
        if arrays.len() != 2 * num_layers + 4 {
            return Err(ModelError::Shape {
                context: "model array count",
                expected: (2 * num_layers + 4, 0),
                found: (arrays.len(), 0),
            });
        }
        let layers = (0..num_layers)
            .map(|i| SpectralLayer {
                filter: FilterKernel {
                    coeffs: arrays[2 * i].clone(),
                },
                weight: arrays[2 * i + 1].clone(),
            })
            .collect();
        let h = &arrays[2 * num_layers..];
        let params = ModelParams {
            layers,
            head: Head {
                w1: h[0].clone(),
                b1: h[1].clone(),
                w2: h[2].clone(),
                b2: h[3].clone(),
            },
            frozen,
            laplacian,
        };
        params.check()?;
        Ok(params)
    }
}

impl Parameters for ModelParams {
    fn named_arrays(&self) -> Vec<(String, &Array2<f64>)> {
        let mut v = self.backbone_arrays();
        v.extend(self.head.named_arrays());
        v
    }

    fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v: Vec<&mut Array2<f64>> = Vec::new();
        for l in &mut self.layers {
            v.push(&mut l.filter.coeffs);
            v.push(&mut l.weight);
        }
        v.extend(self.head.arrays_mut());
        v
    }
}

/// How a layer propagates signals over the graph.
pub enum Propagation<'a> {
    /// `Σ_p c_p L^p Y`.
    Spatial(&'a Laplacian),
    /// `left diag(g(λ)) right_t Y`; `left = U`, `right_t = Uᵀ` for a plain basis.
    Spectral {
        left: Var,
        right_t: Var,
        lambdas: Array1<f64>,
    },
}

impl<'a> Propagation<'a> {
    /// Plain spectral propagation over `basis` (constants on the tape).
    pub fn from_basis(tape: &mut Tape<'a>, basis: &SpectralBasis) -> Self {
        let u = basis.eigenvectors().clone();
        let ut = u.t().to_owned();
        Propagation::Spectral {
            left: tape.constant(u),
            right_t: tape.constant(ut),
            lambdas: basis.eigenvalues().clone(),
        }
    }

    fn apply(&self, tape: &mut Tape<'a>, y: Var, coeffs: Var) -> Var {
        match self {
            Propagation::Spatial(lap) => tape.poly_filter(lap, y, coeffs),
            Propagation::Spectral {
                left,
                right_t,
                lambdas,
            } => {
                let s = tape.matmul(*right_t, y);
                let s = tape.spectral_scale(s, coeffs, lambdas);
                tape.matmul(*left, s)
            }
        }
    }
}

/// Backbone forward on the tape; ReLU between layers, none after the last.
pub fn backbone<'a>(tape: &mut Tape<'a>, bound: &BoundModel, prop: &Propagation<'a>, x: Var) -> Var {
    backbone_layers(tape, &bound.layers, prop, x)
}

pub fn backbone_layers<'a>(
    tape: &mut Tape<'a>,
    layers: &[(Var, Var)],
    prop: &Propagation<'a>,
    x: Var,
) -> Var {
    let mut z = x;
    for (i, &(c, w)) in layers.iter().enumerate() {
        let y = tape.matmul(z, w);
        z = prop.apply(tape, y, c);
        if i + 1 < layers.len() {
            z = tape.relu(z);
        }
    }
    z
}

pub fn head_on_tape(tape: &mut Tape<'_>, head: &BoundHead, z: Var) -> Var {
    let h = tape.matmul(z, head.w1);
    let h = tape.add_row(h, head.b1);
    let h = tape.relu(h);
    let o = tape.matmul(h, head.w2);
    tape.add_row(o, head.b2)
}

fn check_input(params: &ModelParams, rows: usize, x: &Array2<f64>) -> Result<(), ModelError> {
    if x.nrows() != rows || x.ncols() != params.input_dim() {
        return Err(ModelError::Shape {
            context: "signal matrix",
            expected: (rows, params.input_dim()),
            found: x.dim(),
        });
    }
    Ok(())
}

/// Node embeddings `Z` through the spectral basis (possibly truncated).
pub fn spectral_forward(
    basis: &SpectralBasis,
    params: &ModelParams,
    x: &Array2<f64>,
) -> Result<Array2<f64>, ModelError> {
    check_input(params, basis.n(), x)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let prop = Propagation::from_basis(&mut tape, basis);
    let xv = tape.constant(x.clone());
    let z = backbone(&mut tape, &bound, &prop, xv);
    Ok(tape.value(z).clone())
}

/// Node embeddings through sparse Laplacian powers; equals
/// [`spectral_forward`] with a full basis.
pub fn spatial_forward(
    lap: &Laplacian,
    params: &ModelParams,
    x: &Array2<f64>,
) -> Result<Array2<f64>, ModelError> {
    check_input(params, lap.n(), x)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let z = backbone(&mut tape, &bound, &Propagation::Spatial(lap), xv);
    Ok(tape.value(z).clone())
}

/// Row mean, the graph-level representation.
pub fn readout_mean(z: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
    if z.nrows() == 0 {
        return Err(ModelError::EmptyGraph);
    }
    Ok(z.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0)))
}

pub fn head_forward(head: &Head, z: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
    if z.ncols() != head.input_dim() {
        return Err(ModelError::Shape {
            context: "head input",
            expected: (z.nrows(), head.input_dim()),
            found: z.dim(),
        });
    }
    let h = (z.dot(&head.w1) + &head.b1).mapv(|x| x.max(0.0));
    Ok(h.dot(&head.w2) + &head.b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_laplacian, Graph};
    use crate::spectral::eig_dense;
    use ndarray::array;

    fn path(n: usize) -> Graph {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        Graph::from_edges(n, &edges).unwrap()
    }

    fn single_layer(coeffs: &[f64], w: Array2<f64>) -> ModelParams {
        let d = w.ncols();
        ModelParams {
            layers: vec![SpectralLayer {
                filter: FilterKernel::new(coeffs),
                weight: w,
            }],
            head: Head::new(d, 4, 2, 0),
            frozen: false,
            laplacian: LaplacianKind::Combinatorial,
        }
    }

    #[test]
    fn identity_filter_reproduces_input() {
        let lap = build_laplacian(&path(4));
        let basis = eig_dense(&lap).unwrap();
        let x = array![[1.0, 2.0], [3.0, 4.0], [-1.0, 0.5], [0.0, 2.0]];
        let p = single_layer(&[1.0, 0.0], Array2::eye(2));
        let z = spectral_forward(&basis, &p, &x).unwrap();
        for (a, b) in z.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_filter_is_laplacian_product() {
        let lap = build_laplacian(&path(3));
        let basis = eig_dense(&lap).unwrap();
        let x = array![[1.0, -2.0], [0.5, 3.0], [2.0, 1.0]];
        let p = single_layer(&[0.0, 1.0], Array2::eye(2));
        let z = spectral_forward(&basis, &p, &x).unwrap();
        let want = lap.mul_dense(x.view());
        for (a, b) in z.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_component_gives_column_mean() {
        let lap = build_laplacian(&path(5));
        let basis = eig_dense(&lap).unwrap().truncate(1).unwrap();
        let x = array![[1.0, 0.0], [2.0, 1.0], [3.0, -1.0], [4.0, 2.0], [5.0, 0.5]];
        let w = array![[0.5, 1.0, -1.0], [2.0, 0.0, 1.0]];
        let p = single_layer(&[1.0, 0.0], w.clone());
        let z = spectral_forward(&basis, &p, &x).unwrap();
        let mean = x.dot(&w).mean_axis(Axis(0)).unwrap();
        for row in z.rows() {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn filter_response_is_polynomial() {
        let f = FilterKernel::new(&[1.0, -0.5, 0.25]);
        assert_eq!(f.response(2.0), 1.0 - 1.0 + 1.0);
        assert_eq!(f.degree(), 2);
    }

    #[test]
    fn readout_examples() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(readout_mean(&z).unwrap(), array![[0.5, 0.5]]);
        let same = array![[2.0, 3.0], [2.0, 3.0], [2.0, 3.0]];
        assert_eq!(readout_mean(&same).unwrap(), array![[2.0, 3.0]]);
        assert_eq!(readout_mean(&array![[7.0, 8.0]]).unwrap(), array![[7.0, 8.0]]);
        assert_eq!(readout_mean(&Array2::zeros((0, 2))), Err(ModelError::EmptyGraph));
    }

    #[test]
    fn head_with_zero_weights_outputs_bias() {
        let head = Head {
            w1: Array2::zeros((3, 4)),
            b1: Array2::zeros((1, 4)),
            w2: Array2::zeros((4, 2)),
            b2: array![[0.5, -1.0]],
        };
        let out = head_forward(&head, &array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(out, array![[0.5, -1.0], [0.5, -1.0]]);
    }

    #[test]
    fn head_identity_weights_pass_through_nonnegative_input() {
        let head = Head {
            w1: Array2::eye(2),
            b1: array![[1.0, 0.0]],
            w2: Array2::eye(2),
            b2: array![[0.0, 2.0]],
        };
        let out = head_forward(&head, &array![[1.0, 3.0]]).unwrap();
        assert_eq!(out, array![[2.0, 5.0]]);
    }

    #[test]
    fn head_matches_scalar_loop_oracle() {
        let head = Head::new(4, 5, 3, 17);
        let mut r = rng::stream(5, "t");
        let z = Array2::from_shape_simple_fn((3, 4), || r.random_range(-1.0..1.0));
        let got = head_forward(&head, &z).unwrap();
        for i in 0..3 {
            let mut hidden = [0.0; 5];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut s = head.b1[[0, j]];
                for k in 0..4 {
                    s += z[[i, k]] * head.w1[[k, j]];
                }
                *h = if s > 0.0 { s } else { 0.0 };
            }
            for o in 0..3 {
                let mut s = head.b2[[0, o]];
                for (j, h) in hidden.iter().enumerate() {
                    s += h * head.w2[[j, o]];
                }
                assert!((got[[i, o]] - s).abs() <= 1e-12);
            }
        }
        assert!(head_forward(&head, &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let lap = build_laplacian(&path(3));
        let basis = eig_dense(&lap).unwrap();
        let p = single_layer(&[1.0], Array2::eye(2));
        assert!(spectral_forward(&basis, &p, &Array2::zeros((3, 3))).is_err());
        assert!(spatial_forward(&lap, &p, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn default_model_chains() {
        let cfg = ModelConfig {
            input_dim: 8,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg, 3);
        p.check().unwrap();
        assert_eq!(p.embedding_dim(), 128);
        let arrays: Vec<Array2<f64>> = p.named_arrays().into_iter().map(|(_, a)| a.clone()).collect();
        let back = ModelParams::from_arrays(&arrays, 2, false, LaplacianKind::Combinatorial).unwrap();
        assert_eq!(back, p);
    }
}
