//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse. Leaves are either trainable parameters or constants;
//! constants (and everything computed only from constants) never receive a
//! gradient, which is how frozen parameter groups are expressed.

use ndarray::{Array1, Array2, Axis};

use crate::error::ModelError;
use crate::graph::Laplacian;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index structure of a cosine-similarity InfoNCE term: anchor `i` is
/// contrasted against `candidates[i]`, of which `positive[i]` is the positive.
#[derive(Debug, Clone, PartialEq)]
pub struct NceLayout {
    pub positive: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
}

enum Op<'a> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Relu(usize),
    Transpose(usize),
    Scale(usize, f64),
    MeanRows(usize),
    SelectRows(usize, Vec<usize>),
    StackRows(Vec<usize>),
    SpectralScale {
        input: usize,
        coeffs: usize,
        /// `powers[[p, k]] = λ_k^p`
        powers: Array2<f64>,
    },
    PolyFilter {
        lap: &'a Laplacian,
        input: usize,
        coeffs: usize,
        /// `L^p X` for `p = 0..=P`
        terms: Vec<Array2<f64>>,
    },
    SumSquares(usize),
    CosineNce {
        anchors: usize,
        cands: usize,
        layout: NceLayout,
        /// `d loss / d cos(a_i, c_j)` for each listed pair.
        dcos: Vec<Vec<f64>>,
        cos: Vec<Vec<f64>>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
}

struct Node<'a> {
    value: Array2<f64>,
    op: Op<'a>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` for constants and values the
    /// loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but materializes zeros of the right shape.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>, na: f64, nb: f64) -> f64 {
    a.dot(&b) / (na * nb)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op<'a>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable or constant leaf depending on `trainable`.
    pub fn leaf(&mut self, value: Array2<f64>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::MatMul(a.0, b.0), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::Add(a.0, b.0), ng)
    }

    /// `a + 1 bᵀ` with `b` a `1 x h` row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b).0, 1, "add_row expects a single row");
        assert_eq!(self.shape(a).1, self.shape(b).1, "add_row width mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(value, Op::AddRow(a.0, b.0), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a.0);
        self.push(value, Op::Relu(a.0), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a.0);
        self.push(value, Op::Transpose(a.0), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let ng = self.ng(a.0);
        self.push(value, Op::Scale(a.0, s), ng)
    }

    /// Row mean, `1 x h`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        let ng = self.ng(a.0);
        self.push(value, Op::MeanRows(a.0), ng)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        let ng = self.ng(a.0);
        self.push(value, Op::SelectRows(a.0, rows.to_vec()), ng)
    }

    /// Vertically stacks matrices of equal width.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("stack_rows width mismatch");
        let ng = parts.iter().any(|v| self.ng(v.0));
        self.push(value, Op::StackRows(parts.iter().map(|v| v.0).collect()), ng)
    }

    /// `diag(g(λ)) X` with `g(λ) = Σ_p c_p λ^p`; `coeffs` is `1 x (P+1)`.
    pub fn spectral_scale(&mut self, x: Var, coeffs: Var, lambdas: &Array1<f64>) -> Var {
        let (k, _) = self.shape(x);
        assert_eq!(k, lambdas.len(), "spectral_scale: one eigenvalue per row");
        let order = self.shape(coeffs).1;
        let mut powers = Array2::ones((order, k));
        for p in 1..order {
            for j in 0..k {
                powers[[p, j]] = powers[[p - 1, j]] * lambdas[j];
            }
        }
        let g = self.value(coeffs).row(0).dot(&powers);
        let mut value = self.value(x).clone();
        for (mut row, gk) in value.rows_mut().into_iter().zip(g.iter()) {
            row *= *gk;
        }
        let ng = self.ng(x.0) || self.ng(coeffs.0);
        self.push(
            value,
            Op::SpectralScale {
                input: x.0,
                coeffs: coeffs.0,
                powers,
            },
            ng,
        )
    }

    /// `Σ_p c_p L^p X`, the spatial form of a polynomial spectral filter.
    pub fn poly_filter(&mut self, lap: &'a Laplacian, x: Var, coeffs: Var) -> Var {
        let order = self.shape(coeffs).1;
        let mut terms = Vec::with_capacity(order);
        terms.push(self.value(x).clone());
        for p in 1..order {
            let next = lap.mul_dense(terms[p - 1].view());
            terms.push(next);
        }
        let c = self.value(coeffs).row(0).to_owned();
        let mut value = Array2::zeros(self.shape(x));
        for (t, cp) in terms.iter().zip(c.iter()) {
            value.scaled_add(*cp, t);
        }
        let ng = self.ng(x.0) || self.ng(coeffs.0);
        self.push(
            value,
            Op::PolyFilter {
                lap,
                input: x.0,
                coeffs: coeffs.0,
                terms,
            },
            ng,
        )
    }

    /// `Σ x²` as a `1 x 1` value.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>();
        let ng = self.ng(a.0);
        self.push(Array2::from_elem((1, 1), s), Op::SumSquares(a.0), ng)
    }

    /// Summed cosine InfoNCE:
    /// `-Σ_i log[exp(cos(a_i, c_pos)/τ) / Σ_{j ∈ cand_i} exp(cos(a_i, c_j)/τ)]`.
    pub fn cosine_nce(
        &mut self,
        anchors: Var,
        cands: Var,
        layout: NceLayout,
        tau: f64,
    ) -> Result<Var, ModelError> {
        let a = self.value(anchors);
        let c = self.value(cands);
        if a.ncols() != c.ncols() {
            return Err(ModelError::Shape {
                context: "cosine_nce",
                expected: (a.nrows(), c.ncols()),
                found: a.dim(),
            });
        }
        assert_eq!(layout.positive.len(), a.nrows(), "one positive per anchor");
        assert_eq!(layout.candidates.len(), a.nrows(), "one candidate set per anchor");
        let an: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let cn: Vec<f64> = c.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        if let Some(&x) = an.iter().chain(&cn).find(|x| !x.is_finite()) {
            return Err(ModelError::NonFiniteLoss { value: x });
        }
        if an.iter().any(|&x| x == 0.0) {
            return Err(ModelError::ZeroNorm { context: "anchor" });
        }
        let mut loss = 0.0;
        let mut all_cos = Vec::with_capacity(a.nrows());
        let mut dcos = Vec::with_capacity(a.nrows());
        for i in 0..a.nrows() {
            let set = &layout.candidates[i];
            let pos = layout.positive[i];
            let mut cos = Vec::with_capacity(set.len());
            for &j in set {
                if cn[j] == 0.0 {
                    return Err(ModelError::ZeroNorm {
                        context: "candidate",
                    });
                }
                cos.push(cosine(a.row(i), c.row(j), an[i], cn[j]));
            }
            let logits: Vec<f64> = cos.iter().map(|s| s / tau).collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let lse = mx + z.ln();
            let pos_logit = cosine(a.row(i), c.row(pos), an[i], cn[pos]) / tau;
            loss += lse - pos_logit;
            let mut d: Vec<f64> = logits.iter().map(|l| (l - lse).exp() / tau).collect();
            for (slot, &j) in set.iter().enumerate() {
                if j == pos {
                    d[slot] -= 1.0 / tau;
                    break;
                }
            }
            if !set.contains(&pos) {
                // Positive outside the listed set: its term still enters the numerator.
                d.push(-1.0 / tau);
                cos.push(pos_logit * tau);
            }
            all_cos.push(cos);
            dcos.push(d);
        }
        let ng = self.ng(anchors.0) || self.ng(cands.0);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::CosineNce {
                anchors: anchors.0,
                cands: cands.0,
                layout,
                dcos,
                cos: all_cos,
            },
            ng,
        ))
    }

    /// Summed softmax cross-entropy over rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), labels.len(), "one label per row");
        let mut probs = Array2::zeros(z.dim());
        let mut loss = 0.0;
        for (i, row) in z.rows().into_iter().enumerate() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + s.ln();
            loss += lse - row[labels[i]];
            for (j, x) in row.iter().enumerate() {
                probs[[i, j]] = (x - lse).exp();
            }
        }
        let ng = self.ng(logits.0);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, ModelError> {
        let out = self.value(loss);
        assert_eq!(out.dim(), (1, 1), "backward needs a scalar loss");
        let lv = out[[0, 0]];
        if !lv.is_finite() {
            return Err(ModelError::NonFiniteLoss { value: lv });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let acc = |target: usize, delta: Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>| {
                if !self.nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.dot(&self.nodes[*b].value.t()), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, self.nodes[*a].value.t().dot(&g), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.clone(), &mut grads);
                }
                Op::AddRow(a, b) => {
                    if self.ng(*b) {
                        acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    acc(*a, g.clone(), &mut grads);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(*a, &g * &mask, &mut grads);
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned(), &mut grads),
                Op::Scale(a, s) => acc(*a, &g * *s, &mut grads),
                Op::MeanRows(a) => {
                    let n = self.nodes[*a].value.nrows();
                    let row = &g / n as f64;
                    let full = row
                        .broadcast(self.nodes[*a].value.dim())
                        .expect("broadcast mean grad")
                        .to_owned();
                    acc(*a, full, &mut grads);
                }
                Op::SelectRows(a, rows) => {
                    let mut full = Array2::zeros(self.nodes[*a].value.dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = full.row_mut(src);
                        dst += &g.row(r);
                    }
                    acc(*a, full, &mut grads);
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.nrows();
                        if self.ng(p) {
                            let piece = g.slice(ndarray::s![offset..offset + rows, ..]).to_owned();
                            acc(p, piece, &mut grads);
                        }
                        offset += rows;
                    }
                }
                Op::SpectralScale {
                    input,
                    coeffs,
                    powers,
                } => {
                    let c = self.nodes[*coeffs].value.row(0);
                    let gk = c.dot(powers);
                    if self.ng(*input) {
                        let mut gi = g.clone();
                        for (mut row, s) in gi.rows_mut().into_iter().zip(gk.iter()) {
                            row *= *s;
                        }
                        acc(*input, gi, &mut grads);
                    }
                    if self.ng(*coeffs) {
                        let x = &self.nodes[*input].value;
                        let per_row: Array1<f64> = (x * &g).sum_axis(Axis(1));
                        let gc = powers.dot(&per_row).insert_axis(Axis(0));
                        acc(*coeffs, gc, &mut grads);
                    }
                }
                Op::PolyFilter {
                    lap,
                    input,
                    coeffs,
                    terms,
                } => {
                    let c = self.nodes[*coeffs].value.row(0).to_owned();
                    if self.ng(*coeffs) {
                        let gc: Array1<f64> = terms.iter().map(|t| (t * &g).sum()).collect();
                        acc(*coeffs, gc.insert_axis(Axis(0)), &mut grads);
                    }
                    if self.ng(*input) {
                        // L is symmetric, so the adjoint of Σ c_p L^p is itself.
                        let mut power = g.clone();
                        let mut gi = &power * c[0];
                        for cp in c.iter().skip(1) {
                            power = lap.mul_dense(power.view());
                            gi.scaled_add(*cp, &power);
                        }
                        acc(*input, gi, &mut grads);
                    }
                }
                Op::SumSquares(a) => {
                    let s = g[[0, 0]];
                    acc(*a, &self.nodes[*a].value * (2.0 * s), &mut grads);
                }
                Op::CosineNce {
                    anchors,
                    cands,
                    layout,
                    dcos,
                    cos,
                    ..
                } => {
                    let s = g[[0, 0]];
                    let a = &self.nodes[*anchors].value;
                    let c = &self.nodes[*cands].value;
                    let mut ga = Array2::zeros(a.dim());
                    let mut gc = Array2::zeros(c.dim());
                    let an: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
                    let cn: Vec<f64> = c.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
                    for i in 0..a.nrows() {
                        let mut set = layout.candidates[i].clone();
                        if !set.contains(&layout.positive[i]) {
                            set.push(layout.positive[i]);
                        }
                        for (slot, &j) in set.iter().enumerate() {
                            let w = s * dcos[i][slot];
                            let cs = cos[i][slot];
                            // ∂cos/∂a = c/(|a||c|) - cos·a/|a|², and symmetrically for c.
                            let (ai, cj) = (a.row(i), c.row(j));
                            let mut gai = ga.row_mut(i);
                            gai.scaled_add(w / (an[i] * cn[j]), &cj);
                            gai.scaled_add(-w * cs / (an[i] * an[i]), &ai);
                            let mut gcj = gc.row_mut(j);
                            gcj.scaled_add(w / (an[i] * cn[j]), &ai);
                            gcj.scaled_add(-w * cs / (cn[j] * cn[j]), &cj);
                        }
                    }
                    acc(*anchors, ga, &mut grads);
                    acc(*cands, gc, &mut grads);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let s = g[[0, 0]];
                    let mut gl = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        gl[[i, l]] -= 1.0;
                    }
                    acc(*logits, gl * s, &mut grads);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}
