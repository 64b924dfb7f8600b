//! Signal, alignment and label prompts, and inductive fine-tuning of a frozen
//! pre-trained backbone.
//!
//! Node tasks align in the node frame: `V = P_t U_K` with `P_t` of size M×M.
//! Graph-set tasks share one prompt set across graphs of different sizes, so
//! `P_t` is K×K acting on spectral coordinates (`V = U_K P_t`, bases padded to
//! K columns) and `alpha` comes from a shared F×L map applied to raw signals.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::analysis::{accuracy, roc_auc};
use crate::autodiff::{NceLayout, Tape, Var};
use crate::error::{ModelError, TrainError};
use crate::graph::{Graph, GraphSet, Laplacian, LaplacianKind};
use crate::model::{
    adam_step, backbone_layers, head_on_tape, AdamConfig, AdamState, BoundHead, Head, ModelParams,
    Parameters, Propagation, SpectralLayer,
};
use crate::rng;
use crate::spectral::{decompose, Solver, SpectralBasis};

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut rng::Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

/// Per-node mixing coefficients, or a shared map from raw signals to them.
#[derive(Debug, Clone, PartialEq)]
pub enum Alpha {
    /// `N × L`.
    PerNode(Array2<f64>),
    /// `F × L`; `alpha = X · map`.
    Linear(Array2<f64>),
}

impl Alpha {
    pub fn array(&self) -> &Array2<f64> {
        match self {
            Alpha::PerNode(a) | Alpha::Linear(a) => a,
        }
    }

    fn array_mut(&mut self) -> &mut Array2<f64> {
        match self {
            Alpha::PerNode(a) | Alpha::Linear(a) => a,
        }
    }
}

/// `X̃ = X + alpha · P_s` with a bank of `L` prompt vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPrompt {
    /// `L × F`.
    pub bank: Array2<f64>,
    pub alpha: Alpha,
}

impl SignalPrompt {
    /// Zero mixing (so `X̃ = X`) and a random bank, which keeps the
    /// gradient of `alpha` non-zero from the first step.
    pub fn per_node(n: usize, l: usize, f: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "signal-prompt");
        SignalPrompt {
            bank: uniform(l, f, 1.0 / (l as f64).sqrt(), &mut rng),
            alpha: Alpha::PerNode(Array2::zeros((n, l))),
        }
    }

    pub fn shared(l: usize, f: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "signal-prompt");
        SignalPrompt {
            bank: uniform(l, f, 1.0 / (l as f64).sqrt(), &mut rng),
            alpha: Alpha::Linear(Array2::zeros((f, l))),
        }
    }

    pub fn bank_size(&self) -> usize {
        self.bank.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.bank.len() + self.alpha.array().len()
    }

    fn mixing(&self, x: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        match &self.alpha {
            Alpha::PerNode(a) => {
                if a.nrows() != x.nrows() {
                    return Err(ModelError::Shape {
                        context: "signal prompt alpha",
                        expected: (x.nrows(), self.bank_size()),
                        found: a.dim(),
                    });
                }
                Ok(a.clone())
            }
            Alpha::Linear(m) => {
                if m.nrows() != x.ncols() {
                    return Err(ModelError::Shape {
                        context: "signal prompt map",
                        expected: (x.ncols(), self.bank_size()),
                        found: m.dim(),
                    });
                }
                Ok(x.dot(m))
            }
        }
    }
}

pub fn apply_signal_prompt(x: &Array2<f64>, sp: &SignalPrompt) -> Result<Array2<f64>, ModelError> {
    if sp.bank.ncols() != x.ncols() {
        return Err(ModelError::Shape {
            context: "signal prompt bank",
            expected: (sp.bank_size(), x.ncols()),
            found: sp.bank.dim(),
        });
    }
    let alpha = sp.mixing(x)?;
    Ok(x + &alpha.dot(&sp.bank))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PtMode {
    #[default]
    Dense,
    LowRank(usize),
}

impl FromStr for PtMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "dense" {
            return Ok(PtMode::Dense);
        }
        let rank = s
            .strip_prefix("lowrank:")
            .or_else(|| s.strip_prefix("low-rank:"))
            .ok_or_else(|| format!("expected `dense` or `lowrank:R`, got `{s}`"))?;
        match rank.parse::<usize>() {
            Ok(r) if r > 0 => Ok(PtMode::LowRank(r)),
            _ => Err(format!("invalid rank in `{s}`")),
        }
    }
}

impl fmt::Display for PtMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PtMode::Dense => f.write_str("dense"),
            PtMode::LowRank(r) => write!(f, "lowrank:{r}"),
        }
    }
}

impl Serialize for PtMode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PtMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Which side `P_t` multiplies the truncated basis from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignFrame {
    /// `V = P_t U_K`, `P_t` is M×M.
    Node,
    /// `V = U_K P_t`, `P_t` is K×K.
    Spectral,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PtParams {
    Dense(Array2<f64>),
    /// `P_t = I + A Bᵀ`.
    LowRank { a: Array2<f64>, b: Array2<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPrompt {
    pub frame: AlignFrame,
    pub params: PtParams,
}

impl AlignmentPrompt {
    /// `P_t = I` exactly. In low-rank mode `A = 0` and `B` is random so that
    /// `A` receives a gradient.
    pub fn identity(dim: usize, mode: PtMode, frame: AlignFrame, seed: u64) -> Self {
        let params = match mode {
            PtMode::Dense => PtParams::Dense(Array2::eye(dim)),
            PtMode::LowRank(r) => {
                let mut rng = rng::stream(seed, "alignment-prompt");
                PtParams::LowRank {
                    a: Array2::zeros((dim, r)),
                    b: uniform(dim, r, 1.0 / (dim as f64).sqrt(), &mut rng),
                }
            }
        };
        AlignmentPrompt { frame, params }
    }

    pub fn dim(&self) -> usize {
        match &self.params {
            PtParams::Dense(p) => p.nrows(),
            PtParams::LowRank { a, .. } => a.nrows(),
        }
    }

    /// Materialized `P_t`.
    pub fn matrix(&self) -> Array2<f64> {
        match &self.params {
            PtParams::Dense(p) => p.clone(),
            PtParams::LowRank { a, b } => Array2::eye(a.nrows()) + a.dot(&b.t()),
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.params {
            PtParams::Dense(p) => p.len(),
            PtParams::LowRank { a, b } => a.len() + b.len(),
        }
    }

    fn arrays(&self) -> Vec<(&'static str, &Array2<f64>)> {
        match &self.params {
            PtParams::Dense(p) => vec![("pt", p)],
            PtParams::LowRank { a, b } => vec![("pt.a", a), ("pt.b", b)],
        }
    }

    fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        match &mut self.params {
            PtParams::Dense(p) => vec![p],
            PtParams::LowRank { a, b } => vec![a, b],
        }
    }
}

/// One learnable representation per class (`d × H`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPrompt {
    pub p: Array2<f64>,
}

impl LabelPrompt {
    pub fn num_classes(&self) -> usize {
        self.p.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.p.len()
    }
}

/// Ablation modes. `EndToEnd` drops the label prompt, trains the backbone
/// as well and classifies with softmax cross-entropy; `LinearProbe` keeps
/// the backbone frozen, propagates over the full graph without prompts and
/// trains the head alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Ablation {
    #[default]
    Full,
    NoPs,
    NoPt,
    EndToEnd,
    LinearProbe,
}

impl Ablation {
    pub const SWEEP: [Ablation; 4] = [Ablation::Full, Ablation::NoPs, Ablation::NoPt, Ablation::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoPs => "no-ps",
            Ablation::NoPt => "no-pt",
            Ablation::EndToEnd => "end2end",
            Ablation::LinearProbe => "linear-probe",
        }
    }

    fn train_signal(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoPt | Ablation::EndToEnd)
    }

    fn train_alignment(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoPs | Ablation::EndToEnd)
    }

    pub fn uses_label_prompt(self) -> bool {
        !matches!(self, Ablation::EndToEnd | Ablation::LinearProbe)
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "full" => Ok(Ablation::Full),
            "ps" | "no-ps" => Ok(Ablation::NoPs),
            "pt" | "no-pt" => Ok(Ablation::NoPt),
            "pl" | "no-pl" | "end2end" => Ok(Ablation::EndToEnd),
            "probe" | "linear-probe" => Ok(Ablation::LinearProbe),
            other => Err(format!("unknown ablation `{other}`")),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Ablation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ablation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Prompt bank size L.
    #[serde(rename = "L")]
    pub l: usize,
    /// Aligned components K.
    #[serde(rename = "K")]
    pub k: usize,
    pub lr: f64,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub pt_mode: PtMode,
    pub ortho_penalty_weight: f64,
    pub temperature: f64,
    pub head_hidden: usize,
    pub head_out: usize,
    pub ablation: Ablation,
    /// Apply `P_tᵀ` on the input side as well; off uses `U_Kᵀ` there.
    pub right_pt: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            l: 16,
            k: 32,
            lr: 1e-3,
            epochs: 100,
            checkpoint_every: 10,
            pt_mode: PtMode::Dense,
            ortho_penalty_weight: 0.0,
            temperature: 0.5,
            head_hidden: 128,
            head_out: 128,
            ablation: Ablation::Full,
            right_pt: true,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.l == 0 || self.k == 0 {
            return Err(TrainError::Invalid("L and K must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(TrainError::Invalid("checkpoint_every must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Invalid(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(self.temperature > 0.0) {
            return Err(TrainError::Invalid("temperature must be positive".into()));
        }
        if self.ortho_penalty_weight < 0.0 {
            return Err(TrainError::Invalid("ortho_penalty_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Trainable state of one fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub signal: SignalPrompt,
    pub alignment: AlignmentPrompt,
    pub label: Option<LabelPrompt>,
    pub head: Head,
    /// Tuned copy of the backbone layers (end-to-end mode only).
    pub backbone: Option<Vec<SpectralLayer>>,
}

impl Parameters for PromptSet {
    fn named_arrays(&self) -> Vec<(String, &Array2<f64>)> {
        let mut v = vec![
            ("ps.bank".to_string(), &self.signal.bank),
            ("ps.alpha".to_string(), self.signal.alpha.array()),
        ];
        v.extend(self.alignment.arrays().into_iter().map(|(n, a)| (n.to_string(), a)));
        if let Some(l) = &self.label {
            v.push(("pl".into(), &l.p));
        }
        v.extend(self.head.named_arrays().into_iter().map(|(n, a)| (format!("task.{n}"), a)));
        if let Some(layers) = &self.backbone {
            for (i, l) in layers.iter().enumerate() {
                v.push((format!("tuned.layer{i}.filter"), l.filter.coeffs()));
                v.push((format!("tuned.layer{i}.weight"), &l.weight));
            }
        }
        v
    }

    fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v: Vec<&mut Array2<f64>> = vec![&mut self.signal.bank, self.signal.alpha.array_mut()];
        v.extend(self.alignment.arrays_mut());
        if let Some(l) = &mut self.label {
            v.push(&mut l.p);
        }
        v.extend(self.head.arrays_mut());
        if let Some(layers) = &mut self.backbone {
            for l in layers {
                v.push(l.filter.coeffs_mut());
                v.push(&mut l.weight);
            }
        }
        v
    }
}

impl PromptSet {
    /// Scalars updated by the optimizer under `ablation`.
    pub fn trainable_count(&self, ablation: Ablation) -> usize {
        let mut n = self.head.param_count();
        if ablation.train_signal() {
            n += self.signal.param_count();
        }
        if ablation.train_alignment() {
            n += self.alignment.param_count();
        }
        if let Some(l) = &self.label {
            n += l.param_count();
        }
        if let Some(layers) = &self.backbone {
            n += layers.iter().map(|l| l.weight.len() + l.filter.coeffs().len()).sum::<usize>();
        }
        n
    }

    /// Per-array trainability in [`Parameters::named_arrays`] order.
    fn trainable_mask(&self, ablation: Ablation) -> Vec<bool> {
        let mut m = vec![ablation.train_signal(); 2];
        m.extend(std::iter::repeat_n(ablation.train_alignment(), self.alignment.arrays().len()));
        if self.label.is_some() {
            m.push(true);
        }
        m.extend([true; 4]);
        if let Some(layers) = &self.backbone {
            m.extend(std::iter::repeat_n(true, 2 * layers.len()));
        }
        m
    }
}

/// Node classification on one graph.
#[derive(Debug, Clone)]
pub struct NodeTask {
    pub graph: Graph,
    pub laplacian: Laplacian,
    /// K smallest components.
    pub basis: SpectralBasis,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Graph classification over a set; bases are padded to K columns.
#[derive(Debug, Clone)]
pub struct GraphTask {
    pub graphs: Vec<Graph>,
    pub laplacians: Vec<Laplacian>,
    pub bases: Vec<(Array2<f64>, Array1<f64>)>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub enum FinetuneTask {
    Node(NodeTask),
    Graphs(GraphTask),
}

impl FinetuneTask {
    /// Decomposes the graph to its `k` smallest components. Unlabeled nodes
    /// get label `usize::MAX` and must stay out of every split.
    pub fn node(graph: Graph, kind: LaplacianKind, k: usize, seed: u64) -> Result<Self, TrainError> {
        let n = graph.n_nodes();
        if k == 0 || k > n {
            return Err(TrainError::Invalid(format!("K = {k} must lie in 1..={n}")));
        }
        let labels: Vec<usize> = graph
            .node_labels()
            .ok_or(TrainError::MissingLabels)?
            .iter()
            .map(|&l| if l < 0 { usize::MAX } else { l as usize })
            .collect();
        let laplacian = Laplacian::new(&graph, kind);
        let basis = decompose(&laplacian, Some(k), Solver::Auto, seed)?;
        let num_classes = graph.num_classes();
        Ok(FinetuneTask::Node(NodeTask {
            graph,
            laplacian,
            basis,
            labels,
            num_classes,
        }))
    }

    /// Uses the first label column of the set as the class.
    pub fn graphs(set: &GraphSet, kind: LaplacianKind, k: usize, seed: u64) -> Result<Self, TrainError> {
        let labels = set.class_labels().ok_or(TrainError::MissingLabels)?;
        let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        let mut laplacians = Vec::with_capacity(set.len());
        let mut bases = Vec::with_capacity(set.len());
        for (i, g) in set.graphs().iter().enumerate() {
            if g.n_nodes() == 0 {
                return Err(TrainError::Model(ModelError::EmptyGraph));
            }
            let lap = Laplacian::new(g, kind);
            let b = decompose(&lap, Some(k.min(g.n_nodes())), Solver::Auto, rng::derive_seed(seed, "graph-basis", i as u64))?;
            let kk = b.k();
            let mut u = Array2::zeros((g.n_nodes(), k));
            u.slice_mut(ndarray::s![.., ..kk]).assign(b.eigenvectors());
            let last = b.eigenvalues()[kk - 1];
            let lam = Array1::from_shape_fn(k, |j| if j < kk { b.eigenvalues()[j] } else { last });
            laplacians.push(lap);
            bases.push((u, lam));
        }
        Ok(FinetuneTask::Graphs(GraphTask {
            graphs: set.graphs().to_vec(),
            laplacians,
            bases,
            labels,
            num_classes,
        }))
    }

    pub fn num_classes(&self) -> usize {
        match self {
            FinetuneTask::Node(t) => t.num_classes,
            FinetuneTask::Graphs(t) => t.num_classes,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FinetuneTask::Node(t) => t.graph.n_nodes(),
            FinetuneTask::Graphs(t) => t.graphs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> &[usize] {
        match self {
            FinetuneTask::Node(t) => &t.labels,
            FinetuneTask::Graphs(t) => &t.labels,
        }
    }

    fn signal_dim(&self) -> usize {
        match self {
            FinetuneTask::Node(t) => t.graph.signal_dim(),
            FinetuneTask::Graphs(t) => t.graphs.first().map_or(0, Graph::signal_dim),
        }
    }

    fn k(&self) -> usize {
        match self {
            FinetuneTask::Node(t) => t.basis.k(),
            FinetuneTask::Graphs(t) => t.bases.first().map_or(0, |b| b.1.len()),
        }
    }

    /// Graph tasks with two classes are scored by ROC-AUC, everything else by accuracy.
    pub fn uses_auc(&self) -> bool {
        matches!(self, FinetuneTask::Graphs(_)) && self.num_classes() == 2
    }
}

/// Sample ids (nodes or graphs) of the three fine-tuning splits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampleSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fresh prompts for `task`: `P_t = I`, `alpha = 0`, label prompts set later
/// from class means.
pub fn init_prompts(pretrained: &ModelParams, task: &FinetuneTask, cfg: &PromptConfig, seed: u64) -> PromptSet {
    let f = task.signal_dim();
    let (signal, alignment) = match task {
        FinetuneTask::Node(t) => (
            SignalPrompt::per_node(t.graph.n_nodes(), cfg.l, f, rng::derive_seed(seed, "ps", 0)),
            AlignmentPrompt::identity(t.graph.n_nodes(), cfg.pt_mode, AlignFrame::Node, rng::derive_seed(seed, "pt", 0)),
        ),
        FinetuneTask::Graphs(_) => (
            SignalPrompt::shared(cfg.l, f, rng::derive_seed(seed, "ps", 0)),
            AlignmentPrompt::identity(task.k(), cfg.pt_mode, AlignFrame::Spectral, rng::derive_seed(seed, "pt", 0)),
        ),
    };
    let out = if cfg.ablation.uses_label_prompt() {
        cfg.head_out
    } else {
        task.num_classes()
    };
    let head = Head::new(pretrained.embedding_dim(), cfg.head_hidden, out, rng::derive_seed(seed, "task-head", 0));
    let backbone = (cfg.ablation == Ablation::EndToEnd).then(|| pretrained.layers.clone());
    PromptSet {
        signal,
        alignment,
        label: None,
        head,
        backbone,
    }
}

struct BoundPrompts {
    bank: Var,
    alpha: Var,
    pt: Vec<Var>,
    label: Option<Var>,
    head: BoundHead,
    layers: Vec<(Var, Var)>,
    vars: Vec<Var>,
}

fn bind_prompts(
    tape: &mut Tape<'_>,
    prompts: &PromptSet,
    frozen: &ModelParams,
    ablation: Ablation,
) -> BoundPrompts {
    let mask = prompts.trainable_mask(ablation);
    let arrays = prompts.named_arrays();
    let vars: Vec<Var> = arrays
        .iter()
        .zip(&mask)
        .map(|((_, a), &t)| tape.leaf((*a).clone(), t))
        .collect();
    let n_pt = prompts.alignment.arrays().len();
    let mut i = 2 + n_pt;
    let label = prompts.label.as_ref().map(|_| {
        i += 1;
        vars[i - 1]
    });
    let head = BoundHead {
        w1: vars[i],
        b1: vars[i + 1],
        w2: vars[i + 2],
        b2: vars[i + 3],
    };
    i += 4;
    let layers = if prompts.backbone.is_some() {
        vars[i..].chunks(2).map(|c| (c[0], c[1])).collect()
    } else {
        frozen
            .layers
            .iter()
            .map(|l| (tape.constant(l.filter.coeffs().clone()), tape.constant(l.weight.clone())))
            .collect()
    };
    BoundPrompts {
        bank: vars[0],
        alpha: vars[1],
        pt: vars[2..2 + n_pt].to_vec(),
        label,
        head,
        layers,
        vars,
    }
}

/// `V` on the tape: `P_t U` in the node frame, `U P_t` in the spectral frame.
fn aligned_basis(tape: &mut Tape<'_>, ap: &AlignmentPrompt, pt: &[Var], u: Var) -> Var {
    match (&ap.params, ap.frame) {
        (PtParams::Dense(_), AlignFrame::Node) => tape.matmul(pt[0], u),
        (PtParams::Dense(_), AlignFrame::Spectral) => tape.matmul(u, pt[0]),
        (PtParams::LowRank { .. }, AlignFrame::Node) => {
            let bt = tape.transpose(pt[1]);
            let btu = tape.matmul(bt, u);
            let delta = tape.matmul(pt[0], btu);
            tape.add(u, delta)
        }
        (PtParams::LowRank { .. }, AlignFrame::Spectral) => {
            let ua = tape.matmul(u, pt[0]);
            let bt = tape.transpose(pt[1]);
            let delta = tape.matmul(ua, bt);
            tape.add(u, delta)
        }
    }
}

fn prompted_signals(tape: &mut Tape<'_>, b: &BoundPrompts, sp: &SignalPrompt, x: &Array2<f64>, active: bool) -> Var {
    let xv = tape.constant(x.clone());
    if !active {
        return xv;
    }
    let alpha = match sp.alpha {
        Alpha::PerNode(_) => b.alpha,
        Alpha::Linear(_) => tape.matmul(xv, b.alpha),
    };
    let shift = tape.matmul(alpha, b.bank);
    tape.add(xv, shift)
}

#[allow(clippy::too_many_arguments)]
fn embed_graph<'a>(
    tape: &mut Tape<'a>,
    b: &BoundPrompts,
    prompts: &PromptSet,
    cfg: &PromptConfig,
    x: &Array2<f64>,
    lap: &'a Laplacian,
    u: &Array2<f64>,
    lambdas: &Array1<f64>,
) -> Var {
    if cfg.ablation == Ablation::LinearProbe {
        let xv = tape.constant(x.clone());
        return backbone_layers(tape, &b.layers, &Propagation::Spatial(lap), xv);
    }
    let xt = prompted_signals(tape, b, &prompts.signal, x, cfg.ablation != Ablation::NoPs);
    let uv = tape.constant(u.clone());
    let v = aligned_basis(tape, &prompts.alignment, &b.pt, uv);
    let right_t = if cfg.right_pt {
        tape.transpose(v)
    } else {
        tape.constant(u.t().to_owned())
    };
    let prop = Propagation::Spectral {
        left: v,
        right_t,
        lambdas: lambdas.clone(),
    };
    backbone_layers(tape, &b.layers, &prop, xt)
}

/// Head outputs for the samples `ids` (rows in `ids` order).
fn outputs<'a>(
    tape: &mut Tape<'a>,
    b: &BoundPrompts,
    prompts: &PromptSet,
    task: &'a FinetuneTask,
    cfg: &PromptConfig,
    ids: &[usize],
) -> Var {
    let reps = match task {
        FinetuneTask::Node(t) => {
            let z = embed_graph(
                tape,
                b,
                prompts,
                cfg,
                t.graph.signals(),
                &t.laplacian,
                t.basis.eigenvectors(),
                t.basis.eigenvalues(),
            );
            tape.select_rows(z, ids)
        }
        FinetuneTask::Graphs(t) => {
            let rows: Vec<Var> = ids
                .iter()
                .map(|&i| {
                    let (u, lam) = &t.bases[i];
                    let z = embed_graph(tape, b, prompts, cfg, t.graphs[i].signals(), &t.laplacians[i], u, lam);
                    tape.mean_rows(z)
                })
                .collect();
            tape.stack_rows(&rows)
        }
    };
    head_on_tape(tape, &b.head, reps)
}

fn check_ids(task: &FinetuneTask, ids: &[usize]) -> Result<Vec<usize>, TrainError> {
    let labels = task.labels();
    let d = task.num_classes();
    ids.iter()
        .map(|&i| match labels.get(i) {
            Some(&y) if y < d => Ok(y),
            Some(&y) if y == usize::MAX => Err(TrainError::MissingLabels),
            Some(&y) => Err(TrainError::Model(ModelError::LabelOutOfRange { label: y, classes: d })),
            None => Err(TrainError::Invalid(format!("sample {i} out of range"))),
        })
        .collect()
}

/// Fine-tuning loss on `ids` and gradients in [`Parameters::named_arrays`]
/// order of `prompts` (`None` for arrays frozen under the ablation).
pub fn finetune_loss(
    prompts: &PromptSet,
    pretrained: &ModelParams,
    task: &FinetuneTask,
    cfg: &PromptConfig,
    ids: &[usize],
) -> Result<(f64, Vec<Option<Array2<f64>>>), TrainError> {
    if prompts.backbone.is_none() && !pretrained.frozen {
        return Err(TrainError::Model(ModelError::NotFrozen));
    }
    if ids.is_empty() {
        return Err(TrainError::MissingLabels);
    }
    let labels = check_ids(task, ids)?;
    let mut tape = Tape::new();
    let b = bind_prompts(&mut tape, prompts, pretrained, cfg.ablation);
    let out = outputs(&mut tape, &b, prompts, task, cfg, ids);
    let mut loss = match b.label {
        Some(pl) => {
            let d = prompts.label.as_ref().map_or(0, LabelPrompt::num_classes);
            let layout = NceLayout {
                positive: labels,
                candidates: vec![(0..d).collect(); ids.len()],
            };
            tape.cosine_nce(out, pl, layout, cfg.temperature)?
        }
        None => tape.softmax_cross_entropy(out, &labels),
    };
    loss = tape.scale(loss, 1.0 / ids.len() as f64);
    if cfg.ortho_penalty_weight > 0.0 && cfg.ablation.train_alignment() && cfg.ablation != Ablation::LinearProbe {
        let dim = prompts.alignment.dim();
        let eye = tape.constant(Array2::eye(dim));
        let p = aligned_basis(&mut tape, &prompts.alignment, &b.pt, eye);
        let pt_t = tape.transpose(p);
        let gram = tape.matmul(pt_t, p);
        let neg_eye = tape.constant(-Array2::<f64>::eye(dim));
        let diff = tape.add(gram, neg_eye);
        let sq = tape.sum_squares(diff);
        let pen = tape.scale(sq, cfg.ortho_penalty_weight);
        loss = tape.add(loss, pen);
    }
    let value = tape.value(loss)[[0, 0]];
    let grads = tape.backward(loss)?;
    Ok((value, b.vars.iter().map(|&v| grads.get(v).cloned()).collect()))
}

/// Head outputs (`σ(z̃)`) for `ids` without recording gradients.
pub fn task_outputs(
    prompts: &PromptSet,
    pretrained: &ModelParams,
    task: &FinetuneTask,
    cfg: &PromptConfig,
    ids: &[usize],
) -> Array2<f64> {
    let mut tape = Tape::new();
    let b = bind_prompts(&mut tape, prompts, pretrained, cfg.ablation);
    let out = outputs(&mut tape, &b, prompts, task, cfg, ids);
    tape.value(out).clone()
}

/// Frozen-backbone forward through the aligned truncated basis:
/// per layer `V diag(g(λ)) Vᵀ X̃ W` with `V` from [`AlignmentPrompt`].
pub fn aligned_forward(
    basis: &SpectralBasis,
    ap: &AlignmentPrompt,
    params: &ModelParams,
    x: &Array2<f64>,
) -> Result<Array2<f64>, ModelError> {
    aligned_forward_with(basis, ap, params, x, true)
}

/// [`aligned_forward`] with the input-side `P_tᵀ` optionally replaced by `U_Kᵀ`.
pub fn aligned_forward_with(
    basis: &SpectralBasis,
    ap: &AlignmentPrompt,
    params: &ModelParams,
    x: &Array2<f64>,
    right_pt: bool,
) -> Result<Array2<f64>, ModelError> {
    if !params.frozen {
        return Err(ModelError::NotFrozen);
    }
    let expected = match ap.frame {
        AlignFrame::Node => basis.n(),
        AlignFrame::Spectral => basis.k(),
    };
    if ap.dim() != expected {
        return Err(ModelError::Shape {
            context: "alignment prompt",
            expected: (expected, expected),
            found: (ap.dim(), ap.dim()),
        });
    }
    if x.nrows() != basis.n() || x.ncols() != params.input_dim() {
        return Err(ModelError::Shape {
            context: "signal matrix",
            expected: (basis.n(), params.input_dim()),
            found: x.dim(),
        });
    }
    let mut tape = Tape::new();
    let pt: Vec<Var> = ap.arrays().into_iter().map(|(_, a)| tape.constant(a.clone())).collect();
    let u = tape.constant(basis.eigenvectors().clone());
    let v = aligned_basis(&mut tape, ap, &pt, u);
    let right_t = if right_pt {
        tape.transpose(v)
    } else {
        tape.constant(basis.eigenvectors().t().to_owned())
    };
    let prop = Propagation::Spectral {
        left: v,
        right_t,
        lambdas: basis.eigenvalues().clone(),
    };
    let layers: Vec<(Var, Var)> = params
        .layers
        .iter()
        .map(|l| (tape.constant(l.filter.coeffs().clone()), tape.constant(l.weight.clone())))
        .collect();
    let xv = tape.constant(x.clone());
    let z = backbone_layers(&mut tape, &layers, &prop, xv);
    Ok(tape.value(z).clone())
}

fn cosine_scores(out: &Array2<f64>, lp: &LabelPrompt) -> Result<Array2<f64>, ModelError> {
    let pn: Vec<f64> = lp.p.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if pn.iter().any(|&x| x == 0.0) {
        return Err(ModelError::ZeroNorm { context: "label prompt" });
    }
    let mut s = Array2::zeros((out.nrows(), lp.num_classes()));
    for (i, row) in out.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 {
            return Err(ModelError::ZeroNorm { context: "embedding" });
        }
        for (j, p) in lp.p.rows().into_iter().enumerate() {
            s[[i, j]] = row.dot(&p) / (n * pn[j]);
        }
    }
    Ok(s)
}

fn argmax_rows(s: &Array2<f64>) -> Vec<usize> {
    s.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `argmax_j cos(p_j, σ(z̃_i))`, ties to the lowest class index.
pub fn predict(outputs: &Array2<f64>, lp: &LabelPrompt) -> Result<Vec<usize>, ModelError> {
    Ok(argmax_rows(&cosine_scores(outputs, lp)?))
}

/// Class scores: cosines with the label prompts, or raw logits without them.
pub fn class_scores(outputs: &Array2<f64>, lp: Option<&LabelPrompt>) -> Result<Array2<f64>, ModelError> {
    match lp {
        Some(lp) => cosine_scores(outputs, lp),
        None => Ok(outputs.clone()),
    }
}

/// Mean label InfoNCE over the rows of `outputs` (no gradients).
pub fn label_infonce(outputs: &Array2<f64>, labels: &[usize], lp: &LabelPrompt, temperature: f64) -> Result<f64, ModelError> {
    let d = lp.num_classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= d) {
        return Err(ModelError::LabelOutOfRange { label: y, classes: d });
    }
    let mut tape = Tape::new();
    let o = tape.constant(outputs.clone());
    let p = tape.constant(lp.p.clone());
    let layout = NceLayout {
        positive: labels.to_vec(),
        candidates: vec![(0..d).collect(); labels.len()],
    };
    let l = tape.cosine_nce(o, p, layout, temperature)?;
    Ok(tape.value(l)[[0, 0]] / labels.len().max(1) as f64)
}

/// Accuracy, or ROC-AUC of `score(class 1) − score(class 0)` for binary graph tasks.
pub fn evaluate(
    prompts: &PromptSet,
    pretrained: &ModelParams,
    task: &FinetuneTask,
    cfg: &PromptConfig,
    ids: &[usize],
) -> Result<f64, TrainError> {
    let labels = check_ids(task, ids)?;
    let out = task_outputs(prompts, pretrained, task, cfg, ids);
    if out.iter().any(|x| !x.is_finite()) {
        return Err(TrainError::NonFinite { epoch: 0 });
    }
    let scores = class_scores(&out, prompts.label.as_ref())?;
    if task.uses_auc() {
        let s: Vec<f64> = scores.rows().into_iter().map(|r| r[1] - r[0]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        if let Ok(auc) = roc_auc(&s, &y) {
            return Ok(auc);
        }
    }
    let pred = argmax_rows(&scores);
    accuracy(&pred, &labels).map_err(|e| TrainError::Invalid(e.to_string()))
}

/// Class means of the head outputs on the training split; random rows for
/// classes without training samples or with a zero mean.
pub fn init_label_prompt(
    prompts: &PromptSet,
    pretrained: &ModelParams,
    task: &FinetuneTask,
    cfg: &PromptConfig,
    train: &[usize],
    seed: u64,
) -> Result<LabelPrompt, TrainError> {
    let labels = check_ids(task, train)?;
    let out = task_outputs(prompts, pretrained, task, cfg, train);
    let d = task.num_classes();
    let h = out.ncols();
    let mut p = Array2::zeros((d, h));
    let mut counts = vec![0usize; d];
    for (row, &y) in out.rows().into_iter().zip(&labels) {
        p.row_mut(y).scaled_add(1.0, &row);
        counts[y] += 1;
    }
    let mut rng = rng::stream(seed, "label-prompt");
    for (c, mut row) in p.rows_mut().into_iter().enumerate() {
        if counts[c] > 0 {
            row /= counts[c] as f64;
        }
        if counts[c] == 0 || row.dot(&row).sqrt() < 1e-12 || row.iter().any(|x| !x.is_finite()) {
            row.assign(&Array1::from_shape_simple_fn(h, || rng.random_range(-0.1..0.1)));
        }
    }
    Ok(LabelPrompt { p })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub val: f64,
}

/// Everything needed to continue a fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneState {
    pub prompts: PromptSet,
    pub adam: AdamState,
    pub loss_trace: Vec<f64>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub best: PromptSet,
}

impl FinetuneState {
    pub fn epoch(&self) -> usize {
        self.loss_trace.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    /// Prompts of the checkpoint with the best validation metric.
    pub best: PromptSet,
    pub best_epoch: usize,
    pub best_val: f64,
    pub test: f64,
    pub loss_trace: Vec<f64>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Prompts after the last epoch.
    pub last: PromptSet,
}

fn check_task(pretrained: &ModelParams, task: &FinetuneTask, cfg: &PromptConfig, split: &SampleSplit) -> Result<(), TrainError> {
    cfg.validate()?;
    if cfg.ablation != Ablation::EndToEnd && !pretrained.frozen {
        return Err(TrainError::Model(ModelError::NotFrozen));
    }
    pretrained.check()?;
    if task.signal_dim() != pretrained.input_dim() {
        return Err(TrainError::Model(ModelError::Shape {
            context: "fine-tuning signals",
            expected: (0, pretrained.input_dim()),
            found: (0, task.signal_dim()),
        }));
    }
    if let FinetuneTask::Node(t) = task {
        if cfg.k > t.graph.n_nodes() {
            return Err(TrainError::Invalid(format!("K = {} exceeds the {} fine-tuning nodes", cfg.k, t.graph.n_nodes())));
        }
    }
    if task.k() != cfg.k {
        return Err(TrainError::Invalid(format!("task decomposed to {} components, config asks for {}", task.k(), cfg.k)));
    }
    if split.train.is_empty() {
        return Err(TrainError::MissingLabels);
    }
    check_ids(task, &split.train)?;
    check_ids(task, &split.val)?;
    check_ids(task, &split.test)?;
    Ok(())
}

/// Initial state: fresh prompts, label prompts at class means, epoch-0
/// checkpoint evaluated.
pub fn finetune_init(
    pretrained: &ModelParams,
    task: &FinetuneTask,
    cfg: &PromptConfig,
    split: &SampleSplit,
    seed: u64,
) -> Result<FinetuneState, TrainError> {
    check_task(pretrained, task, cfg, split)?;
    let mut prompts = init_prompts(pretrained, task, cfg, seed);
    if cfg.ablation.uses_label_prompt() {
        prompts.label = Some(init_label_prompt(&prompts, pretrained, task, cfg, &split.train, rng::derive_seed(seed, "pl", 0))?);
    }
    let adam = AdamState::new(&prompts.shapes());
    let val = validation(&prompts, pretrained, task, cfg, split)?;
    Ok(FinetuneState {
        best: prompts.clone(),
        prompts,
        adam,
        loss_trace: Vec::new(),
        checkpoints: vec![CheckpointRecord { epoch: 0, val }],
        best_epoch: 0,
        best_val: val,
    })
}

fn validation(prompts: &PromptSet, pretrained: &ModelParams, task: &FinetuneTask, cfg: &PromptConfig, split: &SampleSplit) -> Result<f64, TrainError> {
    let ids = if split.val.is_empty() { &split.train } else { &split.val };
    evaluate(prompts, pretrained, task, cfg, ids)
}

/// Runs epochs `state.epoch()..until`, checkpointing every
/// `cfg.checkpoint_every` epochs and at `until`.
pub fn finetune_epochs(
    pretrained: &ModelParams,
    task: &FinetuneTask,
    cfg: &PromptConfig,
    split: &SampleSplit,
    state: &mut FinetuneState,
    until: usize,
) -> Result<(), TrainError> {
    check_task(pretrained, task, cfg, split)?;
    let adam_cfg = AdamConfig::default();
    for epoch in state.epoch()..until {
        let (loss, grads) = match finetune_loss(&state.prompts, pretrained, task, cfg, &split.train) {
            Ok(r) => r,
            Err(TrainError::Model(ModelError::NonFiniteLoss { .. })) => return Err(TrainError::NonFinite { epoch }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(TrainError::NonFinite { epoch });
        }
        adam_step(&mut state.prompts.arrays_mut(), &grads, &mut state.adam, cfg.lr, &adam_cfg);
        state.loss_trace.push(loss);
        let done = epoch + 1;
        if done % cfg.checkpoint_every == 0 || done == until {
            let val = validation(&state.prompts, pretrained, task, cfg, split)?;
            if state.checkpoints.last().is_some_and(|c| c.epoch == done) {
                continue;
            }
            state.checkpoints.push(CheckpointRecord { epoch: done, val });
            if val > state.best_val {
                state.best_val = val;
                state.best_epoch = done;
                state.best = state.prompts.clone();
            }
            log::debug!("finetune epoch {done}: loss {loss:.6} val {val:.4}");
        }
    }
    Ok(())
}

/// Full fine-tuning run with validation-selected checkpoint.
pub fn finetune_loop(
    pretrained: &ModelParams,
    task: &FinetuneTask,
    cfg: &PromptConfig,
    split: &SampleSplit,
    seed: u64,
) -> Result<FinetuneOutcome, TrainError> {
    let mut state = finetune_init(pretrained, task, cfg, split, seed)?;
    finetune_epochs(pretrained, task, cfg, split, &mut state, cfg.epochs)?;
    finish(pretrained, task, cfg, split, state)
}

/// Scores the selected checkpoint on the test split.
pub fn finish(
    pretrained: &ModelParams,
    task: &FinetuneTask,
    cfg: &PromptConfig,
    split: &SampleSplit,
    state: FinetuneState,
) -> Result<FinetuneOutcome, TrainError> {
    let test = if split.test.is_empty() {
        f64::NAN
    } else {
        evaluate(&state.best, pretrained, task, cfg, &split.test)?
    };
    Ok(FinetuneOutcome {
        best: state.best,
        best_epoch: state.best_epoch,
        best_val: state.best_val,
        test,
        loss_trace: state.loss_trace,
        checkpoints: state.checkpoints,
        last: state.prompts,
    })
}

/// Trainable scalar counts of the default prompt layout for a node task.
pub fn prompt_param_counts(n: usize, f: usize, l: usize, k: usize, d: usize, h: usize, mode: PtMode) -> PromptCounts {
    let pt = match mode {
        PtMode::Dense => n * n,
        PtMode::LowRank(r) => 2 * n * r,
    };
    PromptCounts {
        signal: n * l + l * f,
        alignment: pt,
        label: d * h,
        per_node_signal: n * f,
        components: k,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptCounts {
    pub signal: usize,
    pub alignment: usize,
    pub label: usize,
    /// A free prompt per node and channel, for comparison.
    pub per_node_signal: usize,
    pub components: usize,
}

#[cfg(test)]
mod tests;
