//! Contrastive pre-training: views, batch samplers for the three frameworks,
//! the cosine InfoNCE loss and the training loop.

mod augment;

pub use augment::{
    augment_negative, augment_positive, mask_edges, perturb_signals, shuffle_features, AugmentConfig,
    MaskedEdges,
};

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NceLayout, Tape, Var};
use crate::error::{ModelError, TrainError};
use crate::graph::{Graph, GraphSet, Laplacian};
use crate::model::{adam_step, backbone, AdamConfig, AdamState, head_on_tape, ModelParams, Parameters, Propagation};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Framework {
    Subgraph,
    #[serde(alias = "linkpred")]
    LinkPred,
    #[serde(alias = "localglobal")]
    LocalGlobal,
}

impl FromStr for Framework {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "subgraph" => Ok(Framework::Subgraph),
            "linkpred" | "link-pred" => Ok(Framework::LinkPred),
            "localglobal" | "local-global" => Ok(Framework::LocalGlobal),
            other => Err(format!("unknown framework `{other}`")),
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Framework::Subgraph => "subgraph",
            Framework::LinkPred => "link-pred",
            Framework::LocalGlobal => "local-global",
        })
    }
}

/// Pre-training input: one graph or a set of graphs.
#[derive(Debug, Clone, Copy)]
pub enum PretrainData<'a> {
    Graph(&'a Graph),
    Set(&'a GraphSet),
}

impl<'a> From<&'a Graph> for PretrainData<'a> {
    fn from(g: &'a Graph) -> Self {
        PretrainData::Graph(g)
    }
}

impl<'a> From<&'a GraphSet> for PretrainData<'a> {
    fn from(s: &'a GraphSet) -> Self {
        PretrainData::Set(s)
    }
}

impl PretrainData<'_> {
    pub fn signal_dim(&self) -> usize {
        match self {
            PretrainData::Graph(g) => g.signal_dim(),
            PretrainData::Set(s) => s.signal_dim(),
        }
    }
}

/// How a view turns node embeddings into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    Mean,
    Node(usize),
}

/// One contrastive view: a graph of the batch plus its readout. `source`
/// records the node (single-graph input) or graph (set input) it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct View {
    pub graph: usize,
    pub readout: Readout,
    pub source: usize,
}

/// Views of one batch. `anchors`, `positives` and `negatives` index `views`;
/// entry `i` of each belongs to anchor `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub framework: Framework,
    pub graphs: Vec<Graph>,
    pub views: Vec<View>,
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Candidate sets (positive first) over the stacked view embeddings.
    pub fn layout(&self) -> NceLayout {
        NceLayout {
            positive: self.positives.clone(),
            candidates: self
                .positives
                .iter()
                .zip(&self.negatives)
                .map(|(&p, negs)| std::iter::once(p).chain(negs.iter().copied()).collect())
                .collect(),
        }
    }

    fn push_graph(&mut self, g: Graph) -> usize {
        self.graphs.push(g);
        self.graphs.len() - 1
    }

    fn push_view(&mut self, graph: usize, readout: Readout, source: usize) -> usize {
        self.views.push(View {
            graph,
            readout,
            source,
        });
        self.views.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub augment: AugmentConfig,
    /// Radius of the ego-subgraphs used as views.
    pub ego_radius: usize,
    /// Fraction of edges masked per link-prediction batch.
    pub mask_rate: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            augment: AugmentConfig::default(),
            ego_radius: 2,
            mask_rate: 0.1,
        }
    }
}

fn view_seed(seed: u64, i: usize) -> u64 {
    rng::derive_seed(seed, "view", i as u64)
}

/// Draws one batch. Augmentation seeds derive from `seed` and the view index;
/// `cfg.augment.seed` is not used here.
pub fn sample_contrastive_batch(
    data: PretrainData<'_>,
    framework: Framework,
    cfg: &SamplerConfig,
    batch_size: usize,
    seed: u64,
) -> Result<ContrastiveBatch, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::Invalid("batch size must be positive".into()));
    }
    let mut batch = ContrastiveBatch {
        framework,
        graphs: Vec::new(),
        views: Vec::new(),
        anchors: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    let mut rng = rng::stream(seed, "contrastive-batch");
    match framework {
        Framework::Subgraph => {
            let (available, pick) = match data {
                PretrainData::Graph(g) => (g.n_nodes(), g.n_nodes()),
                PretrainData::Set(s) => (s.len(), s.len()),
            };
            if batch_size > available {
                return Err(TrainError::BatchTooLarge {
                    requested: batch_size,
                    available,
                });
            }
            let centers = rand::seq::index::sample(&mut rng, pick, batch_size).into_vec();
            let mut positives = Vec::with_capacity(batch_size);
            let mut neg_aug = Vec::with_capacity(batch_size);
            for (i, &c) in centers.iter().enumerate() {
                let base = match data {
                    PretrainData::Graph(g) => g.ego_subgraph(c, cfg.ego_radius)?,
                    PretrainData::Set(s) => s.graphs()[c].clone(),
                };
                let aug = cfg.augment.with_seed(view_seed(seed, i));
                let pos = augment_positive(&base, &aug)?;
                let neg = augment_negative(&base, &aug)?;
                let gi = batch.push_graph(base);
                let a = batch.push_view(gi, Readout::Mean, c);
                let gi = batch.push_graph(pos);
                positives.push(batch.push_view(gi, Readout::Mean, c));
                let gi = batch.push_graph(neg);
                neg_aug.push(batch.push_view(gi, Readout::Mean, c));
                batch.anchors.push(a);
            }
            for i in 0..batch_size {
                let mut negs = vec![neg_aug[i]];
                negs.extend((0..batch_size).filter(|&j| j != i).map(|j| positives[j]));
                batch.negatives.push(negs);
            }
            batch.positives = positives;
        }
        Framework::LinkPred => {
            let graphs: Vec<(usize, &Graph)> = match data {
                PretrainData::Graph(g) => vec![(0, g)],
                PretrainData::Set(s) => {
                    let mut order: Vec<usize> = (0..s.len()).collect();
                    order.shuffle(&mut rng);
                    order.into_iter().map(|i| (i, &s.graphs()[i])).collect()
                }
            };
            let mut slot = 0usize;
            for (gid, g) in graphs {
                if batch.len() == batch_size {
                    break;
                }
                if g.n_edges() == 0 {
                    continue;
                }
                let masked = mask_edges(g, cfg.mask_rate, rng::derive_seed(seed, "mask", slot as u64))?;
                slot += 1;
                for (&(u, v), &(_, w)) in masked.masked.iter().zip(&masked.negatives) {
                    if batch.len() == batch_size {
                        break;
                    }
                    let mut view = |node: usize| -> Result<usize, TrainError> {
                        let ego = masked.graph.ego_subgraph(node, cfg.ego_radius)?;
                        let gi = batch.push_graph(ego);
                        let source = if matches!(data, PretrainData::Graph(_)) { node } else { gid };
                        Ok(batch.push_view(gi, Readout::Mean, source))
                    };
                    let a = view(u)?;
                    let p = view(v)?;
                    let n = view(w)?;
                    batch.anchors.push(a);
                    batch.positives.push(p);
                    batch.negatives.push(vec![n]);
                }
            }
            if batch.is_empty() {
                return Err(TrainError::BatchTooLarge {
                    requested: batch_size,
                    available: 0,
                });
            }
        }
        Framework::LocalGlobal => match data {
            PretrainData::Graph(g) => {
                if batch_size > g.n_nodes() {
                    return Err(TrainError::BatchTooLarge {
                        requested: batch_size,
                        available: g.n_nodes(),
                    });
                }
                let centers = rand::seq::index::sample(&mut rng, g.n_nodes(), batch_size).into_vec();
                let shuffled = shuffle_features(g, view_seed(seed, 0))?;
                let gi = batch.push_graph(g.clone());
                let si = batch.push_graph(shuffled);
                let pos = batch.push_view(gi, Readout::Mean, 0);
                let neg = batch.push_view(si, Readout::Mean, 0);
                for c in centers {
                    let a = batch.push_view(gi, Readout::Node(c), c);
                    batch.anchors.push(a);
                    batch.positives.push(pos);
                    batch.negatives.push(vec![neg]);
                }
            }
            PretrainData::Set(s) => {
                if batch_size > s.len() {
                    return Err(TrainError::BatchTooLarge {
                        requested: batch_size,
                        available: s.len(),
                    });
                }
                let ids = rand::seq::index::sample(&mut rng, s.len(), batch_size).into_vec();
                for (i, id) in ids.into_iter().enumerate() {
                    let g = &s.graphs()[id];
                    if g.n_nodes() == 0 {
                        return Err(TrainError::Model(ModelError::EmptyGraph));
                    }
                    let node = rng.random_range(0..g.n_nodes());
                    let shuffled = shuffle_features(g, view_seed(seed, i))?;
                    let gi = batch.push_graph(g.clone());
                    let si = batch.push_graph(shuffled);
                    let a = batch.push_view(gi, Readout::Node(node), id);
                    let p = batch.push_view(gi, Readout::Mean, id);
                    let n = batch.push_view(si, Readout::Mean, id);
                    batch.anchors.push(a);
                    batch.positives.push(p);
                    batch.negatives.push(vec![n]);
                }
            }
        },
    }
    Ok(batch)
}

/// Summed cosine InfoNCE with `temperature`: anchor `i` against its positive
/// `pos[i]` and the rows of `negs[i]`.
pub fn info_nce(
    anchors: &Array2<f64>,
    pos: &Array2<f64>,
    negs: &[Array2<f64>],
    temperature: f64,
) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let (loss, _, _) = info_nce_on_tape(&mut tape, anchors, pos, negs, temperature, false)?;
    Ok(tape.value(loss)[[0, 0]])
}

/// Records [`info_nce`] on `tape`; returns `(loss, anchors, stacked candidates)`.
pub fn info_nce_on_tape(
    tape: &mut Tape<'_>,
    anchors: &Array2<f64>,
    pos: &Array2<f64>,
    negs: &[Array2<f64>],
    temperature: f64,
    trainable: bool,
) -> Result<(Var, Var, Var), ModelError> {
    let m = anchors.nrows();
    if pos.nrows() != m || negs.len() != m {
        return Err(ModelError::Shape {
            context: "info_nce",
            expected: (m, anchors.ncols()),
            found: (pos.nrows(), negs.len()),
        });
    }
    let mut cands = pos.clone();
    let mut candidates = Vec::with_capacity(m);
    for (i, n) in negs.iter().enumerate() {
        let start = cands.nrows();
        if n.ncols() != anchors.ncols() {
            return Err(ModelError::Shape {
                context: "info_nce negatives",
                expected: (n.nrows(), anchors.ncols()),
                found: n.dim(),
            });
        }
        cands.append(ndarray::Axis(0), n.view()).expect("column count checked");
        candidates.push(std::iter::once(i).chain(start..cands.nrows()).collect());
    }
    let a = tape.leaf(anchors.clone(), trainable);
    let c = tape.leaf(cands, trainable);
    let layout = NceLayout {
        positive: (0..m).collect(),
        candidates,
    };
    let loss = tape.cosine_nce(a, c, layout, temperature)?;
    Ok((loss, a, c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub framework: Framework,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub sampler: SamplerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            framework: Framework::Subgraph,
            epochs: 500,
            lr: 1e-4,
            batch_size: 16,
            temperature: 0.5,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Loss of one batch and the gradient of every parameter array
/// (`None` for frozen arrays), in [`Parameters::named_arrays`] order.
pub fn batch_loss(
    batch: &ContrastiveBatch,
    params: &ModelParams,
    temperature: f64,
) -> Result<(f64, Vec<Option<Array2<f64>>>), ModelError> {
    let laps: Vec<Laplacian> = batch
        .graphs
        .iter()
        .map(|g| Laplacian::new(g, params.laplacian))
        .collect();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let mut z = Vec::with_capacity(batch.graphs.len());
    for (g, lap) in batch.graphs.iter().zip(&laps) {
        if g.n_nodes() == 0 {
            return Err(ModelError::EmptyGraph);
        }
        let x = tape.constant(g.signals().clone());
        z.push(backbone(&mut tape, &bound, &Propagation::Spatial(lap), x));
    }
    let reps: Vec<Var> = batch
        .views
        .iter()
        .map(|v| match v.readout {
            Readout::Mean => tape.mean_rows(z[v.graph]),
            Readout::Node(i) => tape.select_rows(z[v.graph], &[i]),
        })
        .collect();
    let stacked = tape.stack_rows(&reps);
    let emb = head_on_tape(&mut tape, &bound.head, stacked);
    if tape.value(emb).iter().any(|x| !x.is_finite()) {
        return Err(ModelError::NonFiniteLoss { value: f64::NAN });
    }
    let anchors = tape.select_rows(emb, &batch.anchors);
    let loss = tape.cosine_nce(anchors, emb, batch.layout(), temperature)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss)[[0, 0]];
    Ok((value, bound.vars().into_iter().map(|v| grads.get(v).cloned()).collect()))
}

/// Model, optimizer state and loss history; everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub loss_trace: Vec<f64>,
}

impl PretrainState {
    pub fn new(params: ModelParams) -> Self {
        let adam = AdamState::new(&params.shapes());
        PretrainState {
            params,
            adam,
            loss_trace: Vec::new(),
        }
    }

    pub fn epoch(&self) -> usize {
        self.loss_trace.len()
    }
}

/// Runs epochs `state.epoch()..until`. Each epoch draws its batch from a
/// stream keyed by the epoch index, so resuming reproduces a straight run.
pub fn pretrain_epochs(
    data: PretrainData<'_>,
    state: &mut PretrainState,
    cfg: &PretrainConfig,
    seed: u64,
    until: usize,
) -> Result<(), TrainError> {
    if data.signal_dim() != state.params.input_dim() {
        return Err(TrainError::Model(ModelError::Shape {
            context: "pre-training signals",
            expected: (0, state.params.input_dim()),
            found: (0, data.signal_dim()),
        }));
    }
    state.params.check()?;
    let adam_cfg = AdamConfig::default();
    for epoch in state.epoch()..until {
        let batch_seed = rng::derive_seed(seed, "pretrain-batch", epoch as u64);
        let batch = sample_contrastive_batch(data, cfg.framework, &cfg.sampler, cfg.batch_size, batch_seed)?;
        let (loss, grads) = match batch_loss(&batch, &state.params, cfg.temperature) {
            Ok(r) => r,
            Err(ModelError::NonFiniteLoss { .. }) => return Err(TrainError::NonFinite { epoch }),
            Err(e) => return Err(e.into()),
        };
        if !loss.is_finite() || grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(TrainError::NonFinite { epoch });
        }
        adam_step(&mut state.params.arrays_mut(), &grads, &mut state.adam, cfg.lr, &adam_cfg);
        state.loss_trace.push(loss);
        log::debug!("pretrain epoch {epoch}: loss {loss:.6}");
    }
    Ok(())
}

/// Trains `params` for `cfg.epochs` epochs.
pub fn pretrain_loop(
    data: PretrainData<'_>,
    params: ModelParams,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainState, TrainError> {
    let mut state = PretrainState::new(params);
    pretrain_epochs(data, &mut state, cfg, seed, cfg.epochs)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::array;

    fn ring(n: usize, f: usize, seed: u64) -> Graph {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        let mut r = rng::stream(seed, "ring");
        let x = Array2::from_shape_simple_fn((n, f), || r.random_range(-1.0..1.0));
        Graph::new(n, edges, x, None).unwrap()
    }

    fn small_model(f: usize, seed: u64) -> ModelParams {
        ModelParams::init(
            &ModelConfig {
                input_dim: f,
                hidden_dim: 8,
                head_hidden: 8,
                head_out: 6,
                ..ModelConfig::default()
            },
            seed,
        )
    }

    #[test]
    fn uniform_similarities_give_log_of_set_size() {
        let a = array![[1.0, 0.0]];
        let p = array![[1.0, 0.0]];
        let n = array![[1.0, 0.0], [2.0, 0.0], [0.5, 0.0]];
        let l = info_nce(&a, &p, &[n], 0.5).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn opposite_negative_closed_form() {
        let a = array![[1.0, 1.0]];
        let p = array![[2.0, 2.0]];
        let n = array![[-1.0, -1.0]];
        let l = info_nce(&a, &p, &[n], 0.5).unwrap();
        let e2 = 2f64.exp();
        assert!((l + (e2 / (e2 + (-2f64).exp())).ln()).abs() < 1e-12);
        assert!((l - 0.0181).abs() < 1e-4);
    }

    #[test]
    fn zero_norm_is_an_error() {
        let a = array![[0.0, 0.0]];
        let p = array![[1.0, 0.0]];
        assert!(info_nce(&a, &p, &[array![[0.0, 1.0]]], 0.5).is_err());
        let a = array![[1.0, 0.0]];
        assert!(info_nce(&a, &p, &[array![[0.0, 0.0]]], 0.5).is_err());
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        let mut r = rng::stream(3, "nce-fd");
        let mut draw = |rows| Array2::from_shape_simple_fn((rows, 4), || r.random_range(-1.0..1.0));
        let a = draw(3);
        let p = draw(3);
        let negs = vec![draw(2), draw(3), draw(1)];
        let mut tape = Tape::new();
        let (loss, av, cv) = info_nce_on_tape(&mut tape, &a, &p, &negs, 0.7, true).unwrap();
        let g = tape.backward(loss).unwrap();
        let ga = g.get(av).unwrap().clone();
        let gc = g.get(cv).unwrap().clone();
        let h = 1e-5;
        for i in 0..3 {
            for j in 0..4 {
                let mut ap = a.clone();
                ap[[i, j]] += h;
                let mut am = a.clone();
                am[[i, j]] -= h;
                let fd = (info_nce(&ap, &p, &negs, 0.7).unwrap() - info_nce(&am, &p, &negs, 0.7).unwrap()) / (2.0 * h);
                assert!((fd - ga[[i, j]]).abs() <= 1e-6 * fd.abs().max(1.0), "{fd} vs {}", ga[[i, j]]);
                let mut pp = p.clone();
                pp[[i, j]] += h;
                let mut pm = p.clone();
                pm[[i, j]] -= h;
                let fd = (info_nce(&a, &pp, &negs, 0.7).unwrap() - info_nce(&a, &pm, &negs, 0.7).unwrap()) / (2.0 * h);
                assert!((fd - gc[[i, j]]).abs() <= 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn shift_invariance_of_scores() {
        // Scaling every candidate of one anchor leaves the cosines, and so the loss, unchanged;
        // shifting all logits by a constant cancels in the softmax.
        let a = array![[1.0, 0.5]];
        let p = array![[0.3, 0.9]];
        let n = array![[-0.2, 0.4], [0.8, -0.1]];
        let l1 = info_nce(&a, &p, &[n.clone()], 0.5).unwrap();
        let l2 = info_nce(&a, &(&p * 3.0), &[&n * 3.0], 0.5).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn subgraph_batch_contract() {
        let g = ring(30, 3, 1);
        let b = sample_contrastive_batch((&g).into(), Framework::Subgraph, &SamplerConfig::default(), 8, 5).unwrap();
        assert_eq!(b.anchors.len(), 8);
        assert_eq!(b.positives.len(), 8);
        let centers: Vec<usize> = b.anchors.iter().map(|&a| b.views[a].source).collect();
        let mut uniq = centers.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 8);
        for i in 0..8 {
            assert_eq!(b.views[b.positives[i]].source, centers[i]);
            assert!(b.negatives[i].len() >= 8);
            let other: Vec<usize> = b.negatives[i]
                .iter()
                .map(|&n| b.views[n].source)
                .filter(|&s| s != centers[i])
                .collect();
            assert_eq!(other.len(), 7);
        }
        assert!(matches!(
            sample_contrastive_batch((&g).into(), Framework::Subgraph, &SamplerConfig::default(), 31, 5),
            Err(TrainError::BatchTooLarge { requested: 31, available: 30 })
        ));
    }

    #[test]
    fn link_pred_on_path_masks_one_pair() {
        let g = Graph::new(4, vec![(0, 1), (1, 2), (2, 3)], Array2::ones((4, 2)), None).unwrap();
        let cfg = SamplerConfig {
            mask_rate: 0.4,
            ..SamplerConfig::default()
        };
        let b = sample_contrastive_batch((&g).into(), Framework::LinkPred, &cfg, 8, 2).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.negatives[0].len(), 1);
        let u = b.views[b.anchors[0]].source;
        let v = b.views[b.positives[0]].source;
        let w = b.views[b.negatives[0][0]].source;
        assert!(g.has_edge(u, v));
        assert!(u != w && !g.has_edge(u, w));
    }

    #[test]
    fn local_global_on_graph_set() {
        let graphs: Vec<Graph> = (0..4).map(|i| ring(6 + i, 2, i as u64)).collect();
        let set = GraphSet::new(graphs, None).unwrap();
        let b = sample_contrastive_batch((&set).into(), Framework::LocalGlobal, &SamplerConfig::default(), 4, 0).unwrap();
        assert_eq!(b.positives.len(), 4);
        assert_eq!(b.negatives.iter().map(Vec::len).sum::<usize>(), 4);
        for i in 0..4 {
            let p = b.views[b.positives[i]];
            let n = b.views[b.negatives[i][0]];
            assert_eq!(p.readout, Readout::Mean);
            let (gp, gn) = (&b.graphs[p.graph], &b.graphs[n.graph]);
            assert_eq!(gp.edges(), gn.edges());
            assert_ne!(gp.signals(), gn.signals());
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let g = ring(20, 3, 2);
        let params = small_model(3, 1);
        for framework in [Framework::Subgraph, Framework::LinkPred, Framework::LocalGlobal] {
            let cfg = PretrainConfig {
                framework,
                epochs: 3,
                lr: 0.0,
                batch_size: 4,
                sampler: SamplerConfig {
                    mask_rate: 0.3,
                    ..SamplerConfig::default()
                },
                ..PretrainConfig::default()
            };
            let out = pretrain_loop((&g).into(), params.clone(), &cfg, 7).unwrap();
            assert_eq!(out.params, params);
            assert_eq!(out.loss_trace.len(), 3);
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let g = ring(24, 3, 3);
        let cfg = PretrainConfig {
            epochs: 6,
            lr: 1e-2,
            batch_size: 4,
            ..PretrainConfig::default()
        };
        let a = pretrain_loop((&g).into(), small_model(3, 2), &cfg, 11).unwrap();
        let b = pretrain_loop((&g).into(), small_model(3, 2), &cfg, 11).unwrap();
        assert_eq!(a, b);
        let mut s = PretrainState::new(small_model(3, 2));
        pretrain_epochs((&g).into(), &mut s, &cfg, 11, 3).unwrap();
        pretrain_epochs((&g).into(), &mut s, &cfg, 11, 6).unwrap();
        assert_eq!(s, a);
        assert_ne!(a.params, small_model(3, 2));
    }

    #[test]
    fn non_finite_signals_abort_with_epoch() {
        let g = ring(10, 2, 4);
        let g = g.with_signals(g.signals() * 1e300).unwrap();
        let cfg = PretrainConfig {
            epochs: 2,
            batch_size: 10,
            framework: Framework::LocalGlobal,
            ..PretrainConfig::default()
        };
        let r = pretrain_loop((&g).into(), small_model(2, 0), &cfg, 0);
        assert!(matches!(r, Err(TrainError::NonFinite { epoch: 0 })), "{r:?}");
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        let g = ring(12, 3, 5);
        let params = small_model(3, 9);
        let batch = sample_contrastive_batch((&g).into(), Framework::Subgraph, &SamplerConfig::default(), 3, 1).unwrap();
        let (_, grads) = batch_loss(&batch, &params, 0.5).unwrap();
        let h = 1e-5;
        let n_arrays = params.shapes().len();
        for k in 0..n_arrays {
            let grad = grads[k].as_ref().unwrap();
            let (r, c) = grad.dim();
            for idx in [(0, 0), (r - 1, c - 1), (r / 2, c / 2)] {
                let mut p = params.clone();
                p.arrays_mut()[k][idx] += h;
                let lp = batch_loss(&batch, &p, 0.5).unwrap().0;
                let mut m = params.clone();
                m.arrays_mut()[k][idx] -= h;
                let lm = batch_loss(&batch, &m, 0.5).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = grad[idx];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3), "array {k} {idx:?}: {fd} vs {an}");
            }
        }
    }
}
