//! Stochastic block model graphs with block-conditioned Gaussian signals.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::GraphError;
use crate::graph::Graph;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureModel {
    pub dim: usize,
    /// Standard deviation of each block mean coordinate.
    pub mean_scale: f64,
    /// Shared within-block standard deviation σ.
    pub sigma: f64,
}

impl Default for FeatureModel {
    fn default() -> Self {
        FeatureModel {
            dim: 32,
            mean_scale: 1.0,
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SbmConfig {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub features: FeatureModel,
}

impl Default for SbmConfig {
    fn default() -> Self {
        SbmConfig {
            blocks: 4,
            nodes_per_block: 100,
            p_in: 0.1,
            p_out: 0.01,
            features: FeatureModel::default(),
        }
    }
}

impl SbmConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        let ok = (0.0..=1.0).contains(&self.p_in) && (0.0..=1.0).contains(&self.p_out);
        if !ok || self.p_in <= self.p_out {
            return Err(GraphError::Invalid(format!(
                "need 0 <= p_out < p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        if self.blocks == 0 || self.nodes_per_block == 0 {
            return Err(GraphError::Invalid("blocks and nodes_per_block must be positive".into()));
        }
        if self.features.sigma < 0.0 || self.features.mean_scale < 0.0 {
            return Err(GraphError::Invalid("feature scales must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.blocks * self.nodes_per_block
    }

    /// Expected edge count `Σ` over node pairs of their Bernoulli means.
    pub fn expected_edges(&self) -> f64 {
        let (b, m) = (self.blocks as f64, self.nodes_per_block as f64);
        b * m * (m - 1.0) / 2.0 * self.p_in + b * (b - 1.0) / 2.0 * m * m * self.p_out
    }
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut rng::Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Block means drawn as in [`gen_sbm`], one row per block.
pub fn block_means(cfg: &SbmConfig, seed: u64) -> Array2<f64> {
    let mut rng = rng::stream(seed, "sbm-means");
    normal_matrix(cfg.blocks, cfg.features.dim, cfg.features.mean_scale, &mut rng)
}

fn sample_edges(cfg: &SbmConfig, p_in: f64, p_out: f64, rng: &mut rng::Rng) -> Vec<(usize, usize)> {
    let n = cfg.n_nodes();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let same = u / cfg.nodes_per_block == v / cfg.nodes_per_block;
            if rng.random::<f64>() < if same { p_in } else { p_out } {
                edges.push((u, v));
            }
        }
    }
    edges
}

fn build(
    cfg: &SbmConfig,
    p_in: f64,
    p_out: f64,
    means: &Array2<f64>,
    seed: u64,
) -> Result<Graph, GraphError> {
    let n = cfg.n_nodes();
    let mut rng = rng::stream(seed, "sbm-edges");
    let edges = sample_edges(cfg, p_in, p_out, &mut rng);
    let mut rng = rng::stream(seed, "sbm-signals");
    let mut x = normal_matrix(n, cfg.features.dim, cfg.features.sigma, &mut rng);
    let labels: Vec<i64> = (0..n).map(|i| (i / cfg.nodes_per_block) as i64).collect();
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row += &means.row(i / cfg.nodes_per_block);
    }
    let g = Graph::with_classes(n, edges, x, Some(labels), cfg.blocks)?;
    let (components, _) = g.connected_components();
    if components > 1 {
        log::warn!("generated SBM graph has {components} connected components");
    }
    Ok(g)
}

/// SBM graph; node `i` belongs to block `i / nodes_per_block`, which is also
/// its label. Disconnected outputs are allowed and logged.
pub fn gen_sbm(cfg: &SbmConfig, seed: u64) -> Result<Graph, GraphError> {
    cfg.validate()?;
    let means = block_means(cfg, seed);
    build(cfg, cfg.p_in, cfg.p_out, &means, seed)
}

/// Pre-training and fine-tuning graphs from one block family.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferPair {
    pub pretrain: Graph,
    pub finetune: Graph,
    /// Fine-tune block `b` is built from pre-train block `perm[b]`.
    pub perm: Vec<usize>,
    pub pretrain_means: Array2<f64>,
    pub finetune_means: Array2<f64>,
}

/// Fine-tune block means are the permuted pre-train means moved by
/// `signal_shift · σ` along a random unit direction per block. Edge
/// probabilities move toward each other by `structure_shift · (p_in − p_out) / 2`.
pub fn gen_transfer_pair(
    base: &SbmConfig,
    signal_shift: f64,
    structure_shift: f64,
    seed: u64,
) -> Result<TransferPair, GraphError> {
    base.validate()?;
    if signal_shift < 0.0 || !(0.0..=1.0).contains(&structure_shift) {
        return Err(GraphError::Invalid(format!(
            "need signal_shift >= 0 and structure_shift in [0, 1], got {signal_shift} and {structure_shift}"
        )));
    }
    let pre_seed = rng::derive_seed(seed, "pair-pretrain", 0);
    let ft_seed = rng::derive_seed(seed, "pair-finetune", 0);
    let pretrain_means = block_means(base, pre_seed);
    let pretrain = build(base, base.p_in, base.p_out, &pretrain_means, pre_seed)?;

    let mut rng = rng::stream(seed, "pair-shift");
    let mut perm: Vec<usize> = (0..base.blocks).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
    let sigma = base.features.sigma;
    let mut finetune_means = Array2::zeros(pretrain_means.dim());
    for b in 0..base.blocks {
        let dir = loop {
            let d: Array1<f64> = (0..base.features.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = d.dot(&d).sqrt();
            if norm > 1e-12 {
                break d / norm;
            }
        };
        let shifted = &pretrain_means.row(perm[b]) + &(dir * (signal_shift * sigma));
        finetune_means.row_mut(b).assign(&shifted);
    }
    let delta = structure_shift * (base.p_in - base.p_out) / 2.0;
    let finetune = build(base, base.p_in - delta, base.p_out + delta, &finetune_means, ft_seed)?;
    Ok(TransferPair {
        pretrain,
        finetune,
        perm,
        pretrain_means,
        finetune_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_blocks_without_cross_edges() {
        let cfg = SbmConfig {
            blocks: 2,
            nodes_per_block: 3,
            p_in: 1.0,
            p_out: 0.0,
            features: FeatureModel {
                dim: 2,
                ..FeatureModel::default()
            },
        };
        let g = gen_sbm(&cfg, 1).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]);
        assert_eq!(g.node_labels().unwrap(), &[0, 0, 0, 1, 1, 1]);
        assert_eq!(g.num_classes(), 2);
        assert_eq!(g.connected_components().0, 2);
    }

    #[test]
    fn rejects_inverted_probabilities() {
        let cfg = SbmConfig {
            p_in: 0.01,
            p_out: 0.1,
            ..SbmConfig::default()
        };
        assert!(gen_sbm(&cfg, 0).is_err());
    }

    #[test]
    fn edge_count_within_three_sigma() {
        let cfg = SbmConfig {
            blocks: 3,
            nodes_per_block: 20,
            p_in: 0.3,
            p_out: 0.05,
            features: FeatureModel {
                dim: 1,
                ..FeatureModel::default()
            },
        };
        let (b, m) = (3.0, 20.0);
        let within = b * m * (m - 1.0) / 2.0;
        let between = b * (b - 1.0) / 2.0 * m * m;
        let var = within * 0.3 * 0.7 + between * 0.05 * 0.95;
        let mean = cfg.expected_edges();
        let runs = 100;
        let avg = (0..runs).map(|s| gen_sbm(&cfg, s).unwrap().n_edges() as f64).sum::<f64>() / runs as f64;
        let se = (var / runs as f64).sqrt();
        assert!((avg - mean).abs() <= 3.0 * se, "{avg} vs {mean} ± {se}");
    }

    #[test]
    fn signal_shift_sets_mean_distance() {
        let cfg = SbmConfig {
            features: FeatureModel {
                sigma: 0.7,
                ..FeatureModel::default()
            },
            ..SbmConfig::default()
        };
        let pair = gen_transfer_pair(&cfg, 2.0, 0.0, 3).unwrap();
        for b in 0..cfg.blocks {
            let d = &pair.finetune_means.row(b) - &pair.pretrain_means.row(pair.perm[b]);
            assert!((d.dot(&d).sqrt() - 1.4).abs() < 1e-12);
        }
        let same = gen_transfer_pair(&cfg, 0.0, 0.0, 3).unwrap();
        assert_ne!(same.pretrain.edges(), same.finetune.edges());
        assert_eq!(same.pretrain.n_nodes(), same.finetune.n_nodes());
    }
}
