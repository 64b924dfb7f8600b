//! Positive and negative views.
//!
//! Positives barely move the spectrum: a handful of edge flips and a sparse,
//! small symmetric signal transform `I + F_sp`. Negatives rewire a large share
//! of edges (degree-preserving swaps where possible) and apply a dense
//! transform `I + F_dt`.

use std::collections::HashSet;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::graph::Graph;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Fraction of edges flipped (dropped or added) for positives.
    pub pos_edge_rate: f64,
    /// Off-diagonal density of `F_sp`.
    pub pos_signal_sparsity: f64,
    /// Standard deviation of the non-zeros of `F_sp`.
    pub pos_signal_scale: f64,
    /// Fraction of edges rewired for negatives.
    pub neg_edge_rate: f64,
    /// Off-diagonal density of `F_dt`.
    pub neg_signal_density: f64,
    /// Standard deviation of the non-zeros of `F_dt`.
    pub neg_signal_scale: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pos_edge_rate: 0.05,
            pos_signal_sparsity: 0.05,
            pos_signal_scale: 0.05,
            neg_edge_rate: 0.4,
            neg_signal_density: 0.5,
            neg_signal_scale: 0.5,
            seed: 0,
        }
    }
}

fn check_rate(rate: f64) -> Result<(), TrainError> {
    if (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(TrainError::InvalidRate {
            rate,
            range: "[0, 1]",
        })
    }
}

impl AugmentConfig {
    /// Every rate in `[0, 1]` and each positive rate below its negative counterpart.
    pub fn validate(&self) -> Result<(), TrainError> {
        for r in [
            self.pos_edge_rate,
            self.pos_signal_sparsity,
            self.neg_edge_rate,
            self.neg_signal_density,
        ] {
            check_rate(r)?;
        }
        if self.pos_signal_scale < 0.0 || self.neg_signal_scale < 0.0 {
            return Err(TrainError::Invalid("signal scales must be non-negative".into()));
        }
        if self.pos_edge_rate >= self.neg_edge_rate
            || self.pos_signal_sparsity >= self.neg_signal_density
            || self.pos_signal_scale >= self.neg_signal_scale
        {
            return Err(TrainError::Invalid(
                "positive perturbation rates must be below the negative ones".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        AugmentConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn identity() -> Self {
        AugmentConfig {
            pos_edge_rate: 0.0,
            pos_signal_sparsity: 0.0,
            pos_signal_scale: 0.0,
            neg_edge_rate: 0.0,
            neg_signal_density: 0.0,
            neg_signal_scale: 0.0,
            seed: 0,
        }
    }
}

/// `floor(rate * count)`, robust to the rounding of products like `0.05 * 100`.
pub(crate) fn rate_count(rate: f64, count: usize) -> usize {
    ((rate * count as f64) + 1e-9).floor() as usize
}

/// `(I + F) X` with `F` symmetric, zero diagonal, off-diagonal entries present
/// with probability `density` and drawn from `N(0, scale²)`.
pub fn perturb_signals(x: &Array2<f64>, density: f64, scale: f64, rng: &mut rng::Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut out = x.clone();
    if density <= 0.0 || scale <= 0.0 || n < 2 {
        return out;
    }
    let normal = Normal::new(0.0, scale).expect("finite scale");
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < density {
                let f = normal.sample(rng);
                out.row_mut(i).scaled_add(f, &x.row(j));
                out.row_mut(j).scaled_add(f, &x.row(i));
            }
        }
    }
    out
}

fn random_non_edge(
    n: usize,
    present: &HashSet<(usize, usize)>,
    rng: &mut rng::Rng,
) -> Option<(usize, usize)> {
    let max_edges = n * (n - 1) / 2;
    if n < 2 || present.len() >= max_edges {
        return None;
    }
    for _ in 0..64 {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v {
            let e = (u.min(v), u.max(v));
            if !present.contains(&e) {
                return Some(e);
            }
        }
    }
    // Dense graph: enumerate what is left.
    let mut free = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if !present.contains(&(u, v)) {
                free.push((u, v));
            }
        }
    }
    free.choose(rng).copied()
}

/// Flips exactly `count` edges: each flip drops an original edge or adds a
/// new one, chosen by a fair coin (falling back to whichever is possible).
fn flip_edges(g: &Graph, count: usize, rng: &mut rng::Rng) -> Vec<(usize, usize)> {
    let n = g.n_nodes();
    let mut present: HashSet<(usize, usize)> = g.edges().iter().copied().collect();
    let mut droppable: Vec<(usize, usize)> = g.edges().to_vec();
    droppable.shuffle(rng);
    let mut added: HashSet<(usize, usize)> = HashSet::new();
    for _ in 0..count {
        let want_drop = rng.random::<bool>();
        let can_drop = !droppable.is_empty();
        let add = if want_drop && can_drop {
            None
        } else {
            random_non_edge(n, &present, rng)
        };
        match add {
            Some(e) if !(want_drop && can_drop) => {
                present.insert(e);
                added.insert(e);
            }
            _ => {
                if let Some(e) = droppable.pop() {
                    present.remove(&e);
                }
            }
        }
    }
    let mut edges: Vec<_> = present.into_iter().collect();
    edges.sort_unstable();
    edges
}

/// Small structural and signal perturbation.
pub fn augment_positive(g: &Graph, cfg: &AugmentConfig) -> Result<Graph, TrainError> {
    check_rate(cfg.pos_edge_rate)?;
    check_rate(cfg.pos_signal_sparsity)?;
    let mut rng = rng::stream(cfg.seed, "augment-positive");
    let flips = rate_count(cfg.pos_edge_rate, g.n_edges());
    let edges = if flips > 0 {
        flip_edges(g, flips, &mut rng)
    } else {
        g.edges().to_vec()
    };
    let x = perturb_signals(g.signals(), cfg.pos_signal_sparsity, cfg.pos_signal_scale, &mut rng);
    Ok(g.with_edges(edges)?.with_signals(x)?)
}

/// Rewires `ceil(rate·M)` edge slots with double-edge swaps, which keep every
/// degree; a swap that cannot be placed becomes a drop plus a random add.
fn rewire(g: &Graph, rate: f64, rng: &mut rng::Rng) -> Vec<(usize, usize)> {
    let m = g.n_edges();
    let n = g.n_nodes();
    let mut edges: Vec<(usize, usize)> = g.edges().to_vec();
    let mut present: HashSet<(usize, usize)> = edges.iter().copied().collect();
    let target = (rate * m as f64).ceil() as usize;
    let swaps = target.div_ceil(2);
    for _ in 0..swaps {
        let mut done = false;
        if edges.len() >= 2 {
            for _ in 0..20 {
                let i = rng.random_range(0..edges.len());
                let j = rng.random_range(0..edges.len());
                if i == j {
                    continue;
                }
                let (a, b) = edges[i];
                let (c, d) = if rng.random::<bool>() { edges[j] } else { (edges[j].1, edges[j].0) };
                if a == d || c == b || a == c || b == d {
                    continue;
                }
                let e1 = (a.min(d), a.max(d));
                let e2 = (c.min(b), c.max(b));
                if present.contains(&e1) || present.contains(&e2) {
                    continue;
                }
                present.remove(&edges[i]);
                present.remove(&edges[j]);
                present.insert(e1);
                present.insert(e2);
                edges[i] = e1;
                edges[j] = e2;
                done = true;
                break;
            }
        }
        if !done && !edges.is_empty() {
            let i = rng.random_range(0..edges.len());
            if let Some(e) = random_non_edge(n, &present, rng) {
                present.remove(&edges[i]);
                present.insert(e);
                edges[i] = e;
            }
        }
    }
    edges.sort_unstable();
    edges
}

/// Heavy rewiring and dense signal mixing.
pub fn augment_negative(g: &Graph, cfg: &AugmentConfig) -> Result<Graph, TrainError> {
    check_rate(cfg.neg_edge_rate)?;
    check_rate(cfg.neg_signal_density)?;
    let mut rng = rng::stream(cfg.seed, "augment-negative");
    let edges = if cfg.neg_edge_rate > 0.0 {
        rewire(g, cfg.neg_edge_rate, &mut rng)
    } else {
        g.edges().to_vec()
    };
    let x = perturb_signals(g.signals(), cfg.neg_signal_density, cfg.neg_signal_scale, &mut rng);
    Ok(g.with_edges(edges)?.with_signals(x)?)
}

/// Permutes signal rows with a uniformly random cyclic permutation (Sattolo),
/// so for `n >= 2` no row stays in place. Structure is unchanged.
pub fn shuffle_features(g: &Graph, seed: u64) -> Result<Graph, TrainError> {
    let n = g.n_nodes();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, "shuffle-features");
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    let x = g.signals().select(ndarray::Axis(0), &perm);
    Ok(g.with_signals(x)?)
}

/// Edges removed for link prediction and the matching non-adjacent pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedEdges {
    pub graph: Graph,
    pub masked: Vec<(usize, usize)>,
    /// `negatives[i]` shares its first endpoint with `masked[i]` and is not an
    /// edge of the original graph.
    pub negatives: Vec<(usize, usize)>,
}

pub fn mask_edges(g: &Graph, rate: f64, seed: u64) -> Result<MaskedEdges, TrainError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(TrainError::InvalidRate {
            rate,
            range: "(0, 1)",
        });
    }
    let mut rng = rng::stream(seed, "mask-edges");
    let count = rate_count(rate, g.n_edges());
    let mut order: Vec<usize> = (0..g.n_edges()).collect();
    order.shuffle(&mut rng);
    let chosen: HashSet<usize> = order[..count].iter().copied().collect();
    let mut masked: Vec<(usize, usize)> = order[..count].iter().map(|&i| g.edges()[i]).collect();
    let remaining: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .enumerate()
        .filter(|(i, _)| !chosen.contains(i))
        .map(|(_, &e)| e)
        .collect();

    let adj = g.adjacency();
    let n = g.n_nodes();
    let mut negatives = Vec::with_capacity(count);
    for pair in masked.iter_mut() {
        let mut found = None;
        for flip in [false, true] {
            let (u, _) = if flip { (pair.1, pair.0) } else { *pair };
            if adj[u].len() + 1 >= n {
                continue;
            }
            loop {
                let w = rng.random_range(0..n);
                if w != u && adj[u].binary_search(&w).is_err() {
                    found = Some((u, w));
                    break;
                }
            }
            if flip {
                *pair = (pair.1, pair.0);
            }
            break;
        }
        match found {
            Some(neg) => negatives.push(neg),
            None => return Err(TrainError::TooSparse { needed: count }),
        }
    }
    Ok(MaskedEdges {
        graph: g.with_edges(remaining)?,
        masked,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ring_with_signals(n: usize, f: usize, seed: u64) -> Graph {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        let mut r = rng::stream(seed, "test-signals");
        let x = Array2::from_shape_simple_fn((n, f), || r.random_range(-1.0..1.0));
        Graph::new(n, edges, x, None).unwrap()
    }

    fn sym_diff(a: &Graph, b: &Graph) -> usize {
        let sa: HashSet<_> = a.edges().iter().collect();
        let sb: HashSet<_> = b.edges().iter().collect();
        sa.symmetric_difference(&sb).count()
    }

    #[test]
    fn zero_rates_are_identity() {
        let g = ring_with_signals(12, 3, 1);
        let cfg = AugmentConfig::identity().with_seed(5);
        assert_eq!(augment_positive(&g, &cfg).unwrap(), g);
        assert_eq!(augment_negative(&g, &cfg).unwrap(), g);
    }

    #[test]
    fn positive_flips_exact_count() {
        let g = ring_with_signals(100, 2, 2);
        assert_eq!(g.n_edges(), 100);
        for seed in 0..20 {
            let cfg = AugmentConfig {
                pos_signal_sparsity: 0.0,
                ..AugmentConfig::default()
            }
            .with_seed(seed);
            let p = augment_positive(&g, &cfg).unwrap();
            assert_eq!(sym_diff(&g, &p), 5);
        }
    }

    #[test]
    fn negative_rewiring_preserves_size() {
        let g = ring_with_signals(60, 2, 3);
        for seed in 0..20 {
            let cfg = AugmentConfig::default().with_seed(seed);
            let ng = augment_negative(&g, &cfg).unwrap();
            assert_eq!(ng.n_nodes(), g.n_nodes());
            assert!((ng.n_edges() as i64 - g.n_edges() as i64).abs() <= 1);
            assert!(sym_diff(&g, &ng) > 0);
        }
    }

    #[test]
    fn augmentation_is_deterministic() {
        let g = ring_with_signals(30, 2, 4);
        let cfg = AugmentConfig::default().with_seed(9);
        assert_eq!(augment_positive(&g, &cfg).unwrap(), augment_positive(&g, &cfg).unwrap());
        assert_eq!(augment_negative(&g, &cfg).unwrap(), augment_negative(&g, &cfg).unwrap());
    }

    #[test]
    fn shuffle_examples() {
        let one = Graph::new(1, vec![], array![[4.0]], None).unwrap();
        assert_eq!(shuffle_features(&one, 3).unwrap(), one);

        let two = Graph::new(2, vec![(0, 1)], array![[1.0, 2.0], [3.0, 4.0]], None).unwrap();
        for seed in 0..5 {
            let s = shuffle_features(&two, seed).unwrap();
            assert_eq!(s.signals(), &array![[3.0, 4.0], [1.0, 2.0]]);
            assert_eq!(s.edges(), two.edges());
        }

        let g = ring_with_signals(9, 2, 5);
        let s = shuffle_features(&g, 1).unwrap();
        let mut a: Vec<Vec<u64>> = g.signals().rows().into_iter().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
        let mut b: Vec<Vec<u64>> = s.signals().rows().into_iter().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_edges_contract() {
        let k3 = Graph::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let m = mask_edges(&k3, 0.2, 0).unwrap();
        assert!(m.masked.is_empty());
        assert!(matches!(mask_edges(&k3, 0.5, 0), Err(TrainError::TooSparse { .. })));
        assert!(mask_edges(&k3, 0.0, 0).is_err());
        assert!(mask_edges(&k3, 1.0, 0).is_err());

        let g = ring_with_signals(20, 1, 6);
        let m = mask_edges(&g, 0.3, 4).unwrap();
        assert_eq!(m.masked.len(), 6);
        assert_eq!(m.negatives.len(), 6);
        for &(u, v) in &m.masked {
            assert!(!m.graph.has_edge(u, v));
            assert!(g.has_edge(u, v));
        }
        for (&(u, _), &(a, b)) in m.masked.iter().zip(&m.negatives) {
            assert_eq!(u, a);
            assert!(a != b && !g.has_edge(a, b));
        }
        assert_eq!(m.graph.n_edges(), 14);
    }

    #[test]
    fn validate_ordering() {
        AugmentConfig::default().validate().unwrap();
        let bad = AugmentConfig {
            pos_edge_rate: 0.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            neg_edge_rate: 1.5,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
