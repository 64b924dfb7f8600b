//! Undirected attributed graphs, their Laplacians and ego-subgraphs.

mod io;
mod laplacian;

pub use io::{load_graph, load_graph_set, parse_graph, save_graph, save_graph_set, write_graph};
pub use laplacian::{build_laplacian, Laplacian, LaplacianKind};

use std::collections::{BTreeSet, HashSet, VecDeque};

use ndarray::{Array2, Axis};

use crate::error::GraphError;

/// Sentinel stored in `node_labels` for nodes without a class.
pub const UNLABELED: i64 = -1;

/// Undirected, unweighted graph with a node signal matrix.
///
/// Edges are kept as `(u, v)` with `u < v`, sorted and deduplicated.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    signals: Array2<f64>,
    node_labels: Option<Vec<i64>>,
    num_classes: usize,
}

impl Graph {
    /// Builds a graph and checks every invariant. Edge endpoints may be given in
    /// either order; self-loops and duplicates are rejected.
    pub fn new(
        n_nodes: usize,
        edges: Vec<(usize, usize)>,
        signals: Array2<f64>,
        node_labels: Option<Vec<i64>>,
    ) -> Result<Self, GraphError> {
        let num_classes = node_labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize))
            .unwrap_or(0);
        Self::with_classes(n_nodes, edges, signals, node_labels, num_classes)
    }

    /// Like [`Graph::new`] but with an explicit class count `d`.
    pub fn with_classes(
        n_nodes: usize,
        edges: Vec<(usize, usize)>,
        signals: Array2<f64>,
        node_labels: Option<Vec<i64>>,
        num_classes: usize,
    ) -> Result<Self, GraphError> {
        let mut normalized = Vec::with_capacity(edges.len());
        let mut seen = HashSet::with_capacity(edges.len());
        for &(a, b) in &edges {
            if a == b {
                return Err(GraphError::SelfLoop { node: a });
            }
            if a >= n_nodes || b >= n_nodes {
                return Err(GraphError::EndpointOutOfRange {
                    u: a,
                    v: b,
                    n_nodes,
                });
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(GraphError::DuplicateEdge { u: e.0, v: e.1 });
            }
            normalized.push(e);
        }
        normalized.sort_unstable();
        let g = Graph {
            n_nodes,
            edges: normalized,
            signals,
            node_labels,
            num_classes,
        };
        match g.validate().into_iter().next() {
            Some(v) => Err(GraphError::Invalid(v)),
            None => Ok(g),
        }
    }

    /// Graph with `n` nodes, no signals (zero columns) and no labels.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        Self::new(n, edges.to_vec(), Array2::zeros((n, 0)), None)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn signals(&self) -> &Array2<f64> {
        &self.signals
    }

    /// Signal dimension `F`.
    pub fn signal_dim(&self) -> usize {
        self.signals.ncols()
    }

    pub fn node_labels(&self) -> Option<&[i64]> {
        self.node_labels.as_deref()
    }

    /// Class count `d` (0 when unlabeled).
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn with_signals(&self, signals: Array2<f64>) -> Result<Self, GraphError> {
        Graph::with_classes(
            self.n_nodes,
            self.edges.clone(),
            signals,
            self.node_labels.clone(),
            self.num_classes,
        )
    }

    pub fn with_edges(&self, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        Graph::with_classes(
            self.n_nodes,
            edges,
            self.signals.clone(),
            self.node_labels.clone(),
            self.num_classes,
        )
    }

    pub fn with_labels(&self, labels: Vec<i64>, num_classes: usize) -> Result<Self, GraphError> {
        Graph::with_classes(
            self.n_nodes,
            self.edges.clone(),
            self.signals.clone(),
            Some(labels),
            num_classes,
        )
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Sorted adjacency lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let e = (u.min(v), u.max(v));
        self.edges.binary_search(&e).is_ok()
    }

    /// Connected components as a label per node, numbered by first appearance.
    pub fn connected_components(&self) -> (usize, Vec<usize>) {
        let adj = self.adjacency();
        let mut comp = vec![usize::MAX; self.n_nodes];
        let mut count = 0;
        for start in 0..self.n_nodes {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = count;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = count;
                        queue.push_back(v);
                    }
                }
            }
            count += 1;
        }
        (count, comp)
    }

    /// Returns the list of invariant violations; empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        let mut seen = HashSet::new();
        for &(u, v) in &self.edges {
            if u == v {
                report.push(format!("self-loop on node {u}"));
            }
            if u >= self.n_nodes || v >= self.n_nodes {
                report.push(format!(
                    "edge ({u},{v}) has endpoint outside 0..{}",
                    self.n_nodes
                ));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                report.push(format!("duplicate edge ({u},{v})"));
            }
        }
        if self.signals.nrows() != self.n_nodes {
            report.push(format!(
                "signal matrix has {} rows, expected {}",
                self.signals.nrows(),
                self.n_nodes
            ));
        }
        if self.signals.iter().any(|x| !x.is_finite()) {
            report.push("signal matrix contains non-finite values".to_string());
        }
        if let Some(labels) = &self.node_labels {
            if labels.len() != self.n_nodes {
                report.push(format!(
                    "label vector has {} entries, expected {}",
                    labels.len(),
                    self.n_nodes
                ));
            }
            for (i, &l) in labels.iter().enumerate() {
                if l != UNLABELED && (l < 0 || l as usize >= self.num_classes) {
                    report.push(format!(
                        "node {i} has label {l} outside 0..{}",
                        self.num_classes
                    ));
                }
            }
        }
        report
    }

    /// Subgraph induced by `nodes` (in the given order). Signal rows and labels
    /// follow the nodes; the class count is preserved.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Graph, GraphError> {
        let mut index = vec![usize::MAX; self.n_nodes];
        for (new, &old) in nodes.iter().enumerate() {
            if old >= self.n_nodes {
                return Err(GraphError::InvalidNode {
                    node: old,
                    n_nodes: self.n_nodes,
                });
            }
            index[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter(|&&(u, v)| index[u] != usize::MAX && index[v] != usize::MAX)
            .map(|&(u, v)| (index[u], index[v]))
            .collect();
        let signals = self.signals.select(Axis(0), nodes);
        let labels = self
            .node_labels
            .as_ref()
            .map(|l| nodes.iter().map(|&i| l[i]).collect());
        Graph::with_classes(nodes.len(), edges, signals, labels, self.num_classes)
    }

    /// Nodes within `radius` hops of `center`, in BFS order starting with the center.
    pub fn ego_nodes(&self, center: usize, radius: usize) -> Result<Vec<usize>, GraphError> {
        if center >= self.n_nodes {
            return Err(GraphError::InvalidNode {
                node: center,
                n_nodes: self.n_nodes,
            });
        }
        if radius == 0 {
            return Err(GraphError::InvalidRadius);
        }
        let adj = self.adjacency();
        let mut dist = vec![usize::MAX; self.n_nodes];
        dist[center] = 0;
        let mut order = vec![center];
        let mut queue = VecDeque::from([center]);
        while let Some(u) = queue.pop_front() {
            if dist[u] == radius {
                continue;
            }
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    order.push(v);
                    queue.push_back(v);
                }
            }
        }
        Ok(order)
    }

    /// Induced subgraph on the `radius`-hop neighbourhood; node 0 is the center.
    pub fn ego_subgraph(&self, center: usize, radius: usize) -> Result<Graph, GraphError> {
        let nodes = self.ego_nodes(center, radius)?;
        self.induced_subgraph(&nodes)
    }

    /// Class ids present among labeled nodes.
    pub fn classes_present(&self) -> BTreeSet<usize> {
        self.node_labels
            .iter()
            .flatten()
            .filter(|&&l| l >= 0)
            .map(|&l| l as usize)
            .collect()
    }
}

/// An ordered collection of graphs sharing one signal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSet {
    graphs: Vec<Graph>,
    graph_labels: Option<Array2<f64>>,
}

impl GraphSet {
    pub fn new(graphs: Vec<Graph>, graph_labels: Option<Array2<f64>>) -> Result<Self, GraphError> {
        if let Some(first) = graphs.first() {
            let f = first.signal_dim();
            if let Some((i, g)) = graphs.iter().enumerate().find(|(_, g)| g.signal_dim() != f) {
                return Err(GraphError::SignalDimMismatch {
                    index: i,
                    expected: f,
                    found: g.signal_dim(),
                });
            }
        }
        if let Some(labels) = &graph_labels {
            if labels.nrows() != graphs.len() {
                return Err(GraphError::Invalid(format!(
                    "graph label matrix has {} rows for {} graphs",
                    labels.nrows(),
                    graphs.len()
                )));
            }
        }
        Ok(GraphSet {
            graphs,
            graph_labels,
        })
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn graph_labels(&self) -> Option<&Array2<f64>> {
        self.graph_labels.as_ref()
    }

    pub fn signal_dim(&self) -> usize {
        self.graphs.first().map_or(0, Graph::signal_dim)
    }

    /// Single-task class per graph taken from label column 0.
    pub fn class_labels(&self) -> Option<Vec<usize>> {
        self.graph_labels
            .as_ref()
            .map(|m| m.column(0).iter().map(|&x| x.round().max(0.0) as usize).collect())
    }

    pub fn subset(&self, ids: &[usize]) -> GraphSet {
        GraphSet {
            graphs: ids.iter().map(|&i| self.graphs[i].clone()).collect(),
            graph_labels: self
                .graph_labels
                .as_ref()
                .map(|m| m.select(Axis(0), ids)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn path(n: usize) -> Graph {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        Graph::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn ego_radius_one_on_path_end() {
        let g = path(4);
        let ego = g.ego_subgraph(0, 1).unwrap();
        assert_eq!(ego.n_nodes(), 2);
        assert_eq!(ego.n_edges(), 1);
    }

    #[test]
    fn ego_radius_two_covers_path() {
        let g = path(4);
        let nodes = g.ego_nodes(1, 2).unwrap();
        let set: BTreeSet<_> = nodes.iter().copied().collect();
        assert_eq!(set, BTreeSet::from([0, 1, 2, 3]));
        assert_eq!(nodes[0], 1);
    }

    #[test]
    fn ego_of_isolated_node() {
        let g = Graph::from_edges(3, &[(1, 2)]).unwrap();
        let ego = g.ego_subgraph(0, 3).unwrap();
        assert_eq!(ego.n_nodes(), 1);
        assert_eq!(ego.n_edges(), 0);
    }

    #[test]
    fn ego_rejects_bad_center() {
        let g = path(3);
        assert!(matches!(
            g.ego_subgraph(7, 1),
            Err(GraphError::InvalidNode { node: 7, .. })
        ));
    }

    #[test]
    fn ego_copies_center_signal_first() {
        let x = array![[0.0], [1.0], [2.0]];
        let g = Graph::new(3, vec![(0, 1), (1, 2)], x, None).unwrap();
        let ego = g.ego_subgraph(2, 1).unwrap();
        assert_eq!(ego.signals()[[0, 0]], 2.0);
        assert_eq!(ego.signals()[[1, 0]], 1.0);
    }

    #[test]
    fn constructor_rejects_self_loop_and_duplicates() {
        assert!(matches!(
            Graph::from_edges(3, &[(2, 2)]),
            Err(GraphError::SelfLoop { node: 2 })
        ));
        assert!(matches!(
            Graph::from_edges(3, &[(0, 1), (1, 0)]),
            Err(GraphError::DuplicateEdge { u: 0, v: 1 })
        ));
    }

    #[test]
    fn validate_reports_violations() {
        assert!(path(3).validate().is_empty());

        let mut g = path(3);
        g.edges.push((2, 2));
        assert_eq!(g.validate().len(), 1);

        let mut g = path(3);
        g.signals = Array2::zeros((2, 1));
        assert_eq!(g.validate().len(), 1);
    }

    #[test]
    fn components_of_disjoint_union() {
        let g = Graph::from_edges(5, &[(0, 1), (2, 3)]).unwrap();
        let (count, comp) = g.connected_components();
        assert_eq!(count, 3);
        assert_eq!(comp, vec![0, 0, 1, 1, 2]);
    }

    #[test]
    fn graph_set_rejects_mixed_dims() {
        let a = Graph::new(1, vec![], Array2::zeros((1, 2)), None).unwrap();
        let b = Graph::new(1, vec![], Array2::zeros((1, 3)), None).unwrap();
        assert!(GraphSet::new(vec![a, b], None).is_err());
    }
}
