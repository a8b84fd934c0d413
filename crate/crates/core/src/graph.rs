//! Graph structures computed on instances: minimum spanning tree, directed
//! k-nearest-neighbor graph with mutual (strong) and one-sided (weak) edge
//! classification, and connected-component analysis over either edge kind.
//!
//! All algorithms are dense and O(n^2): at the instance sizes used here
//! (around a thousand nodes) that is on the order of 10^6 distance
//! evaluations per instance, so spatial indexing would add complexity
//! without a measurable payoff. Tie-breaking is deterministic everywhere so
//! that downstream features and golden tests are reproducible.

use std::collections::HashSet;

use crate::error::Error;
use crate::instance::Instance;
use crate::Result;

/// Minimum spanning tree of the complete Euclidean graph over an instance.
///
/// Edges are normalized to `i < j` and sorted by `(i, j)`. Among equal-weight
/// candidate edges the one with the smaller `(min-index, max-index)` pair is
/// preferred, so the edge set is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Mst {
    /// `(i, j, length)` with `i < j`, sorted by `(i, j)`.
    pub edges: Vec<(usize, usize, f64)>,
    /// Per-node edge count; sums to `2 * (n - 1)`.
    pub degrees: Vec<usize>,
}

impl Mst {
    /// Total weight, summed in sorted edge order for reproducibility.
    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|&(_, _, w)| w).sum()
    }

    /// Edge lengths in sorted edge order.
    pub fn edge_lengths(&self) -> Vec<f64> {
        self.edges.iter().map(|&(_, _, w)| w).collect()
    }
}

/// Classification of a directed k-NN edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeClass {
    /// The reverse edge exists as well (mutual neighbors).
    Strong,
    /// One-sided link.
    Weak,
}

/// Directed k-nearest-neighbor graph.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    /// Per node, its `k` nearest neighbors sorted by ascending distance
    /// (distance ties broken by ascending node index).
    pub out_neighbors: Vec<Vec<usize>>,
    /// Class of each directed edge, aligned with `out_neighbors`.
    pub edge_class: Vec<Vec<EdgeClass>>,
    /// Length of each directed edge, aligned with `out_neighbors`.
    pub edge_lengths: Vec<Vec<f64>>,
}

impl KnnGraph {
    pub fn n(&self) -> usize {
        self.out_neighbors.len()
    }

    /// Number of directed edges classified strong. Always even: each mutual
    /// pair contributes two directed edges.
    pub fn strong_directed_edge_count(&self) -> usize {
        self.edge_class
            .iter()
            .flatten()
            .filter(|c| **c == EdgeClass::Strong)
            .count()
    }

    /// All directed edge lengths in node order, `n * k` values.
    pub fn all_edge_lengths(&self) -> Vec<f64> {
        self.edge_lengths.iter().flatten().copied().collect()
    }
}

/// A partition of the node set into connected components.
///
/// Component ids are assigned in order of first appearance by node index, so
/// the labeling is deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentDecomposition {
    /// Per-node component label in `0..sizes.len()`.
    pub component_id: Vec<usize>,
    /// Size of each component; sums to `n`.
    pub sizes: Vec<usize>,
}

impl ComponentDecomposition {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Dense Prim MST over the complete Euclidean graph. O(n^2) time, O(n) memory.
pub fn minimum_spanning_tree(inst: &Instance) -> Mst {
    let n = inst.n();
    let mut in_tree = vec![false; n];
    // Best known connection of each outside node to the tree.
    let mut best_weight = vec![f64::INFINITY; n];
    let mut best_from = vec![usize::MAX; n];

    in_tree[0] = true;
    for v in 1..n {
        best_weight[v] = inst.distance_unchecked(0, v);
        best_from[v] = 0;
    }

    let mut edges = Vec::with_capacity(n - 1);
    for _ in 1..n {
        // Pick the outside node with the lightest connection; ties prefer the
        // smaller (min-index, max-index) edge pair.
        let mut pick = usize::MAX;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            if pick == usize::MAX {
                pick = v;
                continue;
            }
            let better = match best_weight[v].partial_cmp(&best_weight[pick]).unwrap() {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal => edge_pair(best_from[v], v) < edge_pair(best_from[pick], pick),
            };
            if better {
                pick = v;
            }
        }
        let (i, j) = edge_pair(best_from[pick], pick);
        edges.push((i, j, best_weight[pick]));
        in_tree[pick] = true;

        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let w = inst.distance_unchecked(pick, v);
            let replace = w < best_weight[v]
                || (w == best_weight[v] && edge_pair(pick, v) < edge_pair(best_from[v], v));
            if replace {
                best_weight[v] = w;
                best_from[v] = pick;
            }
        }
    }

    edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut degrees = vec![0usize; n];
    for &(i, j, _) in &edges {
        degrees[i] += 1;
        degrees[j] += 1;
    }
    Mst { edges, degrees }
}

#[inline]
fn edge_pair(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Directed k-nearest-neighbor graph with strong/weak edge classification.
pub fn knn_graph(inst: &Instance, k: usize) -> Result<KnnGraph> {
    let n = inst.n();
    if k < 1 || k >= n {
        return Err(Error::invalid(format!(
            "knn_graph needs 1 <= k < n, got k={k}, n={n}"
        )));
    }

    let mut out_neighbors = Vec::with_capacity(n);
    let mut edge_lengths = Vec::with_capacity(n);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scratch.clear();
        for j in 0..n {
            if j != i {
                scratch.push((inst.distance_unchecked(i, j), j));
            }
        }
        // Ascending distance, ties by ascending node index.
        scratch.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out_neighbors.push(scratch[..k].iter().map(|&(_, j)| j).collect::<Vec<_>>());
        edge_lengths.push(scratch[..k].iter().map(|&(d, _)| d).collect::<Vec<_>>());
    }

    let directed: HashSet<(usize, usize)> = out_neighbors
        .iter()
        .enumerate()
        .flat_map(|(i, nbrs)| nbrs.iter().map(move |&j| (i, j)))
        .collect();
    let edge_class = out_neighbors
        .iter()
        .enumerate()
        .map(|(i, nbrs)| {
            nbrs.iter()
                .map(|&j| {
                    if directed.contains(&(j, i)) {
                        EdgeClass::Strong
                    } else {
                        EdgeClass::Weak
                    }
                })
                .collect()
        })
        .collect();

    Ok(KnnGraph {
        k,
        out_neighbors,
        edge_class,
        edge_lengths,
    })
}

/// Connected components of the undirected graph induced by strong (mutual)
/// edges only. Nodes without strong edges form singleton components.
pub fn strong_components(g: &KnnGraph) -> ComponentDecomposition {
    components_from_edges(g, true)
}

/// Connected components of the undirected graph induced by all directed
/// edges, ignoring direction.
pub fn weak_components(g: &KnnGraph) -> ComponentDecomposition {
    components_from_edges(g, false)
}

fn components_from_edges(g: &KnnGraph, strong_only: bool) -> ComponentDecomposition {
    let n = g.n();
    let mut dsu = Dsu::new(n);
    for i in 0..n {
        for (idx, &j) in g.out_neighbors[i].iter().enumerate() {
            if !strong_only || g.edge_class[i][idx] == EdgeClass::Strong {
                dsu.union(i, j);
            }
        }
    }

    let mut component_id = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    for v in 0..n {
        let root = dsu.find(v);
        if component_id[root] == usize::MAX {
            component_id[root] = sizes.len();
            sizes.push(0);
        }
        let label = component_id[root];
        component_id[v] = label;
        sizes[label] += 1;
    }
    ComponentDecomposition { component_id, sizes }
}

struct Dsu {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(nodes: &[(f64, f64)]) -> Instance {
        Instance::new("t", nodes.to_vec()).unwrap()
    }

    /// Two tight 5-point clusters, far apart; intra-cluster distances are all
    /// smaller than any inter-cluster distance.
    fn two_clusters() -> Instance {
        let mut nodes = Vec::new();
        for i in 0..5 {
            nodes.push((0.01 * i as f64, 0.0));
        }
        for i in 0..5 {
            nodes.push((10.0 + 0.01 * i as f64, 0.0));
        }
        inst(&nodes)
    }

    #[test]
    fn mst_collinear_is_forced() {
        let mst = minimum_spanning_tree(&inst(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]));
        let pairs: Vec<(usize, usize)> = mst.edges.iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(pairs, vec![(0, 1), (1, 2)]);
        assert_eq!(mst.total_weight(), 2.0);
        assert_eq!(mst.degrees, vec![1, 2, 1]);
    }

    #[test]
    fn mst_unit_square_tie_break() {
        // Corners in row-major order; all four side edges tie at weight 1.
        let mst = minimum_spanning_tree(&inst(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]));
        let pairs: Vec<(usize, usize)> = mst.edges.iter().map(|&(i, j, _)| (i, j)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 3)]);
        assert_eq!(mst.total_weight(), 3.0);
    }

    #[test]
    fn mst_degree_sum_is_2n_minus_2() {
        let inst = crate::instance::generate_rue(57, 11).unwrap();
        let mst = minimum_spanning_tree(&inst);
        assert_eq!(mst.edges.len(), 56);
        assert_eq!(mst.degrees.iter().sum::<usize>(), 2 * 56);
    }

    #[test]
    fn knn_collinear_classes() {
        let g = knn_graph(&inst(&[(0.0, 0.0), (1.0, 0.0), (3.0, 0.0)]), 1).unwrap();
        assert_eq!(g.out_neighbors, vec![vec![1], vec![0], vec![1]]);
        assert_eq!(g.edge_class[0][0], EdgeClass::Strong);
        assert_eq!(g.edge_class[1][0], EdgeClass::Strong);
        assert_eq!(g.edge_class[2][0], EdgeClass::Weak);
    }

    #[test]
    fn knn_complete_graph_is_all_strong() {
        let instance = crate::instance::generate_rue(8, 3).unwrap();
        let g = knn_graph(&instance, 7).unwrap();
        assert!(g
            .edge_class
            .iter()
            .flatten()
            .all(|&c| c == EdgeClass::Strong));
        assert_eq!(g.strong_directed_edge_count(), 8 * 7);
    }

    #[test]
    fn knn_tie_prefers_lower_index() {
        let g = knn_graph(&inst(&[(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0)]), 1).unwrap();
        assert_eq!(g.out_neighbors[0], vec![1]);
    }

    #[test]
    fn knn_rejects_bad_k() {
        let instance = inst(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert!(knn_graph(&instance, 0).is_err());
        assert!(knn_graph(&instance, 3).is_err());
    }

    #[test]
    fn strong_components_no_strong_edges() {
        // Chain with growing gaps: every 1-NN edge points left, all one-sided
        // except the first pair.
        let g = knn_graph(&inst(&[(0.0, 0.0), (1.0, 0.0), (3.0, 0.0), (7.0, 0.0)]), 1).unwrap();
        let strong = strong_components(&g);
        assert_eq!(strong.count(), 3); // {0,1} mutual, {2}, {3}
        let weak = weak_components(&g);
        assert_eq!(weak.count(), 1);
    }

    #[test]
    fn two_cluster_components() {
        let g = knn_graph(&two_clusters(), 4).unwrap();
        let strong = strong_components(&g);
        assert_eq!(strong.sizes, vec![5, 5]);
        let weak = weak_components(&g);
        assert_eq!(weak.sizes, vec![5, 5]);
    }

    #[test]
    fn complete_case_single_component() {
        let instance = crate::instance::generate_rue(9, 5).unwrap();
        let g = knn_graph(&instance, 8).unwrap();
        assert_eq!(strong_components(&g).sizes, vec![9]);
        assert_eq!(weak_components(&g).sizes, vec![9]);
    }

    #[test]
    fn weak_collinear_single_component() {
        let g = knn_graph(&inst(&[(0.0, 0.0), (1.0, 0.0), (3.0, 0.0)]), 1).unwrap();
        assert_eq!(weak_components(&g).sizes, vec![3]);
    }

    #[test]
    fn strong_count_even_and_nested_in_weak() {
        for seed in 0..5 {
            let instance = crate::instance::generate_rue(40, seed).unwrap();
            let g = knn_graph(&instance, 5).unwrap();
            assert_eq!(g.strong_directed_edge_count() % 2, 0);
            let strong = strong_components(&g);
            let weak = weak_components(&g);
            // Every strong component sits inside exactly one weak component.
            let mut map = vec![usize::MAX; strong.count()];
            for v in 0..instance.n() {
                let s = strong.component_id[v];
                let w = weak.component_id[v];
                if map[s] == usize::MAX {
                    map[s] = w;
                } else {
                    assert_eq!(map[s], w);
                }
            }
        }
    }
}
