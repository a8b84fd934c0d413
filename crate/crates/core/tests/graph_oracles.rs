//! Exhaustive oracles for the graph structures: the MST is checked against a
//! full enumeration of all labeled spanning trees, and the clustered
//! generator is checked with a single-linkage clustering oracle.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tspas_core::graph::{knn_graph, minimum_spanning_tree, strong_components, weak_components};
use tspas_core::instance::{generate_clustered, Instance};

/// Decodes one labeled tree on n nodes from its sequence representation;
/// iterating over every sequence enumerates each of the n^(n-2) trees once.
fn tree_from_sequence(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &v in seq {
        degree[v] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &v in seq {
        let leaf = (0..n).find(|&u| degree[u] == 1).unwrap();
        edges.push((leaf.min(v), leaf.max(v)));
        degree[leaf] -= 1;
        degree[v] -= 1;
    }
    let mut last = (0..n).filter(|&u| degree[u] == 1);
    let (a, b) = (last.next().unwrap(), last.next().unwrap());
    edges.push((a.min(b), a.max(b)));
    edges
}

/// Total weight summed in sorted edge order, the same canonical order the
/// implementation uses, so equal edge sets give bit-equal weights.
fn canonical_weight(inst: &Instance, edges: &[(usize, usize)]) -> f64 {
    let mut sorted = edges.to_vec();
    sorted.sort();
    sorted
        .iter()
        .map(|&(i, j)| inst.distance(i, j).unwrap())
        .sum()
}

fn exhaustive_min_spanning_weight(inst: &Instance) -> f64 {
    let n = inst.n();
    let seq_len = n - 2;
    let mut best = f64::INFINITY;
    let total = (n as u64).pow(seq_len as u32);
    let mut seq = vec![0usize; seq_len];
    for code in 0..total {
        let mut rest = code;
        for slot in seq.iter_mut() {
            *slot = (rest % n as u64) as usize;
            rest /= n as u64;
        }
        let edges = tree_from_sequence(&seq, n);
        let weight = canonical_weight(inst, &edges);
        if weight < best {
            best = weight;
        }
    }
    best
}

#[test]
fn mst_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let n = rng.random_range(4..=7);
        let nodes: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let inst = Instance::new("oracle", nodes).unwrap();
        let mst = minimum_spanning_tree(&inst);
        let pairs: Vec<(usize, usize)> = mst.edges.iter().map(|&(i, j, _)| (i, j)).collect();
        let implementation = canonical_weight(&inst, &pairs);
        let oracle = exhaustive_min_spanning_weight(&inst);
        assert_eq!(
            implementation.to_bits(),
            oracle.to_bits(),
            "n={n}: {implementation} vs {oracle}"
        );
    }
}

#[test]
fn unit_square_brute_force_all_16_trees() {
    let inst = Instance::new(
        "square",
        vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)],
    )
    .unwrap();
    // All 4^2 = 16 sequences of length 2 enumerate the 16 labeled trees on
    // four nodes.
    let mut weights = Vec::new();
    let mut count = 0;
    for a in 0..4 {
        for b in 0..4 {
            let edges = tree_from_sequence(&[a, b], 4);
            weights.push(canonical_weight(&inst, &edges));
            count += 1;
        }
    }
    assert_eq!(count, 16);
    let best = weights.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(best, 3.0);
    let mst = minimum_spanning_tree(&inst);
    assert_eq!(mst.total_weight(), 3.0);
}

/// Single-linkage clustering into `k` groups: drop the `k - 1` heaviest MST
/// edges (the single-linkage dendrogram is exactly the MST) and return the
/// component assignment plus the cut threshold pair (heaviest kept, lightest
/// dropped).
fn single_linkage_clusters(inst: &Instance, k: usize) -> (Vec<usize>, f64, f64) {
    let mst = minimum_spanning_tree(inst);
    let mut by_weight = mst.edges.clone();
    by_weight.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap());
    let kept = &by_weight[..by_weight.len() - (k - 1)];
    let dropped = &by_weight[by_weight.len() - (k - 1)..];
    let max_kept = kept.last().map(|e| e.2).unwrap_or(0.0);
    let min_dropped = dropped.first().map(|e| e.2).unwrap_or(f64::INFINITY);

    let n = inst.n();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(i, j, _) in kept {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
        }
    }
    let assignment = (0..n).map(|v| find(&mut parent, v)).collect();
    (assignment, max_kept, min_dropped)
}

#[test]
fn clustered_generator_recovers_groups() {
    let k = 4;
    let inst = generate_clustered(200, k, 0.02, 3).unwrap();
    let (assignment, max_kept, min_dropped) = single_linkage_clusters(&inst, k);
    // The cut sits on a clear gap: inter-cluster links dwarf intra-cluster
    // ones.
    assert!(
        min_dropped > 2.0 * max_kept,
        "no gap: kept up to {max_kept}, dropped from {min_dropped}"
    );

    // Purity of the recovered clusters against the round-robin ground truth.
    let mut by_cluster: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &c) in assignment.iter().enumerate() {
        by_cluster.entry(c).or_default().push(i % k);
    }
    assert_eq!(by_cluster.len(), k, "expected {k} recovered clusters");
    let mut pure = 0usize;
    for members in by_cluster.values() {
        let mut counts = vec![0usize; k];
        for &label in members {
            counts[label] += 1;
        }
        pure += counts.iter().max().unwrap();
    }
    let purity = pure as f64 / inst.n() as f64;
    assert!(purity >= 0.95, "purity = {purity}");
}

#[test]
fn two_far_clusters_have_clean_components() {
    // Nine points per cluster on small grids far apart; with k = 4 every
    // neighborhood stays inside its cluster.
    let mut nodes = Vec::new();
    for cy in 0..3 {
        for cx in 0..3 {
            nodes.push((cx as f64 * 0.013, cy as f64 * 0.017));
        }
    }
    for cy in 0..3 {
        for cx in 0..3 {
            nodes.push((5.0 + cx as f64 * 0.013, 7.0 + cy as f64 * 0.017));
        }
    }
    let inst = Instance::new("two", nodes).unwrap();
    let g = knn_graph(&inst, 4).unwrap();
    let strong = strong_components(&g);
    let weak = weak_components(&g);
    assert_eq!(weak.sizes, vec![9, 9]);
    // Strong components never straddle clusters.
    for v in 0..9 {
        for u in 9..18 {
            assert_ne!(strong.component_id[v], strong.component_id[u]);
        }
    }
}
