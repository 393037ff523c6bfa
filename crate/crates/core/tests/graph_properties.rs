use std::collections::VecDeque;

use nalgebra::DMatrix;
use proptest::prelude::*;

use samslr_core::graph::{normalize_adjacency, Layout, NodeSelection, PartitionStrategy, SkeletonGraph};
use samslr_core::Error;

fn bfs(n: usize, edges: &[(usize, usize)], src: usize) -> Vec<Option<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut dist = vec![None; n];
    dist[src] = Some(0);
    let mut q = VecDeque::from([src]);
    while let Some(v) = q.pop_front() {
        for &w in &adj[v] {
            if dist[w].is_none() {
                dist[w] = Some(dist[v].unwrap() + 1);
                q.push_back(w);
            }
        }
    }
    dist
}

fn find(parent: &mut [usize], x: usize) -> usize {
    if parent[x] != x {
        let r = find(parent, parent[x]);
        parent[x] = r;
    }
    parent[x]
}

fn layout(n: usize, edges: &[(usize, usize)]) -> Layout {
    Layout {
        nodes: (0..n).map(|i| (i, format!("n{i}"))).collect(),
        edges: edges.to_vec(),
        ..Layout::default()
    }
}

fn spectral_radius(m: &ndarray::Array2<f64>) -> f64 {
    let n = m.nrows();
    let d = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    d.symmetric_eigen().eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Random simple graphs: a random spanning tree plus extra edges.
fn random_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..12).prop_flat_map(|n| {
        (
            Just(n),
            proptest::collection::vec(any::<u32>(), n - 1),
            proptest::collection::vec((0..n, 0..n), 0..n),
        )
            .prop_map(|(n, parents, extra)| {
                let mut edges: Vec<(usize, usize)> =
                    (1..n).map(|v| ((parents[v - 1] as usize) % v, v)).collect();
                for (a, b) in extra {
                    let e = (a.min(b), a.max(b));
                    if a != b && !edges.iter().any(|&(x, y)| (x.min(y), x.max(y)) == e) {
                        edges.push(e);
                    }
                }
                (n, edges)
            })
    })
}

#[test]
fn wholebody_edge_count_matches_layout_file() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/layouts/wholebody133.txt")).unwrap();
    let edge_lines = text
        .lines()
        .filter(|l| l.split_whitespace().next() == Some("edge"))
        .count();
    let g = SkeletonGraph::wholebody();
    assert_eq!(g.num_nodes(), 133);
    assert_eq!(g.num_edges(), edge_lines);
}

#[test]
fn default_graph_bones_form_a_tree() {
    let g = SkeletonGraph::slr27();
    assert_eq!(g.num_nodes(), 27);
    let bones: Vec<_> = g.bones().collect();
    assert_eq!(bones.len(), 26);
    let mut uf: Vec<usize> = (0..27).collect();
    for &(a, b) in &bones {
        assert!(g.has_edge(a, b), "bone ({a}, {b}) is not an edge");
        let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
        assert_ne!(ra, rb, "bone ({a}, {b}) closes a cycle");
        uf[ra] = rb;
    }
    let r = find(&mut uf, 0);
    assert!((0..27).all(|v| find(&mut uf, v) == r));
    assert_eq!(g.labels()[g.root()], "nose");
}

#[test]
fn default_graph_wrist_distance_matches_bfs() {
    let g = SkeletonGraph::slr27();
    let edges: Vec<_> = g.edges().collect();
    let lbl = |name: &str| g.labels().iter().position(|l| l == name).unwrap();
    let (l, r) = (lbl("left_hand_root"), lbl("right_hand_root"));
    let want = bfs(27, &edges, l)[r].unwrap();
    assert_eq!(g.node_distance(l, r).unwrap(), want);
    assert_eq!(g.node_distance(r, l).unwrap(), want);
}

#[test]
fn default_uniform_operator_is_symmetric_and_contractive() {
    let g = SkeletonGraph::slr27();
    let a = &normalize_adjacency(&g, PartitionStrategy::Uniform).partitions[0];
    let asym = (a - &a.t()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(asym <= 1e-12);
    assert!(spectral_radius(a) <= 1.0 + 1e-9);
}

#[test]
fn two_and_one_node_operators() {
    let two = SkeletonGraph::build(&layout(2, &[(0, 1)])).unwrap();
    let a = &normalize_adjacency(&two, PartitionStrategy::Uniform).partitions[0];
    for v in a.iter() {
        assert!((v - 0.5).abs() <= f64::EPSILON);
    }
    let one = SkeletonGraph::build(&layout(1, &[])).unwrap();
    assert_eq!(normalize_adjacency(&one, PartitionStrategy::Uniform).partitions[0][[0, 0]], 1.0);
}

#[test]
fn disconnected_pair_is_unreachable() {
    let g = SkeletonGraph::build(&layout(3, &[(0, 1)])).unwrap();
    assert!(matches!(g.node_distance(0, 2), Err(Error::Unreachable(0, 2))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn distances_match_bfs_and_form_a_metric((n, edges) in random_graph()) {
        let g = SkeletonGraph::build(&layout(n, &edges)).unwrap();
        let d: Vec<Vec<usize>> = (0..n).map(|i| bfs(n, &edges, i).into_iter().map(Option::unwrap).collect()).collect();
        for i in 0..n {
            for j in 0..n {
                let dij = g.node_distance(i, j).unwrap();
                prop_assert_eq!(dij, d[i][j]);
                prop_assert_eq!(dij, g.node_distance(j, i).unwrap());
                prop_assert_eq!(dij == 0, i == j);
                for k in 0..n {
                    prop_assert!(dij <= d[i][k] + d[k][j]);
                }
            }
        }
    }

    #[test]
    fn uniform_operator_is_symmetric_with_unit_spectral_bound((n, edges) in random_graph()) {
        let g = SkeletonGraph::build(&layout(n, &edges)).unwrap();
        let a = &normalize_adjacency(&g, PartitionStrategy::Uniform).partitions[0];
        for i in 0..n {
            for j in 0..n {
                prop_assert!((a[[i, j]] - a[[j, i]]).abs() <= 1e-12);
                prop_assert!(a[[i, j]] >= 0.0);
            }
        }
        prop_assert!(spectral_radius(a) <= 1.0 + 1e-9);
    }

    #[test]
    fn spatial_partitions_share_uniform_support((n, edges) in random_graph()) {
        let g = SkeletonGraph::build(&layout(n, &edges)).unwrap();
        let uni = &normalize_adjacency(&g, PartitionStrategy::Uniform).partitions[0];
        let sp = normalize_adjacency(&g, PartitionStrategy::Spatial);
        prop_assert_eq!(sp.num_partitions(), 3);
        let total = sp.total();
        for (u, s) in uni.iter().zip(total.iter()) {
            prop_assert!(s.is_finite());
            prop_assert_eq!(*u != 0.0, *s != 0.0);
        }
        for p in &sp.partitions {
            prop_assert!(p.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn reduction_commutes_with_adjacency_restriction(
        (n, edges) in random_graph(),
        mask in proptest::collection::vec(any::<bool>(), 12),
    ) {
        let full = SkeletonGraph::build(&layout(n, &edges)).unwrap();
        let kept: Vec<usize> = (0..n).filter(|&i| mask[i] || i == 0).collect();
        let sel = NodeSelection::new(kept.clone(), Vec::new());
        // Only connected induced subgraphs are valid reductions.
        if let Ok(red) = full.reduce(&sel) {
            let a_full = full.adjacency();
            let a_red = red.adjacency();
            for (ri, &i) in kept.iter().enumerate() {
                for (rj, &j) in kept.iter().enumerate() {
                    prop_assert_eq!(a_red[[ri, rj]], a_full[[i, j]]);
                }
            }
            prop_assert_eq!(red.bones().count(), kept.len() - 1);
        }
    }
}
