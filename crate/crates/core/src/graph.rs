//! Skeleton graphs: layout parsing, hop distances, node-subset reduction and
//! the normalized adjacency operators consumed by graph convolution.
//!
//! Layout files are line oriented:
//!
//! ```text
//! # comment
//! node <idx> <name>
//! edge <i> <j>
//! bone <src> <dst>
//! root <idx>
//! ```
//!
//! Node-selection files use the same grammar: `node` lines list the kept
//! indices (in the source layout's numbering) and `edge` lines add override
//! edges between kept nodes.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use ndarray::Array2;

use crate::error::{ensure, Error, Result};

const WHOLEBODY_LAYOUT: &str = include_str!("../layouts/wholebody133.txt");
const SLR27_SELECTION: &str = include_str!("../layouts/slr27.txt");

/// Raw layout as read from a file, before validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    pub nodes: Vec<(usize, String)>,
    pub edges: Vec<(usize, usize)>,
    pub bones: Vec<(usize, usize)>,
    pub root: Option<usize>,
}

impl Layout {
    pub fn parse(text: &str, origin: &str) -> Result<Layout> {
        let mut layout = Layout::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                msg,
            };
            let mut parts = line.split_whitespace();
            let keyword = parts.next().unwrap_or_default();
            let args: Vec<&str> = parts.collect();
            let index = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| err(format!("expected node index, got `{s}`")))
            };
            match (keyword, args.as_slice()) {
                ("node", [idx, name]) => layout.nodes.push((index(idx)?, name.to_string())),
                ("node", [idx]) => {
                    let i = index(idx)?;
                    layout.nodes.push((i, format!("node_{i}")))
                }
                ("edge", [a, b]) => layout.edges.push((index(a)?, index(b)?)),
                ("bone", [a, b]) => layout.bones.push((index(a)?, index(b)?)),
                ("root", [r]) => {
                    if layout.root.replace(index(r)?).is_some() {
                        return Err(err("duplicate root declaration".into()));
                    }
                }
                _ => return Err(err(format!("unrecognized line `{line}`"))),
            }
        }
        Ok(layout)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Layout> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Layout::parse(&text, &path.display().to_string())
    }

    /// Path layout `0 - 1 - ... - (n-1)` rooted at 0.
    pub fn chain(n: usize) -> Layout {
        Layout {
            nodes: (0..n).map(|i| (i, format!("n{i}"))).collect(),
            edges: (1..n).map(|i| (i - 1, i)).collect(),
            bones: (1..n).map(|i| (i - 1, i)).collect(),
            root: Some(0),
        }
    }
}

/// Undirected skeleton graph with an optional rooted bone tree.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    labels: Vec<String>,
    edges: BTreeSet<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    root: usize,
    /// Source node of every node's bone; `None` only at the root. Empty when
    /// the graph carries no bone tree.
    parents: Vec<Option<usize>>,
}

impl SkeletonGraph {
    /// Validates a layout and builds the graph. Node indices must be exactly
    /// `0..N`. When the layout lists no bones, a breadth-first spanning tree
    /// from the root is used if the graph is connected.
    pub fn build(layout: &Layout) -> Result<SkeletonGraph> {
        let n = layout.nodes.len();
        ensure!(n > 0, Error::Graph("layout has no nodes".into()));
        let mut labels = vec![None; n];
        for (idx, name) in &layout.nodes {
            ensure!(
                *idx < n,
                Error::Graph(format!("node index {idx} out of range for {n} nodes"))
            );
            ensure!(
                labels[*idx].is_none(),
                Error::Graph(format!("node {idx} declared twice"))
            );
            labels[*idx] = Some(name.clone());
        }
        let labels: Vec<String> = labels.into_iter().map(Option::unwrap).collect();

        let mut edges = BTreeSet::new();
        for &(a, b) in &layout.edges {
            ensure!(
                a < n && b < n,
                Error::Graph(format!("edge ({a}, {b}) references a node outside 0..{n}"))
            );
            ensure!(a != b, Error::Graph(format!("self-loop on node {a}")));
            ensure!(
                edges.insert((a.min(b), a.max(b))),
                Error::Graph(format!("duplicate edge ({a}, {b})"))
            );
        }
        let root = layout.root.unwrap_or(0);
        ensure!(root < n, Error::Graph(format!("root {root} out of range")));

        let mut graph = SkeletonGraph {
            labels,
            neighbors: neighbor_lists(n, &edges),
            edges,
            root,
            parents: Vec::new(),
        };
        graph.parents = if layout.bones.is_empty() {
            graph.spanning_tree().unwrap_or_default()
        } else {
            graph.validate_bones(&layout.bones)?
        };
        Ok(graph)
    }

    /// The 133-node whole-body layout shipped with the crate.
    pub fn wholebody() -> SkeletonGraph {
        let layout = Layout::parse(WHOLEBODY_LAYOUT, "wholebody133.txt")
            .expect("bundled layout parses");
        SkeletonGraph::build(&layout).expect("bundled layout is valid")
    }

    /// The default 27-node sign-language graph reduced from [`Self::wholebody`].
    pub fn slr27() -> SkeletonGraph {
        SkeletonGraph::wholebody()
            .reduce(&NodeSelection::slr27())
            .expect("bundled selection is valid")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<SkeletonGraph> {
        SkeletonGraph::build(&Layout::from_file(path)?)
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn has_bone_tree(&self) -> bool {
        !self.parents.is_empty()
    }

    /// Source node of `node`'s bone, `None` for the root or when the graph has
    /// no bone tree.
    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parents.get(node).copied().flatten()
    }

    /// Ordered `(source, target)` bone pairs.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(dst, p)| p.map(|src| (src, dst)))
    }

    /// Nodes ordered so that each node appears after its bone source.
    pub fn topological_order(&self) -> Vec<usize> {
        if self.parents.is_empty() {
            return Vec::new();
        }
        let mut children = vec![Vec::new(); self.num_nodes()];
        for (src, dst) in self.bones() {
            children[src].push(dst);
        }
        let mut order = Vec::with_capacity(self.num_nodes());
        let mut queue = VecDeque::from([self.root]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            queue.extend(children[u].iter().copied());
        }
        order
    }

    /// Dense 0/1 adjacency: 1 exactly where two nodes are one hop apart.
    pub fn adjacency(&self) -> Array2<f64> {
        let n = self.num_nodes();
        let mut a = Array2::zeros((n, n));
        for &(i, j) in &self.edges {
            a[[i, j]] = 1.0;
            a[[j, i]] = 1.0;
        }
        a
    }

    /// Hop counts from `source` to every node; `None` where unreachable.
    pub fn hops_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_nodes()];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for &v in &self.neighbors[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Length of the shortest path between `i` and `j`, in edges.
    pub fn node_distance(&self, i: usize, j: usize) -> Result<usize> {
        let n = self.num_nodes();
        ensure!(
            i < n && j < n,
            Error::InvalidArgument(format!("node pair ({i}, {j}) outside 0..{n}"))
        );
        self.hops_from(i)[j].ok_or(Error::Unreachable(i, j))
    }

    pub fn is_connected(&self) -> bool {
        self.hops_from(0).iter().all(Option::is_some)
    }

    /// Restricts the graph to the selected nodes and adds the selection's
    /// override edges. Each kept node's bone source becomes its nearest kept
    /// ancestor in the original tree.
    pub fn reduce(&self, selection: &NodeSelection) -> Result<SkeletonGraph> {
        let n = self.num_nodes();
        let kept = &selection.kept;
        ensure!(!kept.is_empty(), Error::Graph("empty node selection".into()));
        ensure!(
            kept.windows(2).all(|w| w[0] < w[1]),
            Error::Graph("selection indices must be unique and ascending".into())
        );
        ensure!(
            kept.iter().all(|&k| k < n),
            Error::Graph(format!("selection references a node outside 0..{n}"))
        );
        let remap: HashMap<usize, usize> =
            kept.iter().enumerate().map(|(new, &old)| (old, new)).collect();

        let mut edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter_map(|(a, b)| Some((*remap.get(a)?, *remap.get(b)?)))
            .collect();
        for &(a, b) in &selection.edge_overrides {
            let (Some(&ra), Some(&rb)) = (remap.get(&a), remap.get(&b)) else {
                return Err(Error::Graph(format!(
                    "override edge ({a}, {b}) touches a dropped node"
                )));
            };
            let key = (ra.min(rb), ra.max(rb));
            if !edges.iter().any(|&(x, y)| (x.min(y), x.max(y)) == key) {
                edges.push((ra, rb));
            }
        }

        let root = *remap.get(&self.root).ok_or_else(|| {
            Error::Graph(format!("selection drops the root node {}", self.root))
        })?;
        let mut bones = Vec::new();
        if self.has_bone_tree() {
            for (new, &old) in kept.iter().enumerate() {
                let mut cur = self.parent(old);
                while let Some(p) = cur {
                    if let Some(&np) = remap.get(&p) {
                        bones.push((np, new));
                        break;
                    }
                    cur = self.parent(p);
                }
            }
        }

        let layout = Layout {
            nodes: kept
                .iter()
                .enumerate()
                .map(|(new, &old)| (new, self.labels[old].clone()))
                .collect(),
            edges,
            bones,
            root: Some(root),
        };
        let reduced = SkeletonGraph::build(&layout)?;
        ensure!(
            reduced.is_connected(),
            Error::Graph("reduced graph is disconnected".into())
        );
        Ok(reduced)
    }

    /// For every node, the index of its left/right counterpart (matched by
    /// `left_`/`right_` name prefixes); unpaired nodes map to themselves.
    pub fn mirror_pairs(&self) -> Vec<usize> {
        let by_name: HashMap<&str, usize> = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        self.labels
            .iter()
            .enumerate()
            .map(|(i, label)| {
                let partner = if let Some(rest) = label.strip_prefix("left_") {
                    format!("right_{rest}")
                } else if let Some(rest) = label.strip_prefix("right_") {
                    format!("left_{rest}")
                } else {
                    return i;
                };
                by_name.get(partner.as_str()).copied().unwrap_or(i)
            })
            .collect()
    }

    fn spanning_tree(&self) -> Option<Vec<Option<usize>>> {
        let mut parents = vec![None; self.num_nodes()];
        let mut seen = vec![false; self.num_nodes()];
        seen[self.root] = true;
        let mut queue = VecDeque::from([self.root]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    parents[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        seen.iter().all(|&s| s).then_some(parents)
    }

    fn validate_bones(&self, bones: &[(usize, usize)]) -> Result<Vec<Option<usize>>> {
        let n = self.num_nodes();
        let mut parents = vec![None; n];
        for &(src, dst) in bones {
            ensure!(
                src < n && dst < n,
                Error::Graph(format!("bone ({src}, {dst}) out of range"))
            );
            ensure!(
                self.has_edge(src, dst),
                Error::Graph(format!("bone ({src}, {dst}) has no matching edge"))
            );
            ensure!(
                dst != self.root,
                Error::Graph(format!("root {dst} cannot be a bone target"))
            );
            ensure!(
                parents[dst].replace(src).is_none(),
                Error::Graph(format!("node {dst} has more than one bone source"))
            );
        }
        // Every non-root node must reach the root without revisiting a node.
        for start in 0..n {
            if start == self.root {
                continue;
            }
            let mut cur = start;
            for _ in 0..n {
                match parents[cur] {
                    Some(p) => cur = p,
                    None => break,
                }
            }
            ensure!(
                cur == self.root,
                Error::Graph(format!(
                    "bone topology is not a tree rooted at {}: node {start} does not reach it",
                    self.root
                ))
            );
        }
        Ok(parents)
    }
}

fn neighbor_lists(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<Vec<usize>> {
    let mut nb = vec![Vec::new(); n];
    for &(a, b) in edges {
        nb[a].push(b);
        nb[b].push(a);
    }
    for list in &mut nb {
        list.sort_unstable();
    }
    nb
}

/// Kept node indices plus extra edges reconnecting separated survivors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSelection {
    pub kept: Vec<usize>,
    pub edge_overrides: Vec<(usize, usize)>,
}

impl NodeSelection {
    pub fn new(mut kept: Vec<usize>, edge_overrides: Vec<(usize, usize)>) -> NodeSelection {
        kept.sort_unstable();
        NodeSelection {
            kept,
            edge_overrides,
        }
    }

    pub fn identity(n: usize) -> NodeSelection {
        NodeSelection::new((0..n).collect(), Vec::new())
    }

    /// Default selection: nose, shoulders, elbows, wrists, and per hand the
    /// root, five first knuckles and the thumb/index/middle/pinky tips.
    pub fn slr27() -> NodeSelection {
        let layout = Layout::parse(SLR27_SELECTION, "slr27.txt").expect("bundled selection parses");
        NodeSelection::from_layout(&layout).expect("bundled selection is valid")
    }

    pub fn from_layout(layout: &Layout) -> Result<NodeSelection> {
        ensure!(
            layout.bones.is_empty() && layout.root.is_none(),
            Error::Graph("node selections take only `node` and `edge` lines".into())
        );
        let mut kept: Vec<usize> = layout.nodes.iter().map(|(i, _)| *i).collect();
        kept.sort_unstable();
        let before = kept.len();
        kept.dedup();
        ensure!(
            kept.len() == before,
            Error::Graph("duplicate index in node selection".into())
        );
        Ok(NodeSelection {
            kept,
            edge_overrides: layout.edges.clone(),
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<NodeSelection> {
        NodeSelection::from_layout(&Layout::from_file(path)?)
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionStrategy {
    /// Single operator `D^-1/2 (A + I) D^-1/2`.
    #[default]
    Uniform,
    /// Self / centripetal / centrifugal subsets relative to the root node.
    Spatial,
}

impl std::str::FromStr for PartitionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(PartitionStrategy::Uniform),
            "spatial" => Ok(PartitionStrategy::Spatial),
            other => Err(Error::InvalidArgument(format!(
                "unknown partition strategy `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub partitions: Vec<Array2<f64>>,
    pub strategy: PartitionStrategy,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.partitions[0].nrows()
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    /// Entry-wise sum of all partitions.
    pub fn total(&self) -> Array2<f64> {
        let mut sum = Array2::zeros(self.partitions[0].raw_dim());
        for p in &self.partitions {
            sum += p;
        }
        sum
    }
}

/// Builds the normalized graph operators for `graph`.
///
/// Entry `[v, w]` weights the message from node `v` into node `w`. Degrees
/// always come from `A + I`, so every degree is at least one.
pub fn normalize_adjacency(graph: &SkeletonGraph, strategy: PartitionStrategy) -> NormalizedAdjacency {
    let n = graph.num_nodes();
    let mut a_hat = graph.adjacency();
    for i in 0..n {
        a_hat[[i, i]] = 1.0;
    }
    let degree: Vec<f64> = a_hat.rows().into_iter().map(|r| r.sum()).collect();

    let partitions = match strategy {
        PartitionStrategy::Uniform => {
            let inv_sqrt: Vec<f64> = degree.iter().map(|d| d.sqrt().recip()).collect();
            let m = Array2::from_shape_fn((n, n), |(i, j)| inv_sqrt[i] * a_hat[[i, j]] * inv_sqrt[j]);
            vec![m]
        }
        PartitionStrategy::Spatial => {
            let center = graph.hops_from(graph.root());
            let level = |i: usize| center[i].unwrap_or(usize::MAX);
            let mut parts = vec![Array2::zeros((n, n)); 3];
            for v in 0..n {
                for w in 0..n {
                    if a_hat[[v, w]] == 0.0 {
                        continue;
                    }
                    // Column normalization: incoming messages to w average out.
                    let value = a_hat[[v, w]] / degree[w];
                    let k = match level(v).cmp(&level(w)) {
                        std::cmp::Ordering::Equal => 0,
                        std::cmp::Ordering::Greater => 1,
                        std::cmp::Ordering::Less => 2,
                    };
                    parts[k][[v, w]] = value;
                }
            }
            parts
        }
    };
    debug_assert!(partitions.iter().all(|p| p.iter().all(|x| x.is_finite())));
    NormalizedAdjacency {
        partitions,
        strategy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_adjacency() {
        let g = SkeletonGraph::build(&Layout::chain(3)).unwrap();
        let a = g.adjacency();
        assert_eq!(a.row(0).to_vec(), vec![0.0, 1.0, 0.0]);
        assert_eq!(a.row(1).to_vec(), vec![1.0, 0.0, 1.0]);
        assert_eq!(a.row(2).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn single_node() {
        let g = SkeletonGraph::build(&Layout::chain(1)).unwrap();
        assert_eq!(g.adjacency(), Array2::<f64>::zeros((1, 1)));
        let norm = normalize_adjacency(&g, PartitionStrategy::Uniform);
        assert_eq!(norm.partitions[0][[0, 0]], 1.0);
    }

    #[test]
    fn two_nodes_uniform_is_all_half() {
        let g = SkeletonGraph::build(&Layout::chain(2)).unwrap();
        let norm = normalize_adjacency(&g, PartitionStrategy::Uniform);
        for x in norm.partitions[0].iter() {
            assert!((x - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_malformed_layouts() {
        let mut dup = Layout::chain(3);
        dup.edges.push((1, 0));
        assert!(matches!(SkeletonGraph::build(&dup), Err(Error::Graph(_))));

        let mut oob = Layout::chain(3);
        oob.edges.push((0, 7));
        assert!(matches!(SkeletonGraph::build(&oob), Err(Error::Graph(_))));

        let mut two_parents = Layout::chain(3);
        two_parents.edges.push((0, 2));
        two_parents.bones.push((0, 2));
        assert!(SkeletonGraph::build(&two_parents).is_err());

        let mut orphan_bone = Layout::chain(3);
        orphan_bone.bones = vec![(0, 1), (0, 2)];
        assert!(SkeletonGraph::build(&orphan_bone).is_err());

        assert!(Layout::parse("edge 0", "x").is_err());
        assert!(Layout::parse("vertex 0 a", "x").is_err());
    }

    #[test]
    fn distances_on_chain() {
        let g = SkeletonGraph::build(&Layout::chain(3)).unwrap();
        assert_eq!(g.node_distance(0, 2).unwrap(), 2);
        assert_eq!(g.node_distance(1, 1).unwrap(), 0);
    }

    #[test]
    fn unreachable_pair() {
        let layout = Layout {
            nodes: vec![(0, "a".into()), (1, "b".into())],
            ..Layout::default()
        };
        let g = SkeletonGraph::build(&layout).unwrap();
        assert!(!g.has_bone_tree());
        assert!(matches!(g.node_distance(0, 1), Err(Error::Unreachable(0, 1))));
    }

    #[test]
    fn reduce_with_override() {
        let g = SkeletonGraph::build(&Layout::chain(3)).unwrap();
        let r = g.reduce(&NodeSelection::new(vec![0, 2], vec![(0, 2)])).unwrap();
        assert_eq!(r.num_nodes(), 2);
        assert_eq!(r.num_edges(), 1);
        assert_eq!(r.bones().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn reduce_identity() {
        let g = SkeletonGraph::wholebody();
        let r = g.reduce(&NodeSelection::identity(g.num_nodes())).unwrap();
        assert_eq!(r, g);
    }

    #[test]
    fn reduce_rejects_disconnected() {
        let g = SkeletonGraph::build(&Layout::chain(3)).unwrap();
        let err = g.reduce(&NodeSelection::new(vec![0, 2], vec![])).unwrap_err();
        assert!(matches!(err, Error::Graph(_)));
    }

    #[test]
    fn slr27_shape() {
        let g = SkeletonGraph::slr27();
        assert_eq!(g.num_nodes(), 27);
        assert_eq!(g.bones().count(), 26);
        assert_eq!(g.labels()[g.root()], "nose");
        assert!(g.is_connected());
        let mirror = g.mirror_pairs();
        for (i, &p) in mirror.iter().enumerate() {
            assert_eq!(mirror[p], i);
        }
        assert_eq!(mirror[g.root()], g.root());
    }

    #[test]
    fn spatial_partitions_cover_uniform_support() {
        let g = SkeletonGraph::slr27();
        let uni = normalize_adjacency(&g, PartitionStrategy::Uniform);
        let sp = normalize_adjacency(&g, PartitionStrategy::Spatial);
        assert_eq!(sp.num_partitions(), 3);
        let total = sp.total();
        for (a, b) in total.iter().zip(uni.partitions[0].iter()) {
            assert_eq!(*a != 0.0, *b != 0.0);
        }
        // columns of the summed operator average incoming messages
        for col in total.columns() {
            assert!((col.sum() - 1.0).abs() < 1e-12);
        }
    }
}
