//! Bipartite interaction graphs: ingestion, filtering, OOD splits, noise
//! injection, and betweenness centrality.

mod build;
mod centrality;
mod io;
mod noise;
mod split;

pub use build::{build_graph, normalized_adjacency, PositiveRule};
pub use centrality::betweenness_centrality;
pub use io::{load_interactions, load_split, save_split, FileFormat};
pub use noise::inject_noise;
pub use split::{split_exposure, split_popularity, split_temporal};

use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("all interactions filtered out; graph is empty")]
    EmptyGraph,
    #[error("invalid edge ({user}, {item}) for {n_users} users x {n_items} items")]
    EdgeOutOfRange {
        user: u32,
        item: u32,
        n_users: usize,
        n_items: usize,
    },
    #[error("duplicate edge ({user}, {item})")]
    DuplicateEdge { user: u32, item: u32 },
    #[error("fraction {0} outside the open interval (0, 1)")]
    BadFraction(f64),
    #[error("timestamps are missing; temporal split needs them")]
    MissingTimestamps,
    #[error("graph too small: user {user} cannot keep an edge in every split")]
    SplitTooSmall { user: u32 },
    #[error("graph too dense for noise injection: need {needed} non-edges, only {available} exist")]
    TooDense { needed: usize, available: usize },
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// One raw interaction as read from disk, before any filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    /// Dataset-native scale; doubles as the watch ratio where that is the
    /// positive-feedback signal.
    pub rating: f64,
    /// Seconds since epoch, 0 if the dataset has none.
    pub timestamp: i64,
}

/// A positive user-item interaction in dense index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
}

impl Edge {
    pub fn new(user: u32, item: u32, timestamp: i64) -> Self {
        Self {
            user,
            item,
            timestamp,
        }
    }

    pub fn pair(&self) -> (u32, u32) {
        (self.user, self.item)
    }
}

/// Immutable bipartite interaction graph over densely indexed users and
/// items. Node space is users first, then items: item `i` is node
/// `n_users + i`.
#[derive(Debug, Clone)]
pub struct InteractionGraph {
    n_users: usize,
    n_items: usize,
    /// Sorted by (user, item); unique pairs.
    edges: Vec<Edge>,
    user_ids: Option<Vec<String>>,
    item_ids: Option<Vec<String>>,
    features: Option<Matrix>,
}

impl InteractionGraph {
    pub fn new(n_users: usize, n_items: usize, mut edges: Vec<Edge>) -> Result<Self, GraphError> {
        edges.sort_unstable_by_key(Edge::pair);
        for w in edges.windows(2) {
            if w[0].pair() == w[1].pair() {
                return Err(GraphError::DuplicateEdge {
                    user: w[0].user,
                    item: w[0].item,
                });
            }
        }
        for e in &edges {
            if e.user as usize >= n_users || e.item as usize >= n_items {
                return Err(GraphError::EdgeOutOfRange {
                    user: e.user,
                    item: e.item,
                    n_users,
                    n_items,
                });
            }
        }
        Ok(Self {
            n_users,
            n_items,
            edges,
            user_ids: None,
            item_ids: None,
            features: None,
        })
    }

    pub fn with_ids(mut self, user_ids: Vec<String>, item_ids: Vec<String>) -> Self {
        assert_eq!(user_ids.len(), self.n_users);
        assert_eq!(item_ids.len(), self.n_items);
        self.user_ids = Some(user_ids);
        self.item_ids = Some(item_ids);
        self
    }

    pub fn with_features(mut self, features: Matrix) -> Self {
        assert_eq!(features.rows(), self.n_nodes());
        self.features = Some(features);
        self
    }

    /// Same node space, different edge set.
    pub fn replace_edges(&self, edges: Vec<Edge>) -> Result<Self, GraphError> {
        let mut g = Self::new(self.n_users, self.n_items, edges)?;
        g.user_ids = self.user_ids.clone();
        g.item_ids = self.item_ids.clone();
        g.features = self.features.clone();
        Ok(g)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn user_ids(&self) -> Option<&[String]> {
        self.user_ids.as_deref()
    }

    pub fn item_ids(&self) -> Option<&[String]> {
        self.item_ids.as_deref()
    }

    pub fn features(&self) -> Option<&Matrix> {
        self.features.as_ref()
    }

    pub fn has_edge(&self, user: u32, item: u32) -> bool {
        self.edges
            .binary_search_by_key(&(user, item), Edge::pair)
            .is_ok()
    }

    /// Edges of one user, contiguous because edges sort by user first.
    pub fn user_edges(&self, user: u32) -> &[Edge] {
        let lo = self.edges.partition_point(|e| e.user < user);
        let hi = self.edges.partition_point(|e| e.user <= user);
        &self.edges[lo..hi]
    }

    /// Items interacted by each user, ascending.
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.n_users];
        for e in &self.edges {
            out[e.user as usize].push(e.item);
        }
        out
    }

    /// Undirected adjacency lists over the full node space.
    pub fn node_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes()];
        for e in &self.edges {
            let u = e.user as usize;
            let i = self.n_users + e.item as usize;
            adj[u].push(i);
            adj[i].push(u);
        }
        adj
    }

    /// Node degrees (users then items).
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.n_nodes()];
        for e in &self.edges {
            deg[e.user as usize] += 1;
            deg[self.n_users + e.item as usize] += 1;
        }
        deg
    }
}

/// Which out-of-distribution scenario produced a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Popularity,
    Temporal,
    Exposure,
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitKind::Popularity => write!(f, "popularity"),
            SplitKind::Temporal => write!(f, "temporal"),
            SplitKind::Exposure => write!(f, "exposure"),
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "popularity" => Ok(SplitKind::Popularity),
            "temporal" => Ok(SplitKind::Temporal),
            "exposure" => Ok(SplitKind::Exposure),
            other => Err(format!("unknown split kind {other:?}")),
        }
    }
}

/// Train graph plus held-out edge sets. The four edge sets partition the
/// pre-split edges.
#[derive(Debug, Clone)]
pub struct SplitBundle {
    pub train: InteractionGraph,
    pub valid: Vec<Edge>,
    pub test_iid: Vec<Edge>,
    pub test_ood: Vec<Edge>,
    pub kind: SplitKind,
    pub seed: u64,
    pub ood_fraction: f64,
}

impl SplitBundle {
    /// All four edge sets in a fixed order.
    pub fn parts(&self) -> [(&'static str, &[Edge]); 4] {
        [
            ("train", self.train.edges()),
            ("valid", &self.valid),
            ("test_iid", &self.test_iid),
            ("test_ood", &self.test_ood),
        ]
    }

    /// Verifies the partition invariant against the original edge set:
    /// pairwise disjoint, union equal.
    pub fn is_partition_of(&self, original: &[Edge]) -> bool {
        use std::collections::BTreeSet;
        let mut seen: BTreeSet<(u32, u32)> = BTreeSet::new();
        let mut total = 0usize;
        for (_, part) in self.parts() {
            for e in part {
                if !seen.insert(e.pair()) {
                    return false;
                }
                total += 1;
            }
        }
        if total != original.len() {
            return false;
        }
        original.iter().all(|e| seen.contains(&e.pair()))
    }
}

/// Split a user's edge count into train/valid/test by the 7:1:2 rule using
/// largest remainders, so each count is within one edge of its exact quota.
/// Quotas are exact tenths, so this stays in integer arithmetic.
pub(crate) fn split_counts_712(n: usize) -> (usize, usize, usize) {
    let tenths = [7 * n, n, 2 * n];
    let mut counts = [tenths[0] / 10, tenths[1] / 10, tenths[2] / 10];
    let mut remainder = n - (counts[0] + counts[1] + counts[2]);
    // leftover edges go by largest fractional part; ties favour train,
    // then test, then valid
    let mut order = [0usize, 2, 1];
    order.sort_by_key(|&slot| {
        let rank = match slot {
            0 => 0,
            2 => 1,
            _ => 2,
        };
        (std::cmp::Reverse(tenths[slot] % 10), rank)
    });
    for &slot in &order {
        if remainder == 0 {
            break;
        }
        counts[slot] += 1;
        remainder -= 1;
    }
    (counts[0], counts[1], counts[2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_712_exact_and_near() {
        assert_eq!(split_counts_712(10), (7, 1, 2));
        assert_eq!(split_counts_712(0), (0, 0, 0));
        let (t, v, e) = split_counts_712(1);
        assert_eq!((t, v, e), (1, 0, 0));
        for n in 0..200 {
            let (t, v, e) = split_counts_712(n);
            assert_eq!(t + v + e, n);
            assert!((t as f64 - 0.7 * n as f64).abs() < 1.0);
            assert!((v as f64 - 0.1 * n as f64).abs() < 1.0);
            assert!((e as f64 - 0.2 * n as f64).abs() < 1.0);
        }
    }

    #[test]
    fn duplicate_edges_rejected() {
        let edges = vec![Edge::new(0, 0, 1), Edge::new(0, 0, 2)];
        assert!(matches!(
            InteractionGraph::new(1, 1, edges),
            Err(GraphError::DuplicateEdge { .. })
        ));
    }

    #[test]
    fn out_of_range_rejected() {
        let edges = vec![Edge::new(0, 3, 0)];
        assert!(matches!(
            InteractionGraph::new(1, 2, edges),
            Err(GraphError::EdgeOutOfRange { .. })
        ));
    }

    #[test]
    fn user_edges_are_contiguous() {
        let g = InteractionGraph::new(
            3,
            4,
            vec![
                Edge::new(2, 0, 0),
                Edge::new(0, 1, 0),
                Edge::new(0, 3, 0),
                Edge::new(2, 2, 0),
            ],
        )
        .unwrap();
        assert_eq!(g.user_edges(0).len(), 2);
        assert_eq!(g.user_edges(1).len(), 0);
        assert_eq!(g.user_edges(2).len(), 2);
        assert!(g.has_edge(0, 3));
        assert!(!g.has_edge(1, 1));
    }
}
