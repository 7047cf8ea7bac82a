//! Graph construction: positive-interaction filtering, degree filtering to
//! fixpoint, dense reindexing, and the normalized adjacency.

use std::collections::BTreeMap;

use crate::matrix::SparseMatrix;

use super::{Edge, GraphError, Interaction, InteractionGraph};

/// Rule deciding which interactions count as positive feedback.
#[derive(Debug, Clone, Copy)]
pub enum PositiveRule {
    /// Explicit feedback: keep rows with rating >= threshold.
    MinRating(f64),
    /// Dense exposure logs: keep rows whose watch ratio (stored in the
    /// rating column) is >= threshold.
    MinWatchRatio(f64),
}

impl PositiveRule {
    fn keeps(&self, row: &Interaction) -> bool {
        match self {
            PositiveRule::MinRating(r) => row.rating >= *r,
            PositiveRule::MinWatchRatio(w) => row.rating >= *w,
        }
    }
}

/// Builds the filtered bipartite graph.
///
/// Positive interactions are kept, then users and items below their degree
/// thresholds are removed iteratively until no removal triggers another
/// (dropping a user can push an item below threshold and vice versa).
/// Survivors are reindexed densely by sorted original id. Duplicate
/// (user, item) pairs collapse to the most recent timestamp.
pub fn build_graph(
    interactions: &[Interaction],
    min_user_deg: usize,
    min_item_deg: usize,
    positive_rule: PositiveRule,
) -> Result<InteractionGraph, GraphError> {
    // unique positive pairs with max timestamp
    let mut pairs: BTreeMap<(&str, &str), i64> = BTreeMap::new();
    for row in interactions.iter().filter(|r| positive_rule.keeps(r)) {
        let ts = pairs
            .entry((row.user_id.as_str(), row.item_id.as_str()))
            .or_insert(i64::MIN);
        *ts = (*ts).max(row.timestamp);
    }

    let mut user_deg: BTreeMap<&str, usize> = BTreeMap::new();
    let mut item_deg: BTreeMap<&str, usize> = BTreeMap::new();
    for (u, i) in pairs.keys() {
        *user_deg.entry(u).or_default() += 1;
        *item_deg.entry(i).or_default() += 1;
    }

    loop {
        let drop_users: Vec<&str> = user_deg
            .iter()
            .filter(|(_, &d)| d < min_user_deg)
            .map(|(&u, _)| u)
            .collect();
        let drop_items: Vec<&str> = item_deg
            .iter()
            .filter(|(_, &d)| d < min_item_deg)
            .map(|(&i, _)| i)
            .collect();
        if drop_users.is_empty() && drop_items.is_empty() {
            break;
        }
        for u in &drop_users {
            user_deg.remove(u);
        }
        for i in &drop_items {
            item_deg.remove(i);
        }
        pairs.retain(|(u, i), _| user_deg.contains_key(u) && item_deg.contains_key(i));
        user_deg.values_mut().for_each(|d| *d = 0);
        item_deg.values_mut().for_each(|d| *d = 0);
        for (u, i) in pairs.keys() {
            *user_deg.get_mut(u).unwrap() += 1;
            *item_deg.get_mut(i).unwrap() += 1;
        }
    }

    if pairs.is_empty() {
        return Err(GraphError::EmptyGraph);
    }

    let user_ids: Vec<String> = user_deg.keys().map(|s| s.to_string()).collect();
    let item_ids: Vec<String> = item_deg.keys().map(|s| s.to_string()).collect();
    let user_index: BTreeMap<&str, u32> = user_ids
        .iter()
        .enumerate()
        .map(|(idx, id)| (id.as_str(), idx as u32))
        .collect();
    let item_index: BTreeMap<&str, u32> = item_ids
        .iter()
        .enumerate()
        .map(|(idx, id)| (id.as_str(), idx as u32))
        .collect();

    let edges: Vec<Edge> = pairs
        .iter()
        .map(|(&(u, i), &ts)| Edge::new(user_index[u], item_index[i], ts))
        .collect();

    Ok(InteractionGraph::new(user_ids.len(), item_ids.len(), edges)?.with_ids(user_ids, item_ids))
}

/// Symmetrically normalized adjacency D^{-1/2} A D^{-1/2} over the full
/// node space; rows of isolated nodes stay zero.
pub fn normalized_adjacency(graph: &InteractionGraph) -> SparseMatrix {
    let n = graph.n_nodes();
    let deg = graph.degrees();
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0 { 1.0 / (d as f64).sqrt() } else { 0.0 })
        .collect();
    let mut triplets = Vec::with_capacity(2 * graph.n_edges());
    for e in graph.edges() {
        let u = e.user as usize;
        let i = graph.n_users() + e.item as usize;
        let w = inv_sqrt[u] * inv_sqrt[i];
        triplets.push((u, i, w));
        triplets.push((i, u, w));
    }
    SparseMatrix::from_triplets(n, n, triplets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inter(u: &str, i: &str, rating: f64, ts: i64) -> Interaction {
        Interaction {
            user_id: u.to_string(),
            item_id: i.to_string(),
            rating,
            timestamp: ts,
        }
    }

    #[test]
    fn threshold_filter_keeps_qualifying_nodes() {
        // users need 2+ edges, items need 2+ edges, rating >= 4
        let rows = vec![
            inter("a", "x", 5.0, 1),
            inter("a", "y", 4.0, 2),
            inter("b", "x", 4.5, 3),
            inter("b", "y", 4.0, 4),
            inter("c", "x", 5.0, 5),  // c has only 1 positive
            inter("a", "z", 2.0, 6),  // below rating threshold
            inter("b", "z", 3.9, 7),  // below rating threshold
        ];
        let g = build_graph(&rows, 2, 2, PositiveRule::MinRating(4.0)).unwrap();
        // c drops (degree 1), then x falls to degree 2 and stays; z never
        // had positives
        assert_eq!(g.n_users(), 2);
        assert_eq!(g.n_items(), 2);
        assert_eq!(g.n_edges(), 4);
        assert_eq!(g.user_ids().unwrap(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn fixpoint_cascades() {
        // removing user c drops item w below threshold, which drops user d
        let rows = vec![
            inter("a", "x", 5.0, 0),
            inter("a", "y", 5.0, 0),
            inter("b", "x", 5.0, 0),
            inter("b", "y", 5.0, 0),
            inter("c", "w", 5.0, 0), // degree-1 user
            inter("d", "w", 5.0, 0),
            inter("d", "x", 5.0, 0),
        ];
        let g = build_graph(&rows, 2, 2, PositiveRule::MinRating(0.0)).unwrap();
        assert_eq!(g.n_users(), 2); // a, b survive; c and then d drop
        assert_eq!(g.n_items(), 2);
    }

    #[test]
    fn no_op_filter_keeps_everything() {
        let rows = vec![inter("a", "x", 0.5, 0), inter("b", "y", 1.0, 0)];
        let g = build_graph(&rows, 0, 0, PositiveRule::MinRating(0.0)).unwrap();
        assert_eq!(g.n_users(), 2);
        assert_eq!(g.n_items(), 2);
        assert_eq!(g.n_edges(), 2);
    }

    #[test]
    fn over_filtering_reports_empty_graph() {
        let rows = vec![inter("a", "x", 5.0, 0), inter("a", "y", 5.0, 0)];
        assert!(matches!(
            build_graph(&rows, 3, 0, PositiveRule::MinRating(4.0)),
            Err(GraphError::EmptyGraph)
        ));
    }

    #[test]
    fn duplicate_interactions_collapse_to_latest() {
        let rows = vec![inter("a", "x", 5.0, 10), inter("a", "x", 4.0, 99)];
        let g = build_graph(&rows, 0, 0, PositiveRule::MinRating(4.0)).unwrap();
        assert_eq!(g.n_edges(), 1);
        assert_eq!(g.edges()[0].timestamp, 99);
    }

    #[test]
    fn single_edge_normalization_is_one() {
        let g = InteractionGraph::new(1, 1, vec![Edge::new(0, 0, 0)]).unwrap();
        let a = normalized_adjacency(&g);
        let dense = a.to_dense();
        assert_eq!(dense.get(0, 1), 1.0);
        assert_eq!(dense.get(1, 0), 1.0);
        assert_eq!(dense.get(0, 0), 0.0);
    }

    #[test]
    fn degree_four_user_gets_half() {
        let edges = (0..4).map(|i| Edge::new(0, i, 0)).collect();
        let g = InteractionGraph::new(1, 4, edges).unwrap();
        let dense = normalized_adjacency(&g).to_dense();
        for i in 0..4 {
            assert!((dense.get(0, 1 + i) - 0.5).abs() < 1e-15);
            assert!((dense.get(1 + i, 0) - 0.5).abs() < 1e-15);
        }
    }
}
