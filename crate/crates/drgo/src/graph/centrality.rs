//! Exact betweenness centrality via Brandes' accumulation.

use rayon::prelude::*;

use super::InteractionGraph;

/// Betweenness centrality of every node: for each unordered pair (s, t)
/// with s != t, a node v not in {s, t} accrues the fraction of shortest
/// s-t paths passing through it. Pairs in different components contribute
/// nothing. Indices follow the graph node space (users, then items).
pub fn betweenness_centrality(graph: &InteractionGraph) -> Vec<f64> {
    let adj = graph.node_adjacency();
    betweenness_of_adjacency(&adj)
}

/// Brandes over an undirected adjacency list.
///
/// Sources run in parallel chunks; per-chunk partial sums merge in a fixed
/// order so the result is bitwise reproducible under any thread count.
pub fn betweenness_of_adjacency(adj: &[Vec<usize>]) -> Vec<f64> {
    let n = adj.len();
    if n == 0 {
        return Vec::new();
    }
    let chunk = 64usize;
    let sources: Vec<usize> = (0..n).collect();
    let partials: Vec<Vec<f64>> = sources
        .par_chunks(chunk)
        .map(|srcs| {
            let mut acc = vec![0.0; n];
            for &s in srcs {
                accumulate_from_source(adj, s, &mut acc);
            }
            acc
        })
        .collect();
    let mut centrality = vec![0.0; n];
    for part in partials {
        for (c, p) in centrality.iter_mut().zip(part) {
            *c += p;
        }
    }
    // every unordered pair was counted from both endpoints
    for c in &mut centrality {
        *c *= 0.5;
    }
    centrality
}

fn accumulate_from_source(adj: &[Vec<usize>], s: usize, centrality: &mut [f64]) {
    let n = adj.len();
    let mut stack: Vec<usize> = Vec::with_capacity(n);
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut sigma = vec![0.0_f64; n];
    let mut dist = vec![-1_i64; n];
    sigma[s] = 1.0;
    dist[s] = 0;
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(s);
    while let Some(v) = queue.pop_front() {
        stack.push(v);
        for &w in &adj[v] {
            if dist[w] < 0 {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
            if dist[w] == dist[v] + 1 {
                sigma[w] += sigma[v];
                preds[w].push(v);
            }
        }
    }
    let mut delta = vec![0.0_f64; n];
    while let Some(w) = stack.pop() {
        for &v in &preds[w] {
            delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
        }
        if w != s {
            centrality[w] += delta[w];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, InteractionGraph};

    #[test]
    fn path_graph_center_is_one() {
        // a - b - c as bipartite: users {a, c}, item {b}
        let g = InteractionGraph::new(2, 1, vec![Edge::new(0, 0, 0), Edge::new(1, 0, 0)]).unwrap();
        let c = betweenness_centrality(&g);
        assert!((c[2] - 1.0).abs() < 1e-12); // b is node 2
        assert!(c[0].abs() < 1e-12);
        assert!(c[1].abs() < 1e-12);
    }

    #[test]
    fn star_center_is_choose_two() {
        for k in 2..7usize {
            let edges = (0..k as u32).map(|u| Edge::new(u, 0, 0)).collect();
            let g = InteractionGraph::new(k, 1, edges).unwrap();
            let c = betweenness_centrality(&g);
            let expected = (k * (k - 1)) as f64 / 2.0;
            assert!(
                (c[k] - expected).abs() < 1e-12,
                "star k={k}: got {}, want {expected}",
                c[k]
            );
        }
    }

    #[test]
    fn disconnected_components_stay_local() {
        // two independent paths: (u0 - i0 - u1) and (u2 - i1 - u3)
        let edges = vec![
            Edge::new(0, 0, 0),
            Edge::new(1, 0, 0),
            Edge::new(2, 1, 0),
            Edge::new(3, 1, 0),
        ];
        let g = InteractionGraph::new(4, 2, edges).unwrap();
        let c = betweenness_centrality(&g);
        assert!((c[4] - 1.0).abs() < 1e-12);
        assert!((c[5] - 1.0).abs() < 1e-12);
        for u in 0..4 {
            assert!(c[u].abs() < 1e-12);
        }
    }
}
