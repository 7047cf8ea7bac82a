//! Edge-noise injection for robustness experiments.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng::{substream, Stream};

use super::{Edge, GraphError, InteractionGraph};

/// Replaces `floor(ratio * |edges|)` uniformly chosen real edges with the
/// same number of uniformly chosen fake edges (pairs that never interacted),
/// preserving the edge count exactly.
pub fn inject_noise(
    graph: &InteractionGraph,
    ratio: f64,
    seed: u64,
) -> Result<InteractionGraph, GraphError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(GraphError::BadFraction(ratio));
    }
    let k = (ratio * graph.n_edges() as f64).floor() as usize;
    if k == 0 {
        return Ok(graph.clone());
    }
    let capacity = graph.n_users() * graph.n_items();
    let available = capacity - graph.n_edges();
    if k > available {
        return Err(GraphError::TooDense {
            needed: k,
            available,
        });
    }
    let mut rng = substream(seed, Stream::Noise, 0);

    let mut indices: Vec<usize> = (0..graph.n_edges()).collect();
    indices.shuffle(&mut rng);
    let removed: std::collections::BTreeSet<usize> = indices.into_iter().take(k).collect();

    let mut edges: Vec<Edge> = graph
        .edges()
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed.contains(i))
        .map(|(_, e)| *e)
        .collect();

    // fake edges come from the complement of the ORIGINAL edge set, so a
    // removed real edge can never reappear as "fake"
    let mut added: std::collections::BTreeSet<(u32, u32)> = std::collections::BTreeSet::new();
    while added.len() < k {
        let u = rng.random_range(0..graph.n_users() as u32);
        let i = rng.random_range(0..graph.n_items() as u32);
        if graph.has_edge(u, i) || added.contains(&(u, i)) {
            continue;
        }
        added.insert((u, i));
    }
    edges.extend(added.into_iter().map(|(u, i)| Edge::new(u, i, 0)));
    graph.replace_edges(edges)
}
