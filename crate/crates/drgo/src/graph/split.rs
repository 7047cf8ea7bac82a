//! The three out-of-distribution split protocols.
//!
//! Each split carves an OOD test set out of the interaction graph according
//! to its shift scenario, then divides what remains 7:1:2 into train,
//! validation, and IID test per user.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng::{substream, Stream};

use super::{split_counts_712, Edge, GraphError, InteractionGraph, SplitBundle, SplitKind};

/// Popularity shift: the OOD set is chosen so its item-popularity histogram
/// is approximately uniform. Each item contributes up to
/// `ood_budget / n_items` interactions, sampled without replacement; any
/// unfilled budget is drawn uniformly from the remaining eligible
/// interactions. An interaction is eligible only while its user keeps at
/// least one non-OOD edge.
pub fn split_popularity(
    graph: &InteractionGraph,
    ood_fraction: f64,
    seed: u64,
) -> Result<SplitBundle, GraphError> {
    if !(0.0..1.0).contains(&ood_fraction) || ood_fraction <= 0.0 {
        return Err(GraphError::BadFraction(ood_fraction));
    }
    let budget = (ood_fraction * graph.n_edges() as f64).floor() as usize;
    let mut rng = substream(seed, Stream::Split, 0);

    let mut by_item: Vec<Vec<usize>> = vec![Vec::new(); graph.n_items()];
    for (idx, e) in graph.edges().iter().enumerate() {
        by_item[e.item as usize].push(idx);
    }
    let mut user_left: Vec<usize> = vec![0; graph.n_users()];
    for e in graph.edges() {
        user_left[e.user as usize] += 1;
    }

    let mut in_ood = vec![false; graph.n_edges()];
    let mut taken = 0usize;
    let quota = if graph.n_items() > 0 {
        budget / graph.n_items()
    } else {
        0
    };
    if quota > 0 {
        for item_edges in by_item.iter_mut() {
            item_edges.shuffle(&mut rng);
            let mut got = 0;
            for &idx in item_edges.iter() {
                if got == quota || taken == budget {
                    break;
                }
                let u = graph.edges()[idx].user as usize;
                if user_left[u] > 1 {
                    in_ood[idx] = true;
                    user_left[u] -= 1;
                    got += 1;
                    taken += 1;
                }
            }
        }
    }
    if taken < budget {
        let mut rest: Vec<usize> = (0..graph.n_edges()).filter(|&i| !in_ood[i]).collect();
        rest.shuffle(&mut rng);
        for idx in rest {
            if taken == budget {
                break;
            }
            let u = graph.edges()[idx].user as usize;
            if user_left[u] > 1 {
                in_ood[idx] = true;
                user_left[u] -= 1;
                taken += 1;
            }
        }
    }
    if taken < budget {
        // every remaining interaction is some user's last edge
        let blocked = graph
            .edges()
            .iter()
            .enumerate()
            .find(|(i, _)| !in_ood[*i])
            .map(|(_, e)| e.user)
            .unwrap_or(0);
        return Err(GraphError::SplitTooSmall { user: blocked });
    }

    let test_ood: Vec<Edge> = graph
        .edges()
        .iter()
        .enumerate()
        .filter(|(i, _)| in_ood[*i])
        .map(|(_, e)| *e)
        .collect();
    let remainder: Vec<Edge> = graph
        .edges()
        .iter()
        .enumerate()
        .filter(|(i, _)| !in_ood[*i])
        .map(|(_, e)| *e)
        .collect();

    let (train, valid, test_iid) =
        shuffled_712(graph, remainder, &mut substream(seed, Stream::Split, 1))?;
    Ok(SplitBundle {
        train,
        valid,
        test_iid,
        test_ood,
        kind: SplitKind::Popularity,
        seed,
        ood_fraction,
    })
}

/// Temporal shift: per user, the latest `ood_fraction` of interactions form
/// the OOD test set (ties on timestamp break by item index); the remainder
/// splits 7:1:2 chronologically.
pub fn split_temporal(
    graph: &InteractionGraph,
    ood_fraction: f64,
) -> Result<SplitBundle, GraphError> {
    if !(0.0..1.0).contains(&ood_fraction) {
        return Err(GraphError::BadFraction(ood_fraction));
    }
    if graph.edges().iter().all(|e| e.timestamp == 0) && graph.n_edges() > 0 {
        return Err(GraphError::MissingTimestamps);
    }
    let mut test_ood = Vec::new();
    let mut train_edges = Vec::new();
    let mut valid = Vec::new();
    let mut test_iid = Vec::new();
    for user in 0..graph.n_users() as u32 {
        let mut edges: Vec<Edge> = graph.user_edges(user).to_vec();
        if edges.is_empty() {
            continue;
        }
        edges.sort_by_key(|e| (e.timestamp, e.item));
        let n_ood = (ood_fraction * edges.len() as f64).floor() as usize;
        let cut = edges.len() - n_ood;
        test_ood.extend_from_slice(&edges[cut..]);
        let rest = &edges[..cut];
        let (t, v, _) = split_counts_712(rest.len());
        train_edges.extend_from_slice(&rest[..t]);
        valid.extend_from_slice(&rest[t..t + v]);
        test_iid.extend_from_slice(&rest[t + v..]);
    }
    let train = graph.replace_edges(train_edges)?;
    Ok(SplitBundle {
        train,
        valid,
        test_iid,
        test_ood,
        kind: SplitKind::Temporal,
        seed: 0,
        ood_fraction,
    })
}

/// Exposure shift: an externally supplied, fully observed edge set becomes
/// the OOD test set; the exposure-biased remainder splits 7:1:2. Edges
/// present on both sides are removed from the remainder with a warning.
pub fn split_exposure(
    graph: &InteractionGraph,
    fully_observed: &[Edge],
    seed: u64,
) -> Result<SplitBundle, GraphError> {
    use std::collections::BTreeSet;
    let observed: BTreeSet<(u32, u32)> = fully_observed.iter().map(Edge::pair).collect();
    let overlap = graph
        .edges()
        .iter()
        .filter(|e| observed.contains(&e.pair()))
        .count();
    if overlap > 0 {
        log::warn!(
            "exposure split: {overlap} edges overlap the fully observed set; keeping them on the OOD side only"
        );
    }
    let remainder: Vec<Edge> = graph
        .edges()
        .iter()
        .filter(|e| !observed.contains(&e.pair()))
        .copied()
        .collect();
    let ood_fraction = fully_observed.len() as f64
        / (fully_observed.len() + remainder.len()).max(1) as f64;
    let (train, valid, test_iid) =
        shuffled_712(graph, remainder, &mut substream(seed, Stream::Split, 1))?;
    Ok(SplitBundle {
        train,
        valid,
        test_iid,
        test_ood: fully_observed.to_vec(),
        kind: SplitKind::Exposure,
        seed,
        ood_fraction,
    })
}

/// Per-user shuffled 7:1:2 assignment of the remainder.
fn shuffled_712(
    graph: &InteractionGraph,
    remainder: Vec<Edge>,
    rng: &mut impl Rng,
) -> Result<(InteractionGraph, Vec<Edge>, Vec<Edge>), GraphError> {
    let mut by_user: Vec<Vec<Edge>> = vec![Vec::new(); graph.n_users()];
    for e in remainder {
        by_user[e.user as usize].push(e);
    }
    let mut train_edges = Vec::new();
    let mut valid = Vec::new();
    let mut test_iid = Vec::new();
    for edges in by_user.iter_mut() {
        edges.shuffle(rng);
        let (t, v, _) = split_counts_712(edges.len());
        train_edges.extend_from_slice(&edges[..t]);
        valid.extend_from_slice(&edges[t..t + v]);
        test_iid.extend_from_slice(&edges[t + v..]);
    }
    let train = graph.replace_edges(train_edges)?;
    Ok((train, valid, test_iid))
}
