//! Synthetic benchmark generator.
//!
//! Ground truth is a latent-factor model: users and items drawn from a few
//! Gaussian clusters, preference equal to the inner product. Interactions
//! come from exposure-biased sampling (popularity^gamma) filtered by a
//! per-user preference threshold, giving a long-tailed item histogram with
//! real cluster structure. The generator can additionally carve users into
//! a high-activity major cohort and a low-activity minor cohort, and inject
//! a labeled group of random noise interactions on top.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::graph::{Edge, GraphError, InteractionGraph};
use crate::matrix::Matrix;
use crate::rng::{substream, Stream};

/// Which cohort an interaction belongs to in the labeled benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeGroup {
    /// Real interaction of a high-activity user.
    Major = 0,
    /// Real interaction of a low-activity user.
    Minor = 1,
    /// Injected random interaction.
    Noise = 2,
}

pub const EDGE_GROUP_COUNT: usize = 3;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub latent_dim: usize,
    /// Interactions per major-cohort user.
    pub interactions_per_user: usize,
    /// Fraction of users in the low-activity minor cohort.
    pub minor_user_fraction: f64,
    /// Activity of minor users relative to major users.
    pub minor_activity_scale: f64,
    /// Extra noise interactions as a fraction of the real interactions.
    pub noise_fraction: f64,
    /// Popularity exponent of the exposure bias.
    pub exposure_gamma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 1500,
            n_clusters: 3,
            latent_dim: 8,
            interactions_per_user: 20,
            minor_user_fraction: 0.0,
            minor_activity_scale: 0.4,
            noise_fraction: 0.0,
            exposure_gamma: 1.0,
            seed: 0,
        }
    }
}

/// Generated benchmark: the graph, ground-truth preferences, and cohort
/// labels aligned with `graph.edges()`.
pub struct SynthData {
    pub graph: InteractionGraph,
    /// Preference score per (user, item); the oracle scorer.
    pub preferences: Matrix,
    /// Group of every edge, aligned with the graph's sorted edge order.
    pub edge_groups: Vec<EdgeGroup>,
    /// True when the user is in the minor cohort.
    pub minor_user: Vec<bool>,
}

impl SynthData {
    /// Group lookup keyed by (user, item).
    pub fn group_map(&self) -> BTreeMap<(u32, u32), usize> {
        self.graph
            .edges()
            .iter()
            .zip(&self.edge_groups)
            .map(|(e, &g)| (e.pair(), g as usize))
            .collect()
    }
}

fn cluster_vectors(
    count: usize,
    clusters: usize,
    dim: usize,
    spread: f64,
    within: f64,
    rng: &mut impl Rng,
) -> Matrix {
    let mut centers = Matrix::zeros(clusters, dim);
    for c in 0..clusters {
        for v in centers.row_mut(c) {
            *v = spread * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut out = Matrix::zeros(count, dim);
    for i in 0..count {
        let c = i % clusters;
        for (slot, &center) in out.row_mut(i).iter_mut().zip(centers.row(c)) {
            *slot = center + within * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

/// Generates the benchmark.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData, GraphError> {
    let mut rng = substream(cfg.seed, Stream::Synth, 0);
    let users = cluster_vectors(cfg.n_users, cfg.n_clusters, cfg.latent_dim, 1.0, 0.35, &mut rng);
    let items = cluster_vectors(cfg.n_items, cfg.n_clusters, cfg.latent_dim, 1.0, 0.35, &mut rng);
    let preferences = users.matmul(&items.transpose());

    // base popularity: mild Zipf over a random item order
    let mut pop_order: Vec<usize> = (0..cfg.n_items).collect();
    pop_order.shuffle(&mut rng);
    let mut popularity = vec![0.0; cfg.n_items];
    for (rank, &item) in pop_order.iter().enumerate() {
        popularity[item] = 1.0 / (rank + 1) as f64;
    }
    let exposure: Vec<f64> = popularity
        .iter()
        .map(|p| p.powf(cfg.exposure_gamma))
        .collect();
    let exposure_total: f64 = exposure.iter().sum();

    let n_minor = (cfg.minor_user_fraction * cfg.n_users as f64).round() as usize;
    let mut minor_user = vec![false; cfg.n_users];
    let mut user_order: Vec<usize> = (0..cfg.n_users).collect();
    user_order.shuffle(&mut rng);
    for &u in user_order.iter().take(n_minor) {
        minor_user[u] = true;
    }

    let mut edges: Vec<Edge> = Vec::new();
    let mut groups: Vec<(u32, u32, EdgeGroup)> = Vec::new();
    for u in 0..cfg.n_users {
        let want = if minor_user[u] {
            ((cfg.interactions_per_user as f64 * cfg.minor_activity_scale).round() as usize).max(2)
        } else {
            cfg.interactions_per_user
        };
        // per-user preference threshold: accept the top third of items
        let mut prefs: Vec<f64> = preferences.row(u).to_vec();
        prefs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let threshold = prefs[(cfg.n_items / 3).min(cfg.n_items - 1)];
        let mut chosen: Vec<u32> = Vec::with_capacity(want);
        let mut attempts = 0usize;
        while chosen.len() < want && attempts < want * 400 {
            attempts += 1;
            // exposure-biased item draw
            let mut target = rng.random::<f64>() * exposure_total;
            let mut item = cfg.n_items - 1;
            for (i, &w) in exposure.iter().enumerate() {
                if target < w {
                    item = i;
                    break;
                }
                target -= w;
            }
            if preferences.get(u, item) >= threshold && !chosen.contains(&(item as u32)) {
                chosen.push(item as u32);
            }
        }
        // top up from the user's best unexposed items if the sampler stalled
        if chosen.len() < want {
            let mut by_pref: Vec<u32> = (0..cfg.n_items as u32).collect();
            by_pref.sort_by(|&a, &b| {
                preferences
                    .get(u, b as usize)
                    .partial_cmp(&preferences.get(u, a as usize))
                    .unwrap()
            });
            for i in by_pref {
                if chosen.len() >= want {
                    break;
                }
                if !chosen.contains(&i) {
                    chosen.push(i);
                }
            }
        }
        for (k, item) in chosen.into_iter().enumerate() {
            let ts = 1_000_000 + rng.random_range(0..1_000_000) + k as i64;
            edges.push(Edge::new(u as u32, item, ts));
            let grp = if minor_user[u] {
                EdgeGroup::Minor
            } else {
                EdgeGroup::Major
            };
            groups.push((u as u32, item, grp));
        }
    }

    // injected noise interactions on top of the real ones
    let n_noise = (cfg.noise_fraction * edges.len() as f64).round() as usize;
    let mut have: std::collections::BTreeSet<(u32, u32)> =
        edges.iter().map(Edge::pair).collect();
    let mut injected = 0usize;
    while injected < n_noise {
        let u = rng.random_range(0..cfg.n_users as u32);
        let i = rng.random_range(0..cfg.n_items as u32);
        if have.insert((u, i)) {
            let ts = 1_000_000 + rng.random_range(0..1_000_000);
            edges.push(Edge::new(u, i, ts));
            groups.push((u, i, EdgeGroup::Noise));
            injected += 1;
        }
    }

    let graph = InteractionGraph::new(cfg.n_users, cfg.n_items, edges)?;
    // align group labels with the graph's sorted edge order
    let by_pair: BTreeMap<(u32, u32), EdgeGroup> =
        groups.into_iter().map(|(u, i, g)| ((u, i), g)).collect();
    let edge_groups: Vec<EdgeGroup> = graph
        .edges()
        .iter()
        .map(|e| by_pair[&e.pair()])
        .collect();
    Ok(SynthData {
        graph,
        preferences,
        edge_groups,
        minor_user,
    })
}

/// Exposure-shift companion: a second edge set drawn with uniform exposure
/// (no popularity bias) from the same preference ground truth, playing the
/// role of a fully observed test matrix.
pub fn generate_uniform_observed(
    cfg: &SynthConfig,
    data: &SynthData,
    per_user: usize,
) -> Vec<Edge> {
    let mut rng = substream(cfg.seed, Stream::Synth, 1);
    let mut out = Vec::new();
    for u in 0..cfg.n_users {
        let mut prefs: Vec<f64> = data.preferences.row(u).to_vec();
        prefs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let threshold = prefs[(cfg.n_items / 3).min(cfg.n_items - 1)];
        let mut got = 0usize;
        let mut attempts = 0usize;
        while got < per_user && attempts < per_user * 400 {
            attempts += 1;
            let item = rng.random_range(0..cfg.n_items as u32);
            if data.preferences.get(u, item as usize) >= threshold
                && !data.graph.has_edge(u as u32, item)
                && !out
                    .iter()
                    .any(|e: &Edge| e.user == u as u32 && e.item == item)
            {
                out.push(Edge::new(u as u32, item, 0));
                got += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_users: 120,
            n_items: 90,
            interactions_per_user: 10,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_cfg()).unwrap();
        let b = generate(&small_cfg()).unwrap();
        assert_eq!(a.graph.edges(), b.graph.edges());
        assert_eq!(a.edge_groups, b.edge_groups);
    }

    #[test]
    fn cohorts_and_noise_are_labeled() {
        let cfg = SynthConfig {
            minor_user_fraction: 0.1,
            noise_fraction: 0.1,
            ..small_cfg()
        };
        let data = generate(&cfg).unwrap();
        let minor_users = data.minor_user.iter().filter(|&&m| m).count();
        assert_eq!(minor_users, 12);
        let counts = [EdgeGroup::Major, EdgeGroup::Minor, EdgeGroup::Noise]
            .map(|g| data.edge_groups.iter().filter(|&&x| x == g).count());
        assert!(counts[0] > counts[1], "major should dominate: {counts:?}");
        assert!(counts[1] > 0);
        // noise is ~10% of the real edges
        let real = counts[0] + counts[1];
        let expected = (0.1 * real as f64).round() as usize;
        assert_eq!(counts[2], expected);
    }

    #[test]
    fn exposure_bias_shows_in_item_histogram() {
        let data = generate(&small_cfg()).unwrap();
        let mut hist = vec![0usize; 90];
        for e in data.graph.edges() {
            hist[e.item as usize] += 1;
        }
        let mut sorted = hist.clone();
        sorted.sort_unstable();
        let head: usize = sorted[81..].iter().sum(); // top 10%
        let tail: usize = sorted[..9].iter().sum(); // bottom 10%
        assert!(
            head > 3 * tail.max(1),
            "expected a long tail, head {head} tail {tail}"
        );
    }

    #[test]
    fn uniform_observed_is_flatter_than_train() {
        let cfg = small_cfg();
        let data = generate(&cfg).unwrap();
        let observed = generate_uniform_observed(&cfg, &data, 3);
        assert!(!observed.is_empty());
        let cv = |edges: &[Edge]| {
            let mut h = vec![0.0f64; cfg.n_items];
            for e in edges {
                h[e.item as usize] += 1.0;
            }
            let mean = h.iter().sum::<f64>() / h.len() as f64;
            let var = h.iter().map(|&c| (c - mean) * (c - mean)).sum::<f64>() / h.len() as f64;
            var.sqrt() / mean
        };
        let train_cv = cv(data.graph.edges());
        let obs_cv = cv(&observed);
        assert!(
            obs_cv < train_cv,
            "observed cv {obs_cv} should be below train cv {train_cv}"
        );
    }

    #[test]
    fn preferences_predict_interactions() {
        // the mean preference of interacted pairs should clearly beat the
        // global mean: the generator respects the ground truth
        let data = generate(&small_cfg()).unwrap();
        let global_mean = data.preferences.mean();
        let edge_mean: f64 = data
            .graph
            .edges()
            .iter()
            .map(|e| data.preferences.get(e.user as usize, e.item as usize))
            .sum::<f64>()
            / data.graph.n_edges() as f64;
        assert!(edge_mean > global_mean + 0.2, "{edge_mean} vs {global_mean}");
    }
}
