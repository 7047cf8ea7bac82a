//! The distributional machinery: nominal distribution from betweenness
//! centrality, k-means uncertainty sets, entropy-regularized worst-case
//! group weights constrained to a Sinkhorn ball, and the KL-divergence
//! baseline it is measured against.

mod sinkhorn;

pub use sinkhorn::{sinkhorn_distance, SinkhornParams, SinkhornResult};

use rand::Rng;
use thiserror::Error;

use crate::matrix::Matrix;
use crate::rng::{substream, Stream};

#[derive(Debug, Error)]
pub enum DroError {
    #[error("top percentage {0} outside (0, 100]")]
    BadTopPct(f64),
    #[error("selection is empty")]
    EmptySelection,
    #[error("cannot form {k} clusters from {n} points")]
    TooManyClusters { k: usize, n: usize },
    #[error("invalid weights: {0}")]
    BadWeights(String),
    #[error("sinkhorn failed to converge in {max_iter} iterations (residual {residual:.3e})")]
    SinkhornNotConverged { residual: f64, max_iter: usize },
    #[error("weight {0} is zero; entropy gradient undefined")]
    ZeroWeight(usize),
    #[error("invalid parameter: {0}")]
    BadParam(&'static str),
}

/// Uniform empirical distribution over the latent rows of the
/// highest-centrality nodes.
#[derive(Debug, Clone)]
pub struct NominalDistribution {
    /// Selected nodes, sorted by centrality descending, ties by index.
    pub node_indices: Vec<usize>,
    /// Latent row per selected node, aligned with `node_indices`.
    pub embeddings: Matrix,
    /// Uniform 1/m.
    pub weights: Vec<f64>,
}

/// Picks the top `top_pct` percent of nodes by descending centrality, ties
/// broken toward the lower node index. The selection depends only on graph
/// topology, so callers can compute it once and re-attach fresh embeddings
/// each epoch.
pub fn select_top_nodes(centrality: &[f64], top_pct: f64) -> Result<Vec<usize>, DroError> {
    if !(0.0..=100.0).contains(&top_pct) || top_pct <= 0.0 {
        return Err(DroError::BadTopPct(top_pct));
    }
    let n = centrality.len();
    let m = ((top_pct / 100.0) * n as f64).ceil() as usize;
    if m == 0 || n == 0 {
        return Err(DroError::EmptySelection);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        centrality[b]
            .partial_cmp(&centrality[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(m);
    Ok(order)
}

impl NominalDistribution {
    /// Attaches latent rows to an already selected node set.
    pub fn from_nodes(node_indices: Vec<usize>, denoised: &Matrix) -> Self {
        let embeddings = denoised.gather_rows(&node_indices);
        let m = node_indices.len();
        Self {
            node_indices,
            embeddings,
            weights: vec![1.0 / m as f64; m],
        }
    }
}

/// Selection and attachment in one call.
pub fn build_nominal(
    centrality: &[f64],
    denoised: &Matrix,
    top_pct: f64,
) -> Result<NominalDistribution, DroError> {
    let nodes = select_top_nodes(centrality, top_pct)?;
    Ok(NominalDistribution::from_nodes(nodes, denoised))
}

/// K-means clustering output over user embeddings.
#[derive(Debug, Clone)]
pub struct UncertaintySet {
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    pub counts: Vec<usize>,
    /// Sum of squared distances to assigned centroids after each
    /// assignment phase; non-increasing by construction.
    pub objective_history: Vec<f64>,
}

impl UncertaintySet {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&0.0)
    }
}

/// Lloyd iterations from a k-means++ start. Empty clusters are repaired by
/// re-seeding them with the farthest point of the largest cluster.
pub fn kmeans(
    embeddings: &Matrix,
    k: usize,
    max_iter: usize,
    seed: u64,
) -> Result<UncertaintySet, DroError> {
    let n = embeddings.rows();
    let d = embeddings.cols();
    if k == 0 || k > n {
        return Err(DroError::TooManyClusters { k, n });
    }
    let mut rng = substream(seed, Stream::Kmeans, 0);

    // k-means++ seeding
    let mut centroids = Matrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(embeddings.row(first));
    let mut d2 = vec![0.0; n];
    for c in 1..k {
        let mut total = 0.0;
        for i in 0..n {
            let dist = (0..c)
                .map(|j| sq_dist(embeddings.row(i), centroids.row(j)))
                .fold(f64::INFINITY, f64::min);
            d2[i] = dist;
            total += dist;
        }
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(embeddings.row(pick));
    }

    let mut assignment = vec![0usize; n];
    let mut counts = vec![0usize; k];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        // assignment phase
        let mut objective = 0.0;
        let mut changed = false;
        counts.iter_mut().for_each(|c| *c = 0);
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(embeddings.row(i), centroids.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assignment[i] != best {
                changed = true;
                assignment[i] = best;
            }
            counts[best] += 1;
            objective += best_d;
        }
        // repair empty clusters before the centroid update
        loop {
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let largest = counts
                .iter()
                .enumerate()
                .max_by_key(|(_, &c)| c)
                .map(|(i, _)| i)
                .unwrap();
            let (far_idx, far_d) = (0..n)
                .filter(|&i| assignment[i] == largest)
                .map(|i| (i, sq_dist(embeddings.row(i), centroids.row(largest))))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assignment[far_idx] = empty;
            counts[largest] -= 1;
            counts[empty] += 1;
            objective -= far_d; // the point now sits on its own centroid
            centroids
                .row_mut(empty)
                .copy_from_slice(embeddings.row(far_idx));
            changed = true;
        }
        history.push(objective);
        // centroid phase
        let mut sums = Matrix::zeros(k, d);
        for i in 0..n {
            let c = assignment[i];
            for (s, &x) in sums.row_mut(c).iter_mut().zip(embeddings.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            let cnt = counts[c] as f64;
            for (slot, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *slot = s / cnt;
            }
        }
        if !changed && history.len() > 1 {
            break;
        }
    }

    Ok(UncertaintySet {
        centroids,
        assignment,
        counts,
        objective_history: history,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Simplex-constrained weights over the uncertainty-set groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeights {
    pub w: Vec<f64>,
    /// True when the softmax solution violated the Sinkhorn ball and was
    /// pulled back along the uniform-mixing path.
    pub projected: bool,
    /// True when even uniform weights were infeasible and the solver fell
    /// back to them anyway.
    pub fallback_uniform: bool,
    /// Sinkhorn distance of the returned weights to the nominal
    /// distribution, when the solver evaluated it.
    pub distance: Option<f64>,
}

impl GroupWeights {
    pub fn uniform(k: usize) -> Self {
        Self {
            w: vec![1.0 / k as f64; k],
            projected: false,
            fallback_uniform: false,
            distance: None,
        }
    }

    /// Simplex invariant: nonnegative and summing to one within 1e-10.
    pub fn is_valid(&self) -> bool {
        self.w.iter().all(|&x| x >= 0.0)
            && (self.w.iter().sum::<f64>() - 1.0).abs() <= 1e-10
    }

    /// Shannon entropy, with the 0 log 0 = 0 convention.
    pub fn entropy(&self) -> f64 {
        entropy(&self.w)
    }
}

pub fn entropy(w: &[f64]) -> f64 {
    -w.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `sum_i w_i L_i - beta * sum_i w_i log w_i`, the inner objective the
/// worst-case weights maximize.
pub fn weight_objective(w: &[f64], losses: &[f64], beta: f64) -> f64 {
    w.iter().zip(losses).map(|(wi, li)| wi * li).sum::<f64>() + beta * entropy(w)
}

/// Closed-form maximizer of the entropy-regularized linear objective over
/// the simplex: `w_i` proportional to `exp(L_i / beta)`.
pub fn softmax_weights(losses: &[f64], beta: f64) -> Vec<f64> {
    let mx = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = losses.iter().map(|&l| ((l - mx) / beta).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean loss per group. Groups absent from the batch get zero loss and a
/// `false` flag.
pub fn group_losses(per_triplet: &[f64], groups: &[usize], k: usize) -> (Vec<f64>, Vec<bool>) {
    assert_eq!(per_triplet.len(), groups.len());
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&l, &g) in per_triplet.iter().zip(groups) {
        sums[g] += l;
        counts[g] += 1;
    }
    let losses = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let seen = counts.iter().map(|&c| c > 0).collect();
    (losses, seen)
}

/// [`group_losses`] keyed by a user-to-cluster assignment.
pub fn group_losses_by_user(
    per_triplet: &[f64],
    users: &[u32],
    assignment: &[usize],
    k: usize,
) -> (Vec<f64>, Vec<bool>) {
    let groups: Vec<usize> = users.iter().map(|&u| assignment[u as usize]).collect();
    group_losses(per_triplet, &groups, k)
}

/// Entropy-regularized worst-case weights subject to the transport
/// constraint.
///
/// The unconstrained maximizer of `sum w L - beta sum w log w` is the
/// softmax of `L / beta`. If the Sinkhorn distance between the nominal
/// distribution and the reweighted group centroids exceeds `rho`, the
/// weights retreat toward uniform along the mixing path
/// `(1 - tau) * uniform + tau * softmax`, taking the largest feasible
/// `tau` found by bisection. Uniform weights are expected to be feasible;
/// if they are not, the solver reports them as a flagged fallback.
pub fn worst_case_weights(
    losses: &[f64],
    beta: f64,
    rho: f64,
    nominal: &NominalDistribution,
    centroids: &Matrix,
    sinkhorn: &SinkhornParams,
) -> Result<GroupWeights, DroError> {
    if beta <= 0.0 {
        return Err(DroError::BadParam("beta must be positive"));
    }
    if rho < 0.0 {
        return Err(DroError::BadParam("rho must be nonnegative"));
    }
    let k = losses.len();
    if k == 0 {
        return Err(DroError::EmptySelection);
    }
    let star = softmax_weights(losses, beta);
    if rho.is_infinite() {
        return Ok(GroupWeights {
            w: star,
            projected: false,
            fallback_uniform: false,
            distance: None,
        });
    }
    let distance = |w: &[f64]| -> Result<f64, DroError> {
        Ok(sinkhorn_distance(
            &nominal.embeddings,
            &nominal.weights,
            centroids,
            w,
            sinkhorn,
        )?
        .value)
    };
    let d_star = distance(&star)?;
    if d_star <= rho {
        return Ok(GroupWeights {
            w: star,
            projected: false,
            fallback_uniform: false,
            distance: Some(d_star),
        });
    }
    let uniform = vec![1.0 / k as f64; k];
    let d_uniform = distance(&uniform)?;
    if d_uniform > rho {
        log::debug!(
            "uniform group weights violate the sinkhorn ball (rho = {rho}); falling back to uniform"
        );
        return Ok(GroupWeights {
            w: uniform,
            projected: true,
            fallback_uniform: true,
            distance: Some(d_uniform),
        });
    }
    let mix = |tau: f64| -> Vec<f64> {
        uniform
            .iter()
            .zip(&star)
            .map(|(&u, &s)| (1.0 - tau) * u + tau * s)
            .collect()
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut d_lo = d_uniform;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let d_mid = distance(&mix(mid))?;
        if d_mid <= rho {
            lo = mid;
            d_lo = d_mid;
        } else {
            hi = mid;
        }
    }
    Ok(GroupWeights {
        w: mix(lo),
        projected: true,
        fallback_uniform: false,
        distance: Some(d_lo),
    })
}

/// Per-coordinate gradient of the negative-entropy term `sum w log w`
/// under its conventional sign: `-log w_i + 1`. Diagnostic only; the
/// weight update itself uses the closed form above.
pub fn entropy_grad(w: &[f64]) -> Result<Vec<f64>, DroError> {
    if let Some(i) = w.iter().position(|&x| x <= 0.0) {
        return Err(DroError::ZeroWeight(i));
    }
    Ok(w.iter().map(|&x| -x.ln() + 1.0).collect())
}

/// Baseline comparator: maximize `sum w L` subject to
/// `KL(w || uniform) <= radius`, solved by exponential tilting with a
/// bisected temperature.
pub fn kl_dro_weights(losses: &[f64], radius: f64) -> GroupWeights {
    let k = losses.len();
    if k == 0 {
        return GroupWeights::uniform(0);
    }
    if radius <= 0.0 || k == 1 {
        return GroupWeights::uniform(k);
    }
    let spread = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - losses.iter().cloned().fold(f64::INFINITY, f64::min);
    if spread <= 0.0 {
        return GroupWeights::uniform(k);
    }
    let kl_to_uniform = |w: &[f64]| -> f64 {
        w.iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| x * (x * k as f64).ln())
            .sum()
    };
    let tilt = |theta: f64| -> Vec<f64> {
        let mx = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = losses.iter().map(|&l| (theta * (l - mx)).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    };
    let mut theta_hi = 1.0;
    while kl_to_uniform(&tilt(theta_hi)) < radius {
        theta_hi *= 2.0;
        if theta_hi > 1e9 {
            // radius exceeds the reachable divergence: hard worst case
            return GroupWeights {
                w: tilt(theta_hi),
                projected: false,
                fallback_uniform: false,
                distance: None,
            };
        }
    }
    let mut lo = 0.0;
    let mut hi = theta_hi;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kl_to_uniform(&tilt(mid)) < radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    GroupWeights {
        w: tilt(0.5 * (lo + hi)),
        projected: false,
        fallback_uniform: false,
        distance: None,
    }
}

/// KL divergence between discrete distributions on a shared index set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlDivergence {
    Finite(f64),
    /// Some outcome has positive mass under `p` and zero mass under `q`.
    Infinite,
}

impl KlDivergence {
    pub fn is_infinite(&self) -> bool {
        matches!(self, KlDivergence::Infinite)
    }

    pub fn finite_value(&self) -> Option<f64> {
        match self {
            KlDivergence::Finite(v) => Some(*v),
            KlDivergence::Infinite => None,
        }
    }
}

/// `sum_i p_i log(p_i / q_i)` with the 0 log(0/q) = 0 convention; returns
/// the explicit infinity marker whenever `p` has mass outside `q`'s
/// support.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> KlDivergence {
    assert_eq!(p.len(), q.len(), "distributions on different index sets");
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return KlDivergence::Infinite;
        }
        total += pi * (pi / qi).ln();
    }
    KlDivergence::Finite(total)
}

/// Uniformly random discrete distribution over `n` outcomes.
pub fn random_simplex(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}
