//! Variational graph autoencoder: the bridge from the discrete interaction
//! graph into the continuous latent space the diffusion model operates in.
//!
//! A two-headed graph-convolutional encoder (shared first layer) produces a
//! Gaussian posterior per node; the reparameterized sample decodes back to
//! edge probabilities through an inner-product decoder. The loss is the
//! negative evidence lower bound: reconstruction cross-entropy plus the
//! analytic KL against a standard normal prior.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::autodiff::{ParamId, ParamSet, Tape, TapeError, Var};
use crate::graph::InteractionGraph;
use crate::matrix::{Matrix, SparseMatrix};

#[derive(Debug, Error)]
pub enum VgaeError {
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Encoder and feature parameters. When the dataset carries no node
/// features, `features` is a trainable free matrix — identity features
/// times a weight, folded into one parameter.
pub struct VgaeModel {
    pub features: ParamId,
    pub w_hidden: ParamId,
    pub w_mu: ParamId,
    pub w_logvar: ParamId,
    adj: Rc<SparseMatrix>,
    n_nodes: usize,
    latent_dim: usize,
}

/// Sampled reconstruction target: all observed edges as positives plus an
/// equal number of sampled non-edges, with a weight countering sparsity.
pub struct ReconSample {
    /// Node-index pairs (user node, item node) that are edges.
    pub pos_pairs: Vec<(usize, usize)>,
    /// Node-index pairs that are not edges.
    pub neg_pairs: Vec<(usize, usize)>,
    /// Weight on the positive class, typically #non-edges / #edges.
    pub pos_weight: f64,
}

impl ReconSample {
    /// Builds the per-step reconstruction sample for a training graph.
    pub fn draw(graph: &InteractionGraph, rng: &mut impl Rng) -> Self {
        let n_users = graph.n_users();
        let pos_pairs: Vec<(usize, usize)> = graph
            .edges()
            .iter()
            .map(|e| (e.user as usize, n_users + e.item as usize))
            .collect();
        let mut neg_pairs = Vec::with_capacity(pos_pairs.len());
        let capacity = graph.n_users() * graph.n_items() - graph.n_edges();
        let want = pos_pairs.len().min(capacity);
        while neg_pairs.len() < want {
            let u = rng.random_range(0..graph.n_users() as u32);
            let i = rng.random_range(0..graph.n_items() as u32);
            if !graph.has_edge(u, i) {
                neg_pairs.push((u as usize, n_users + i as usize));
            }
        }
        let total = (graph.n_users() * graph.n_items()) as f64;
        let pos_weight = if graph.n_edges() > 0 {
            (total - graph.n_edges() as f64) / graph.n_edges() as f64
        } else {
            1.0
        };
        Self {
            pos_pairs,
            neg_pairs,
            pos_weight,
        }
    }
}

impl VgaeModel {
    /// Fresh encoder with Gaussian(0, 0.1) weights. `feature_dim` is the
    /// width of the trainable fallback features; hidden width matches it.
    pub fn init(
        params: &mut ParamSet,
        graph_features: Option<&Matrix>,
        n_nodes: usize,
        feature_dim: usize,
        hidden_dim: usize,
        latent_dim: usize,
        adj: Rc<SparseMatrix>,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut draw = |rows: usize, cols: usize| {
            let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Matrix::from_vec(rows, cols, data)
        };
        let (feat_matrix, f_dim) = match graph_features {
            Some(x) => (x.clone(), x.cols()),
            None => (draw(n_nodes, feature_dim), feature_dim),
        };
        let features = params.add("vgae.features", feat_matrix);
        let w_hidden = params.add("vgae.w_hidden", draw(f_dim, hidden_dim));
        let w_mu = params.add("vgae.w_mu", draw(hidden_dim, latent_dim));
        let w_logvar = params.add("vgae.w_logvar", draw(hidden_dim, latent_dim));
        Self {
            features,
            w_hidden,
            w_mu,
            w_logvar,
            adj,
            n_nodes,
            latent_dim,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Encoder forward pass: shared propagated hidden layer, then the mean
    /// and log-variance heads. Returns (mu, logvar, sigma).
    pub fn encode_tape(
        &self,
        tape: &Tape,
        bound: &[Var],
    ) -> Result<(Var, Var, Var), TapeError> {
        let x = bound[self.features.index()];
        let h = tape.spmm(&self.adj, tape.matmul(x, bound[self.w_hidden.index()])?)?;
        let mu = tape.spmm(&self.adj, tape.matmul(h, bound[self.w_mu.index()])?)?;
        let logvar = tape.spmm(&self.adj, tape.matmul(h, bound[self.w_logvar.index()])?)?;
        let sigma = tape.exp(tape.scale(logvar, 0.5));
        Ok((mu, logvar, sigma))
    }

    /// Encoder values without gradient tracking.
    pub fn encode(&self, params: &ParamSet) -> (Matrix, Matrix) {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (mu, _, sigma) = self.encode_tape(&tape, &bound).expect("encode shapes fixed");
        (tape.value(mu), tape.value(sigma))
    }
}

/// Reparameterization: `e0 = mu + sigma .* eps` with the noise supplied by
/// the caller. Gradients flow into mu and sigma, never into eps.
pub fn reparameterize_tape(
    tape: &Tape,
    mu: Var,
    sigma: Var,
    eps: &Matrix,
) -> Result<Var, TapeError> {
    tape.add(mu, tape.hadamard(sigma, tape.input(eps.clone()))?)
}

/// Draws standard normal noise of the given shape.
pub fn sample_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Dense inner-product decoder: entrywise logistic of the Gram matrix.
pub fn decode(e: &Matrix) -> Matrix {
    let gram = e.matmul(&e.transpose());
    gram.map(crate::autodiff::stable_sigmoid)
}

/// Negative evidence lower bound with a dense reconstruction target;
/// intended for small graphs (tests keep N <= 200). `decoded` holds edge
/// probabilities in (0, 1), `a_target` the 0/1 adjacency.
pub fn vgae_loss_dense(
    tape: &Tape,
    decoded: Var,
    a_target: &Matrix,
    mu: Var,
    logvar: Var,
    pos_weight: f64,
) -> Result<Var, TapeError> {
    // BCE with positive-class weighting:
    //   -[w+ * y log p + (1 - y) log(1 - p)]
    let y = tape.input(a_target.clone());
    let one = tape.input(Matrix::filled(a_target.rows(), a_target.cols(), 1.0));
    let log_p = tape.log(decoded)?;
    let log_1p = tape.log(tape.sub(one, decoded)?)?;
    let pos_term = tape.scale(tape.sum(tape.hadamard(y, log_p)?), pos_weight);
    let neg_term = tape.sum(tape.hadamard(tape.sub(one, y)?, log_1p)?);
    let bce = tape.scale(tape.add(pos_term, neg_term)?, -1.0);
    let kl = kl_standard_normal(tape, mu, logvar)?;
    tape.add(bce, kl)
}

/// Negative ELBO evaluated on sampled reconstruction entries, the
/// tractable form used in training. Logits come straight from the latent
/// Gram rows, so the cross-entropy uses the softplus formulation.
pub fn vgae_loss_sampled(
    tape: &Tape,
    e0: Var,
    sample: &ReconSample,
    mu: Var,
    logvar: Var,
) -> Result<Var, TapeError> {
    let logits = |pairs: &[(usize, usize)]| -> Result<Var, TapeError> {
        let left: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let right: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let l_rows = tape.gather_rows(e0, &left)?;
        let r_rows = tape.gather_rows(e0, &right)?;
        let d = tape.value(e0).cols();
        let ones = tape.input(Matrix::filled(d, 1, 1.0));
        tape.matmul(tape.hadamard(l_rows, r_rows)?, ones)
    };
    // -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    let mut total: Option<Var> = None;
    if !sample.pos_pairs.is_empty() {
        let z = logits(&sample.pos_pairs)?;
        let pos = tape.scale(tape.sum(tape.softplus(tape.scale(z, -1.0))), sample.pos_weight);
        total = Some(pos);
    }
    if !sample.neg_pairs.is_empty() {
        let z = logits(&sample.neg_pairs)?;
        let neg = tape.sum(tape.softplus(z));
        total = Some(match total {
            Some(t) => tape.add(t, neg)?,
            None => neg,
        });
    }
    let bce = total.unwrap_or_else(|| tape.input(Matrix::scalar(0.0)));
    let kl = kl_standard_normal(tape, mu, logvar)?;
    tape.add(bce, kl)
}

/// Analytic KL( N(mu, sigma^2) || N(0, I) ) summed over entries:
/// 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar).
pub fn kl_standard_normal(tape: &Tape, mu: Var, logvar: Var) -> Result<Var, TapeError> {
    let mu_sq = tape.sum(tape.square(mu));
    let var = tape.sum(tape.exp(logvar));
    let lv = tape.sum(logvar);
    let (r, c) = {
        let m = tape.value(mu);
        m.shape()
    };
    let n = tape.input(Matrix::scalar((r * c) as f64));
    let s = tape.sub(tape.add(mu_sq, var)?, n)?;
    let s = tape.sub(s, lv)?;
    Ok(tape.scale(s, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalized_adjacency, Edge};
    use crate::rng::{substream, Stream};

    fn toy_model(seed: u64) -> (ParamSet, VgaeModel, InteractionGraph) {
        let edges = vec![
            Edge::new(0, 0, 0),
            Edge::new(0, 1, 0),
            Edge::new(1, 0, 0),
            Edge::new(2, 1, 0),
        ];
        let g = InteractionGraph::new(3, 2, edges).unwrap();
        let adj = Rc::new(normalized_adjacency(&g));
        let mut params = ParamSet::new();
        let mut rng = substream(seed, Stream::Init, 0);
        let model = VgaeModel::init(&mut params, None, g.n_nodes(), 4, 4, 3, adj, &mut rng);
        (params, model, g)
    }

    #[test]
    fn zero_weights_give_standard_posterior() {
        let (mut params, model, _) = toy_model(0);
        params.set_value(model.w_hidden, Matrix::zeros(4, 4));
        params.set_value(model.w_mu, Matrix::zeros(4, 3));
        params.set_value(model.w_logvar, Matrix::zeros(4, 3));
        let (mu, sigma) = model.encode(&params);
        assert!(mu.as_slice().iter().all(|&x| x == 0.0));
        assert!(sigma.as_slice().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn hand_set_weights_propagate_features() {
        // identity adjacency (self-loops only): a graph with no edges has a
        // zero adjacency, so fabricate A = I via a direct sparse matrix
        let n = 3;
        let adj = Rc::new(SparseMatrix::from_triplets(
            n,
            n,
            (0..n).map(|i| (i, i, 1.0)).collect(),
        ));
        let mut params = ParamSet::new();
        let x = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut rng = substream(0, Stream::Init, 0);
        let model = VgaeModel::init(&mut params, Some(&x), n, 2, 2, 2, adj, &mut rng);
        params.set_value(model.w_hidden, Matrix::identity(2));
        params.set_value(model.w_mu, Matrix::identity(2));
        let (mu, _) = model.encode(&params);
        assert!(mu.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn encoder_outputs_finite_across_seeds() {
        for seed in 0..100 {
            let (params, model, _) = toy_model(seed);
            let (mu, sigma) = model.encode(&params);
            assert!(mu.is_finite() && sigma.is_finite(), "seed {seed}");
            assert!(sigma.as_slice().iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn vanishing_sigma_returns_mu() {
        let tape = Tape::new();
        let mu = tape.input(Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]));
        let sigma = tape.input(Matrix::filled(2, 2, 0.0));
        let eps = sample_noise(2, 2, &mut substream(0, Stream::Vgae, 0));
        let e0 = reparameterize_tape(&tape, mu, sigma, &eps).unwrap();
        assert!(tape.value(e0).max_abs_diff(&tape.value(mu)) < 1e-15);
    }

    #[test]
    fn reparameterized_moments_match() {
        let mut rng = substream(5, Stream::Vgae, 0);
        let n = 100_000usize;
        let mu = 0.7;
        let sigma = 1.3;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let eps: f64 = rng.sample(StandardNormal);
            let x = mu + sigma * eps;
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let se_mean = sigma / (n as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean, "mean {mean}");
        let se_var = sigma * sigma * (2.0 / n as f64).sqrt();
        assert!((var - sigma * sigma).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn gradient_of_sum_wrt_mu_is_ones() {
        let tape = Tape::new();
        let mu = tape.leaf(Matrix::from_vec(2, 3, vec![0.1; 6]));
        let sigma = tape.input(Matrix::filled(2, 3, 0.5));
        let eps = sample_noise(2, 3, &mut substream(1, Stream::Vgae, 0));
        let e0 = reparameterize_tape(&tape, mu, sigma, &eps).unwrap();
        let loss = tape.sum(e0);
        tape.backward(loss).unwrap();
        let g = tape.grad(mu).unwrap();
        assert!(g.as_slice().iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn decode_of_zero_is_half_everywhere() {
        let p = decode(&Matrix::zeros(4, 3));
        assert!(p.as_slice().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn decode_of_orthonormal_rows() {
        let e = Matrix::identity(3);
        let p = decode(&e);
        let s1 = crate::autodiff::stable_sigmoid(1.0);
        for r in 0..3 {
            for c in 0..3 {
                let expected = if r == c { s1 } else { 0.5 };
                assert!((p.get(r, c) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decode_symmetric_and_open_interval() {
        let e = sample_noise(6, 3, &mut substream(2, Stream::Vgae, 0));
        let p = decode(&e);
        assert!(p.max_abs_diff(&p.transpose()) < 1e-12);
        assert!(p.as_slice().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn kl_zero_iff_standard_normal() {
        let tape = Tape::new();
        let mu = tape.input(Matrix::zeros(2, 2));
        let logvar = tape.input(Matrix::zeros(2, 2));
        let kl = kl_standard_normal(&tape, mu, logvar).unwrap();
        assert!(tape.value_scalar(kl).abs() < 1e-15);
    }

    #[test]
    fn kl_unit_mean_is_half() {
        let tape = Tape::new();
        let mu = tape.input(Matrix::scalar(1.0));
        let logvar = tape.input(Matrix::scalar(0.0));
        let kl = kl_standard_normal(&tape, mu, logvar).unwrap();
        assert!((tape.value_scalar(kl) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_nonnegative_on_random_inputs() {
        let mut rng = substream(3, Stream::Vgae, 0);
        for _ in 0..50 {
            let tape = Tape::new();
            let mu = tape.input(sample_noise(3, 2, &mut rng).scale(2.0));
            let logvar = tape.input(sample_noise(3, 2, &mut rng));
            let kl = kl_standard_normal(&tape, mu, logvar).unwrap();
            assert!(tape.value_scalar(kl) >= -1e-12);
        }
    }

    #[test]
    fn perfect_reconstruction_drives_bce_to_zero()  {
        let tape = Tape::new();
        let a = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        // probabilities already saturated at the targets
        let decoded = tape.input(a.map(|y| if y > 0.5 { 1.0 - 1e-12 } else { 1e-12 }));
        let mu = tape.input(Matrix::zeros(2, 2));
        let logvar = tape.input(Matrix::zeros(2, 2));
        let loss = vgae_loss_dense(&tape, decoded, &a, mu, logvar, 1.0).unwrap();
        assert!(tape.value_scalar(loss).abs() < 1e-9);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let (params, model, g) = toy_model(7);
        let eps = sample_noise(g.n_nodes(), model.latent_dim(), &mut substream(4, Stream::Vgae, 0));
        let sample = ReconSample::draw(&g, &mut substream(5, Stream::Vgae, 0));
        let point: Vec<Matrix> = params.snapshot().into_iter().map(|(_, m)| m).collect();
        let err = crate::autodiff::grad_check(
            |tape, vars| {
                let (mu, logvar, sigma) = model.encode_tape(tape, vars)?;
                let e0 = reparameterize_tape(tape, mu, sigma, &eps)?;
                vgae_loss_sampled(tape, e0, &sample, mu, logvar)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "vgae grad check error {err}");
    }

    #[test]
    fn ten_steps_reduce_the_loss() {
        // fixed 20-node toy graph: 12 users, 8 items
        let mut edges = Vec::new();
        for u in 0..12u32 {
            edges.push(Edge::new(u, u % 8, 0));
            edges.push(Edge::new(u, (u + 3) % 8, 0));
        }
        edges.sort_unstable_by_key(Edge::pair);
        edges.dedup_by_key(|e| e.pair());
        let g = InteractionGraph::new(12, 8, edges).unwrap();
        let adj = Rc::new(normalized_adjacency(&g));
        let mut params = ParamSet::new();
        let mut rng = substream(9, Stream::Init, 0);
        let model = VgaeModel::init(&mut params, None, g.n_nodes(), 4, 4, 3, adj, &mut rng);
        let eps = sample_noise(g.n_nodes(), model.latent_dim(), &mut substream(6, Stream::Vgae, 0));
        let sample = ReconSample::draw(&g, &mut substream(7, Stream::Vgae, 0));
        let cfg = crate::autodiff::AdamWConfig {
            learning_rate: 5e-3,
            ..Default::default()
        };
        let mut losses = Vec::new();
        for _ in 0..10 {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let (mu, logvar, sigma) = model.encode_tape(&tape, &bound).unwrap();
            let e0 = reparameterize_tape(&tape, mu, sigma, &eps).unwrap();
            let loss = vgae_loss_sampled(&tape, e0, &sample, mu, logvar).unwrap();
            losses.push(tape.value_scalar(loss));
            tape.backward(loss).unwrap();
            params.absorb_grads(&tape, &bound).unwrap();
            params.adamw_step(&cfg).unwrap();
        }
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "loss did not descend: {losses:?}"
        );
    }
}
