//! Embedding-propagation recommendation backbone with the pairwise ranking
//! loss.
//!
//! The model holds one embedding row per user and item. Propagation applies
//! the normalized adjacency L times and averages all layer outputs; scores
//! are inner products of the final rows. Denoised latent rows can be
//! attached as additive offsets to the initial embeddings, which is how the
//! denoising stack feeds recommendation scoring without routing gradients
//! back through it.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{ParamId, ParamSet, Tape, TapeError, Var};
use crate::graph::InteractionGraph;
use crate::matrix::{Matrix, SparseMatrix};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("user {0} has interacted with every item; no negative exists")]
    UserSaturated(u32),
    #[error("cannot sample triplets from a graph without edges")]
    NoEdges,
    #[error("index out of range: {what} {index} >= {bound}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
}

/// A batch of (user, positive item, negative item) index triplets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub users: Vec<u32>,
    pub pos: Vec<u32>,
    pub neg: Vec<u32>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// LightGCN-style backbone: trainable user/item embeddings plus a fixed
/// normalized adjacency.
pub struct Backbone {
    pub user_emb: ParamId,
    pub item_emb: ParamId,
    n_users: usize,
    n_items: usize,
    dim: usize,
    n_layers: usize,
    adj: Rc<SparseMatrix>,
    user_offset: Option<Matrix>,
    item_offset: Option<Matrix>,
}

impl Backbone {
    /// Fresh model with Gaussian(0, 0.1) embeddings.
    pub fn init(
        params: &mut ParamSet,
        n_users: usize,
        n_items: usize,
        dim: usize,
        n_layers: usize,
        adj: Rc<SparseMatrix>,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(adj.shape(), (n_users + n_items, n_users + n_items));
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut draw = |rows: usize| {
            let data: Vec<f64> = (0..rows * dim).map(|_| normal.sample(rng)).collect();
            Matrix::from_vec(rows, dim, data)
        };
        let user_emb = params.add("backbone.user_emb", draw(n_users));
        let item_emb = params.add("backbone.item_emb", draw(n_items));
        Self {
            user_emb,
            item_emb,
            n_users,
            n_items,
            dim,
            n_layers,
            adj,
            user_offset: None,
            item_offset: None,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Attaches denoised latent rows; they are added to the embeddings at
    /// propagation time and treated as constants by the tape.
    pub fn set_latent_offsets(&mut self, user_rows: Matrix, item_rows: Matrix) {
        assert_eq!(user_rows.shape(), (self.n_users, self.dim));
        assert_eq!(item_rows.shape(), (self.n_items, self.dim));
        self.user_offset = Some(user_rows);
        self.item_offset = Some(item_rows);
    }

    pub fn clear_latent_offsets(&mut self) {
        self.user_offset = None;
        self.item_offset = None;
    }

    /// Differentiable propagation. Returns the final node embedding matrix
    /// (users first, then items): the average of all L+1 layer outputs.
    pub fn propagate_tape(&self, tape: &Tape, bound: &[Var]) -> Result<Var, TapeError> {
        let mut user0 = bound[self.user_emb.index()];
        let mut item0 = bound[self.item_emb.index()];
        if let (Some(uo), Some(io)) = (&self.user_offset, &self.item_offset) {
            user0 = tape.add(user0, tape.input(uo.clone()))?;
            item0 = tape.add(item0, tape.input(io.clone()))?;
        }
        let e0 = tape.concat_rows(user0, item0)?;
        let mut acc = e0;
        let mut cur = e0;
        for _ in 0..self.n_layers {
            cur = tape.spmm(&self.adj, cur)?;
            acc = tape.add(acc, cur)?;
        }
        Ok(tape.scale(acc, 1.0 / (self.n_layers + 1) as f64))
    }

    /// Same propagation without a tape; for evaluation and ranking.
    pub fn propagate(&self, params: &ParamSet) -> Matrix {
        let mut user0 = params.value(self.user_emb).clone();
        let mut item0 = params.value(self.item_emb).clone();
        if let (Some(uo), Some(io)) = (&self.user_offset, &self.item_offset) {
            user0 = user0.add(uo);
            item0 = item0.add(io);
        }
        let e0 = user0.concat_rows(&item0);
        let mut acc = e0.clone();
        let mut cur = e0;
        for _ in 0..self.n_layers {
            cur = self.adj.matmul_dense(&cur);
            acc.add_assign(&cur);
        }
        acc.scale(1.0 / (self.n_layers + 1) as f64)
    }

    /// Inner-product score of one user-item pair from propagated
    /// embeddings.
    pub fn score(&self, final_nodes: &Matrix, user: usize, item: usize) -> Result<f64, BackboneError> {
        if user >= self.n_users {
            return Err(BackboneError::IndexOutOfRange {
                what: "user",
                index: user,
                bound: self.n_users,
            });
        }
        if item >= self.n_items {
            return Err(BackboneError::IndexOutOfRange {
                what: "item",
                index: item,
                bound: self.n_items,
            });
        }
        let u = final_nodes.row(user);
        let i = final_nodes.row(self.n_users + item);
        Ok(u.iter().zip(i).map(|(a, b)| a * b).sum())
    }

    /// Per-triplet scores (positive, negative) as column vectors on the
    /// tape.
    pub fn triplet_scores(
        &self,
        tape: &Tape,
        final_nodes: Var,
        batch: &TripletBatch,
    ) -> Result<(Var, Var), TapeError> {
        let users: Vec<usize> = batch.users.iter().map(|&u| u as usize).collect();
        let pos: Vec<usize> = batch
            .pos
            .iter()
            .map(|&i| self.n_users + i as usize)
            .collect();
        let neg: Vec<usize> = batch
            .neg
            .iter()
            .map(|&i| self.n_users + i as usize)
            .collect();
        let u_rows = tape.gather_rows(final_nodes, &users)?;
        let p_rows = tape.gather_rows(final_nodes, &pos)?;
        let n_rows = tape.gather_rows(final_nodes, &neg)?;
        let ones = tape.input(Matrix::filled(self.dim, 1, 1.0));
        let pos_scores = tape.matmul(tape.hadamard(u_rows, p_rows)?, ones)?;
        let neg_scores = tape.matmul(tape.hadamard(u_rows, n_rows)?, ones)?;
        Ok((pos_scores, neg_scores))
    }
}

/// Per-triplet ranking losses `-log sigmoid(pos - neg)`, one row each,
/// computed as `softplus(neg - pos)` for stability.
pub fn bpr_losses(tape: &Tape, pos_scores: Var, neg_scores: Var) -> Result<Var, TapeError> {
    let delta = tape.sub(neg_scores, pos_scores)?;
    Ok(tape.softplus(delta))
}

/// Summed ranking loss over a batch of score columns.
pub fn bpr_loss(tape: &Tape, pos_scores: Var, neg_scores: Var) -> Result<Var, TapeError> {
    Ok(tape.sum(bpr_losses(tape, pos_scores, neg_scores)?))
}

/// Draws `batch_size` triplets: a uniformly random observed interaction
/// supplies the user and positive; the negative is rejection-sampled
/// uniformly from the user's non-interacted items.
pub fn sample_triplets(
    graph: &InteractionGraph,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<TripletBatch, BackboneError> {
    if graph.n_edges() == 0 {
        return Err(BackboneError::NoEdges);
    }
    let mut users = Vec::with_capacity(batch_size);
    let mut pos = Vec::with_capacity(batch_size);
    let mut neg = Vec::with_capacity(batch_size);
    let user_degree: Vec<usize> = {
        let mut d = vec![0usize; graph.n_users()];
        for e in graph.edges() {
            d[e.user as usize] += 1;
        }
        d
    };
    for _ in 0..batch_size {
        let e = graph.edges()[rng.random_range(0..graph.n_edges())];
        if user_degree[e.user as usize] == graph.n_items() {
            return Err(BackboneError::UserSaturated(e.user));
        }
        let n = loop {
            let cand = rng.random_range(0..graph.n_items() as u32);
            if !graph.has_edge(e.user, cand) {
                break cand;
            }
        };
        users.push(e.user);
        pos.push(e.item);
        neg.push(n);
    }
    Ok(TripletBatch { users, pos, neg })
}
