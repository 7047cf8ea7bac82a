//! Distributionally robust graph recommendation.
//!
//! The crate trains a LightGCN-style recommender under a Sinkhorn
//! (entropic optimal transport) distributionally robust objective. The
//! interaction graph is first denoised in a latent space learned by a
//! variational graph autoencoder and a diffusion model; the nominal
//! distribution of the robustness ball comes from betweenness centrality,
//! and the uncertainty set from k-means clusters of denoised user
//! embeddings, reweighted each step under an entropy-regularized
//! worst-case rule.

pub mod autodiff;
pub mod backbone;
pub mod diffusion;
pub mod dro;
pub mod eval;
pub mod graph;
pub mod matrix;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod vgae;
