//! File-level pipeline commands shared by the CLI and the end-to-end
//! tests: each command reads its inputs, runs the corresponding library
//! operation, and writes artifacts plus a manifest capturing the fully
//! resolved configuration and seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

use crate::autodiff::{load_checkpoint, save_checkpoint};
use crate::dro::{kl_divergence, random_simplex, sinkhorn_distance, SinkhornParams};
use crate::eval::experiments::{
    cohort_benchmark, noise_robustness_sweep, weight_trajectory_experiment, weighted_bpr_variance,
    ExperimentError, SweepReport, TrajectoryOutcome, VarianceInputs,
};
use crate::eval::{evaluate_embeddings, EvalReport};
use crate::graph::{
    build_graph, load_interactions, load_split, save_split, split_exposure, split_popularity,
    split_temporal, FileFormat, GraphError, PositiveRule, SplitKind,
};
use crate::matrix::Matrix;
use crate::rng::{substream, Stream};
use crate::synth::{generate, generate_uniform_observed, SynthConfig};
use crate::trainer::{train, Grouping, Method, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
}

impl PipelineError {
    /// Process exit code for the failure class: 3 for data problems,
    /// 4 for training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Train(TrainError::Diverged { .. }) => 4,
            PipelineError::Experiment(ExperimentError::Train(TrainError::Diverged {
                ..
            })) => 4,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, body: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    fs::write(path, body).map_err(io_err(path))
}

fn write_manifest(dir: &Path, value: serde_json::Value) -> Result<(), PipelineError> {
    let body = serde_json::to_string_pretty(&value).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), body.as_bytes())
}

/// Options for `prepare`: raw-file shape, filtering, and split selection.
pub struct PrepareOpts {
    pub format: FileFormat,
    pub min_user_deg: usize,
    pub min_item_deg: usize,
    pub rule: PositiveRule,
    pub kind: SplitKind,
    pub ood_fraction: f64,
    /// Edge-list file of fully observed interactions (exposure split).
    pub observed_path: Option<PathBuf>,
    pub seed: u64,
}

/// Reads raw interactions, builds the filtered graph, splits it, and
/// writes the four edge lists plus manifest into `out_dir`.
pub fn prepare_cmd(
    input: &Path,
    opts: &PrepareOpts,
    out_dir: &Path,
) -> Result<(), PipelineError> {
    let rows = load_interactions(input, &opts.format)?;
    let graph = build_graph(&rows, opts.min_user_deg, opts.min_item_deg, opts.rule)?;
    let bundle = match opts.kind {
        SplitKind::Popularity => split_popularity(&graph, opts.ood_fraction, opts.seed)?,
        SplitKind::Temporal => split_temporal(&graph, opts.ood_fraction)?,
        SplitKind::Exposure => {
            let path = opts.observed_path.as_ref().ok_or_else(|| {
                PipelineError::Data(
                    "exposure split needs --observed <edge list file>".to_string(),
                )
            })?;
            let observed_rows = load_interactions(path, &opts.format)?;
            // map observed ids through the graph's dense index
            let user_index: std::collections::BTreeMap<&str, u32> = graph
                .user_ids()
                .map(|ids| {
                    ids.iter()
                        .enumerate()
                        .map(|(i, s)| (s.as_str(), i as u32))
                        .collect()
                })
                .unwrap_or_default();
            let item_index: std::collections::BTreeMap<&str, u32> = graph
                .item_ids()
                .map(|ids| {
                    ids.iter()
                        .enumerate()
                        .map(|(i, s)| (s.as_str(), i as u32))
                        .collect()
                })
                .unwrap_or_default();
            let mut observed = Vec::new();
            let mut dropped = 0usize;
            let mut seen = std::collections::BTreeSet::new();
            for row in &observed_rows {
                match (
                    user_index.get(row.user_id.as_str()),
                    item_index.get(row.item_id.as_str()),
                ) {
                    (Some(&u), Some(&i)) => {
                        if seen.insert((u, i)) {
                            observed.push(crate::graph::Edge::new(u, i, row.timestamp));
                        }
                    }
                    _ => dropped += 1,
                }
            }
            if dropped > 0 {
                log::warn!("exposure split: {dropped} observed rows reference filtered-out nodes");
            }
            split_exposure(&graph, &observed, opts.seed)?
        }
    };
    save_split(out_dir, &bundle)?;
    Ok(())
}

/// Generates the synthetic benchmark and writes it as an interaction file
/// (plus cohort labels when the generator produced any).
pub fn synth_cmd(cfg: &SynthConfig, out_dir: &Path) -> Result<(), PipelineError> {
    let data = generate(cfg)?;
    let path = out_dir.join("interactions.tsv");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(&path))?;
    }
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    for e in data.graph.edges() {
        writeln!(w, "u{}\ti{}\t1\t{}", e.user, e.item, e.timestamp).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    if data.edge_groups.iter().any(|&g| g != crate::synth::EdgeGroup::Major) {
        let gpath = out_dir.join("groups.tsv");
        let mut gw = BufWriter::new(File::create(&gpath).map_err(io_err(&gpath))?);
        for (e, g) in data.graph.edges().iter().zip(&data.edge_groups) {
            writeln!(gw, "u{}\ti{}\t{}", e.user, e.item, *g as usize).map_err(io_err(&gpath))?;
        }
        gw.flush().map_err(io_err(&gpath))?;
    }
    // companion uniformly exposed set for exposure-shift experiments
    let observed = generate_uniform_observed(cfg, &data, 3);
    let opath = out_dir.join("observed.tsv");
    let mut ow = BufWriter::new(File::create(&opath).map_err(io_err(&opath))?);
    for e in &observed {
        writeln!(ow, "u{}\ti{}\t1\t{}", e.user, e.item, e.timestamp).map_err(io_err(&opath))?;
    }
    ow.flush().map_err(io_err(&opath))?;
    write_manifest(
        out_dir,
        json!({
            "command": "synth",
            "seed": cfg.seed,
            "n_users": cfg.n_users,
            "n_items": cfg.n_items,
            "n_clusters": cfg.n_clusters,
            "interactions_per_user": cfg.interactions_per_user,
            "minor_user_fraction": cfg.minor_user_fraction,
            "noise_fraction": cfg.noise_fraction,
            "exposure_gamma": cfg.exposure_gamma,
            "edges": data.graph.n_edges(),
            "observed_edges": observed.len(),
        }),
    )
}

const FINAL_NODES_KEY: &str = "final_nodes";

/// Trains on a prepared split and writes `checkpoint.ckpt`, `history.csv`,
/// `weights.csv`, and a manifest into `out_dir`. The checkpoint carries
/// the best-epoch parameters plus the propagated scoring matrix.
pub fn train_cmd(
    cfg: &TrainConfig,
    split_dir: &Path,
    out_dir: &Path,
) -> Result<(), PipelineError> {
    let split = load_split(split_dir)?;
    let outcome = train(cfg, &split, &Grouping::Cluster)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut arrays = outcome.best_params.clone();
    arrays.push((FINAL_NODES_KEY.to_string(), outcome.best_final_nodes.clone()));
    let ckpt = out_dir.join("checkpoint.ckpt");
    save_checkpoint(&ckpt, &arrays).map_err(io_err(&ckpt))?;

    let mut history = Vec::new();
    outcome
        .history
        .write_csv(&mut history)
        .expect("in-memory write");
    write_file(&out_dir.join("history.csv"), &history)?;
    let mut weights = Vec::new();
    outcome
        .history
        .write_weight_csv(&mut weights)
        .expect("in-memory write");
    write_file(&out_dir.join("weights.csv"), &weights)?;

    write_manifest(
        out_dir,
        json!({
            "command": "train",
            "config": cfg.entries(),
            "split_dir": split_dir.display().to_string(),
            "split_kind": split.kind.to_string(),
            "best_epoch": outcome.best_epoch,
            "epochs_run": outcome.history.epochs.len(),
            "n_users": split.train.n_users(),
            "n_items": split.train.n_items(),
        }),
    )
}

fn eval_report_csv(reports: &[(&str, &EvalReport)]) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "side,k,recall,ndcg,evaluable_users").unwrap();
    for (side, r) in reports {
        for &k in &r.ks {
            writeln!(
                out,
                "{side},{k},{},{},{}",
                r.recall_at(k),
                r.ndcg_at(k),
                r.evaluable_users
            )
            .unwrap();
        }
    }
    out
}

/// Scores a trained checkpoint against the held-out sides of a split and
/// writes `report.csv` / `report.json`.
pub fn evaluate_cmd(
    checkpoint: &Path,
    split_dir: &Path,
    ks: &[usize],
    out_dir: &Path,
) -> Result<(), PipelineError> {
    let split = load_split(split_dir)?;
    let arrays = load_checkpoint(checkpoint).map_err(io_err(checkpoint))?;
    let final_nodes: &Matrix = arrays
        .iter()
        .find(|(name, _)| name == FINAL_NODES_KEY)
        .map(|(_, m)| m)
        .ok_or_else(|| {
            PipelineError::Data(format!("checkpoint lacks the {FINAL_NODES_KEY} array"))
        })?;
    if final_nodes.rows() != split.train.n_nodes() {
        return Err(PipelineError::Data(format!(
            "checkpoint was trained on {} nodes but the split has {}",
            final_nodes.rows(),
            split.train.n_nodes()
        )));
    }
    let ood = evaluate_embeddings(final_nodes, &split.train, &split.test_ood, ks);
    let iid = evaluate_embeddings(final_nodes, &split.train, &split.test_iid, ks);
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_file(
        &out_dir.join("report.csv"),
        &eval_report_csv(&[("ood", &ood), ("iid", &iid)]),
    )?;
    let side_json = |r: &EvalReport| {
        json!({
            "recall": r.recall.iter().map(|(k, v)| (k.to_string(), v)).collect::<std::collections::BTreeMap<_, _>>(),
            "ndcg": r.ndcg.iter().map(|(k, v)| (k.to_string(), v)).collect::<std::collections::BTreeMap<_, _>>(),
            "evaluable_users": r.evaluable_users,
        })
    };
    write_file(
        &out_dir.join("report.json"),
        serde_json::to_string_pretty(&json!({
            "ood": side_json(&ood),
            "iid": side_json(&iid),
        }))
        .unwrap()
        .as_bytes(),
    )?;
    write_manifest(
        out_dir,
        json!({
            "command": "evaluate",
            "checkpoint": checkpoint.display().to_string(),
            "split_dir": split_dir.display().to_string(),
            "ks": ks,
            "seed": split.seed,
        }),
    )
}

/// Noise-robustness sweep over a prepared split; writes the long-format
/// CSV, a JSON summary, and a manifest.
pub fn sweep_cmd(
    cfg: &TrainConfig,
    split_dir: &Path,
    ratios: &[f64],
    methods: &[Method],
    out_dir: &Path,
) -> Result<SweepReport, PipelineError> {
    let split = load_split(split_dir)?;
    let report = noise_robustness_sweep(cfg, &split, ratios, methods)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).expect("in-memory write");
    write_file(&out_dir.join("sweep.csv"), &csv)?;
    write_file(
        &out_dir.join("sweep.json"),
        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
    )?;
    write_manifest(
        out_dir,
        json!({
            "command": "sweep-noise",
            "config": cfg.entries(),
            "split_dir": split_dir.display().to_string(),
            "ratios": ratios,
            "methods": methods.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
        }),
    )?;
    Ok(report)
}

/// Weight-trajectory experiment on the labeled cohort benchmark; writes a
/// trajectory CSV per method.
pub fn weights_fig_cmd(
    cfg: &TrainConfig,
    noise_fraction: f64,
    out_dir: &Path,
) -> Result<TrajectoryOutcome, PipelineError> {
    let synth_cfg = cohort_benchmark(cfg.seed, noise_fraction);
    let outcome = weight_trajectory_experiment(cfg, &synth_cfg)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut drgo_csv = Vec::new();
    outcome.drgo.write_weight_csv(&mut drgo_csv).unwrap();
    write_file(&out_dir.join("drgo_weights.csv"), &drgo_csv)?;
    let mut kl_csv = Vec::new();
    outcome.baseline.write_weight_csv(&mut kl_csv).unwrap();
    write_file(&out_dir.join("kldro_weights.csv"), &kl_csv)?;
    write_manifest(
        out_dir,
        json!({
            "command": "weights-fig",
            "config": cfg.entries(),
            "noise_fraction": noise_fraction,
            "groups": outcome.group_names,
            "final_noise_weight_drgo": TrajectoryOutcome::final_noise_weight(&outcome.drgo),
            "final_noise_weight_kldro": TrajectoryOutcome::final_noise_weight(&outcome.baseline),
        }),
    )?;
    Ok(outcome)
}

/// Diagnostics: the KL-blowup versus finite-transport contrast on random
/// disjoint-support pairs, and the variance diagnostic along a rising
/// noisy-weight path. Returns the JSON written to disk.
pub fn diagnose_cmd(
    seed: u64,
    n_pairs: usize,
    out_dir: &Path,
) -> Result<serde_json::Value, PipelineError> {
    let mut rng = substream(seed, Stream::Eval, 7);
    let mut infinite = 0usize;
    let mut finite_transport = 0usize;
    let mut max_transport: f64 = 0.0;
    let params = SinkhornParams::default();
    for _ in 0..n_pairs {
        let n = 4;
        // disjoint supports on a shared index set of size 2n
        let p_head = random_simplex(n, &mut rng);
        let q_tail = random_simplex(n, &mut rng);
        let mut p = vec![0.0; 2 * n];
        let mut q = vec![0.0; 2 * n];
        p[..n].copy_from_slice(&p_head);
        q[n..].copy_from_slice(&q_tail);
        if kl_divergence(&p, &q).is_infinite() {
            infinite += 1;
        }
        // the same atoms as embedded points
        let points = Matrix::from_vec(2 * n, 1, (0..2 * n).map(|i| i as f64).collect());
        let result = sinkhorn_distance(&points, &p, &points, &q, &params)
            .map_err(TrainError::Dro)
            .map_err(PipelineError::Train)?;
        if result.value.is_finite() {
            finite_transport += 1;
            max_transport = max_transport.max(result.value);
        }
    }

    // rising noisy-weight path under a fixed fixture
    let xdr_c = [1.0, 1.5, 0.8, 1.2];
    let xdr_o = [1.1, 0.9];
    let mut path = Vec::new();
    for step in 0..10 {
        let tau = 0.05 + 0.09 * step as f64;
        let w_c = vec![(1.0 - tau) / 4.0; 4];
        let w_o = vec![tau / 2.0; 2];
        let v = weighted_bpr_variance(&VarianceInputs {
            w_clean: &w_c,
            w_noisy: &w_o,
            xdr_clean: &xdr_c,
            xdr_noisy: &xdr_o,
            sigma2_clean: 0.2,
            sigma2_noisy: 4.0,
        })?;
        path.push(json!({"noisy_mass": tau, "variance": v}));
    }

    let value = json!({
        "command": "diagnose",
        "seed": seed,
        "pairs": n_pairs,
        "kl_infinite": infinite,
        "sinkhorn_finite": finite_transport,
        "max_sinkhorn_value": max_transport,
        "variance_path": path,
    });
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_file(
        &out_dir.join("diagnose.json"),
        serde_json::to_string_pretty(&value).unwrap().as_bytes(),
    )?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagnose_contrast_holds() {
        let dir = tempfile::tempdir().unwrap();
        let v = diagnose_cmd(3, 10, dir.path()).unwrap();
        assert_eq!(v["kl_infinite"], 10);
        assert_eq!(v["sinkhorn_finite"], 10);
        assert!(dir.path().join("diagnose.json").exists());
    }
}
