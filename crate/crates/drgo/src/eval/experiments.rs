//! Experiment harnesses: noise-robustness sweep, labeled-cohort weight
//! trajectories, and the weighted-ranking variance diagnostic.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::graph::inject_noise;
use crate::graph::SplitBundle;
use crate::synth::{generate, SynthConfig, EDGE_GROUP_COUNT};
use crate::trainer::{train, Grouping, Method, TrainConfig, TrainError, TrainHistory};

use super::evaluate_embeddings;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error("variance diagnostic denominator is zero")]
    ZeroDenominator,
}

/// One cell of the noise sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub method: String,
    pub ratio: f64,
    pub recall20: f64,
    pub ndcg20: f64,
    /// `(clean - noisy) / clean` on Recall@20 against the same method's
    /// ratio-zero run.
    pub relative_decline: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct SweepReport {
    pub seed: u64,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn cell(&self, method: Method, ratio: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.method == method.to_string() && (c.ratio - ratio).abs() < 1e-12)
    }

    /// Long-format CSV: one row per method, ratio, metric, K.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "method,ratio,metric,k,value")?;
        for c in &self.cells {
            writeln!(w, "{},{},recall,20,{}", c.method, c.ratio, c.recall20)?;
            writeln!(w, "{},{},ndcg,20,{}", c.method, c.ratio, c.ndcg20)?;
            writeln!(
                w,
                "{},{},relative_decline_recall,20,{}",
                c.method, c.ratio, c.relative_decline
            )?;
        }
        Ok(())
    }
}

/// Retrains every method on noise-corrupted copies of the training graph
/// and measures OOD metric decline relative to each method's clean run.
/// A ratio-zero baseline is always included.
pub fn noise_robustness_sweep(
    base_cfg: &TrainConfig,
    split: &SplitBundle,
    ratios: &[f64],
    methods: &[Method],
) -> Result<SweepReport, ExperimentError> {
    let mut all_ratios: Vec<f64> = ratios.to_vec();
    if !all_ratios.iter().any(|&r| r == 0.0) {
        all_ratios.insert(0, 0.0);
    }
    all_ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut report = SweepReport {
        seed: base_cfg.seed,
        cells: Vec::new(),
    };
    for &method in methods {
        let mut clean_recall = f64::NAN;
        for &ratio in &all_ratios {
            let cfg = TrainConfig {
                method,
                ..base_cfg.clone()
            };
            let corrupted = if ratio == 0.0 {
                split.train.clone()
            } else {
                inject_noise(&split.train, ratio, cfg.seed ^ ratio.to_bits())?
            };
            let bundle = SplitBundle {
                train: corrupted,
                ..split.clone()
            };
            let out = train(&cfg, &bundle, &Grouping::Cluster)?;
            // scoring excludes the clean training positives so cells stay
            // comparable across ratios
            let eval =
                evaluate_embeddings(&out.best_final_nodes, &split.train, &split.test_ood, &[20]);
            let recall = eval.recall_at(20);
            if ratio == 0.0 {
                clean_recall = recall;
            }
            let decline = if clean_recall > 0.0 {
                (clean_recall - recall) / clean_recall
            } else {
                f64::NAN
            };
            report.cells.push(SweepCell {
                method: method.to_string(),
                ratio,
                recall20: recall,
                ndcg20: eval.ndcg_at(20),
                relative_decline: decline,
            });
        }
    }
    Ok(report)
}

/// Output of the labeled-cohort weight experiment: per-epoch group weights
/// for the full method and the KL-ball baseline over the {major, minor,
/// noise} interaction groups.
pub struct TrajectoryOutcome {
    pub drgo: TrainHistory,
    pub baseline: TrainHistory,
    pub group_names: [&'static str; EDGE_GROUP_COUNT],
}

impl TrajectoryOutcome {
    pub fn final_noise_weight(history: &TrainHistory) -> f64 {
        history
            .epochs
            .last()
            .map(|e| e.group_weights[2])
            .unwrap_or(f64::NAN)
    }
}

/// Benchmark preset for the weight experiment: 90/10 user-activity cohorts
/// plus an injected noise group of the given fraction.
pub fn cohort_benchmark(seed: u64, noise_fraction: f64) -> SynthConfig {
    SynthConfig {
        n_users: 300,
        n_items: 220,
        interactions_per_user: 16,
        minor_user_fraction: 0.1,
        minor_activity_scale: 0.4,
        noise_fraction,
        seed,
        ..Default::default()
    }
}

/// Trains the full method and the KL-DRO baseline with groups fixed to the
/// generator's labeled cohorts, recording weight trajectories.
pub fn weight_trajectory_experiment(
    base_cfg: &TrainConfig,
    synth_cfg: &SynthConfig,
) -> Result<TrajectoryOutcome, ExperimentError> {
    let data = generate(synth_cfg)?;
    let grouping = Grouping::FixedEdgeGroups {
        map: data.group_map(),
        k: EDGE_GROUP_COUNT,
    };
    let bundle = SplitBundle {
        train: data.graph.clone(),
        valid: Vec::new(),
        test_iid: Vec::new(),
        test_ood: Vec::new(),
        kind: crate::graph::SplitKind::Popularity,
        seed: synth_cfg.seed,
        ood_fraction: 0.0,
    };
    let drgo_cfg = TrainConfig {
        method: Method::Drgo,
        ..base_cfg.clone()
    };
    let kl_cfg = TrainConfig {
        method: Method::KlDro,
        ..base_cfg.clone()
    };
    let drgo = train(&drgo_cfg, &bundle, &grouping)?;
    let baseline = train(&kl_cfg, &bundle, &grouping)?;
    Ok(TrajectoryOutcome {
        drgo: drgo.history,
        baseline: baseline.history,
        group_names: ["major", "minor", "noise"],
    })
}

/// Inputs for the weighted-ranking variance diagnostic: per-triplet
/// weights and feature-times-score-gap products for the clean and noisy
/// partitions, with their known label variances.
pub struct VarianceInputs<'a> {
    pub w_clean: &'a [f64],
    pub w_noisy: &'a [f64],
    /// Product `x * delta r-hat` per clean triplet.
    pub xdr_clean: &'a [f64],
    pub xdr_noisy: &'a [f64],
    pub sigma2_clean: f64,
    pub sigma2_noisy: f64,
}

/// Parameter-variance diagnostic of the weighted ranking loss:
/// `[sum w_c^2 (x dr)^2 s_c^2 + sum w_o^2 (x dr)^2 s_o^2] /
///  [sum w_c (x dr)^2 + sum w_o (x dr)^2]^2`.
pub fn weighted_bpr_variance(inp: &VarianceInputs) -> Result<f64, ExperimentError> {
    assert_eq!(inp.w_clean.len(), inp.xdr_clean.len());
    assert_eq!(inp.w_noisy.len(), inp.xdr_noisy.len());
    let num_clean: f64 = inp
        .w_clean
        .iter()
        .zip(inp.xdr_clean)
        .map(|(&w, &x)| w * w * x * x * inp.sigma2_clean)
        .sum();
    let num_noisy: f64 = inp
        .w_noisy
        .iter()
        .zip(inp.xdr_noisy)
        .map(|(&w, &x)| w * w * x * x * inp.sigma2_noisy)
        .sum();
    let den: f64 = inp
        .w_clean
        .iter()
        .zip(inp.xdr_clean)
        .map(|(&w, &x)| w * x * x)
        .sum::<f64>()
        + inp
            .w_noisy
            .iter()
            .zip(inp.xdr_noisy)
            .map(|(&w, &x)| w * x * x)
            .sum::<f64>();
    if den == 0.0 {
        return Err(ExperimentError::ZeroDenominator);
    }
    Ok((num_clean + num_noisy) / (den * den))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_reduces_to_clean_expression_without_noise() {
        let w_c = [0.25, 0.25, 0.5];
        let xdr_c = [1.0, 2.0, 0.5];
        let with_empty = weighted_bpr_variance(&VarianceInputs {
            w_clean: &w_c,
            w_noisy: &[],
            xdr_clean: &xdr_c,
            xdr_noisy: &[],
            sigma2_clean: 0.5,
            sigma2_noisy: 9.0,
        })
        .unwrap();
        let zeroed = weighted_bpr_variance(&VarianceInputs {
            w_clean: &w_c,
            w_noisy: &[0.0, 0.0],
            xdr_clean: &xdr_c,
            xdr_noisy: &[3.0, 4.0],
            sigma2_clean: 0.5,
            sigma2_noisy: 9.0,
        })
        .unwrap();
        assert!((with_empty - zeroed).abs() < 1e-15);
    }

    #[test]
    fn variance_symmetric_when_sigmas_match() {
        // with equal weights and equal variances the clean/noisy labeling
        // is irrelevant
        let a = weighted_bpr_variance(&VarianceInputs {
            w_clean: &[0.25, 0.25],
            w_noisy: &[0.25, 0.25],
            xdr_clean: &[1.0, 2.0],
            xdr_noisy: &[3.0, 4.0],
            sigma2_clean: 0.7,
            sigma2_noisy: 0.7,
        })
        .unwrap();
        let b = weighted_bpr_variance(&VarianceInputs {
            w_clean: &[0.25, 0.25],
            w_noisy: &[0.25, 0.25],
            xdr_clean: &[3.0, 4.0],
            xdr_noisy: &[1.0, 2.0],
            sigma2_clean: 0.7,
            sigma2_noisy: 0.7,
        })
        .unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn upweighting_noisy_samples_increases_variance() {
        // fixed fixture with sigma_o^2 > sigma_c^2: shifting weight mass
        // from clean to noisy strictly raises the diagnostic along the path
        let xdr_c = [1.0, 1.5, 0.8, 1.2];
        let xdr_o = [1.1, 0.9];
        let sigma2_c = 0.2;
        let sigma2_o = 4.0;
        let mut last = f64::NEG_INFINITY;
        for step in 0..10 {
            let tau = 0.05 + 0.09 * step as f64; // noisy mass share
            let w_c = vec![(1.0 - tau) / 4.0; 4];
            let w_o = vec![tau / 2.0; 2];
            let v = weighted_bpr_variance(&VarianceInputs {
                w_clean: &w_c,
                w_noisy: &w_o,
                xdr_clean: &xdr_c,
                xdr_noisy: &xdr_o,
                sigma2_clean: sigma2_c,
                sigma2_noisy: sigma2_o,
            })
            .unwrap();
            assert!(v > last, "step {step}: {v} not above {last}");
            last = v;
        }
    }

    #[test]
    fn zero_denominator_reported() {
        let r = weighted_bpr_variance(&VarianceInputs {
            w_clean: &[0.5],
            w_noisy: &[0.5],
            xdr_clean: &[0.0],
            xdr_noisy: &[0.0],
            sigma2_clean: 1.0,
            sigma2_noisy: 1.0,
        });
        assert!(matches!(r, Err(ExperimentError::ZeroDenominator)));
    }
}
