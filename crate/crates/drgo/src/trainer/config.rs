//! Training configuration, its flat key-value file format, and the
//! published hyperparameter grid.

use std::collections::BTreeMap;
use std::path::Path;

use super::TrainError;

/// Which objective drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Full method: denoised latents, entropy-regularized worst-case group
    /// weights inside a Sinkhorn ball.
    Drgo,
    /// Plain backbone with uniform weights.
    Erm,
    /// Group weights from the KL-ball worst case; no denoising stack.
    KlDro,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Drgo => write!(f, "drgo"),
            Method::Erm => write!(f, "erm"),
            Method::KlDro => write!(f, "kl-dro"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drgo" => Ok(Method::Drgo),
            "erm" => Ok(Method::Erm),
            "kl-dro" | "kldro" => Ok(Method::KlDro),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

/// Every knob of a training run. Grid values are the published search
/// space; other values are accepted with a logged warning.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_clusters: usize,
    pub rho: f64,
    pub sinkhorn_lambda: f64,
    pub entropy_beta: f64,
    pub top_pct: f64,
    pub diffusion_steps: usize,
    /// Corruption depth for the per-epoch denoising pass; 0 means T/2.
    pub diffusion_t_start: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub method: Method,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            n_layers: 2,
            n_clusters: 5,
            rho: 0.05,
            sinkhorn_lambda: 0.1,
            entropy_beta: 1.0,
            top_pct: 10.0,
            diffusion_steps: 20,
            diffusion_t_start: 0,
            beta_start: 1e-4,
            beta_end: 0.02,
            learning_rate: 5e-3,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 2048,
            patience: 10,
            seed: 0,
            method: Method::Drgo,
        }
    }
}

const EMBED_GRID: [usize; 4] = [16, 32, 64, 128];
const LAYER_GRID: [usize; 5] = [1, 2, 3, 4, 5];
const CLUSTER_GRID: [usize; 5] = [1, 3, 5, 8, 10];
const RHO_GRID: [f64; 5] = [0.001, 0.01, 0.05, 0.1, 0.5];
const TOP_PCT_GRID: [f64; 5] = [1.0, 5.0, 10.0, 15.0, 25.0];
const DIFFUSION_GRID: [usize; 5] = [20, 50, 100, 200, 500];
const DECAY_GRID: [f64; 4] = [0.1, 0.001, 0.0001, 0.00001];

impl TrainConfig {
    /// Effective corruption depth.
    pub fn t_start(&self) -> usize {
        if self.diffusion_t_start == 0 {
            (self.diffusion_steps / 2).max(1)
        } else {
            self.diffusion_t_start
        }
    }

    /// Hard validation of structural requirements, plus warnings for
    /// values outside the published grid.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.embed_dim == 0
            || self.n_clusters == 0
            || self.batch_size == 0
            || self.epochs == 0
            || self.diffusion_steps == 0
        {
            return Err(TrainError::BadConfig(
                "embed_dim, n_clusters, batch_size, epochs and diffusion_steps must be positive",
            ));
        }
        if self.t_start() > self.diffusion_steps {
            return Err(TrainError::BadConfig(
                "diffusion_t_start exceeds diffusion_steps",
            ));
        }
        if !EMBED_GRID.contains(&self.embed_dim) {
            log::warn!("embed_dim {} is outside the published grid {EMBED_GRID:?}", self.embed_dim);
        }
        if !LAYER_GRID.contains(&self.n_layers) {
            log::warn!("n_layers {} is outside the published grid {LAYER_GRID:?}", self.n_layers);
        }
        if !CLUSTER_GRID.contains(&self.n_clusters) {
            log::warn!(
                "n_clusters {} is outside the published grid {CLUSTER_GRID:?}",
                self.n_clusters
            );
        }
        if !RHO_GRID.iter().any(|&r| (r - self.rho).abs() < 1e-12) {
            log::warn!("rho {} is outside the published grid {RHO_GRID:?}", self.rho);
        }
        if !TOP_PCT_GRID
            .iter()
            .any(|&p| (p - self.top_pct).abs() < 1e-12)
        {
            log::warn!(
                "top_pct {} is outside the published grid {TOP_PCT_GRID:?}",
                self.top_pct
            );
        }
        if !DIFFUSION_GRID.contains(&self.diffusion_steps) {
            log::warn!(
                "diffusion_steps {} is outside the published grid {DIFFUSION_GRID:?}",
                self.diffusion_steps
            );
        }
        if !DECAY_GRID
            .iter()
            .any(|&d| (d - self.weight_decay).abs() < 1e-15)
        {
            log::warn!(
                "weight_decay {} is outside the published grid {DECAY_GRID:?}",
                self.weight_decay
            );
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let bad = |key: &str, value: &str| {
            TrainError::BadOverride(format!("cannot parse {key}={value}"))
        };
        match key {
            "embed_dim" => self.embed_dim = value.parse().map_err(|_| bad(key, value))?,
            "n_layers" => self.n_layers = value.parse().map_err(|_| bad(key, value))?,
            "n_clusters" => self.n_clusters = value.parse().map_err(|_| bad(key, value))?,
            "rho" => self.rho = value.parse().map_err(|_| bad(key, value))?,
            "sinkhorn_lambda" => {
                self.sinkhorn_lambda = value.parse().map_err(|_| bad(key, value))?
            }
            "entropy_beta" => self.entropy_beta = value.parse().map_err(|_| bad(key, value))?,
            "top_pct" => self.top_pct = value.parse().map_err(|_| bad(key, value))?,
            "diffusion_steps" => {
                self.diffusion_steps = value.parse().map_err(|_| bad(key, value))?
            }
            "diffusion_t_start" => {
                self.diffusion_t_start = value.parse().map_err(|_| bad(key, value))?
            }
            "beta_start" => self.beta_start = value.parse().map_err(|_| bad(key, value))?,
            "beta_end" => self.beta_end = value.parse().map_err(|_| bad(key, value))?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key, value))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad(key, value))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key, value))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key, value))?,
            "patience" => self.patience = value.parse().map_err(|_| bad(key, value))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "method" => self.method = value.parse().map_err(TrainError::BadOverride)?,
            other => {
                return Err(TrainError::BadOverride(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Parses a flat `key = value` file; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| TrainError::BadOverride(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        for (idx, line) in raw.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(TrainError::BadOverride(format!(
                    "line {}: expected key = value, got {line:?}",
                    idx + 1
                )));
            };
            cfg.apply_override(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Key-value view in declaration order, for manifests.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("embed_dim".into(), self.embed_dim.to_string());
        m.insert("n_layers".into(), self.n_layers.to_string());
        m.insert("n_clusters".into(), self.n_clusters.to_string());
        m.insert("rho".into(), self.rho.to_string());
        m.insert("sinkhorn_lambda".into(), self.sinkhorn_lambda.to_string());
        m.insert("entropy_beta".into(), self.entropy_beta.to_string());
        m.insert("top_pct".into(), self.top_pct.to_string());
        m.insert("diffusion_steps".into(), self.diffusion_steps.to_string());
        m.insert(
            "diffusion_t_start".into(),
            self.diffusion_t_start.to_string(),
        );
        m.insert("beta_start".into(), self.beta_start.to_string());
        m.insert("beta_end".into(), self.beta_end.to_string());
        m.insert("learning_rate".into(), self.learning_rate.to_string());
        m.insert("weight_decay".into(), self.weight_decay.to_string());
        m.insert("epochs".into(), self.epochs.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("patience".into(), self.patience.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("method".into(), self.method.to_string());
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_file_roundtrip() {
        let mut cfg = TrainConfig::default();
        cfg.apply_override("embed_dim", "64").unwrap();
        cfg.apply_override("rho", "0.1").unwrap();
        cfg.apply_override("method", "erm").unwrap();
        assert_eq!(cfg.embed_dim, 64);
        assert_eq!(cfg.method, Method::Erm);
        assert!(cfg.apply_override("nonsense", "1").is_err());
        assert!(cfg.apply_override("epochs", "abc").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        let mut body = String::new();
        for (k, v) in cfg.entries() {
            body.push_str(&format!("{k} = {v}\n"));
        }
        body.push_str("# trailing comment\n");
        std::fs::write(&path, body).unwrap();
        let loaded = TrainConfig::from_file(&path).unwrap();
        assert_eq!(loaded.embed_dim, 64);
        assert_eq!(loaded.rho, 0.1);
        assert_eq!(loaded.method, Method::Erm);
    }

    #[test]
    fn structural_validation() {
        let mut cfg = TrainConfig::default();
        cfg.embed_dim = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.diffusion_t_start = 100;
        cfg.diffusion_steps = 20;
        assert!(cfg.validate().is_err());
        // off-grid values only warn
        let mut cfg = TrainConfig::default();
        cfg.embed_dim = 24;
        cfg.rho = 0.07;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn default_t_start_is_half() {
        let mut cfg = TrainConfig::default();
        cfg.diffusion_steps = 100;
        assert_eq!(cfg.t_start(), 50);
        cfg.diffusion_t_start = 7;
        assert_eq!(cfg.t_start(), 7);
    }
}
