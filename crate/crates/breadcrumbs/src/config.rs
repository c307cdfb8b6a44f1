//! Declarative run configuration (TOML), validation, and the run manifest
//! that makes results reproducible from a config hash + seed.

use crate::error::Error;
use crate::eval::{EvalMode, EvalProtocol};
use crate::model::{ModelConfig, PositionEncoding};
use crate::tasks::TaskConfig;
use crate::training::{DistillConfig, PpoConfig};
use crate::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Model shape as configured; the vocabulary size is always derived from the
/// tokenizer at load time, never written in the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub position_encoding: PositionEncoding,
    pub rope_base: f64,
    pub rms_eps: f32,
    pub init_std: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_positions: 256,
            position_encoding: PositionEncoding::Rotary,
            rope_base: 10000.0,
            rms_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
            position_encoding: self.position_encoding,
            rope_base: self.rope_base,
            rms_eps: self.rms_eps,
            init_std: self.init_std,
        }
    }
}

/// Distillation settings shared by all students; one student is trained per
/// entry in `ratios`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSection {
    pub ratios: Vec<usize>,
    pub student_lr: f32,
    pub top_k: usize,
    pub weight_decay: f32,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::toy(2);
        Self { ratios: vec![2, 8], student_lr: d.student_lr, top_k: d.top_k, weight_decay: d.weight_decay }
    }
}

impl DistillSection {
    pub fn to_configs(&self, batch: usize) -> Vec<DistillConfig> {
        self.ratios
            .iter()
            .map(|&c| DistillConfig {
                student_lr: self.student_lr,
                ratio_c: c,
                top_k: self.top_k,
                batch,
                weight_decay: self.weight_decay,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub mode: EvalMode,
    pub limit: usize,
    pub temperature: f32,
    pub seed: u64,
    pub max_new_tokens: Option<usize>,
    /// Test-set size (instance seeds 0..n, disjoint from training).
    pub test_instances: usize,
    /// Compression ratios to sweep for br/tova/streaming evals.
    pub ratios: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            mode: EvalMode::FixedCache,
            limit: 200,
            temperature: 0.0,
            seed: 0,
            max_new_tokens: Some(64),
            test_instances: 256,
            ratios: vec![2, 8],
        }
    }
}

impl EvalSection {
    pub fn to_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            mode: self.mode,
            limit: self.limit,
            temperature: self.temperature,
            seed: self.seed,
            max_new_tokens: self.max_new_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub train_steps: usize,
    /// Supervised answer-format steps before PPO (not counted as PPO steps).
    pub warmup_steps: usize,
    pub warmup_batch: usize,
    pub warmup_lr: f32,
    /// Stop early once the rolling train accuracy reaches this level.
    pub early_stop_accuracy: Option<f32>,
    pub accuracy_window: usize,
    pub save_trajectories: bool,
    pub log_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            train_steps: 2000,
            warmup_steps: 150,
            warmup_batch: 16,
            warmup_lr: 3e-4,
            early_stop_accuracy: Some(0.95),
            accuracy_window: 20,
            save_trajectories: false,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "PpoConfig::toy")]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub run: RunSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.eval.to_protocol().validate().map_err(|e| {
            Error::Config(format!("eval section: {e}"))
        })?;
        if self.distill.ratios.is_empty() {
            return Err(Error::Config("distill.ratios must not be empty".into()));
        }
        for cfg in self.distill.to_configs(self.ppo.batch) {
            cfg.validate()?;
        }
        if self.eval.ratios.iter().any(|&c| c == 0) {
            return Err(Error::Config("eval.ratios entries must be >= 1".into()));
        }
        if self.eval.test_instances == 0 {
            return Err(Error::Config("eval.test_instances must be positive".into()));
        }
        if self.model.d_model == 0
            || self.model.n_heads == 0
            || self.model.d_model % self.model.n_heads != 0
        {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.model.d_model, self.model.n_heads
            )));
        }
        if let Some(a) = self.run.early_stop_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config("early_stop_accuracy must be in [0,1]".into()));
            }
        }
        if self.run.accuracy_window == 0 || self.run.log_every == 0 {
            return Err(Error::Config("accuracy_window and log_every must be positive".into()));
        }
        Ok(())
    }

    /// Stable content hash over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&json);
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Parse and validate; TOML errors carry line/column positions.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: RunConfig = toml::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Written next to every run's outputs; re-running with the same manifest
/// inputs reproduces identical artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub subcommand: String,
    pub config_hash: String,
    pub seed: u64,
    pub created_unix: u64,
}

pub fn write_manifest(dir: &Path, cfg: &RunConfig, subcommand: &str) -> Result<RunManifest> {
    std::fs::create_dir_all(dir)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: subcommand.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let f = std::fs::File::create(dir.join(format!("manifest_{subcommand}.json")))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest)?;
    Ok(manifest)
}
