//! Experiment configuration: JSON schema, validation and seed fan-out.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lilt_core::corpus::Lang;
use lilt_core::decoding::{DecodeConfig, DecodeMode};
use lilt_core::model::ModelConfig;
use lilt_core::optim::Schedule;
use lilt_core::synth::{derive_seed, SyntheticTask};
use lilt_core::trainer::{Method, Scenario, TaskSpec, TrainHyper};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_model_default")]
    pub d_model: usize,
    #[serde(default = "n_heads_default")]
    pub n_heads: usize,
    #[serde(default = "layers_default")]
    pub n_enc_layers: usize,
    #[serde(default = "layers_default")]
    pub n_dec_layers: usize,
    #[serde(default = "d_ff_default")]
    pub d_ff: usize,
    #[serde(default = "dropout_default")]
    pub dropout: f64,
    #[serde(default = "max_len_default")]
    pub max_len: usize,
    #[serde(default = "label_smoothing_default")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub shared_src_tgt_embeddings: bool,
}

fn d_model_default() -> usize {
    64
}
fn n_heads_default() -> usize {
    4
}
fn layers_default() -> usize {
    2
}
fn d_ff_default() -> usize {
    128
}
fn dropout_default() -> f64 {
    0.1
}
fn max_len_default() -> usize {
    64
}
fn label_smoothing_default() -> f64 {
    0.1
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl ModelSection {
    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            dropout: self.dropout,
            max_len: self.max_len,
            src_vocab_size: 4,
            tgt_vocab_size: 4,
            seed: 0,
            shared_src_tgt_embeddings: self.shared_src_tgt_embeddings,
            label_smoothing: self.label_smoothing,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "epochs_default")]
    pub epochs: usize,
    #[serde(default = "batch_tokens_default")]
    pub batch_tokens: usize,
    #[serde(default = "warmup_default")]
    pub warmup_steps: u64,
    #[serde(default = "peak_lr_default")]
    pub peak_lr: f64,
    #[serde(default = "ewc_lambda_default")]
    pub ewc_lambda: f64,
    #[serde(default = "fisher_cap_default")]
    pub fisher_sample_cap: usize,
    #[serde(default = "max_vocab_default")]
    pub max_vocab: usize,
    #[serde(default = "yes")]
    pub select_best_by_dev: bool,
}

fn epochs_default() -> usize {
    12
}
fn batch_tokens_default() -> usize {
    2048
}
fn warmup_default() -> u64 {
    400
}
fn peak_lr_default() -> f64 {
    3e-3
}
fn ewc_lambda_default() -> f64 {
    100.0
}
fn fisher_cap_default() -> usize {
    1000
}
fn max_vocab_default() -> usize {
    30_000
}
fn yes() -> bool {
    true
}

impl Default for TrainSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    #[serde(default = "mode_default")]
    pub mode: DecodeMode,
    #[serde(default = "beam_default")]
    pub beam_size: usize,
    #[serde(default = "k_best_default")]
    pub k_best: usize,
    #[serde(default = "alpha_default")]
    pub length_penalty: f64,
    #[serde(default = "decode_max_len_default")]
    pub max_len: usize,
}

fn mode_default() -> DecodeMode {
    DecodeMode::Beam
}
fn beam_default() -> usize {
    4
}
fn k_best_default() -> usize {
    1
}
fn alpha_default() -> f64 {
    0.6
}
fn decode_max_len_default() -> usize {
    64
}

impl Default for DecodeSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl DecodeSection {
    pub fn to_config(&self) -> DecodeConfig {
        DecodeConfig {
            mode: self.mode,
            // k-best distillation defaults to a beam at least as wide as k
            beam_size: if self.mode == DecodeMode::KBest {
                self.beam_size.max(self.k_best)
            } else {
                self.beam_size
            },
            k_best: self.k_best,
            length_penalty: self.length_penalty,
            max_len: self.max_len,
        }
    }
}

/// A task entry: either a synthetic spec to generate or a directory of
/// existing corpus files.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum TaskEntry {
    Synthetic(SyntheticTask),
    Corpus { task_id: String, src_lang: String, tgt_lang: String, dir: PathBuf },
}

impl TaskEntry {
    pub fn task_id(&self) -> &str {
        match self {
            TaskEntry::Synthetic(t) => &t.name,
            TaskEntry::Corpus { task_id, .. } => task_id,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub tasks: Vec<TaskEntry>,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Evaluation decoding (always beam).
    #[serde(default)]
    pub eval_decode: DecodeSection,
    /// Distillation decoding; the mode selects greedy/beam/k-best variants.
    #[serde(default)]
    pub distill_decode: DecodeSection,
    #[serde(default = "yes")]
    pub include_single: bool,
    #[serde(default)]
    pub many2one_source_indicators: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.tasks.is_empty() {
            return Err(CliError::Config("task list is empty".into()));
        }
        if self.methods.is_empty() {
            return Err(CliError::Config("method list is empty".into()));
        }
        for method in &self.methods {
            if !method.compatible_with(self.scenario) {
                return Err(CliError::Config(format!(
                    "method {} is not valid in the {:?} scenario",
                    method.name(),
                    self.scenario
                )));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for task in &self.tasks {
            if !ids.insert(task.task_id().to_string()) {
                return Err(CliError::Config(format!("duplicate task id {}", task.task_id())));
            }
            match task {
                TaskEntry::Synthetic(t) => {
                    t.validate().map_err(|e| CliError::Config(e.to_string()))?;
                    if t.len_range.1 + 2 > self.model.max_len {
                        return Err(CliError::Config(format!(
                            "task {}: sentences up to {} tokens overflow max_len {}",
                            t.name, t.len_range.1, self.model.max_len
                        )));
                    }
                }
                TaskEntry::Corpus { task_id, src_lang, tgt_lang, dir } => {
                    Lang::new(src_lang.clone())
                        .and_then(|_| Lang::new(tgt_lang.clone()))
                        .map_err(|e| CliError::Config(format!("task {task_id}: {e}")))?;
                    for split in ["train", "dev", "test"] {
                        let f = dir.join(format!("{split}.{src_lang}"));
                        if !f.exists() {
                            return Err(CliError::Config(format!(
                                "task {task_id}: missing corpus file {}",
                                f.display()
                            )));
                        }
                    }
                }
            }
        }
        self.model
            .to_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.eval_decode
            .to_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.distill_decode
            .to_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// Directory a task's corpus files live in (generated or referenced).
    pub fn task_dir(&self, entry: &TaskEntry) -> PathBuf {
        match entry {
            TaskEntry::Synthetic(t) => self.out_dir.join("tasks").join(&t.name),
            TaskEntry::Corpus { dir, .. } => dir.clone(),
        }
    }

    pub fn task_spec(&self, entry: &TaskEntry) -> Result<TaskSpec, CliError> {
        let (task_id, src, tgt) = match entry {
            TaskEntry::Synthetic(t) => {
                (t.name.clone(), t.src.lang.as_str().to_string(), t.tgt.lang.as_str().to_string())
            }
            TaskEntry::Corpus { task_id, src_lang, tgt_lang, .. } => {
                (task_id.clone(), src_lang.clone(), tgt_lang.clone())
            }
        };
        Ok(TaskSpec {
            task_id,
            src_lang: Lang::new(src).map_err(|e| CliError::Config(e.to_string()))?,
            tgt_lang: Lang::new(tgt).map_err(|e| CliError::Config(e.to_string()))?,
            dir: self.task_dir(entry),
        })
    }

    /// Per-method, per-stage hyperparameters: the single global seed fans
    /// out through stable hashing of (method, stage), so adding a method
    /// leaves every other method's randomness untouched.
    pub fn hyper_for(&self, method_tag: &str, stage: usize) -> TrainHyper {
        TrainHyper {
            epochs: self.train.epochs,
            batch_tokens: self.train.batch_tokens,
            schedule: Schedule { warmup_steps: self.train.warmup_steps, peak_lr: self.train.peak_lr },
            seed: derive_seed(self.seed, &[method_tag, "stage", &stage.to_string()]),
            ewc_lambda: self.train.ewc_lambda,
            fisher_sample_cap: self.train.fisher_sample_cap,
            max_vocab: self.train.max_vocab,
            distill_decode: self.distill_decode.to_config(),
            dev_decode: DecodeConfig {
                mode: DecodeMode::Greedy,
                beam_size: 1,
                k_best: 1,
                length_penalty: 0.0,
                max_len: self.eval_decode.max_len,
            },
            select_best_by_dev: self.train.select_best_by_dev,
            distill_save_dir: None,
        }
    }

    pub fn eval_config(&self) -> DecodeConfig {
        let mut cfg = self.eval_decode.to_config();
        cfg.mode = DecodeMode::Beam;
        cfg
    }
}
