use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synthmetric::encoder::EncoderConfig;
use synthmetric::evalstats::{SkewConfig, DARR_THRESHOLD};
use synthmetric::external::SCORER_ENV;
use synthmetric::signals::TASK_NAMES;
use synthmetric::synthgen::GenerationConfig;
use synthmetric::trainer::TrainConfig;

use crate::error::CliError;

/// Every tunable of a run, as flat TOML keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub vocab_min_count: usize,

    pub variants_per_segment: usize,
    /// Scatter mask-fill, contiguous mask-fill, backtranslation.
    pub origin_weights: [f64; 3],
    pub drop_rate: f64,
    pub beam_width: usize,

    /// Word vectors in `token v1 v2 ...` text form; empty means seeded random vectors.
    pub embeddings_path: String,
    pub embedding_dim: usize,
    pub scorer_k: f64,
    pub scorer_copy_weight: f64,
    /// Subprocess serving likelihood and entailment requests; empty means
    /// the built-in unigram scorer and lexical entailment baseline.
    pub scorer_command: String,
    pub scorer_timeout_secs: u64,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub init_std: f64,

    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_steps: usize,
    pub pretrain_eval_every: usize,
    pub finetune_batch_size: usize,
    pub finetune_learning_rate: f64,
    pub finetune_steps: usize,
    pub finetune_eval_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub train_dropout: bool,
    /// One weight per pre-training task, in the order of `task_names`.
    pub task_weights: [f64; 9],
    pub task_names: [String; 9],
    pub validation_fraction: f64,

    pub darr_threshold: f64,
    /// `source` compares candidates of the same source segment; `all` pools everything.
    pub group_by: String,

    pub skew_alpha_train: f64,
    pub skew_alpha_test: f64,
    pub skew_bins: usize,
    pub skew_disjoint: bool,

    pub ablation_test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenerationConfig::default();
        let enc = EncoderConfig::default();
        let pre = TrainConfig::pretrain();
        let fine = TrainConfig::finetune();
        let skew = SkewConfig::default();
        RunConfig {
            seed: 0,
            vocab_min_count: 2,
            variants_per_segment: gen.variants_per_segment,
            origin_weights: gen.origin_weights,
            drop_rate: gen.drop_rate,
            beam_width: gen.beam_width,
            embeddings_path: String::new(),
            embedding_dim: 32,
            scorer_k: 0.1,
            scorer_copy_weight: 0.5,
            scorer_command: String::new(),
            scorer_timeout_secs: 30,
            d_model: enc.d_model,
            n_layers: enc.n_layers,
            n_heads: enc.n_heads,
            d_ff: enc.d_ff,
            max_seq_len: enc.max_seq_len,
            dropout: enc.dropout,
            init_std: enc.init_std,
            pretrain_batch_size: pre.batch_size,
            pretrain_learning_rate: pre.learning_rate,
            pretrain_steps: pre.total_steps,
            pretrain_eval_every: pre.eval_every,
            finetune_batch_size: fine.batch_size,
            finetune_learning_rate: fine.learning_rate,
            finetune_steps: fine.total_steps,
            finetune_eval_every: fine.eval_every,
            adam_beta1: pre.beta1,
            adam_beta2: pre.beta2,
            adam_epsilon: pre.epsilon,
            train_dropout: pre.dropout,
            task_weights: [1.0; 9],
            task_names: TASK_NAMES.map(String::from),
            validation_fraction: 0.1,
            darr_threshold: DARR_THRESHOLD,
            group_by: "source".into(),
            skew_alpha_train: skew.alpha_train,
            skew_alpha_test: skew.alpha_test,
            skew_bins: skew.n_bins,
            skew_disjoint: skew.disjoint,
            ablation_test_fraction: 0.2,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or the defaults) and applies the scorer override from
    /// the environment.
    pub fn resolve(path: Option<&Path>) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(cmd) = std::env::var(SCORER_ENV) {
            config.scorer_command = cmd;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.task_names != TASK_NAMES.map(String::from) {
            return bad(format!("task_names must be {TASK_NAMES:?}"));
        }
        if !matches!(self.group_by.as_str(), "source" | "all") {
            return bad(format!("group_by must be \"source\" or \"all\", got {:?}", self.group_by));
        }
        for (name, f) in [
            ("validation_fraction", self.validation_fraction),
            ("ablation_test_fraction", self.ablation_test_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("{name} must be in (0, 1), got {f}"));
            }
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        self.encoder(8).validate().map_err(|e| CliError::Usage(e.to_string()))?;
        for t in [self.pretrain(), self.finetune()] {
            t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn dump_defaults() -> String {
        toml::to_string(&RunConfig::default()).expect("defaults serialize")
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            variants_per_segment: self.variants_per_segment,
            origin_weights: self.origin_weights,
            drop_rate: self.drop_rate,
            beam_width: self.beam_width,
        }
    }

    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            init_seed: self.seed,
            init_std: self.init_std,
        }
    }

    fn train(&self, batch_size: usize, learning_rate: f64, total_steps: usize, eval_every: usize) -> TrainConfig {
        TrainConfig {
            batch_size,
            learning_rate,
            total_steps,
            eval_every,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
            seed: self.seed,
            dropout: self.train_dropout,
        }
    }

    pub fn pretrain(&self) -> TrainConfig {
        self.train(
            self.pretrain_batch_size,
            self.pretrain_learning_rate,
            self.pretrain_steps,
            self.pretrain_eval_every,
        )
    }

    pub fn finetune(&self) -> TrainConfig {
        self.train(
            self.finetune_batch_size,
            self.finetune_learning_rate,
            self.finetune_steps,
            self.finetune_eval_every,
        )
    }

    pub fn skew(&self) -> SkewConfig {
        SkewConfig {
            alpha_train: self.skew_alpha_train,
            alpha_test: self.skew_alpha_test,
            n_bins: self.skew_bins,
            seed: self.seed,
            disjoint: self.skew_disjoint,
        }
    }
}
