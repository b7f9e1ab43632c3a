use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSpec, StsSpec};
use crate::encoder::{EmbeddingTap, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::CeLossConfig;
use crate::AdamWConfig;

/// Which contrastive term stage 4 adds to the teacher distillation term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveVariant {
    #[default]
    Mcl,
    Bool,
    Ce,
    None,
}

impl std::str::FromStr for ContrastiveVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown contrastive variant `{s}` (mcl, bool, ce, none)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub seed: u64,
    pub dim: usize,
}

/// Schedules for the single-stage baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleStageConfig {
    /// Fresh student aligned straight to the teacher.
    pub random_init: StageSchedule,
    /// Assistant-initialized student imitating the assistant.
    pub pre_distill: StageSchedule,
    /// Teacher alignment that follows `pre_distill`.
    pub teacher_align: StageSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub block_size: usize,
    /// Score the trained model on the dev split and STS set after each epoch.
    pub every_epoch: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Holds `train.tsv`, `dev.tsv`, `test.tsv`, `vocab.json`, `sts.tsv`.
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub corpus: CorpusSpec,
    pub sts: StsSpec,
    pub teacher: TeacherConfig,
    pub assistant: EncoderConfig,
    pub student: EncoderConfig,
    pub stage1: StageSchedule,
    pub stage2: StageSchedule,
    pub stage3: StageSchedule,
    pub stage4: StageSchedule,
    pub contrastive: ContrastiveVariant,
    pub ce: CeLossConfig,
    pub embedding_tap: EmbeddingTap,
    /// Learn a linear map when teacher and model widths differ.
    pub adapter: bool,
    pub single_stage: SingleStageConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.assistant.validate()?;
        self.student.validate()?;
        let vocab = 4 + 2 * self.corpus.tokens_per_language;
        for (role, c) in [("assistant", &self.assistant), ("student", &self.student)] {
            if c.vocab_size != vocab {
                return Err(Error::config(format!(
                    "{role}.vocab_size is {}, corpus implies {vocab}",
                    c.vocab_size
                )));
            }
            if c.max_positions < self.corpus.max_seq_len {
                return Err(Error::config(format!(
                    "{role}.max_positions {} is below corpus.max_seq_len {}",
                    c.max_positions, self.corpus.max_seq_len
                )));
            }
            if !self.adapter && c.hidden != self.teacher.dim {
                return Err(Error::config(format!(
                    "{role}.hidden {} differs from teacher.dim {}; enable `adapter` to learn a projection",
                    c.hidden, self.teacher.dim
                )));
            }
        }
        let schedules = [
            &self.stage1,
            &self.stage2,
            &self.stage3,
            &self.stage4,
            &self.single_stage.random_init,
            &self.single_stage.pre_distill,
            &self.single_stage.teacher_align,
        ];
        for s in schedules {
            if s.batch_size == 0 {
                return Err(Error::config("batch_size must be positive"));
            }
            s.optimizer.validate()?;
        }
        if !(self.ce.temperature > 0.0) {
            return Err(Error::config("ce.temperature must be > 0"));
        }
        if self.eval.block_size == 0 {
            return Err(Error::config("eval.block_size must be positive"));
        }
        Ok(())
    }

    pub fn train_path(&self) -> PathBuf {
        self.data_dir.join("train.tsv")
    }

    pub fn dev_path(&self) -> PathBuf {
        self.data_dir.join("dev.tsv")
    }

    pub fn test_path(&self) -> PathBuf {
        self.data_dir.join("test.tsv")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.data_dir.join("vocab.json")
    }

    pub fn sts_path(&self) -> PathBuf {
        self.data_dir.join("sts.tsv")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join("metrics.jsonl")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.output_dir.join(format!("{name}.xdst"))
    }
}

impl Default for PipelineConfig {
    /// The toy configuration.
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        let vocab_size = 4 + 2 * corpus.tokens_per_language;
        let max_positions = corpus.max_seq_len;
        let encoder = |bottleneck: bool, m: usize, r: usize| EncoderConfig {
            vocab_size,
            hidden: 64,
            bottleneck_enabled: bottleneck,
            bottleneck_size: if bottleneck { 16 } else { 0 },
            ffn_size: 128,
            heads: 4,
            distinct_layers: m,
            recurrence: r,
            max_positions,
            layernorm_eps: 1e-5,
        };
        let schedule = |epochs: usize, lr: f64| StageSchedule {
            epochs,
            batch_size: 64,
            optimizer: AdamWConfig {
                learning_rate: lr,
                ..AdamWConfig::default()
            },
        };
        PipelineConfig {
            seed: 42,
            data_dir: PathBuf::from("data/toy"),
            output_dir: PathBuf::from("runs/toy"),
            corpus,
            sts: StsSpec::default(),
            teacher: TeacherConfig { seed: 7, dim: 64 },
            assistant: encoder(false, 4, 1),
            student: encoder(true, 2, 2),
            stage1: schedule(5, 2e-3),
            stage2: schedule(5, 2e-3),
            stage3: schedule(5, 2e-3),
            stage4: schedule(15, 2e-3),
            contrastive: ContrastiveVariant::Mcl,
            ce: CeLossConfig::default(),
            embedding_tap: EmbeddingTap::Pooled,
            adapter: false,
            single_stage: SingleStageConfig {
                random_init: schedule(25, 2e-3),
                pre_distill: schedule(10, 2e-3),
                teacher_align: schedule(15, 2e-3),
            },
            eval: EvalConfig {
                block_size: 64,
                every_epoch: true,
            },
        }
    }
}
