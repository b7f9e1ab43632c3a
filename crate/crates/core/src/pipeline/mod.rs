//! Four-stage distillation and the single-stage baselines.

mod config;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    gen_parallel_corpus, gen_sts_set, load_sts_tsv, make_batches, read_parallel_tsv, write_sts_tsv, OracleSemantics,
    ParallelBatch, ParallelPair, StsExample, VocabSpec,
};
use crate::encoder::{
    init_student_from_assistant, is_embedding_path, load_checkpoint, save_checkpoint, BoundEncoder, EmbeddingTap,
    SentenceEncoder,
};
use crate::error::{Error, Result};
use crate::eval::{retrieval_accuracy, sts_spearman};
use crate::losses::{
    combine, identity_labels, loss_anchor_align, loss_bool, loss_ce, loss_mcl, loss_pairwise_align, BoundAdapter,
    LinearAdapter, LossValue,
};
use crate::{OptimizerState, Rng, Scalar, Tape, Tensor, Var};

pub use config::{ContrastiveVariant, EvalConfig, PipelineConfig, SingleStageConfig, StageSchedule, TeacherConfig};

/// Everything a run reads from disk, plus precomputed teacher vectors for
/// the training sources.
pub struct Dataset<T> {
    pub vocab: VocabSpec,
    pub oracle: OracleSemantics,
    pub train: Vec<ParallelPair>,
    pub dev: Vec<ParallelPair>,
    pub test: Vec<ParallelPair>,
    pub sts: Vec<StsExample>,
    teacher_train: Tensor<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        for p in [cfg.train_path(), cfg.vocab_path(), cfg.sts_path()] {
            if !p.exists() {
                return Err(Error::config(format!(
                    "missing {}; run gen-corpus and gen-sts first",
                    p.display()
                )));
            }
        }
        let vocab = VocabSpec::read_json(&cfg.vocab_path())?;
        if vocab.tokens_per_language != cfg.corpus.tokens_per_language {
            return Err(Error::config("vocab.json disagrees with corpus.tokens_per_language"));
        }
        let oracle = OracleSemantics::new(cfg.teacher.seed, vocab.tokens_per_language, cfg.teacher.dim);
        let read = |p: PathBuf| -> Result<Vec<ParallelPair>> {
            if p.exists() {
                Ok(read_parallel_tsv(&p, &vocab)?.0)
            } else {
                Ok(Vec::new())
            }
        };
        let train = read(cfg.train_path())?;
        if train.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        let (dev, test) = (read(cfg.dev_path())?, read(cfg.test_path())?);
        let sts = load_sts_tsv(&cfg.sts_path(), &vocab)?;
        let mut flat = Vec::with_capacity(train.len() * cfg.teacher.dim);
        for p in &train {
            flat.extend(oracle.embed(&p.source, &vocab)?.into_iter().map(T::lit));
        }
        let teacher_train = Tensor::new(&[train.len(), cfg.teacher.dim], flat)?;
        Ok(Dataset {
            vocab,
            oracle,
            train,
            dev,
            test,
            sts,
            teacher_train,
        })
    }
}

/// Writes the parallel corpus and the STS set described by `cfg`.
pub fn generate_data(cfg: &PipelineConfig) -> Result<()> {
    gen_parallel_corpus(&cfg.corpus, &cfg.data_dir)?;
    generate_sts(cfg)
}

pub fn generate_sts(cfg: &PipelineConfig) -> Result<()> {
    let vocab = VocabSpec::read_json(&cfg.vocab_path())?;
    let oracle = OracleSemantics::new(cfg.teacher.seed, vocab.tokens_per_language, cfg.teacher.dim);
    let examples = gen_sts_set(&cfg.sts, &oracle, &vocab)?;
    write_sts_tsv(&cfg.sts_path(), &examples, &vocab)
}

/// The model being trained and its frozen references.
pub struct Models<T> {
    pub assistant: Option<SentenceEncoder<T>>,
    pub student: Option<SentenceEncoder<T>>,
    pub assistant_adapter: Option<LinearAdapter<T>>,
    pub student_adapter: Option<LinearAdapter<T>>,
}

impl<T> Default for Models<T> {
    fn default() -> Self {
        Models {
            assistant: None,
            student: None,
            assistant_adapter: None,
            student_adapter: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Assistant,
    Student,
}

/// Which of the trained model's tensors may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    All,
    EmbeddingPath,
}

impl Scope {
    fn admits(self, name: &str) -> bool {
        match self {
            Scope::All => true,
            Scope::EmbeddingPath => is_embedding_path(name),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Both sides regress onto the teacher vector of the source.
    TeacherAlign,
    /// Embedding-layer outputs regress onto the assistant's.
    EmbeddingAlign,
    /// Final outputs regress onto the assistant's.
    OutputAlign,
    /// Contrastive term plus teacher alignment.
    Contrastive(ContrastiveVariant),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Label used in the metrics log and checkpoint names.
    pub name: String,
    pub objective: Objective,
    pub role: Role,
    pub scope: Scope,
    pub schedule: StageSchedule,
}

impl StagePlan {
    /// The plan for stage `k` of the four-stage pipeline.
    pub fn stage(k: u8, cfg: &PipelineConfig) -> Result<Self> {
        let (objective, role, scope, schedule) = match k {
            1 => (Objective::TeacherAlign, Role::Assistant, Scope::All, &cfg.stage1),
            2 => (Objective::EmbeddingAlign, Role::Student, Scope::EmbeddingPath, &cfg.stage2),
            3 => (Objective::OutputAlign, Role::Student, Scope::All, &cfg.stage3),
            4 => (Objective::Contrastive(cfg.contrastive), Role::Student, Scope::All, &cfg.stage4),
            _ => return Err(Error::config(format!("no stage {k}; stages are 1 to 4"))),
        };
        Ok(StagePlan {
            name: format!("stage{k}"),
            objective,
            role,
            scope,
            schedule: schedule.clone(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub retrieval_acc: Option<f64>,
    pub spearman: Option<f64>,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub loss_components: BTreeMap<String, f64>,
    pub eval: EvalSnapshot,
}

/// Append-only JSON-lines log; `None` keeps records in memory only.
pub struct MetricsLog {
    path: Option<PathBuf>,
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog {
            path: None,
            records: Vec::new(),
        }
    }

    pub fn to_file(path: PathBuf, truncate: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        if truncate {
            std::fs::write(&path, "")?;
        }
        Ok(MetricsLog {
            path: Some(path),
            records: Vec::new(),
        })
    }

    pub fn append(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<MetricsRecord>> {
        std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

/// Per-pair reference vectors cached for a stage, `[n_pairs, D]` each.
struct References<T> {
    source: Tensor<T>,
    target: Tensor<T>,
}

fn rows_of<T: Scalar>(table: &Tensor<T>, indices: &[usize]) -> Tensor<T> {
    let d = table.shape()[1];
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        data.extend_from_slice(table.row(i));
    }
    Tensor::new(&[indices.len(), d], data).expect("row gather")
}

fn stack<T: Scalar>(rows: Vec<Vec<f64>>) -> Result<Tensor<T>> {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    Tensor::new(&[n, d], rows.into_iter().flatten().map(T::lit).collect())
}

/// Pooled embedding-layer outputs of `encoder` for every sentence.
fn embedding_outputs<T: Scalar>(encoder: &SentenceEncoder<T>, sentences: &[&[usize]], max_seq_len: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(64) {
        let batch = crate::corpus::TokenBatch::from_sentences(chunk, max_seq_len)?;
        let tape = Tape::new();
        let v = encoder.bind(&tape, |_| false).embedding_output(&batch, EmbeddingTap::Pooled)?;
        out.extend(v.value().rows().map(|r| r.iter().map(|x| x.as_f64()).collect::<Vec<_>>()));
    }
    Ok(out)
}

fn frozen_checksums<T: Scalar>(models: &Models<T>, plan: &StagePlan) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut collect = |label: &str, enc: &SentenceEncoder<T>, trained: bool| {
        for id in enc.params().ids() {
            let name = enc.params().name(id);
            if !trained || !plan.scope.admits(name) {
                out.push((format!("{label}:{name}"), enc.params().checksum(id)));
            }
        }
    };
    if let Some(a) = &models.assistant {
        collect("assistant", a, plan.role == Role::Assistant);
    }
    if let Some(s) = &models.student {
        collect("student", s, plan.role == Role::Student);
    }
    out
}

fn contrastive_term<'t, T: Scalar>(
    variant: ContrastiveVariant,
    cfg: &PipelineConfig,
    teacher: Var<'t, T>,
    src: Var<'t, T>,
    tgt: Var<'t, T>,
) -> Result<Option<LossValue<'t, T>>> {
    Ok(match variant {
        ContrastiveVariant::Mcl => Some(loss_mcl(teacher, src, tgt)?),
        ContrastiveVariant::Bool => {
            let n = src.shape()[0];
            let labels = src.tape().constant(identity_labels(n));
            Some(loss_bool(labels, src, tgt)?)
        }
        ContrastiveVariant::Ce => Some(loss_ce(teacher, src, tgt, &cfg.ce)?),
        ContrastiveVariant::None => None,
    })
}

/// Mixes the shuffle seed for one epoch of one stage.
fn epoch_seed(seed: u64, stage: &str, epoch: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    h.update((epoch as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Settings shared by every stage of one run.
pub struct RunContext<'a> {
    pub cfg: &'a PipelineConfig,
    /// Where last-good checkpoints go when a stage fails; `None` skips them.
    pub output_dir: Option<&'a Path>,
}

/// Trains one model for one stage. Only the tensors of `plan.role` admitted
/// by `plan.scope` may change; everything else is checked to be bitwise
/// unchanged afterwards.
pub fn run_stage<T: Scalar>(
    plan: &StagePlan,
    models: &mut Models<T>,
    data: &Dataset<T>,
    ctx: &RunContext<'_>,
    log: &mut MetricsLog,
) -> Result<Vec<MetricsRecord>> {
    let cfg = ctx.cfg;
    let needs_assistant = matches!(plan.objective, Objective::EmbeddingAlign | Objective::OutputAlign);
    if models.assistant.is_none() && (needs_assistant || plan.role == Role::Assistant) {
        return Err(Error::config(format!("{} needs an assistant checkpoint", plan.name)));
    }
    if plan.role == Role::Student && models.student.is_none() {
        return Err(Error::config(format!("{} needs a student checkpoint", plan.name)));
    }
    let frozen_before = frozen_checksums(models, plan);
    let max_seq_len = cfg.corpus.max_seq_len;

    let references = match plan.objective {
        Objective::OutputAlign => {
            let a = models.assistant.as_ref().expect("checked");
            let src: Vec<&[usize]> = data.train.iter().map(|p| p.source.as_slice()).collect();
            let tgt: Vec<&[usize]> = data.train.iter().map(|p| p.target.as_slice()).collect();
            Some(References {
                source: stack(a.embed_sentences(&src, 64)?)?,
                target: stack(a.embed_sentences(&tgt, 64)?)?,
            })
        }
        Objective::EmbeddingAlign if cfg.embedding_tap == EmbeddingTap::Pooled => {
            let a = models.assistant.as_ref().expect("checked");
            let src: Vec<&[usize]> = data.train.iter().map(|p| p.source.as_slice()).collect();
            let tgt: Vec<&[usize]> = data.train.iter().map(|p| p.target.as_slice()).collect();
            Some(References {
                source: stack(embedding_outputs(a, &src, max_seq_len)?)?,
                target: stack(embedding_outputs(a, &tgt, max_seq_len)?)?,
            })
        }
        _ => None,
    };

    let (model, mut adapter, reference) = match plan.role {
        Role::Assistant => (
            models.assistant.as_mut().expect("checked"),
            models.assistant_adapter.as_mut(),
            None,
        ),
        Role::Student => (
            models.student.as_mut().expect("checked"),
            models.student_adapter.as_mut(),
            models.assistant.as_ref(),
        ),
    };

    let n_batches = data.train.len().div_ceil(plan.schedule.batch_size);
    let total_steps = plan.schedule.epochs * n_batches;
    let mut opt = OptimizerState::new(plan.schedule.optimizer.clone(), model.params(), total_steps)?;
    let mut adapter_opt = match &adapter {
        Some(a) => Some(OptimizerState::new(plan.schedule.optimizer.clone(), a.params(), total_steps)?),
        None => None,
    };
    let scope = plan.scope;
    let mut records = Vec::new();
    let mut last_good = model.clone();

    for epoch in 1..=plan.schedule.epochs {
        let batches = make_batches(
            &data.train,
            max_seq_len,
            plan.schedule.batch_size,
            Some(epoch_seed(cfg.seed, &plan.name, epoch)),
        )?;
        let mut loss_sum = 0.0;
        let mut component_sums: BTreeMap<String, f64> = BTreeMap::new();
        for batch in &batches {
            let tape = Tape::new();
            let bound = model.bind(&tape, |n| scope.admits(n));
            let bound_adapter = adapter.as_ref().map(|a| a.bind(&tape, true));
            let outcome = batch_loss(plan, cfg, data, &tape, &bound, bound_adapter.as_ref(), reference, references.as_ref(), batch)
                .and_then(|loss| {
                    let value = loss.value();
                    let components = loss.components.clone();
                    let grads = tape.backward(loss.total)?;
                    if !value.is_finite() {
                        return Err(Error::NumericFailure {
                            primitive: "loss".into(),
                        });
                    }
                    Ok((value, components, grads))
                });
            let (value, components, grads) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    if let Some(dir) = ctx.output_dir {
                        let path = dir.join(format!("{}.last_good.xdst", plan.name));
                        std::fs::create_dir_all(dir)?;
                        save_checkpoint(&last_good, &path)?;
                        log::error!("{}: aborting, last good model saved to {}", plan.name, path.display());
                    }
                    return Err(e);
                }
            };
            let params = bound.into_params();
            model.params_mut().absorb_grads(&params, &grads)?;
            opt.step(model.params_mut())?;
            if let (Some(a), Some(o), Some(b)) = (adapter.as_deref_mut(), adapter_opt.as_mut(), bound_adapter) {
                a.params_mut().absorb_grads(&b.bound, &grads)?;
                o.step(a.params_mut())?;
            }
            loss_sum += value;
            for (k, v) in components {
                *component_sums.entry(k).or_default() += v;
            }
        }
        let nb = batches.len().max(1) as f64;
        let eval = if cfg.eval.every_epoch {
            snapshot(model, data, cfg.eval.block_size)
        } else {
            EvalSnapshot::default()
        };
        let record = MetricsRecord {
            stage: plan.name.clone(),
            epoch,
            loss: loss_sum / nb,
            loss_components: component_sums.into_iter().map(|(k, v)| (k, v / nb)).collect(),
            eval,
        };
        log::info!(
            "{} epoch {epoch}/{}: loss {:.6} retrieval {:?} spearman {:?}",
            plan.name,
            plan.schedule.epochs,
            record.loss,
            record.eval.retrieval_acc,
            record.eval.spearman
        );
        log.append(record.clone())?;
        records.push(record);
        last_good = model.clone();
    }

    let frozen_after = frozen_checksums(models, plan);
    if frozen_before != frozen_after {
        let changed: Vec<String> = frozen_before
            .iter()
            .zip(&frozen_after)
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.0.clone())
            .collect();
        return Err(Error::contract(format!("frozen tensors changed during {}: {changed:?}", plan.name)));
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn batch_loss<'t, T: Scalar>(
    plan: &StagePlan,
    cfg: &PipelineConfig,
    data: &Dataset<T>,
    tape: &'t Tape<T>,
    model: &BoundEncoder<'_, 't, T>,
    adapter: Option<&BoundAdapter<'t, T>>,
    assistant: Option<&SentenceEncoder<T>>,
    references: Option<&References<T>>,
    batch: &ParallelBatch,
) -> Result<LossValue<'t, T>> {
    let to_teacher = |x: Var<'t, T>| match adapter {
        Some(a) => a.apply(x),
        None => x,
    };
    let teacher = || tape.constant(rows_of(&data.teacher_train, &batch.indices));
    let cached = |r: &References<T>| {
        (
            tape.constant(rows_of(&r.source, &batch.indices)),
            tape.constant(rows_of(&r.target, &batch.indices)),
        )
    };
    match plan.objective {
        Objective::TeacherAlign => {
            let src = to_teacher(model.encode(&batch.source)?);
            let tgt = to_teacher(model.encode(&batch.target)?);
            loss_anchor_align(teacher(), src, tgt)
        }
        Objective::EmbeddingAlign => {
            let tap = cfg.embedding_tap;
            let out_src = model.embedding_output(&batch.source, tap)?;
            let out_tgt = model.embedding_output(&batch.target, tap)?;
            let (ref_src, ref_tgt) = match references {
                Some(r) => cached(r),
                None => {
                    let a = assistant.expect("checked").bind(tape, |_| false);
                    (a.embedding_output(&batch.source, tap)?, a.embedding_output(&batch.target, tap)?)
                }
            };
            loss_pairwise_align(ref_src, out_src, ref_tgt, out_tgt)
        }
        Objective::OutputAlign => {
            let (ref_src, ref_tgt) = cached(references.expect("precomputed"));
            let out_src = model.encode(&batch.source)?;
            let out_tgt = model.encode(&batch.target)?;
            loss_pairwise_align(ref_src, out_src, ref_tgt, out_tgt)
        }
        Objective::Contrastive(variant) => {
            let t = teacher();
            let src = to_teacher(model.encode(&batch.source)?);
            let tgt = to_teacher(model.encode(&batch.target)?);
            let distill = loss_anchor_align(t, src, tgt)?;
            Ok(match contrastive_term(variant, cfg, t, src, tgt)? {
                Some(c) => combine(c, distill),
                None => distill,
            })
        }
    }
}

/// Dev retrieval and STS correlation of `model`; missing data or degenerate
/// outputs give `None`.
pub fn snapshot<T: Scalar>(model: &SentenceEncoder<T>, data: &Dataset<T>, block: usize) -> EvalSnapshot {
    EvalSnapshot {
        retrieval_acc: retrieval_accuracy(model, &data.dev, block).ok(),
        spearman: sts_spearman(model, &data.sts).ok(),
    }
}

/// Held-out scores of a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub test_retrieval: Option<f64>,
    pub sts_spearman: Option<f64>,
}

pub fn held_out<T: Scalar>(model: &SentenceEncoder<T>, data: &Dataset<T>, block: usize) -> HeldOut {
    HeldOut {
        test_retrieval: retrieval_accuracy(model, &data.test, block).ok(),
        sts_spearman: sts_spearman(model, &data.sts).ok(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub records: Vec<MetricsRecord>,
    pub final_checkpoint: PathBuf,
    /// SHA-256 of the final checkpoint file.
    pub digest: String,
    /// Held-out scores keyed by checkpoint name.
    pub held_out: BTreeMap<String, HeldOut>,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn new_adapter<T: Scalar>(cfg: &PipelineConfig, hidden: usize, rng: &mut Rng) -> Option<LinearAdapter<T>> {
    (cfg.adapter && hidden != cfg.teacher.dim).then(|| LinearAdapter::new(hidden, cfg.teacher.dim, rng))
}

/// Random streams of a run, one per purpose.
const STREAM_ASSISTANT: u64 = 10;
const STREAM_STUDENT: u64 = 20;
const STREAM_ADAPTER: u64 = 30;

/// Which stages `run_stages` executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelection {
    All,
    Only(u8),
}

/// Runs the selected stages. A single stage `k > 1` starts from the
/// checkpoints of earlier stages found in the output directory.
pub fn run_stages<T: Scalar>(cfg: &PipelineConfig, selection: StageSelection) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let data = Dataset::<T>::load(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let ctx = RunContext {
        cfg,
        output_dir: Some(&cfg.output_dir),
    };
    let rng = Rng::new(cfg.seed);
    let stages: Vec<u8> = match selection {
        StageSelection::All => vec![1, 2, 3, 4],
        StageSelection::Only(k) => vec![k],
    };
    let mut log = MetricsLog::to_file(cfg.metrics_path(), selection == StageSelection::All)?;
    let mut models = Models::default();
    let load = |name: &str| -> Result<SentenceEncoder<T>> {
        let path = cfg.checkpoint_path(name);
        if !path.exists() {
            return Err(Error::config(format!("missing prerequisite checkpoint {}", path.display())));
        }
        load_checkpoint(&path)
    };
    let first = stages[0];
    if first == 1 {
        models.assistant = Some(SentenceEncoder::new(cfg.assistant.clone(), &mut rng.split(STREAM_ASSISTANT))?);
    } else {
        models.assistant = Some(load("stage1")?);
        if first > 2 {
            models.student = Some(load(&format!("stage{}", first - 1))?);
        }
    }
    let mut adapter_rng = rng.split(STREAM_ADAPTER);
    models.assistant_adapter = new_adapter(cfg, cfg.assistant.hidden, &mut adapter_rng);
    models.student_adapter = new_adapter(cfg, cfg.student.hidden, &mut adapter_rng);

    let mut held = BTreeMap::new();
    let mut last = PathBuf::new();
    for k in stages {
        if k == 2 {
            let assistant = models.assistant.as_ref().expect("loaded");
            models.student = Some(init_student_from_assistant(
                assistant,
                cfg.student.clone(),
                &mut rng.split(STREAM_STUDENT),
            )?);
        }
        let plan = StagePlan::stage(k, cfg)?;
        log::info!("running {}", plan.name);
        run_stage(&plan, &mut models, &data, &ctx, &mut log)?;
        let trained = match plan.role {
            Role::Assistant => models.assistant.as_ref(),
            Role::Student => models.student.as_ref(),
        }
        .expect("trained model");
        last = cfg.checkpoint_path(&plan.name);
        save_checkpoint(trained, &last)?;
        held.insert(plan.name.clone(), held_out(trained, &data, cfg.eval.block_size));
    }
    Ok(PipelineOutcome {
        records: log.records,
        digest: file_digest(&last)?,
        final_checkpoint: last,
        held_out: held,
    })
}

pub fn run_pipeline<T: Scalar>(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    run_stages::<T>(cfg, StageSelection::All)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleStageMode {
    /// Untrained bottlenecked student aligned straight to the teacher.
    RandomInit,
    /// Student initialized from the stage-1 assistant, distilled from it,
    /// then aligned to the teacher.
    PreDistill,
}

impl SingleStageMode {
    pub fn name(self) -> &'static str {
        match self {
            SingleStageMode::RandomInit => "random_init",
            SingleStageMode::PreDistill => "pre_distill",
        }
    }
}

/// Freshly initialized student for `cfg`, as the pipeline would draw it.
pub fn untrained_student<T: Scalar>(cfg: &PipelineConfig) -> Result<SentenceEncoder<T>> {
    SentenceEncoder::new(cfg.student.clone(), &mut Rng::new(cfg.seed).split(STREAM_STUDENT))
}

pub fn run_single_stage<T: Scalar>(mode: SingleStageMode, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let data = Dataset::<T>::load(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let ctx = RunContext {
        cfg,
        output_dir: Some(&cfg.output_dir),
    };
    let rng = Rng::new(cfg.seed);
    let mut log = MetricsLog::to_file(cfg.output_dir.join(format!("{}.metrics.jsonl", mode.name())), true)?;
    let mut models = Models::default();
    let mut adapter_rng = rng.split(STREAM_ADAPTER);
    models.student_adapter = new_adapter(cfg, cfg.student.hidden, &mut adapter_rng);
    let plan = |name: &str, objective, schedule: &StageSchedule| StagePlan {
        name: name.to_string(),
        objective,
        role: Role::Student,
        scope: Scope::All,
        schedule: schedule.clone(),
    };
    match mode {
        SingleStageMode::RandomInit => {
            models.student = Some(untrained_student(cfg)?);
            let p = plan("random_init", Objective::TeacherAlign, &cfg.single_stage.random_init);
            run_stage(&p, &mut models, &data, &ctx, &mut log)?;
        }
        SingleStageMode::PreDistill => {
            let stage1 = cfg.checkpoint_path("stage1");
            let assistant = if stage1.exists() {
                load_checkpoint(&stage1)?
            } else {
                models.assistant = Some(SentenceEncoder::new(cfg.assistant.clone(), &mut rng.split(STREAM_ASSISTANT))?);
                models.assistant_adapter = new_adapter(cfg, cfg.assistant.hidden, &mut adapter_rng);
                run_stage(&StagePlan::stage(1, cfg)?, &mut models, &data, &ctx, &mut log)?;
                let a = models.assistant.take().expect("trained");
                save_checkpoint(&a, &stage1)?;
                a
            };
            models.student = Some(init_student_from_assistant(
                &assistant,
                cfg.student.clone(),
                &mut rng.split(STREAM_STUDENT),
            )?);
            models.assistant = Some(assistant);
            let p = plan("pre_distill", Objective::OutputAlign, &cfg.single_stage.pre_distill);
            run_stage(&p, &mut models, &data, &ctx, &mut log)?;
            let p = plan("teacher_align", Objective::TeacherAlign, &cfg.single_stage.teacher_align);
            run_stage(&p, &mut models, &data, &ctx, &mut log)?;
        }
    }
    let student = models.student.as_ref().expect("trained");
    let path = cfg.checkpoint_path(mode.name());
    save_checkpoint(student, &path)?;
    let mut held = BTreeMap::new();
    held.insert(mode.name().to_string(), held_out(student, &data, cfg.eval.block_size));
    Ok(PipelineOutcome {
        records: log.records,
        digest: file_digest(&path)?,
        final_checkpoint: path,
        held_out: held,
    })
}
