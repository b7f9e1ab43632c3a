//! Independent reference implementations shared by the integration tests.
//! Everything here works on plain `f64` rows with explicit loops.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use crosstill::corpus::{CorpusSpec, StsSpec, TokenBatch};
use crosstill::encoder::{EncoderConfig, SentenceEncoder};
use crosstill::pipeline::{generate_data, EvalConfig, PipelineConfig, SingleStageConfig, StageSchedule, TeacherConfig};
use crosstill::{AdamWConfig, Rng, Tape, Tensor};

pub type Rows = Vec<Vec<f64>>;

pub fn random_rows(n: usize, d: usize, rng: &mut Rng) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.gaussian()).collect()).collect()
}

pub fn to_tensor(rows: &Rows) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

pub fn cos(x: &[f64], y: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut xx = 0.0;
    let mut yy = 0.0;
    for k in 0..x.len() {
        dot += x[k] * y[k];
        xx += x[k] * x[k];
        yy += y[k] * y[k];
    }
    dot / (xx.sqrt().max(1e-12) * yy.sqrt().max(1e-12))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s / a.len() as f64
}

pub fn anchor_align(anchor: &Rows, src: &Rows, tgt: &Rows) -> f64 {
    let n = anchor.len();
    let mut total = 0.0;
    for i in 0..n {
        total += mse(&anchor[i], &src[i]) + mse(&anchor[i], &tgt[i]);
    }
    total / n as f64
}

pub fn pairwise_align(ref_src: &Rows, src: &Rows, ref_tgt: &Rows, tgt: &Rows) -> f64 {
    let n = src.len();
    let mut total = 0.0;
    for i in 0..n {
        total += mse(&ref_src[i], &src[i]) + mse(&tgt[i], &ref_tgt[i]);
    }
    total / n as f64
}

pub fn mcl(teacher: &Rows, src: &Rows, tgt: &Rows) -> f64 {
    let n = teacher.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let diff = cos(&teacher[i], &teacher[j]) - cos(&src[i], &tgt[j]);
            total += diff * diff;
        }
    }
    total / (n * n) as f64
}

pub fn stage4(teacher: &Rows, src: &Rows, tgt: &Rows) -> f64 {
    mcl(teacher, src, tgt) + anchor_align(teacher, src, tgt)
}

#[allow(clippy::needless_range_loop)]
pub fn hard_label(src: &Rows, tgt: &Rows) -> f64 {
    let n = src.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let label = if i == j { 1.0 } else { 0.0 };
            let diff = label - cos(&src[i], &tgt[j]);
            total += diff * diff;
        }
    }
    total / (n * n) as f64
}

fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &l in logits {
        sum += (l - max).exp();
    }
    let lse = max + sum.ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn cross_entropy(teacher: &Rows, src: &Rows, tgt: &Rows, tau: f64, normalized: bool) -> f64 {
    let n = teacher.len();
    let mut total = 0.0;
    for i in 0..n {
        let student: Vec<f64> = (0..n).map(|j| cos(&src[i], &tgt[j]) / tau).collect();
        let log_p = log_softmax_row(&student);
        let raw: Vec<f64> = (0..n).map(|j| cos(&teacher[i], &teacher[j])).collect();
        let weights: Vec<f64> = if normalized {
            let scaled: Vec<f64> = raw.iter().map(|c| c / tau).collect();
            log_softmax_row(&scaled).iter().map(|l| l.exp()).collect()
        } else {
            raw
        };
        for j in 0..n {
            total -= weights[j] * log_p[j];
        }
    }
    total
}

/// 1-based ranks by counting: `1 + #{smaller} + (#{equal} − 1) / 2`.
pub fn brute_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let smaller = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn brute_pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..xs.len() {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn brute_spearman(xs: &[f64], ys: &[f64]) -> f64 {
    brute_pearson(&brute_ranks(xs), &brute_ranks(ys))
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// A pipeline small enough to train in about a second.
pub fn tiny_config(root: &Path) -> PipelineConfig {
    let corpus = CorpusSpec {
        seed: 3,
        n_pairs: 360,
        tokens_per_language: 40,
        min_len: 3,
        max_len: 8,
        max_seq_len: 10,
        dev_fraction: 0.1,
        test_fraction: 0.1,
    };
    let encoder = |bottleneck: bool, m: usize, r: usize| EncoderConfig {
        vocab_size: 4 + 2 * corpus.tokens_per_language,
        hidden: 16,
        bottleneck_enabled: bottleneck,
        bottleneck_size: if bottleneck { 8 } else { 0 },
        ffn_size: 32,
        heads: 2,
        distinct_layers: m,
        recurrence: r,
        max_positions: corpus.max_seq_len,
        layernorm_eps: 1e-5,
    };
    let schedule = |epochs| StageSchedule {
        epochs,
        batch_size: 16,
        optimizer: AdamWConfig {
            learning_rate: 3e-3,
            ..AdamWConfig::default()
        },
    };
    PipelineConfig {
        seed: 5,
        data_dir: root.join("data"),
        output_dir: root.join("runs"),
        sts: StsSpec {
            seed: 9,
            n_examples: 60,
            min_len: 3,
            max_len: 8,
            cross_lingual: false,
        },
        teacher: TeacherConfig { seed: 2, dim: 16 },
        assistant: encoder(false, 2, 1),
        student: encoder(true, 1, 2),
        stage1: schedule(2),
        stage2: schedule(1),
        stage3: schedule(1),
        stage4: schedule(2),
        single_stage: SingleStageConfig {
            random_init: schedule(2),
            pre_distill: schedule(1),
            teacher_align: schedule(1),
        },
        eval: EvalConfig {
            block_size: 16,
            every_epoch: true,
        },
        corpus,
        ..PipelineConfig::default()
    }
}

/// `tiny_config` with its data already generated.
pub fn tiny_setup(root: &Path) -> PipelineConfig {
    let cfg = tiny_config(root);
    generate_data(&cfg).unwrap();
    cfg
}

/// A small bottlenecked encoder config for structural checks.
pub fn small_encoder(m: usize, r: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 30,
        hidden: 8,
        bottleneck_enabled: true,
        bottleneck_size: 4,
        ffn_size: 16,
        heads: 2,
        distinct_layers: m,
        recurrence: r,
        max_positions: 10,
        layernorm_eps: 1e-5,
    }
}

/// Encoder with every tensor drawn at a scale where all paths matter,
/// including biases, norms and positions.
pub fn perturbed_encoder(config: EncoderConfig, seed: u64) -> SentenceEncoder<f64> {
    let mut rng = Rng::new(seed);
    SentenceEncoder::build(config, |name, shape| {
        let t = Tensor::randn(shape, 0.3, &mut rng);
        if name.ends_with("gamma") {
            t.map(|x| 1.0 + x)
        } else {
            t
        }
    })
    .unwrap()
}

pub fn ragged_batch(rng: &mut Rng) -> TokenBatch {
    let sentences: Vec<Vec<usize>> =
        (0..4).map(|i| (0..2 + 2 * i).map(|_| 4 + rng.below(26)).collect()).collect();
    TokenBatch::from_sentences(&sentences, 10).unwrap()
}

/// Output and per-tensor gradients of `sum(encode(batch) * weights)`.
pub fn forward_and_grads(
    model: &SentenceEncoder<f64>,
    batch: &TokenBatch,
    weights: &Tensor<f64>,
) -> (Tensor<f64>, BTreeMap<String, Vec<f64>>) {
    let tape = Tape::new();
    let bound = model.bind(&tape, |_| true);
    let out = bound.encode(batch).unwrap();
    let loss = out.mul(tape.constant(weights.clone())).sum();
    let grads = tape.backward(loss).unwrap();
    let mut store = model.params().clone();
    store.absorb_grads(bound.params(), &grads).unwrap();
    let named = store.iter().map(|p| (p.name.clone(), p.tensor.grad().unwrap().to_vec())).collect();
    (out.to_tensor(), named)
}

pub struct RecurrenceCheck {
    pub forward_bitwise: bool,
    pub max_grad_diff: f64,
}

/// Compares a weight-tied encoder with its unrolled copy. Gradients of the
/// unrolled layers are summed onto the layer they were copied from.
pub fn recurrence_check(m: usize, r: usize, seed: u64) -> RecurrenceCheck {
    let tied = perturbed_encoder(small_encoder(m, r), seed);
    let unrolled = tied.unroll();
    let mut rng = Rng::new(seed ^ 0xabcd);
    let batch = ragged_batch(&mut rng);
    let weights = Tensor::randn(&[batch.rows, 8], 1.0, &mut rng);
    let (out_t, grads_t) = forward_and_grads(&tied, &batch, &weights);
    let (out_u, grads_u) = forward_and_grads(&unrolled, &batch, &weights);
    let mut summed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, g) in grads_u {
        let key = match name.strip_prefix("layers.").and_then(|rest| rest.split_once('.')) {
            Some((i, rest)) => format!("layers.{}.{rest}", i.parse::<usize>().unwrap() % m),
            None => name,
        };
        let acc = summed.entry(key).or_insert_with(|| vec![0.0; g.len()]);
        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let mut worst = 0.0f64;
    assert_eq!(summed.len(), grads_t.len());
    for (name, g) in &grads_t {
        for (a, b) in g.iter().zip(&summed[name]) {
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    RecurrenceCheck {
        forward_bitwise: out_t.bitwise_eq(&out_u),
        max_grad_diff: worst,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    Embedding,
    Encoder,
}

/// Published size-table entries that must be matched digit for digit.
pub const SIZE_TABLE: &[(&str, Column, &str)] = &[
    ("xlmr-full-ru12", Column::Encoder, "85.05M"),
    ("xlmr-full-ru6", Column::Encoder, "42.52M"),
    ("xlmr-full-ru3", Column::Encoder, "21.26M"),
    ("minilm-full-ru12", Column::Encoder, "21.29M"),
    ("minilm-full-ru6", Column::Encoder, "10.64M"),
    ("minilm-full-ru3", Column::Encoder, "5.32M"),
    ("xlmr-full-ru12", Column::Embedding, "192.40M"),
    ("xlmr-b256-ru12", Column::Embedding, "64.59M"),
    ("xlmr-b128-ru12", Column::Embedding, "32.49M"),
    ("minilm-b128-ru12", Column::Embedding, "32.05M"),
    ("minilm-b256-ru12", Column::Embedding, "64.10M"),
];

/// The full MiniLM embedding entry, matched within a relative tolerance.
pub const MINILM_FULL_EMBEDDING: (&str, f64, f64) = ("minilm-full-ru12", 96.21e6, 5e-4);
