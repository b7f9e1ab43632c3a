//! Spearman correlation, STS scoring and block retrieval.

use serde::{Deserialize, Serialize};

use crate::corpus::{OracleSemantics, ParallelPair, StsExample, VocabSpec};
use crate::encoder::{load_checkpoint, SentenceEncoder};
use crate::error::{Error, Result};
use crate::losses::cosine_similarity;
use crate::pipeline::{run_single_stage, Dataset, PipelineConfig, SingleStageMode};
use crate::Scalar;

/// Retrieval block size; equals the training batch size.
pub const DEFAULT_BLOCK: usize = 64;

/// Anything that maps token sequences to sentence vectors.
pub trait SentenceEmbedder {
    fn embed(&self, sentences: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Scalar> SentenceEmbedder for SentenceEncoder<T> {
    fn embed(&self, sentences: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        self.embed_sentences(sentences, DEFAULT_BLOCK)
    }
}

/// The teacher oracle seen through the inverse cipher, so it embeds both
/// languages.
pub struct OracleEmbedder<'a> {
    pub oracle: &'a OracleSemantics,
    pub vocab: &'a VocabSpec,
}

impl SentenceEmbedder for OracleEmbedder<'_> {
    fn embed(&self, sentences: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        sentences.iter().map(|s| self.oracle.embed(s, self.vocab)).collect()
    }
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::contract(format!("spearman: lengths {} and {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::contract("spearman needs at least two observations"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::contract("spearman: non-finite input"));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
        .ok_or_else(|| Error::UndefinedCorrelation("an input is constant".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    /// Spearman ρ × 100.
    pub rho_x100: Option<f64>,
    pub retrieval_accuracy: Option<f64>,
    pub n: usize,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// One-line summary with ρ × 100 at one decimal.
    pub fn summary(&self) -> String {
        let mut parts = vec![format!("task={}", self.task), format!("n={}", self.n)];
        if let Some(r) = self.rho_x100 {
            parts.push(format!("rho_x100={r:.1}"));
        }
        if let Some(a) = self.retrieval_accuracy {
            parts.push(format!("retrieval_acc={a:.4}"));
        }
        parts.join("\t")
    }
}

/// Spearman ρ between embedding cosines and gold scores.
pub fn sts_spearman(embedder: &dyn SentenceEmbedder, examples: &[StsExample]) -> Result<f64> {
    if examples.len() < 2 {
        return Err(Error::contract("STS evaluation needs at least two examples"));
    }
    let a: Vec<&[usize]> = examples.iter().map(|e| e.sentence_a.as_slice()).collect();
    let b: Vec<&[usize]> = examples.iter().map(|e| e.sentence_b.as_slice()).collect();
    let (ea, eb) = (embedder.embed(&a)?, embedder.embed(&b)?);
    let cos: Vec<f64> = ea.iter().zip(&eb).map(|(x, y)| cosine_similarity(x, y)).collect();
    let gold: Vec<f64> = examples.iter().map(|e| e.gold_score).collect();
    spearman(&cos, &gold)
}

pub fn sts_evaluate(
    embedder: &dyn SentenceEmbedder,
    examples: &[StsExample],
    task: &str,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let rho = sts_spearman(embedder, examples)?;
    Ok(EvalReport {
        task: task.to_string(),
        rho_x100: Some(rho * 100.0),
        retrieval_accuracy: None,
        n: examples.len(),
        config,
    })
}

/// Index of the largest value; the first one wins ties.
fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Fraction of source rows whose most cosine-similar target within the same
/// block is their own translation. Only complete blocks are scored.
pub fn retrieval_from_embeddings(source: &[Vec<f64>], target: &[Vec<f64>], block_size: usize) -> Result<f64> {
    if source.len() != target.len() {
        return Err(Error::contract("retrieval: source and target counts differ"));
    }
    if block_size == 0 || source.len() < block_size {
        return Err(Error::contract(format!(
            "retrieval needs at least one block of {block_size} pairs, got {}",
            source.len()
        )));
    }
    let blocks = source.len() / block_size;
    let mut hits = 0usize;
    for b in 0..blocks {
        let range = b * block_size..(b + 1) * block_size;
        for i in range.clone() {
            let best = argmax(range.clone().map(|j| cosine_similarity(&source[i], &target[j])));
            if best == i - range.start {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (blocks * block_size) as f64)
}

pub fn retrieval_accuracy(embedder: &dyn SentenceEmbedder, pairs: &[ParallelPair], block_size: usize) -> Result<f64> {
    if pairs.len() < block_size {
        return Err(Error::contract(format!(
            "retrieval needs at least one block of {block_size} pairs, got {}",
            pairs.len()
        )));
    }
    let src: Vec<&[usize]> = pairs.iter().map(|p| p.source.as_slice()).collect();
    let tgt: Vec<&[usize]> = pairs.iter().map(|p| p.target.as_slice()).collect();
    retrieval_from_embeddings(&embedder.embed(&src)?, &embedder.embed(&tgt)?, block_size)
}

/// Retrieval report over held-out pairs.
pub fn retrieval_evaluate(
    embedder: &dyn SentenceEmbedder,
    pairs: &[ParallelPair],
    block_size: usize,
    task: &str,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let acc = retrieval_accuracy(embedder, pairs, block_size)?;
    Ok(EvalReport {
        task: task.to_string(),
        rho_x100: None,
        retrieval_accuracy: Some(acc),
        n: pairs.len() / block_size * block_size,
        config,
    })
}

/// Scores of the directly distilled baseline at one depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthPoint {
    pub depth: usize,
    /// Monolingual STS.
    pub sts: EvalReport,
    /// Cross-lingual retrieval on the test split.
    pub retrieval: EvalReport,
}

/// Trains the random-init baseline with `depth` distinct, unshared layers for
/// each entry of `depths` and scores it on STS and test retrieval. Each depth
/// writes to its own `depth{d}` directory under the output directory.
pub fn depth_sweep<T: Scalar>(base: &PipelineConfig, depths: &[usize]) -> Result<Vec<DepthPoint>> {
    if depths.is_empty() {
        return Err(Error::config("depth sweep needs at least one depth"));
    }
    let data = Dataset::<T>::load(base)?;
    let mut points = Vec::with_capacity(depths.len());
    for &depth in depths {
        let mut cfg = base.clone();
        cfg.student.distinct_layers = depth;
        cfg.student.recurrence = 1;
        cfg.output_dir = base.output_dir.join(format!("depth{depth}"));
        let outcome = run_single_stage::<T>(SingleStageMode::RandomInit, &cfg)?;
        let model: SentenceEncoder<T> = load_checkpoint(&outcome.final_checkpoint)?;
        let echo = serde_json::json!({ "depth": depth, "seed": cfg.seed, "student": cfg.student });
        points.push(DepthPoint {
            depth,
            sts: sts_evaluate(&model, &data.sts, "sts", echo.clone())?,
            retrieval: retrieval_evaluate(&model, &data.test, cfg.eval.block_size, "retrieval", echo)?,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8);
    }

    #[test]
    fn tie_ranks() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_input_is_undefined() {
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn retrieval_identity_is_perfect() {
        let v: Vec<Vec<f64>> = (0..8).map(|i| vec![(i as f64).cos(), (i as f64).sin(), 0.3]).collect();
        assert_eq!(retrieval_from_embeddings(&v, &v, 4).unwrap(), 1.0);
        assert!(retrieval_from_embeddings(&v, &v, 9).is_err());
    }
}
