//! Synthetic bilingual world: cipher languages, oracle semantics, corpus
//! generation, and the parallel/STS file formats.

mod oracle;
mod vocab;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand_distr::Zipf;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Rng;

pub use oracle::OracleSemantics;
pub use vocab::{Language, VocabSpec, BOS, EOS, NUM_SPECIALS, PAD, UNK};

/// Settings for [`gen_parallel_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_pairs: usize,
    pub tokens_per_language: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_seq_len: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 7,
            n_pairs: 2400,
            tokens_per_language: 512,
            min_len: 3,
            max_len: 12,
            max_seq_len: 16,
            dev_fraction: 0.08,
            test_fraction: 0.08,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::config("n_pairs must be at least 1"));
        }
        if self.min_len < 3 || self.min_len > self.max_len || self.max_len + 2 > self.max_seq_len {
            return Err(Error::config(format!(
                "length range [{}, {}] must lie within [3, {}]",
                self.min_len,
                self.max_len,
                self.max_seq_len.saturating_sub(2)
            )));
        }
        let fractions = [self.dev_fraction, self.test_fraction];
        if fractions.iter().any(|f| !(0.0..1.0).contains(f)) || self.dev_fraction + self.test_fraction >= 1.0 {
            return Err(Error::config("dev/test fractions must be in [0, 1) and sum below 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Draws language-1 sentences whose tokens follow a Zipf(1.0) law over the
/// local index.
pub struct SentenceSampler<'v> {
    vocab: &'v VocabSpec,
    zipf: Zipf<f64>,
    min_len: usize,
    max_len: usize,
}

impl<'v> SentenceSampler<'v> {
    pub fn new(vocab: &'v VocabSpec, min_len: usize, max_len: usize) -> Result<Self> {
        let zipf = Zipf::new(vocab.tokens_per_language as f64, 1.0)
            .map_err(|e| Error::config(format!("zipf: {e}")))?;
        Ok(SentenceSampler {
            vocab,
            zipf,
            min_len,
            max_len,
        })
    }

    pub fn token(&self, rng: &mut Rng) -> usize {
        let rank = rng.sample(&self.zipf) as usize;
        self.vocab.source_id(rank.clamp(1, self.vocab.tokens_per_language) - 1)
    }

    pub fn length(&self, rng: &mut Rng) -> usize {
        rng.range_inclusive(self.min_len, self.max_len)
    }

    pub fn sentence(&self, rng: &mut Rng) -> Vec<usize> {
        let len = self.length(rng);
        (0..len).map(|_| self.token(rng)).collect()
    }
}

/// Writes `train.tsv`, `dev.tsv`, `test.tsv` and `vocab.json` into `out_dir`.
///
/// Sentences are unique as token multisets, so no two pairs share an oracle
/// embedding, and the three splits are disjoint.
pub fn gen_parallel_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<CorpusSummary> {
    spec.validate()?;
    let vocab = VocabSpec::generate(spec.tokens_per_language, spec.seed)?;
    let sampler = SentenceSampler::new(&vocab, spec.min_len, spec.max_len)?;
    let mut rng = Rng::new(spec.seed).split(1);

    let mut seen = HashSet::new();
    let mut sentences = Vec::with_capacity(spec.n_pairs);
    let budget = spec.n_pairs.saturating_mul(100).max(1000);
    for _ in 0..budget {
        if sentences.len() == spec.n_pairs {
            break;
        }
        let s = sampler.sentence(&mut rng);
        let mut bag = s.clone();
        bag.sort_unstable();
        if seen.insert(bag) {
            sentences.push(s);
        }
    }
    if sentences.len() < spec.n_pairs {
        return Err(Error::config(format!(
            "could only draw {} distinct sentences out of {} requested",
            sentences.len(),
            spec.n_pairs
        )));
    }

    let n = sentences.len();
    let dev = (n as f64 * spec.dev_fraction).floor() as usize;
    let test = (n as f64 * spec.test_fraction).floor() as usize;
    let train = n - dev - test;

    std::fs::create_dir_all(out_dir)?;
    let pairs: Vec<ParallelPair> = sentences
        .into_iter()
        .map(|source| ParallelPair {
            target: vocab.encode(&source),
            source,
        })
        .collect();
    write_parallel_tsv(&out_dir.join("train.tsv"), &pairs[..train], &vocab)?;
    write_parallel_tsv(&out_dir.join("dev.tsv"), &pairs[train..train + dev], &vocab)?;
    write_parallel_tsv(&out_dir.join("test.tsv"), &pairs[train + dev..], &vocab)?;
    vocab.write_json(&out_dir.join("vocab.json"))?;
    log::info!("generated corpus: {train} train, {dev} dev, {test} test pairs");
    Ok(CorpusSummary { train, dev, test })
}

/// Aligned sentence pair, unframed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StsExample {
    pub sentence_a: Vec<usize>,
    pub sentence_b: Vec<usize>,
    pub gold_score: f64,
}

/// `2.5 · (1 + cosine)` of the two oracle embeddings, clamped to `[0, 5]`.
pub fn sts_score(a: &[usize], b: &[usize], oracle: &OracleSemantics, vocab: &VocabSpec) -> Result<f64> {
    let ea = oracle.embed(a, vocab)?;
    let eb = oracle.embed(b, vocab)?;
    Ok((2.5 * (1.0 + crate::losses::cosine_similarity(&ea, &eb))).clamp(0.0, 5.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StsSpec {
    pub seed: u64,
    pub n_examples: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Render the second sentence of every pair in language 2.
    pub cross_lingual: bool,
}

impl Default for StsSpec {
    fn default() -> Self {
        StsSpec {
            seed: 11,
            n_examples: 500,
            min_len: 3,
            max_len: 12,
            cross_lingual: false,
        }
    }
}

/// Builds scored sentence pairs with controlled token overlap.
///
/// For each pair a sentence `A` is drawn, an overlap fraction `q` is drawn
/// uniformly from `[0, 1]`, and `B` keeps `round(q·|A|)` of `A`'s tokens,
/// fills the rest with fresh draws and is shuffled.
pub fn gen_sts_set(spec: &StsSpec, oracle: &OracleSemantics, vocab: &VocabSpec) -> Result<Vec<StsExample>> {
    if spec.min_len < 1 || spec.min_len > spec.max_len {
        return Err(Error::config("STS length range is empty"));
    }
    let sampler = SentenceSampler::new(vocab, spec.min_len, spec.max_len)?;
    let mut rng = Rng::new(spec.seed).split(2);
    let mut out = Vec::with_capacity(spec.n_examples);
    for _ in 0..spec.n_examples {
        let a = sampler.sentence(&mut rng);
        let q = rng.uniform();
        let keep = ((q * a.len() as f64).round() as usize).min(a.len());
        let mut positions: Vec<usize> = (0..a.len()).collect();
        rng.shuffle(&mut positions);
        let len_b = sampler.length(&mut rng).max(keep);
        let mut b: Vec<usize> = positions[..keep].iter().map(|&p| a[p]).collect();
        while b.len() < len_b {
            b.push(sampler.token(&mut rng));
        }
        rng.shuffle(&mut b);
        let gold_score = sts_score(&a, &b, oracle, vocab)?;
        let sentence_b = if spec.cross_lingual { vocab.encode(&b) } else { b };
        out.push(StsExample {
            sentence_a: a,
            sentence_b,
            gold_score,
        });
    }
    Ok(out)
}

pub fn write_parallel_tsv(path: &Path, pairs: &[ParallelPair], vocab: &VocabSpec) -> Result<()> {
    let mut text = String::new();
    for p in pairs {
        let _ = writeln!(text, "{}\t{}", vocab.render(&p.source), vocab.render(&p.target));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_sts_tsv(path: &Path, examples: &[StsExample], vocab: &VocabSpec) -> Result<()> {
    let mut text = String::new();
    for e in examples {
        let _ = writeln!(
            text,
            "{}\t{}\t{}",
            vocab.render(&e.sentence_a),
            vocab.render(&e.sentence_b),
            e.gold_score
        );
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Counts tokens that could not be resolved while reading a file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub lines: usize,
    pub unknown_tokens: usize,
}

fn tokenize(field: &str, vocab: &VocabSpec, line: usize, stats: &mut LoadStats) -> Result<Vec<usize>> {
    let ids: Vec<usize> = field
        .split_whitespace()
        .map(|tok| {
            vocab.lookup(tok).unwrap_or_else(|| {
                stats.unknown_tokens += 1;
                UNK
            })
        })
        .collect();
    if ids.is_empty() {
        return Err(Error::Parse {
            line,
            message: "empty sentence".into(),
        });
    }
    Ok(ids)
}

fn warn_unknown(path: &Path, stats: &LoadStats) {
    if stats.unknown_tokens > 0 {
        log::warn!(
            "{}: {} unknown token(s) mapped to UNK",
            path.display(),
            stats.unknown_tokens
        );
    }
}

/// Reads `source<TAB>target` lines. Blank lines are skipped.
pub fn read_parallel_tsv(path: &Path, vocab: &VocabSpec) -> Result<(Vec<ParallelPair>, LoadStats)> {
    let text = std::fs::read_to_string(path)?;
    let mut stats = LoadStats::default();
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        let source = tokenize(fields[0], vocab, line, &mut stats)?;
        let target = tokenize(fields[1], vocab, line, &mut stats)?;
        pairs.push(ParallelPair { source, target });
        stats.lines += 1;
    }
    warn_unknown(path, &stats);
    Ok((pairs, stats))
}

/// Reads `sentence_a<TAB>sentence_b<TAB>score` lines; scores must lie in
/// `[0, 5]`.
pub fn load_sts_tsv(path: &Path, vocab: &VocabSpec) -> Result<Vec<StsExample>> {
    let text = std::fs::read_to_string(path)?;
    let mut stats = LoadStats::default();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let gold_score: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("score `{}` is not a number", fields[2]),
        })?;
        if !(0.0..=5.0).contains(&gold_score) {
            return Err(Error::Parse {
                line,
                message: format!("score {gold_score} outside [0, 5]"),
            });
        }
        out.push(StsExample {
            sentence_a: tokenize(fields[0], vocab, line, &mut stats)?,
            sentence_b: tokenize(fields[1], vocab, line, &mut stats)?,
            gold_score,
        });
        stats.lines += 1;
    }
    warn_unknown(path, &stats);
    Ok(out)
}

/// `N x L` token ids with a `{0, 1}` padding mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub rows: usize,
    pub len: usize,
}

/// Adds BOS/EOS around `ids`, truncating the content so the framed sequence
/// fits in `max_seq_len`.
pub fn frame(ids: &[usize], max_seq_len: usize) -> Vec<usize> {
    let keep = ids.len().min(max_seq_len.saturating_sub(2));
    let mut out = Vec::with_capacity(keep + 2);
    out.push(BOS);
    out.extend_from_slice(&ids[..keep]);
    out.push(EOS);
    out
}

impl TokenBatch {
    /// Frames each sentence and pads the batch to its longest row.
    pub fn from_sentences<S: AsRef<[usize]>>(sentences: &[S], max_seq_len: usize) -> Result<Self> {
        if max_seq_len < 3 {
            return Err(Error::config("max_seq_len must be at least 3"));
        }
        if sentences.is_empty() {
            return Err(Error::contract("cannot batch zero sentences"));
        }
        let framed: Vec<Vec<usize>> = sentences.iter().map(|s| frame(s.as_ref(), max_seq_len)).collect();
        let len = framed.iter().map(Vec::len).max().unwrap_or(0);
        let rows = framed.len();
        let mut ids = vec![PAD; rows * len];
        let mut mask = vec![0u8; rows * len];
        for (r, seq) in framed.iter().enumerate() {
            ids[r * len..r * len + seq.len()].copy_from_slice(seq);
            mask[r * len..r * len + seq.len()].fill(1);
        }
        Ok(TokenBatch { ids, mask, rows, len })
    }

    pub fn row_ids(&self, r: usize) -> &[usize] {
        &self.ids[r * self.len..(r + 1) * self.len]
    }

    pub fn row_mask(&self, r: usize) -> &[u8] {
        &self.mask[r * self.len..(r + 1) * self.len]
    }

    /// Number of unpadded positions in row `r`.
    pub fn row_len(&self, r: usize) -> usize {
        self.row_mask(r).iter().map(|&m| m as usize).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelBatch {
    pub source: TokenBatch,
    pub target: TokenBatch,
    /// Positions of the batch rows in the pair list it was cut from.
    pub indices: Vec<usize>,
}

impl ParallelBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Cuts `pairs` into batches of `batch_size` (the last may be smaller),
/// optionally in a seeded shuffled order.
pub fn make_batches(
    pairs: &[ParallelPair],
    max_seq_len: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<ParallelBatch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::new(seed).split(3).shuffle(&mut order);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let src: Vec<&[usize]> = chunk.iter().map(|&i| pairs[i].source.as_slice()).collect();
            let tgt: Vec<&[usize]> = chunk.iter().map(|&i| pairs[i].target.as_slice()).collect();
            Ok(ParallelBatch {
                source: TokenBatch::from_sentences(&src, max_seq_len)?,
                target: TokenBatch::from_sentences(&tgt, max_seq_len)?,
                indices: chunk.to_vec(),
            })
        })
        .collect()
}

/// Reads a parallel TSV and cuts it into batches.
pub fn load_parallel_tsv(
    path: &Path,
    vocab: &VocabSpec,
    max_seq_len: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<ParallelBatch>> {
    let (pairs, _) = read_parallel_tsv(path, vocab)?;
    make_batches(&pairs, max_seq_len, batch_size, shuffle_seed)
}
