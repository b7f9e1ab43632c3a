//! Closed-form parameter counts for embedding and encoder blocks.

use serde::Serialize;

use crate::encoder::{EncoderConfig, SentenceEncoder};
use crate::error::{Error, Result};
use crate::Scalar;

/// Model shape plus the conventions used to count its embedding block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SizePreset {
    pub name: String,
    pub vocab: u64,
    pub hidden: u64,
    pub ffn: u64,
    pub positions: u64,
    pub token_types: u64,
    pub layers: u64,
    pub bottleneck: Option<u64>,
    pub include_positional: bool,
    pub include_token_type: bool,
    pub include_embedding_layernorm: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SizeReport {
    pub preset: String,
    pub embedding_params: u64,
    pub encoder_params: u64,
    pub embedding_m: String,
    pub encoder_m: String,
}

impl SizeReport {
    /// `preset<TAB>embedding<TAB>encoder<TAB>embedding_M<TAB>encoder_M`
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.preset, self.embedding_params, self.encoder_params, self.embedding_m, self.encoder_m
        )
    }
}

pub const TSV_HEADER: &str = "preset\tembedding\tencoder\tembedding_M\tencoder_M";

/// Parameters of one transformer layer: QKVO with bias, two FFN matrices
/// with bias, two layer norms.
pub fn layer_size(hidden: u64, ffn: u64) -> u64 {
    let h = hidden;
    4 * (h * h + h) + (h * ffn + ffn) + (ffn * h + h) + 2 * (2 * h)
}

pub fn encoder_size(hidden: u64, ffn: u64, distinct_layers: u64) -> u64 {
    distinct_layers * layer_size(hidden, ffn)
}

pub fn embedding_size(p: &SizePreset) -> u64 {
    let core = match p.bottleneck {
        Some(b) => p.vocab * b + b * p.hidden,
        None => p.vocab * p.hidden,
    };
    let mut total = core;
    if p.include_positional {
        total += p.positions * p.hidden;
    }
    if p.include_token_type {
        total += p.token_types * p.hidden;
    }
    if p.include_embedding_layernorm {
        total += 2 * p.hidden;
    }
    total
}

/// `count / 10⁶` rounded half-up at two decimals, e.g. `192.40M`.
pub fn format_millions(count: u64) -> String {
    let hundredths = (count + 5_000) / 10_000;
    format!("{}.{:02}M", hundredths / 100, hundredths % 100)
}

pub fn model_report(p: &SizePreset) -> SizeReport {
    let embedding_params = embedding_size(p);
    let encoder_params = encoder_size(p.hidden, p.ffn, p.layers);
    SizeReport {
        preset: p.name.clone(),
        embedding_params,
        encoder_params,
        embedding_m: format_millions(embedding_params),
        encoder_m: format_millions(encoder_params),
    }
}

const XLMR_VOCAB: u64 = 250_002;

fn family(name: &str, hidden: u64, ffn: u64, counts_extras: bool) -> SizePreset {
    SizePreset {
        name: name.to_string(),
        vocab: XLMR_VOCAB,
        hidden,
        ffn,
        positions: 512,
        token_types: 1,
        layers: 12,
        bottleneck: None,
        include_positional: counts_extras,
        include_token_type: counts_extras,
        include_embedding_layernorm: counts_extras,
    }
}

/// Named presets: `{xlmr,minilm}-{full,b128,b256}-ru{12,6,3}`, plus the
/// short aliases `xlmr` and `minilm` for the full 12-layer models.
///
/// XLM-R presets count positions, token types and the embedding norm in the
/// embedding block; MiniLM bottleneck presets count only the factorized
/// tables. The MiniLM full preset counts the extras.
pub fn preset(name: &str) -> Option<SizePreset> {
    let (model, rest) = name.split_once('-').unwrap_or((name, "full-ru12"));
    let (emb, ru) = rest.split_once("-ru")?;
    let layers: u64 = ru.parse().ok().filter(|l| [1, 2, 3, 4, 6, 12].contains(l))?;
    let bottleneck = match emb {
        "full" => None,
        "b128" => Some(128),
        "b256" => Some(256),
        _ => return None,
    };
    let mut p = match model {
        "xlmr" => family(name, 768, 3072, true),
        "minilm" => family(name, 384, 1536, bottleneck.is_none()),
        _ => return None,
    };
    p.layers = layers;
    p.bottleneck = bottleneck;
    Some(p)
}

pub fn preset_names() -> Vec<String> {
    let mut out = Vec::new();
    for model in ["xlmr", "minilm"] {
        for emb in ["full", "b128", "b256"] {
            for ru in [12, 6, 3] {
                out.push(format!("{model}-{emb}-ru{ru}"));
            }
        }
    }
    out
}

/// Counting conventions of a live toy encoder: positions and embedding norm
/// are part of the embedding block, token types do not exist.
pub fn preset_for(config: &EncoderConfig, name: &str) -> SizePreset {
    SizePreset {
        name: name.to_string(),
        vocab: config.vocab_size as u64,
        hidden: config.hidden as u64,
        ffn: config.ffn_size as u64,
        positions: config.max_positions as u64,
        token_types: 0,
        layers: config.distinct_layers as u64,
        bottleneck: config.bottleneck_enabled.then_some(config.bottleneck_size as u64),
        include_positional: true,
        include_token_type: false,
        include_embedding_layernorm: true,
    }
}

/// Compares a live registry against the formulas, block by block. Tensors
/// named `embeddings.*` belong to the embedding block, `layers.{i}.*` to
/// layer `i`.
pub fn audit<T: Scalar>(encoder: &SentenceEncoder<T>) -> Result<SizeReport> {
    let config = encoder.config();
    let report = model_report(&preset_for(config, "live"));
    let per_layer = layer_size(config.hidden as u64, config.ffn_size as u64);

    let mut embedding = (0u64, Vec::new());
    let mut layers = vec![(0u64, Vec::new()); config.distinct_layers];
    let mut stray = Vec::new();
    for p in encoder.params().iter() {
        let n = p.tensor.len() as u64;
        let slot = if p.name.starts_with("embeddings.") {
            Some(&mut embedding)
        } else {
            p.name
                .strip_prefix("layers.")
                .and_then(|r| r.split_once('.'))
                .and_then(|(i, _)| i.parse::<usize>().ok())
                .and_then(|i| layers.get_mut(i))
        };
        match slot {
            Some((total, names)) => {
                *total += n;
                names.push(p.name.clone());
            }
            None => stray.push(p.name.clone()),
        }
    }
    let mut offending = stray;
    if embedding.0 != report.embedding_params {
        offending.extend(embedding.1);
    }
    for (total, names) in layers {
        if total != per_layer {
            offending.extend(names);
        }
    }
    if offending.is_empty() {
        Ok(report)
    } else {
        Err(Error::Audit { offending })
    }
}
