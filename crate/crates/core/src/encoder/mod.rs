//! Transformer sentence encoders with an optional embedding bottleneck and
//! recurrent (weight-tied) layers.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::{Rng, Scalar, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION, MAGIC};

/// Standard deviation of the Gaussian used for every weight matrix and
/// embedding table.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub bottleneck_enabled: bool,
    pub bottleneck_size: usize,
    pub ffn_size: usize,
    pub heads: usize,
    pub distinct_layers: usize,
    pub recurrence: usize,
    pub max_positions: usize,
    pub layernorm_eps: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("ffn_size", self.ffn_size),
            ("heads", self.heads),
            ("distinct_layers", self.distinct_layers),
            ("recurrence", self.recurrence),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("encoder {name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.bottleneck_enabled && self.bottleneck_size == 0 {
            return Err(Error::config("bottleneck_size must be positive when the bottleneck is enabled"));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::config("layernorm_eps must be positive"));
        }
        Ok(())
    }

    /// Number of layer applications in one forward pass.
    pub fn effective_depth(&self) -> usize {
        self.distinct_layers * self.recurrence
    }

    /// Width of the word-embedding table.
    pub fn embedding_width(&self) -> usize {
        if self.bottleneck_enabled {
            self.bottleneck_size
        } else {
            self.hidden
        }
    }
}

/// Which embedding-layer states the stage-2 objective compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingTap {
    /// Masked mean over positions, one vector per sentence.
    #[default]
    Pooled,
    /// Every unpadded token state, one row per token.
    PerToken,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    query: (ParamId, ParamId),
    key: (ParamId, ParamId),
    value: (ParamId, ParamId),
    output: (ParamId, ParamId),
    attention_norm: (ParamId, ParamId),
    intermediate: (ParamId, ParamId),
    ffn_output: (ParamId, ParamId),
    ffn_norm: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderIds {
    word: ParamId,
    projection: Option<ParamId>,
    position: ParamId,
    norm: (ParamId, ParamId),
    layers: Vec<LayerIds>,
}

/// A mean-pooled transformer bi-encoder and its named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEncoder<T> {
    config: EncoderConfig,
    params: ParamStore<T>,
    ids: EncoderIds,
}

/// Names of every tensor in an encoder with `config`, in registry order.
pub fn parameter_names(config: &EncoderConfig) -> Vec<String> {
    parameter_layout(config).into_iter().map(|(n, _, _)| n).collect()
}

/// `(name, shape, decays)` for every tensor, in registry order.
fn parameter_layout(c: &EncoderConfig) -> Vec<(String, Vec<usize>, bool)> {
    let (h, f) = (c.hidden, c.ffn_size);
    let mut out = vec![("embeddings.word".to_string(), vec![c.vocab_size, c.embedding_width()], true)];
    if c.bottleneck_enabled {
        out.push(("embeddings.projection".into(), vec![c.bottleneck_size, h], true));
    }
    out.push(("embeddings.position".into(), vec![c.max_positions, h], true));
    out.push(("embeddings.norm.gamma".into(), vec![h], false));
    out.push(("embeddings.norm.beta".into(), vec![h], false));
    for i in 0..c.distinct_layers {
        let p = format!("layers.{i}");
        for (block, fan_in, fan_out) in [
            ("attention.query", h, h),
            ("attention.key", h, h),
            ("attention.value", h, h),
            ("attention.output", h, h),
        ] {
            out.push((format!("{p}.{block}.weight"), vec![fan_in, fan_out], true));
            out.push((format!("{p}.{block}.bias"), vec![fan_out], false));
        }
        out.push((format!("{p}.attention.norm.gamma"), vec![h], false));
        out.push((format!("{p}.attention.norm.beta"), vec![h], false));
        out.push((format!("{p}.ffn.intermediate.weight"), vec![h, f], true));
        out.push((format!("{p}.ffn.intermediate.bias"), vec![f], false));
        out.push((format!("{p}.ffn.output.weight"), vec![f, h], true));
        out.push((format!("{p}.ffn.output.bias"), vec![h], false));
        out.push((format!("{p}.ffn.norm.gamma"), vec![h], false));
        out.push((format!("{p}.ffn.norm.beta"), vec![h], false));
    }
    out
}

fn is_norm_scale(name: &str) -> bool {
    name.ends_with(".gamma")
}

impl<T: Scalar> SentenceEncoder<T> {
    /// Gaussian-initialized encoder: matrices and the word table draw from
    /// `N(0, INIT_STD²)`, biases and the positional table start at zero, norm
    /// scales at one.
    ///
    /// A random positional table would give every sentence a component that
    /// depends only on its length, so an untrained model would already match
    /// same-length sentences across languages.
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(config, |name, shape| {
            if is_norm_scale(name) {
                Tensor::ones(shape)
            } else if shape.len() == 1 || name == "embeddings.position" {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, INIT_STD, rng)
            }
        })
    }

    /// Encoder whose tensors come from `init(name, shape)`.
    pub fn build(config: EncoderConfig, mut init: impl FnMut(&str, &[usize]) -> Tensor<T>) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, decay) in parameter_layout(&config) {
            let t = init(&name, &shape);
            if t.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "initializer returned shape {:?} for `{name}`, expected {shape:?}",
                    t.shape()
                )));
            }
            params.add(name, t, decay);
        }
        Self::from_store(config, params)
    }

    fn from_store(config: EncoderConfig, params: ParamStore<T>) -> Result<Self> {
        let id = |name: &str| {
            params
                .find(name)
                .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
        };
        let pair = |prefix: &str, a: &str, b: &str| -> Result<(ParamId, ParamId)> {
            Ok((id(&format!("{prefix}.{a}"))?, id(&format!("{prefix}.{b}"))?))
        };
        let mut layers = Vec::with_capacity(config.distinct_layers);
        for i in 0..config.distinct_layers {
            let p = format!("layers.{i}");
            let lin = |block: &str| pair(&format!("{p}.{block}"), "weight", "bias");
            layers.push(LayerIds {
                query: lin("attention.query")?,
                key: lin("attention.key")?,
                value: lin("attention.value")?,
                output: lin("attention.output")?,
                attention_norm: pair(&format!("{p}.attention.norm"), "gamma", "beta")?,
                intermediate: lin("ffn.intermediate")?,
                ffn_output: lin("ffn.output")?,
                ffn_norm: pair(&format!("{p}.ffn.norm"), "gamma", "beta")?,
            });
        }
        let ids = EncoderIds {
            word: id("embeddings.word")?,
            projection: if config.bottleneck_enabled {
                Some(id("embeddings.projection")?)
            } else {
                None
            },
            position: id("embeddings.position")?,
            norm: pair("embeddings.norm", "gamma", "beta")?,
            layers,
        };
        Ok(SentenceEncoder { config, params, ids })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> u64 {
        self.params.total_elements()
    }

    /// Same weights at another element width.
    pub fn cast<U: Scalar>(&self) -> SentenceEncoder<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.add(p.name.clone(), p.tensor.cast(), p.decay);
        }
        SentenceEncoder::from_store(self.config.clone(), params).expect("same layout")
    }

    /// Records the parameters on `tape`; `trainable(name)` selects which
    /// receive gradients.
    pub fn bind<'m, 't>(&'m self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> BoundEncoder<'m, 't, T> {
        BoundEncoder {
            encoder: self,
            params: self.params.bind(tape, trainable),
        }
    }

    /// Inference-only embeddings for a list of sentences, processed in
    /// batches of `batch_size`.
    pub fn embed_sentences<S: AsRef<[usize]>>(&self, sentences: &[S], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(batch_size.max(1)) {
            let batch = TokenBatch::from_sentences(chunk, self.config.max_positions)?;
            let tape = Tape::new();
            let enc = self.bind(&tape, |_| false).encode(&batch)?;
            let v = enc.value();
            out.extend(v.rows().map(|r| r.iter().map(|x| x.as_f64()).collect::<Vec<f64>>()));
        }
        Ok(out)
    }

    /// Copy with every layer occurrence materialized: `M·r` distinct layers
    /// and recurrence 1.
    pub fn unroll(&self) -> SentenceEncoder<T> {
        let m = self.config.distinct_layers;
        let config = EncoderConfig {
            distinct_layers: self.config.effective_depth(),
            recurrence: 1,
            ..self.config.clone()
        };
        Self::build(config, |name, _| self.params.get(self.params.find(&source_name(name, m)).expect("layout")).clone())
            .expect("unrolled layout is valid")
    }
}

/// Maps a parameter of an unrolled encoder back to its tied original.
fn source_name(name: &str, distinct_layers: usize) -> String {
    match name.strip_prefix("layers.").and_then(|rest| rest.split_once('.')) {
        Some((idx, rest)) => {
            let i: usize = idx.parse().expect("layer index");
            format!("layers.{}.{rest}", i % distinct_layers)
        }
        None => name.to_string(),
    }
}

/// Builds a student from an assistant: layers `1..M`, the positional table
/// (truncated to the student's length) and the embedding norm are copied;
/// the word table is copied only when neither model is bottlenecked and the
/// shapes agree, otherwise it and the projection are freshly drawn.
pub fn init_student_from_assistant<T: Scalar>(
    assistant: &SentenceEncoder<T>,
    student: EncoderConfig,
    rng: &mut Rng,
) -> Result<SentenceEncoder<T>> {
    let a = assistant.config();
    if student.hidden != a.hidden {
        return Err(Error::config(format!(
            "student hidden {} differs from assistant hidden {}",
            student.hidden, a.hidden
        )));
    }
    if student.distinct_layers > a.effective_depth() {
        return Err(Error::config(format!(
            "student asks for {} layers, assistant has {}",
            student.distinct_layers,
            a.effective_depth()
        )));
    }
    if student.ffn_size != a.ffn_size || student.heads != a.heads {
        return Err(Error::config("student and assistant layers must share ffn_size and heads"));
    }
    if student.vocab_size != a.vocab_size {
        return Err(Error::config("student and assistant vocabularies differ"));
    }
    let source = if a.recurrence == 1 { assistant.clone() } else { assistant.unroll() };
    let fresh = SentenceEncoder::<T>::new(student.clone(), rng)?;
    let copy_word = !student.bottleneck_enabled && !a.bottleneck_enabled;
    SentenceEncoder::build(student, |name, shape| {
        let from_assistant = |n: &str| source.params.get(source.params.find(n).expect("assistant layout"));
        match name {
            "embeddings.position" => {
                let t = from_assistant(name);
                let h = t.shape()[1];
                let rows = shape[0].min(t.shape()[0]);
                let mut out = fresh.params.get(fresh.params.find(name).unwrap()).clone();
                out.data_mut()[..rows * h].copy_from_slice(&t.data()[..rows * h]);
                out
            }
            "embeddings.word" if copy_word => from_assistant(name).clone(),
            "embeddings.norm.gamma" | "embeddings.norm.beta" => from_assistant(name).clone(),
            _ if name.starts_with("layers.") => from_assistant(name).clone(),
            _ => fresh.params.get(fresh.params.find(name).unwrap()).clone(),
        }
    })
}

/// An encoder's parameters recorded on a tape.
pub struct BoundEncoder<'m, 't, T> {
    encoder: &'m SentenceEncoder<T>,
    params: BoundParams<'t, T>,
}

impl<'m, 't, T: Scalar> BoundEncoder<'m, 't, T> {
    pub fn encoder(&self) -> &'m SentenceEncoder<T> {
        self.encoder
    }

    pub fn params(&self) -> &BoundParams<'t, T> {
        &self.params
    }

    /// Releases the encoder borrow, keeping the tape handles.
    pub fn into_params(self) -> BoundParams<'t, T> {
        self.params
    }

    fn p(&self, id: ParamId) -> Var<'t, T> {
        self.params.get(id)
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        let c = &self.encoder.config;
        if batch.len > c.max_positions {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_positions {}",
                batch.len, c.max_positions
            )));
        }
        if batch.ids.len() != batch.rows * batch.len || batch.mask.len() != batch.ids.len() {
            return Err(Error::contract("token batch ids/mask do not match its shape"));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= c.vocab_size) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        if let Some(r) = (0..batch.rows).find(|&r| batch.row_len(r) == 0) {
            return Err(Error::contract(format!("row {r} is fully masked")));
        }
        Ok(())
    }

    /// Token states after lookup, projection, positions and the embedding
    /// norm: `[N·L, H]`.
    pub fn embed_tokens(&self, batch: &TokenBatch) -> Result<Var<'t, T>> {
        self.check_batch(batch)?;
        let c = &self.encoder.config;
        let ids = &self.encoder.ids;
        let mut x = self.p(ids.word).gather_rows(&batch.ids);
        if let Some(proj) = ids.projection {
            x = x.matmul(self.p(proj));
        }
        let positions: Vec<usize> = (0..batch.rows).flat_map(|_| 0..batch.len).collect();
        x = x.add(self.p(ids.position).gather_rows(&positions));
        Ok(x.layer_norm(self.p(ids.norm.0), self.p(ids.norm.1), T::lit(c.layernorm_eps)))
    }

    /// Embedding-layer output as a sentence vector `[N, H]` or as one row per
    /// unpadded token.
    pub fn embedding_output(&self, batch: &TokenBatch, tap: EmbeddingTap) -> Result<Var<'t, T>> {
        let x = self.embed_tokens(batch)?;
        Ok(match tap {
            EmbeddingTap::Pooled => self.pool(x, batch),
            EmbeddingTap::PerToken => {
                let keep: Vec<usize> = (0..batch.ids.len()).filter(|&i| batch.mask[i] == 1).collect();
                x.gather_rows(&keep)
            }
        })
    }

    fn pool(&self, x: Var<'t, T>, batch: &TokenBatch) -> Var<'t, T> {
        let h = self.encoder.config.hidden;
        let mask: Vec<T> = batch.mask.iter().map(|&m| T::lit(m as f64)).collect();
        x.reshape(&[batch.rows, batch.len, h]).masked_mean(&mask)
    }

    /// Final-layer token states `[N·L, H]`.
    pub fn token_states(&self, batch: &TokenBatch) -> Result<Var<'t, T>> {
        let mut x = self.embed_tokens(batch)?;
        let key_mask: Vec<bool> = batch.mask.iter().map(|&m| m == 1).collect();
        for _ in 0..self.encoder.config.recurrence {
            for layer in &self.encoder.ids.layers {
                x = self.layer(x, layer, batch, &key_mask);
            }
        }
        Ok(x)
    }

    /// Mean-pooled sentence embeddings `[N, H]`.
    pub fn encode(&self, batch: &TokenBatch) -> Result<Var<'t, T>> {
        let x = self.token_states(batch)?;
        Ok(self.pool(x, batch))
    }

    fn linear(&self, x: Var<'t, T>, (w, b): (ParamId, ParamId)) -> Var<'t, T> {
        x.matmul(self.p(w)).add_bias(self.p(b))
    }

    fn layer(&self, x: Var<'t, T>, ids: &LayerIds, batch: &TokenBatch, key_mask: &[bool]) -> Var<'t, T> {
        let c = &self.encoder.config;
        let (n, l, h, heads) = (batch.rows, batch.len, c.hidden, c.heads);
        let dh = h / heads;
        let eps = T::lit(c.layernorm_eps);
        let split = |v: Var<'t, T>| v.reshape(&[n, l, heads, dh]).permute(&[0, 2, 1, 3]);

        let q = split(self.linear(x, ids.query));
        let k = split(self.linear(x, ids.key));
        let v = split(self.linear(x, ids.value));
        let scores = q.batch_matmul(k.transpose()).scale(T::lit(1.0 / (dh as f64).sqrt()));
        let probs = scores.masked_softmax(key_mask, heads * l);
        let context = probs.batch_matmul(v).permute(&[0, 2, 1, 3]).reshape(&[n * l, h]);
        let attended = self.linear(context, ids.output);
        let x = x.add(attended).layer_norm(self.p(ids.attention_norm.0), self.p(ids.attention_norm.1), eps);

        let inner = self.linear(x, ids.intermediate).gelu();
        let ffn = self.linear(inner, ids.ffn_output);
        x.add(ffn).layer_norm(self.p(ids.ffn_norm.0), self.p(ids.ffn_norm.1), eps)
    }
}

/// True for tensors on the embedding path: word table, projection and the
/// embedding norm.
pub fn is_embedding_path(name: &str) -> bool {
    matches!(
        name,
        "embeddings.word" | "embeddings.projection" | "embeddings.norm.gamma" | "embeddings.norm.beta"
    )
}
