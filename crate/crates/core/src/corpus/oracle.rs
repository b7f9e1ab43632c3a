use crate::error::{Error, Result};
use crate::Rng;

use super::vocab::{Language, VocabSpec, NUM_SPECIALS};

/// Frozen monolingual teacher: one fixed Gaussian concept vector per
/// language-1 token, and a sentence means the average of its concepts.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSemantics {
    seed: u64,
    dim: usize,
    table: Vec<f64>,
}

impl OracleSemantics {
    pub fn new(seed: u64, tokens_per_language: usize, dim: usize) -> Self {
        let mut rng = Rng::new(seed).split(0x6f72_6163_6c65);
        OracleSemantics {
            seed,
            dim,
            table: rng.gaussian_vec(tokens_per_language * dim, 1.0),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn concept(&self, local: usize) -> &[f64] {
        &self.table[local * self.dim..(local + 1) * self.dim]
    }

    /// Embeds a sentence given in either language. Language-2 tokens pass
    /// through the inverse cipher; specials and unknown ids are ignored.
    pub fn embed(&self, ids: &[usize], vocab: &VocabSpec) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        let mut count = 0usize;
        for id in vocab.decode(ids) {
            if vocab.language(id) == Some(Language::Source) {
                for (o, c) in out.iter_mut().zip(self.concept(id - NUM_SPECIALS)) {
                    *o += c;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::contract("oracle_embed: sentence has no content tokens"));
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        Ok(out)
    }
}
