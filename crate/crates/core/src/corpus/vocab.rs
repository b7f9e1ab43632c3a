use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

/// Which side of the cipher a token id belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Language {
    Source,
    Target,
}

/// Two disjoint token ranges joined by a random bijection.
///
/// Language-1 local index `k` has id `4 + k`; language-2 local index `k` has
/// id `4 + n + k`. The cipher sends language-1 local `k` to language-2 local
/// `cipher[k]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSpec {
    pub tokens_per_language: usize,
    pub seed: u64,
    pub cipher: Vec<usize>,
}

impl VocabSpec {
    pub fn generate(tokens_per_language: usize, seed: u64) -> Result<Self> {
        if tokens_per_language == 0 {
            return Err(Error::config("tokens_per_language must be positive"));
        }
        let mut cipher: Vec<usize> = (0..tokens_per_language).collect();
        Rng::new(seed).split(0x0076_6f63_6162).shuffle(&mut cipher);
        Ok(VocabSpec {
            tokens_per_language,
            seed,
            cipher,
        })
    }

    /// Checks that the cipher is a permutation of the language-1 range.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens_per_language;
        if self.cipher.len() != n {
            return Err(Error::config(format!(
                "cipher has {} entries, expected {n}",
                self.cipher.len()
            )));
        }
        let mut seen = vec![false; n];
        for &c in &self.cipher {
            if c >= n || std::mem::replace(&mut seen[c], true) {
                return Err(Error::config("cipher is not a bijection"));
            }
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIALS + 2 * self.tokens_per_language
    }

    pub fn source_id(&self, local: usize) -> usize {
        NUM_SPECIALS + local
    }

    pub fn target_id(&self, local: usize) -> usize {
        NUM_SPECIALS + self.tokens_per_language + local
    }

    pub fn language(&self, id: usize) -> Option<Language> {
        let n = self.tokens_per_language;
        match id {
            _ if id < NUM_SPECIALS => None,
            _ if id < NUM_SPECIALS + n => Some(Language::Source),
            _ if id < NUM_SPECIALS + 2 * n => Some(Language::Target),
            _ => None,
        }
    }

    pub fn is_content(&self, id: usize) -> bool {
        self.language(id).is_some()
    }

    /// Cipher image of a language-1 id; other ids pass through unchanged.
    pub fn encode_id(&self, id: usize) -> usize {
        match self.language(id) {
            Some(Language::Source) => self.target_id(self.cipher[id - NUM_SPECIALS]),
            _ => id,
        }
    }

    pub fn encode(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.encode_id(i)).collect()
    }

    /// Inverse cipher: language-2 ids map back to language 1, others pass
    /// through unchanged.
    pub fn decode(&self, ids: &[usize]) -> Vec<usize> {
        let inverse = self.inverse();
        ids.iter()
            .map(|&id| match self.language(id) {
                Some(Language::Target) => {
                    self.source_id(inverse[id - NUM_SPECIALS - self.tokens_per_language])
                }
                _ => id,
            })
            .collect()
    }

    fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.tokens_per_language];
        for (k, &c) in self.cipher.iter().enumerate() {
            inv[c] = k;
        }
        inv
    }

    /// Surface form written to corpus files.
    pub fn surface(&self, id: usize) -> String {
        let n = self.tokens_per_language;
        match self.language(id) {
            Some(Language::Source) => format!("l1_{}", id - NUM_SPECIALS),
            Some(Language::Target) => format!("l2_{}", id - NUM_SPECIALS - n),
            None => match id {
                PAD => "<pad>".into(),
                BOS => "<s>".into(),
                EOS => "</s>".into(),
                _ => "<unk>".into(),
            },
        }
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.surface(i)).collect::<Vec<_>>().join(" ")
    }

    /// Parses a surface token or decimal id; `None` for anything unknown.
    pub fn lookup(&self, token: &str) -> Option<usize> {
        let n = self.tokens_per_language;
        let local = |rest: &str| rest.parse::<usize>().ok().filter(|&k| k < n);
        if let Some(rest) = token.strip_prefix("l1_") {
            local(rest).map(|k| self.source_id(k))
        } else if let Some(rest) = token.strip_prefix("l2_") {
            local(rest).map(|k| self.target_id(k))
        } else if token.bytes().all(|b| b.is_ascii_digit()) {
            token.parse::<usize>().ok().filter(|&id| id < self.vocab_size())
        } else {
            None
        }
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        let v: VocabSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        v.validate()?;
        Ok(v)
    }
}
