//! Prompt templates and the text-encoder stub (embedding table + mean pooling).

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Context words shared by every prompt.
pub const BASE_WORDS: &[&str] = &[
    "a", "photo", "of", "person", "dslr", "portrait", "looking", "at", "the", "mirror",
];

/// Surface form of the identity pseudo-token V*.
pub const IDENTITY_TOKEN: &str = "sks";

/// The three evaluation prompts, `{}` marking the identity slot.
pub const EVAL_PROMPTS: &[&str] = &[
    "a photo of {} person",
    "a dslr portrait of {} person",
    "a photo of {} person looking at the mirror",
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Slot {
    Word(usize),
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    /// Base words, one token per public identity (`pid0`, `pid1`, ...) and V*.
    pub fn new(public_identities: usize) -> Self {
        let mut words: Vec<String> = BASE_WORDS.iter().map(|w| w.to_string()).collect();
        words.extend((0..public_identities).map(|k| format!("pid{k}")));
        words.push(IDENTITY_TOKEN.to_string());
        Self { words }
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if !words.iter().any(|w| w == IDENTITY_TOKEN) {
            return Err(Error::data("vocabulary lacks the identity token"));
        }
        Ok(Self { words })
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn identity_id(&self) -> usize {
        self.id(IDENTITY_TOKEN).expect("vocab always holds V*")
    }

    pub fn public_id(&self, k: usize) -> Option<usize> {
        self.id(&format!("pid{k}"))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// A token sequence with exactly one identity slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    slots: Vec<Slot>,
    text: String,
}

impl PromptTemplate {
    /// Parses a whitespace-separated template where `{}` marks the slot.
    pub fn parse(text: &str, vocab: &Vocab) -> Result<Self> {
        let mut slots = Vec::new();
        for w in text.split_whitespace() {
            if w == "{}" {
                slots.push(Slot::Identity);
            } else {
                let id = vocab
                    .id(w)
                    .ok_or_else(|| Error::invalid(format!("word `{w}` not in vocabulary")))?;
                slots.push(Slot::Word(id));
            }
        }
        let n_slots = slots.iter().filter(|s| **s == Slot::Identity).count();
        if n_slots != 1 {
            return Err(Error::invalid(format!(
                "prompt `{text}` must hold exactly one identity slot, found {n_slots}"
            )));
        }
        Ok(Self {
            slots,
            text: text.to_string(),
        })
    }

    /// Token ids with the slot filled by `identity_token`.
    pub fn resolve(&self, identity_token: usize) -> Vec<usize> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Word(id) => *id,
                Slot::Identity => identity_token,
            })
            .collect()
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Learned embedding table pooled by averaging the rows of a prompt's tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderStub {
    vocab: Vocab,
    dim: usize,
    table: Vec<f64>,
}

impl TextEncoderStub {
    pub fn new(vocab: Vocab, dim: usize, rng: &mut RngState) -> Self {
        let table = rng.gaussian_vec(vocab.len() * dim);
        Self { vocab, dim, table }
    }

    pub fn from_table(vocab: Vocab, dim: usize, table: Vec<f64>) -> Result<Self> {
        if table.len() != vocab.len() * dim {
            return Err(Error::data(format!(
                "embedding table has {} values, expected {}",
                table.len(),
                vocab.len() * dim
            )));
        }
        Ok(Self { vocab, dim, table })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    pub fn row(&self, token: usize) -> &[f64] {
        &self.table[token * self.dim..(token + 1) * self.dim]
    }

    pub fn encode_tokens(&self, tokens: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &tok in tokens {
            for (o, v) in out.iter_mut().zip(self.row(tok)) {
                *o += v;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }

    /// Embeds `prompt` with its slot filled by V*.
    pub fn encode(&self, prompt: &PromptTemplate) -> Vec<f64> {
        self.encode_tokens(&prompt.resolve(self.vocab.identity_id()))
    }

    /// Adds the pooled-output gradient `d_cond` into a table-shaped buffer.
    pub fn pullback_into(&self, tokens: &[usize], d_cond: &[f64], d_table: &mut [f64]) {
        let inv = 1.0 / tokens.len() as f64;
        for &tok in tokens {
            let row = &mut d_table[tok * self.dim..(tok + 1) * self.dim];
            for (g, d) in row.iter_mut().zip(d_cond) {
                *g += d * inv;
            }
        }
    }

    pub fn hash(&self) -> String {
        let mut bytes = self.vocab.words().join(" ").into_bytes();
        for v in &self.table {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::hash_hex(&bytes)
    }
}
