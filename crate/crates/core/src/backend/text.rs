//! Toy text encoder: whitespace tokenization with a seeded hash-to-vector
//! embedding, so distinct tokens get distinct, reproducible vectors and the
//! same token always maps to the same row. No context mixing — a token's
//! vector does not depend on its neighbors.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::promptopt::PromptEmbedding;

pub const BOS_TOKEN: u32 = 1;
pub const EOS_TOKEN: u32 = 2;
const WORD_ID_BASE: u32 = 16;

#[derive(Debug, Clone)]
pub struct ToyTextEmbedder {
    dim: usize,
    seed: u64,
}

impl ToyTextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Lowercased, whitespace-collapsed form; the prompt key toy backends use
    /// to look up class means.
    pub fn canonicalize(prompt: &str) -> String {
        prompt
            .split_whitespace()
            .map(|w| w.to_lowercase())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokenize(prompt: &str) -> Vec<u32> {
        let mut tokens = vec![BOS_TOKEN];
        for word in Self::canonicalize(prompt).split_whitespace() {
            tokens.push(WORD_ID_BASE + (fnv1a(word.as_bytes()) % 0x00FF_FFFF) as u32);
        }
        tokens.push(EOS_TOKEN);
        tokens
    }

    fn token_vector(&self, token: u32) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(
            self.seed ^ (token as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        (0..self.dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Embeds a non-empty prompt; row 0 and the last row are the BOS/EOS
    /// special tokens.
    pub fn embed(&self, prompt: &str) -> Result<PromptEmbedding> {
        if prompt.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        self.embed_allow_empty(prompt)
    }

    /// Same as [`embed`](Self::embed) but accepts the empty prompt; used for
    /// the unconditional embedding, which is just BOS followed by EOS.
    pub fn embed_allow_empty(&self, prompt: &str) -> Result<PromptEmbedding> {
        let tokens = Self::tokenize(prompt);
        let z = tokens.len();
        let mut vectors = Array2::zeros((z, self.dim));
        for (i, &tok) in tokens.iter().enumerate() {
            let v = self.token_vector(tok);
            for (j, x) in v.iter().enumerate() {
                vectors[[i, j]] = *x;
            }
        }
        let special = BTreeSet::from([0usize, z - 1]);
        PromptEmbedding::new(tokens, vectors, special, Self::canonicalize(prompt))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
