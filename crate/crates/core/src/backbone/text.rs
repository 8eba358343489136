//! Deterministic hash-based bag-of-words text conditioner. Each word maps to
//! a fixed pseudo-random token vector, so runs are reproducible offline; an
//! external embedding service can replace this through the same interface.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::Tensor;
use crate::util::fnv1a64;

/// Token-sequence embedding of a text prompt, `[n_tokens, dim]`.
#[derive(Clone, Debug)]
pub struct ConditionEmbedding {
    pub tokens: Tensor,
}

impl ConditionEmbedding {
    pub fn token_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct TextConditioner {
    dim: usize,
    max_tokens: usize,
}

impl TextConditioner {
    pub fn new(dim: usize, max_tokens: usize) -> Self {
        assert!(dim > 0 && max_tokens > 0);
        TextConditioner { dim, max_tokens }
    }

    /// Embed a prompt as one start token plus one token per word, capped at
    /// the token budget. The empty prompt yields just the start token, which
    /// doubles as the unconditional embedding.
    pub fn embed(&self, text: &str) -> ConditionEmbedding {
        let words: Vec<&str> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .take(self.max_tokens - 1)
            .collect();
        let mut data = Vec::with_capacity((words.len() + 1) * self.dim);
        data.extend(self.token_vector("<start>"));
        for w in &words {
            let lower = w.to_lowercase();
            data.extend(self.token_vector(&lower));
        }
        ConditionEmbedding {
            tokens: Tensor::from_vec(&[words.len() + 1, self.dim], data),
        }
    }

    fn token_vector(&self, word: &str) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(fnv1a64(word.as_bytes()));
        Tensor::randn(&[self.dim], 1.0 / (self.dim as f64).sqrt(), &mut rng).into_data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_is_deterministic_and_word_order_insensitive_tokens() {
        let c = TextConditioner::new(16, 8);
        let a = c.embed("a red car");
        let b = c.embed("a red car");
        assert!(a.tokens.bit_eq(&b.tokens));
        assert_eq!(a.token_count(), 4);
        assert_eq!(a.dim(), 16);
    }

    #[test]
    fn empty_prompt_is_single_start_token() {
        let c = TextConditioner::new(8, 4);
        let e = c.embed("");
        assert_eq!(e.token_count(), 1);
        assert!(e.tokens.all_finite());
    }

    #[test]
    fn token_budget_is_enforced() {
        let c = TextConditioner::new(8, 4);
        let e = c.embed("one two three four five six");
        assert_eq!(e.token_count(), 4);
    }
}
