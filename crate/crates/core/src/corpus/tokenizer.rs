//! Pluggable text tokenization. Token ids normally arrive precomputed; the
//! bundled character tokenizer exists for demos only.

use super::{CorpusError, TokenId};

pub trait Tokenizer {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, CorpusError>;
    fn vocab_size(&self) -> usize;
}

/// Maps lowercase ascii letters, digits, space and basic punctuation to ids.
#[derive(Debug, Clone)]
pub struct CharTokenizer {
    alphabet: Vec<char>,
}

impl CharTokenizer {
    pub fn new() -> Self {
        let alphabet: Vec<char> = " abcdefghijklmnopqrstuvwxyz0123456789.,?!'-"
            .chars()
            .collect();
        Self { alphabet }
    }
}

impl Default for CharTokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer for CharTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, CorpusError> {
        text.chars()
            .map(|raw| {
                let c = raw.to_ascii_lowercase();
                self.alphabet
                    .iter()
                    .position(|&a| a == c)
                    .map(|i| i as TokenId)
                    .ok_or(CorpusError::UnknownCharacter(raw))
            })
            .collect()
    }

    fn vocab_size(&self) -> usize {
        self.alphabet.len()
    }
}
