use std::collections::HashMap;

use super::{ClassifierError, Result};
use crate::corpus::TokenStream;

pub const UNK_ID: u32 = 0;
pub const PAD_ID: u32 = 1;

/// Dense token ids; 0 and 1 are reserved for unknown and padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Tokens seen at least `min_freq` times, ordered by descending frequency
    /// then lexicographically.
    pub fn build<'a, I>(train: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a TokenStream>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut streams = 0;
        for stream in train {
            streams += 1;
            for t in stream.iter() {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        if streams == 0 {
            return Err(ClassifierError::EmptyTrainingSet);
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_owned())))
    }

    /// Rebuilds a vocabulary from its non-reserved tokens in id order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut id_to_token = vec!["<unk>".to_owned(), "<pad>".to_owned()];
        let mut token_to_id = HashMap::new();
        for t in tokens {
            if token_to_id.contains_key(&t) {
                continue;
            }
            token_to_id.insert(t.clone(), id_to_token.len() as u32);
            id_to_token.push(t);
        }
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[2..]
    }

    /// Maps tokens to ids, then pads with `PAD_ID` or truncates to `max_seq_len`.
    pub fn vectorize(&self, tokens: &TokenStream, max_seq_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = tokens.iter().take(max_seq_len).map(|t| self.id(t)).collect();
        ids.resize(max_seq_len, PAD_ID);
        ids
    }
}
