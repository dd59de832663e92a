use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::caption::CaptionSet;
use crate::text::words;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_TOKENS: usize = 64;

/// Lowercasing word tokenizer with a vocabulary fixed at build time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TokenizerDocument", into = "TokenizerDocument")]
pub struct Tokenizer {
    tokens: Vec<String>,
    vocab: HashMap<String, u32>,
    max_tokens: usize,
}

#[derive(Serialize, Deserialize)]
struct TokenizerDocument {
    tokens: Vec<String>,
    max_tokens: usize,
}

impl From<TokenizerDocument> for Tokenizer {
    fn from(doc: TokenizerDocument) -> Self {
        Self::from_tokens(doc.tokens, doc.max_tokens)
    }
}

impl From<Tokenizer> for TokenizerDocument {
    fn from(tok: Tokenizer) -> Self {
        Self {
            tokens: tok.tokens,
            max_tokens: tok.max_tokens,
        }
    }
}

impl Tokenizer {
    /// Vocabulary: `<pad>` = 0, `<unk>` = 1, then every caption word in
    /// sorted order.
    pub fn build(captions: &CaptionSet, max_tokens: usize) -> Self {
        let words: BTreeSet<String> = captions.captions.values().flat_map(|c| words(c)).collect();
        let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(words)
            .collect();
        Self::from_tokens(tokens, max_tokens)
    }

    fn from_tokens(tokens: Vec<String>, max_tokens: usize) -> Self {
        let vocab = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            vocab,
            max_tokens: max_tokens.max(1),
        }
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    /// Never empty: text with no words yields `[unk]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = words(text)
            .iter()
            .take(self.max_tokens)
            .map(|w| self.id(w).unwrap_or(self.unk_id()))
            .collect();
        if ids.is_empty() {
            ids.push(self.unk_id());
        }
        ids
    }
}
