//! Fixed word-level vocabulary shared by every task.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::DataError;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 8] = [
    "square", "circle", "triangle", "star", "heart", "diamond", "cross", "ring",
];
pub const QUADRANTS: [&str; 4] = ["top-left", "top-right", "bottom-left", "bottom-right"];
/// Instruction label of each expert task, coarse to fine.
pub const INSTRUCTIONS: [&str; 4] = ["caption", "recognization", "detection", "segmentation"];
pub const MAX_NUMBER: usize = 16;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];
const WORDS: [&str; 11] = [
    "a", "at", "is", "there", "how", "many", "where", "the", "?", "yes", "no",
];

/// Bijective token string ↔ id map.
#[derive(Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    fn build() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        tokens.extend(SPECIALS.iter().map(|s| s.to_string()));
        tokens.extend(INSTRUCTIONS.iter().map(|s| s.to_string()));
        tokens.extend(WORDS.iter().map(|s| s.to_string()));
        tokens.extend(COLORS.iter().map(|s| s.to_string()));
        tokens.extend(SHAPES.iter().map(|s| s.to_string()));
        tokens.extend(QUADRANTS.iter().map(|s| s.to_string()));
        tokens.extend((0..=MAX_NUMBER).map(|n| n.to_string()));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, ids }
    }

    /// The process-wide vocabulary.
    pub fn get() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(Vocab::build)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId, DataError> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| DataError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str, DataError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(DataError::UnknownTokenId(id))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, DataError> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, DataError> {
        let words: Result<Vec<&str>, _> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(words?.join(" "))
    }

    pub fn color(&self, color: u8) -> TokenId {
        self.ids[COLORS[color as usize - 1]]
    }

    pub fn shape(&self, shape: u8) -> TokenId {
        self.ids[SHAPES[shape as usize - 1]]
    }

    pub fn quadrant(&self, q: usize) -> TokenId {
        self.ids[QUADRANTS[q]]
    }

    pub fn number(&self, n: usize) -> Result<TokenId, DataError> {
        self.id(&n.to_string())
    }

    pub fn word(&self, w: &str) -> TokenId {
        self.ids[w]
    }
}
