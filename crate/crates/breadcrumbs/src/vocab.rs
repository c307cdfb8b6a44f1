//! Fixed character + keyword vocabulary.
//!
//! Five reserved control ids come first: padding, the stop token that ends
//! generation, the beacon written on cache compression, and the two answer
//! tags.  The answer tags render as the literal `<answer>` / `</answer>`
//! text so verifiers operate on plain strings; the other control ids render
//! as single characters outside the base charset, which keeps
//! detokenize→tokenize exact even when control ids appear mid-sequence.
//!
//! Tokenization is greedy longest-match, so keyword strings (used to keep
//! prompts short) always win over their spelled-out characters.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const STOP: TokenId = 1;
pub const BEACON: TokenId = 2;
pub const ANSWER_OPEN: TokenId = 3;
pub const ANSWER_CLOSE: TokenId = 4;

const PAD_STR: &str = "¤";
const STOP_STR: &str = "§";
const BEACON_STR: &str = "¶";
const ANSWER_OPEN_STR: &str = "<answer>";
const ANSWER_CLOSE_STR: &str = "</answer>";

const BASE_CHARS: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 \n+-*/=()[],.:;<>?!'\"_";

/// Multi-character tokens that compress recurring prompt text.
const KEYWORDS: &[&str] = &[
    "Using the numbers",
    "create an equation that equals",
    "You can use basic arithmetic operations",
    "and each number can only be used once",
    "Make sure to solve it by thinking step by step",
    "Return the final answer in",
    "tags, for example",
    "Solve the following system of equations",
    "Return the solution as a list",
    "Find the path from",
    "in the star graph with edges",
    "for example",
    "numbers",
    "target",
    "answer",
    "nodes",
    "edges",
    "path",
    "solve",
    " -> ",
    " to ",
    " = ",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, TokenId>,
    #[serde(skip)]
    max_token_bytes: usize,
}

impl Vocabulary {
    /// The standard vocabulary used everywhere in this crate.
    pub fn core() -> Self {
        let mut tokens: Vec<String> = vec![
            PAD_STR.to_string(),
            STOP_STR.to_string(),
            BEACON_STR.to_string(),
            ANSWER_OPEN_STR.to_string(),
            ANSWER_CLOSE_STR.to_string(),
        ];
        tokens.extend(BASE_CHARS.chars().map(|c| c.to_string()));
        tokens.extend(KEYWORDS.iter().map(|s| s.to_string()));
        Self::from_tokens(tokens).expect("core vocabulary is well-formed")
    }

    /// Rebuild from an explicit token list (checkpoint load path).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let reserved = [PAD_STR, STOP_STR, BEACON_STR, ANSWER_OPEN_STR, ANSWER_CLOSE_STR];
        if tokens.len() < reserved.len() {
            return Err(Error::Config("vocabulary too small for reserved ids".into()));
        }
        for (i, want) in reserved.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Config(format!(
                    "reserved token {i} must be {want:?}, got {:?}",
                    tokens[i]
                )));
            }
        }
        let mut lookup = HashMap::new();
        let mut max_token_bytes = 0;
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Config(format!("token {i} is empty")));
            }
            if lookup.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
            max_token_bytes = max_token_bytes.max(t.len());
        }
        Ok(Vocabulary { tokens, lookup, max_token_bytes })
    }

    /// Restore derived lookup state after serde deserialization.
    pub fn rebuild(self) -> Result<Self> {
        Self::from_tokens(self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_control(&self, id: TokenId) -> bool {
        id <= ANSWER_CLOSE
    }

    pub fn token_str(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(Error::UnknownTokenId(id))
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    /// Greedy longest-match tokenization.  Every input byte must be covered
    /// or the call fails with the offending position.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let bytes = text.len();
        let mut ids = Vec::new();
        let mut pos = 0usize;
        'outer: while pos < bytes {
            let top = self.max_token_bytes.min(bytes - pos);
            for l in (1..=top).rev() {
                if !text.is_char_boundary(pos + l) {
                    continue;
                }
                if let Some(&id) = self.lookup.get(&text[pos..pos + l]) {
                    ids.push(id);
                    pos += l;
                    continue 'outer;
                }
            }
            let tail_end = text
                .char_indices()
                .map(|(i, _)| i)
                .find(|&i| i > pos + 12)
                .unwrap_or(bytes);
            return Err(Error::Untokenizable { at: pos, snippet: text[pos..tail_end].to_string() });
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.token_str(id)?);
        }
        Ok(out)
    }
}
