//! Tokenization, vocabularies, and fixed-length id encoding.
//!
//! Vocabulary files hold one token per line; the token on line `n`
//! (0-based) has id `n + 4`. Ids 0..4 are the reserved specials and are not
//! written to the file.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CodeSummaryPair;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;
const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Splits source text into lowercase tokens.
///
/// Whitespace separates, punctuation characters become single-character
/// tokens, `_` separates without producing a token, and identifiers are cut
/// at camelCase, acronym and letter/digit boundaries.
pub fn tokenize_code(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        flush_word(&mut word, &mut out);
        if ch.is_whitespace() || ch == '_' {
            continue;
        }
        out.push(ch.to_string());
    }
    flush_word(&mut word, &mut out);
    out
}

/// Like [`tokenize_code`] but drops punctuation; used for summaries.
pub fn tokenize_summary(text: &str) -> Vec<String> {
    tokenize_code(text)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .collect()
}

fn flush_word(word: &mut String, out: &mut Vec<String>) {
    if word.is_empty() {
        return;
    }
    out.extend(split_identifier(word).into_iter().map(|p| p.to_lowercase()));
    word.clear();
}

fn split_identifier(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut parts = Vec::new();
    let mut start = 0;
    for i in 1..chars.len() {
        let (prev, cur) = (chars[i - 1], chars[i]);
        let next_lower = chars.get(i + 1).is_some_and(|c| c.is_lowercase());
        let boundary = (prev.is_lowercase() && cur.is_uppercase())
            || (prev.is_alphabetic() && cur.is_numeric())
            || (prev.is_numeric() && cur.is_alphabetic())
            || (prev.is_uppercase() && cur.is_uppercase() && next_lower);
        if boundary {
            parts.push(chars[start..i].iter().collect());
            start = i;
        }
    }
    parts.push(chars[start..].iter().collect());
    parts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Code,
    Summary,
}

/// Bidirectional token/id map with the four reserved specials at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    max_size: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: impl IntoIterator<Item = String>, max_size: usize) -> Result<Self> {
        if max_size < NUM_SPECIALS + 1 {
            return Err(Error::Config(format!("vocabulary max_size must be at least 5, got {max_size}")));
        }
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if id_to_token.len() >= max_size {
                break;
            }
            id_to_token.push(t);
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { id_to_token, token_to_id, max_size })
    }

    /// Keeps the `max_size - 4` most frequent tokens of one side of the
    /// corpus; equal counts are ordered lexicographically.
    pub fn build(corpus: &[CodeSummaryPair], side: Side, max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for pair in corpus {
            let toks = match side {
                Side::Code => &pair.code_tokens,
                Side::Summary => &pair.summary_tokens,
            };
            for t in toks {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(
            ranked.into_iter().filter(|(t, _)| !SPECIAL_TOKENS.contains(t)).map(|(t, _)| t.to_string()),
            max_size,
        )
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token.get(id).map(String::as_str).unwrap_or(SPECIAL_TOKENS[UNK])
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Non-special tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS..]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in self.tokens() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let max_size = tokens.len() + NUM_SPECIALS;
        Self::from_tokens(tokens, max_size)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Maps tokens to a fixed-length id sequence plus a non-PAD mask.
    ///
    /// With `add_bos_eos` the sequence is wrapped in BOS/EOS; on truncation
    /// EOS keeps the final slot.
    pub fn encode(&self, tokens: &[String], max_len: usize, add_bos_eos: bool) -> Encoded {
        let mut ids = Vec::with_capacity(max_len);
        if add_bos_eos {
            assert!(max_len >= 2, "max_len must leave room for BOS and EOS");
            ids.push(BOS);
            ids.extend(tokens.iter().take(max_len - 2).map(|t| self.id(t)));
            ids.push(EOS);
        } else {
            ids.extend(tokens.iter().take(max_len).map(|t| self.id(t)));
        }
        let mask: Vec<bool> = (0..max_len).map(|i| i < ids.len()).collect();
        ids.resize(max_len, PAD);
        Encoded { ids, mask }
    }

    /// Inverse of [`encode`](Self::encode): drops PAD/BOS and stops at EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .copied()
            .take_while(|&i| i != EOS)
            .filter(|&i| i != PAD && i != BOS)
            .map(|i| self.token(i).to_string())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

/// A pair ready for the model: code without BOS/EOS, summary wrapped in them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub code_ids: Vec<usize>,
    pub code_mask: Vec<bool>,
    pub summary_ids: Vec<usize>,
    pub summary_mask: Vec<bool>,
}

impl EncodedPair {
    pub fn new(
        pair: &CodeSummaryPair,
        code_vocab: &Vocabulary,
        summary_vocab: &Vocabulary,
        max_code_len: usize,
        max_sum_len: usize,
    ) -> Self {
        let code = code_vocab.encode(&pair.code_tokens, max_code_len, false);
        let summary = summary_vocab.encode(&pair.summary_tokens, max_sum_len, true);
        EncodedPair { code_ids: code.ids, code_mask: code.mask, summary_ids: summary.ids, summary_mask: summary.mask }
    }
}

/// Both vocabularies plus the fixed sequence lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub code_vocab: Vocabulary,
    pub summary_vocab: Vocabulary,
    pub max_code_len: usize,
    pub max_sum_len: usize,
}

impl Codec {
    pub fn encode_pair(&self, pair: &CodeSummaryPair) -> EncodedPair {
        EncodedPair::new(pair, &self.code_vocab, &self.summary_vocab, self.max_code_len, self.max_sum_len)
    }

    pub fn encode_pairs(&self, pairs: &[CodeSummaryPair]) -> Vec<EncodedPair> {
        pairs.iter().map(|p| self.encode_pair(p)).collect()
    }

    pub fn encode_code(&self, tokens: &[String]) -> Encoded {
        self.code_vocab.encode(tokens, self.max_code_len, false)
    }

    pub fn decode_summary(&self, ids: &[usize]) -> Vec<String> {
        self.summary_vocab.decode(ids)
    }
}
