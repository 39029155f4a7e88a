//! Word-level tokenizer with reserved special tokens and fixed-length input layouts.
//!
//! Layouts:
//!
//! ```text
//! context    [CLS] left.. [MSTART] surface.. [MEND] right.. [SEP]
//! candidate  [CLS] title.. [ENT] description.. [SEP]
//! cross      [CLS] left.. [MSTART] surface.. [MEND] right.. [SEP] title.. [ENT] description.. [SEP]
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityRecord, MentionRecord};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MSTART: u32 = 4;
pub const MEND: u32 = 5;
pub const ENT: u32 = 6;

pub const RESERVED: [&str; 7] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MSTART]", "[MEND]", "[ENT]"];

pub const DEFAULT_MAX_LEN: usize = 128;

/// Lowercased runs of alphanumerics; every other non-space character is a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabLine {
    token: String,
    id: u32,
}

impl Vocab {
    fn reserved_only() -> Self {
        let id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn ids(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        for (id, token) in self.id_to_token.iter().enumerate() {
            let line = serde_json::to_string(&VocabLine {
                token: token.clone(),
                id: id as u32,
            })
            .expect("serializable");
            writeln!(buf, "{line}").expect("write to Vec");
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut id_to_token = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let row: VocabLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if row.id as usize != id_to_token.len() {
                return Err(bad(format!("expected id {}, found {}", id_to_token.len(), row.id)));
            }
            if let Some(&want) = RESERVED.get(row.id as usize) {
                if row.token != want {
                    return Err(bad(format!("reserved id {} must be {want}", row.id)));
                }
            }
            id_to_token.push(row.token);
        }
        if id_to_token.len() < RESERVED.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: id_to_token.len() + 1,
                message: "vocabulary is missing reserved tokens".into(),
            });
        }
        let token_to_id: HashMap<String, u32> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if token_to_id.len() != id_to_token.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "duplicate token in vocabulary".into(),
            });
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }
}

/// Keeps the `max_size - 7` most frequent tokens, ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], max_size: usize) -> Result<Vocab> {
    if max_size < RESERVED.len() {
        return Err(Error::Config(format!(
            "vocabulary size {max_size} is smaller than the {} reserved tokens",
            RESERVED.len()
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for t in texts {
        for tok in tokenize(t.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());

    let mut vocab = Vocab::reserved_only();
    for (tok, _) in ranked {
        vocab.token_to_id.insert(tok.clone(), vocab.id_to_token.len() as u32);
        vocab.id_to_token.push(tok);
    }
    Ok(vocab)
}

/// Texts a vocabulary is normally built from: entity titles/descriptions and mention fields.
pub fn corpus_texts<'a>(
    entities: impl IntoIterator<Item = &'a EntityRecord>,
    mentions: impl IntoIterator<Item = &'a MentionRecord>,
) -> Vec<&'a str> {
    let mut out = Vec::new();
    for e in entities {
        out.push(e.title.as_str());
        out.push(e.description.as_str());
    }
    for m in mentions {
        out.push(m.context_left.as_str());
        out.push(m.surface.as_str());
        out.push(m.context_right.as_str());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub max_len: usize,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn check_len(max_len: usize, min: usize, what: &str) -> Result<()> {
    if max_len < min {
        return Err(Error::Config(format!(
            "{what} max_len must be at least {min}, got {max_len}"
        )));
    }
    Ok(())
}

/// Context layout with every token, trailing SEP included, fitted into `budget` (≥ 4).
fn context_ids(m: &MentionRecord, vocab: &Vocab, budget: usize) -> Vec<u32> {
    let left = vocab.ids(&m.context_left);
    let surface = vocab.ids(&m.surface);
    let right = vocab.ids(&m.context_right);

    let room = budget.saturating_sub(4);
    let surface_keep = surface.len().min(room);
    let room = room - surface_keep;

    let (mut lk, mut rk) = (left.len(), right.len());
    if lk + rk > room {
        // Split the room evenly, odd token to the left, then hand any unused share across.
        let left_share = room.div_ceil(2);
        let right_share = room / 2;
        lk = lk.min(left_share);
        rk = rk.min(right_share);
        let spare = room - lk - rk;
        if left.len() > lk {
            lk += spare.min(left.len() - lk);
        } else {
            rk += spare.min(right.len() - rk);
        }
    }

    let mut ids = Vec::with_capacity(4 + lk + surface_keep + rk);
    ids.push(CLS);
    ids.extend_from_slice(&left[left.len() - lk..]);
    ids.push(MSTART);
    ids.extend_from_slice(&surface[..surface_keep]);
    ids.push(MEND);
    ids.extend_from_slice(&right[..rk]);
    ids.push(SEP);
    ids
}

/// Candidate layout fitted into `budget` (≥ 3 + leading CLS).
fn candidate_ids(e: &EntityRecord, vocab: &Vocab, budget: usize) -> Vec<u32> {
    let title = vocab.ids(&e.title);
    let desc = vocab.ids(&e.description);
    let room = budget.saturating_sub(3);
    let dk = desc.len().min(room.saturating_sub(title.len()));
    let tk = title.len().min(room - dk);

    let mut ids = Vec::with_capacity(3 + tk + dk);
    ids.push(CLS);
    ids.extend_from_slice(&title[..tk]);
    ids.push(ENT);
    ids.extend_from_slice(&desc[..dk]);
    ids.push(SEP);
    ids
}

pub fn encode_context(m: &MentionRecord, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    check_len(max_len, 8, "context")?;
    Ok(TokenSeq {
        ids: context_ids(m, vocab, max_len),
        max_len,
    })
}

pub fn encode_candidate(e: &EntityRecord, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    check_len(max_len, 4, "candidate")?;
    Ok(TokenSeq {
        ids: candidate_ids(e, vocab, max_len),
        max_len,
    })
}

/// Mention side gets `ceil(max_len / 2)`; the entity side gets whatever the mention side left.
pub fn encode_cross(
    m: &MentionRecord,
    e: &EntityRecord,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSeq> {
    check_len(max_len, 10, "cross")?;
    let mut ids = context_ids(m, vocab, max_len.div_ceil(2));
    let entity_budget = max_len - ids.len();
    ids.extend_from_slice(&candidate_ids(e, vocab, entity_budget + 1)[1..]);
    Ok(TokenSeq { ids, max_len })
}
