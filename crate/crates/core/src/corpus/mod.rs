//! Entity catalogs, annotated mentions, and their JSON-lines / TSV file formats.
//!
//! Entities from several knowledge bases are merged into one [`UnifiedCatalog`]
//! in which every entity has a dense 0-based ordinal. Ordinals follow the
//! order the KBs are given in, so the general-domain KB is listed first.

mod synth;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{generate_synthetic_world, SyntheticWorld, SyntheticWorldConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub kb_id: String,
    pub entity_id: String,
    pub title: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub mention_id: String,
    pub context_left: String,
    pub surface: String,
    pub context_right: String,
    pub gold_kb_id: String,
    pub gold_entity_id: String,
}

/// On-disk entity line. The KB id is not stored per line; it comes from the caller.
#[derive(Serialize, Deserialize)]
struct EntityLine {
    entity_id: String,
    title: String,
    description: String,
}

#[derive(Serialize, Deserialize)]
struct MentionLine {
    mention_id: String,
    context_left: String,
    #[serde(rename = "mention")]
    surface: String,
    context_right: String,
    gold_kb_id: String,
    gold_entity_id: String,
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)> + '_> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, line)| (i + 1, line.map_err(|e| Error::io(path, e))))
        .filter(|(_, line)| !matches!(line, Ok(s) if s.trim().is_empty())))
}

fn parse_line<T: for<'de> Deserialize<'de>>(path: &Path, line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })
}

/// Reads a JSONL entity file. Blank lines are skipped.
pub fn load_entities(path: impl AsRef<Path>, kb_id: &str) -> Result<Vec<EntityRecord>> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let parsed: EntityLine = parse_line(path, line_no, &line?)?;
        if parsed.entity_id.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "empty entity_id".into(),
            });
        }
        if !seen.insert(parsed.entity_id.clone()) {
            return Err(Error::DuplicateEntity(parsed.entity_id));
        }
        out.push(EntityRecord {
            kb_id: kb_id.to_string(),
            entity_id: parsed.entity_id,
            title: parsed.title,
            description: parsed.description,
        });
    }
    Ok(out)
}

pub fn load_mentions(path: impl AsRef<Path>) -> Result<Vec<MentionRecord>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let parsed: MentionLine = parse_line(path, line_no, &line?)?;
        if parsed.surface.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "empty mention surface".into(),
            });
        }
        out.push(MentionRecord {
            mention_id: parsed.mention_id,
            context_left: parsed.context_left,
            surface: parsed.surface,
            context_right: parsed.context_right,
            gold_kb_id: parsed.gold_kb_id,
            gold_entity_id: parsed.gold_entity_id,
        });
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(&row).expect("plain structs always serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_entities(path: impl AsRef<Path>, entities: &[EntityRecord]) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        entities.iter().map(|e| EntityLine {
            entity_id: e.entity_id.clone(),
            title: e.title.clone(),
            description: e.description.clone(),
        }),
    )
}

pub fn write_mentions(path: impl AsRef<Path>, mentions: &[MentionRecord]) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        mentions.iter().map(|m| MentionLine {
            mention_id: m.mention_id.clone(),
            context_left: m.context_left.clone(),
            surface: m.surface.clone(),
            context_right: m.context_right.clone(),
            gold_kb_id: m.gold_kb_id.clone(),
            gold_entity_id: m.gold_entity_id.clone(),
        }),
    )
}

/// All entities of all KBs behind one dense ordinal space.
#[derive(Debug, Clone)]
pub struct UnifiedCatalog {
    entities: Vec<EntityRecord>,
    ordinal_of: HashMap<(String, String), usize>,
}

pub fn build_catalog(kbs: Vec<(String, Vec<EntityRecord>)>) -> Result<UnifiedCatalog> {
    let mut entities = Vec::new();
    let mut ordinal_of = HashMap::new();
    for (kb_id, list) in kbs {
        for mut e in list {
            e.kb_id = kb_id.clone();
            let key = (kb_id.clone(), e.entity_id.clone());
            if ordinal_of.contains_key(&key) {
                return Err(Error::DuplicateCatalogKey {
                    kb_id: key.0,
                    entity_id: key.1,
                });
            }
            ordinal_of.insert(key, entities.len());
            entities.push(e);
        }
    }
    Ok(UnifiedCatalog {
        entities,
        ordinal_of,
    })
}

impl UnifiedCatalog {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[EntityRecord] {
        &self.entities
    }

    pub fn get(&self, ordinal: usize) -> Result<&EntityRecord> {
        self.entities.get(ordinal).ok_or(Error::UnknownOrdinal(ordinal))
    }

    pub fn ordinal_of(&self, kb_id: &str, entity_id: &str) -> Option<usize> {
        self.ordinal_of
            .get(&(kb_id.to_string(), entity_id.to_string()))
            .copied()
    }

    /// Ordinals of one KB, ascending.
    pub fn ordinals_in_kb<'a>(&'a self, kb_id: &'a str) -> impl Iterator<Item = usize> + 'a {
        self.entities
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.kb_id == kb_id)
            .map(|(i, _)| i)
    }

    pub fn gold_ordinal(&self, m: &MentionRecord) -> Result<usize> {
        self.ordinal_of(&m.gold_kb_id, &m.gold_entity_id)
            .ok_or_else(|| Error::UnresolvedGold {
                mention_id: m.mention_id.clone(),
                kb_id: m.gold_kb_id.clone(),
                entity_id: m.gold_entity_id.clone(),
            })
    }

    pub fn resolve_all(&self, mentions: &[MentionRecord]) -> Result<Vec<usize>> {
        mentions.iter().map(|m| self.gold_ordinal(m)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<MentionRecord>,
    pub valid: Vec<MentionRecord>,
    pub test: Vec<MentionRecord>,
}

impl DatasetSplit {
    /// Builds a split, rejecting any mention_id that appears in more than one list.
    pub fn new(
        train: Vec<MentionRecord>,
        valid: Vec<MentionRecord>,
        test: Vec<MentionRecord>,
    ) -> Result<Self> {
        let mut owner: HashMap<&str, usize> = HashMap::new();
        for (which, list) in [&train, &valid, &test].into_iter().enumerate() {
            for m in list {
                if let Some(prev) = owner.insert(&m.mention_id, which) {
                    if prev != which {
                        return Err(Error::OverlappingSplits(m.mention_id.clone()));
                    }
                }
            }
        }
        Ok(Self { train, valid, test })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapPair {
    pub general_ordinal: usize,
    pub specific_ordinal: usize,
    pub similarity: Option<f64>,
}

impl OverlapPair {
    pub fn new(general_ordinal: usize, specific_ordinal: usize) -> Self {
        Self {
            general_ordinal,
            specific_ordinal,
            similarity: None,
        }
    }
}

/// Writes overlap ground truth as `general_kb<TAB>general_id<TAB>specific_kb<TAB>specific_id`, no header.
pub fn write_overlap_truth(
    path: impl AsRef<Path>,
    pairs: &[OverlapPair],
    catalog: &UnifiedCatalog,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in pairs {
        let g = catalog.get(p.general_ordinal)?;
        let s = catalog.get(p.specific_ordinal)?;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            g.kb_id, g.entity_id, s.kb_id, s.entity_id
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_overlap_truth(
    path: impl AsRef<Path>,
    catalog: &UnifiedCatalog,
) -> Result<Vec<OverlapPair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(format!("expected 4 tab-separated columns, got {}", cols.len())));
        }
        let g = catalog
            .ordinal_of(cols[0], cols[1])
            .ok_or_else(|| bad(format!("unknown entity ({}, {})", cols[0], cols[1])))?;
        let s = catalog
            .ordinal_of(cols[2], cols[3])
            .ok_or_else(|| bad(format!("unknown entity ({}, {})", cols[2], cols[3])))?;
        if cols[0] == cols[2] {
            return Err(bad("overlap pair must span two distinct KBs".into()));
        }
        pairs.push(OverlapPair::new(g, s));
    }
    Ok(pairs)
}
