//! Seeded synthetic two-KB worlds.
//!
//! Every entity gets a unique one-word title, a description drawn from a shared
//! word pool, and a private set of "cue" words. Mentions use the title as the
//! surface and surround it with cue words of the gold entity mixed with noise,
//! so linking has to be learned: cue words never come from the description.
//!
//! A few specific-domain entities are planted twins of general-domain ones
//! (same title, mostly shared description) and a few more are homonyms (same
//! title, mostly unrelated description).

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_catalog, DatasetSplit, EntityRecord, MentionRecord, OverlapPair, UnifiedCatalog};
use crate::error::{Error, Result};

const DESCRIPTION_LEN: usize = 12;
const CUE_WORDS: usize = 6;
const CONTEXT_SIDE_LEN: usize = 5;
const CUE_RATE: f64 = 0.7;

const CONSONANTS: &[u8] = b"bdfghklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    pub seed: u64,
    pub n_general: usize,
    pub n_specific: usize,
    /// Planted same-title twins with near-duplicate descriptions.
    pub n_overlap: usize,
    /// Same-title pairs whose descriptions are mostly unrelated.
    pub n_homonyms: usize,
    /// Mentions per split, in train / valid / test order; used for both domains.
    pub n_mentions_per_split: [usize; 3],
    pub vocab_pool: usize,
    /// Fraction of description words a homonym shares with its namesake.
    pub distractor_similarity: f64,
    /// Fraction of description words a planted twin shares with its counterpart.
    pub pair_description_overlap: f64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_general: 200,
            n_specific: 100,
            n_overlap: 10,
            n_homonyms: 5,
            n_mentions_per_split: [500, 100, 200],
            vocab_pool: 2000,
            distractor_similarity: 0.1,
            pair_description_overlap: 0.75,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_general == 0 || self.n_specific == 0 {
            return bad("n_general and n_specific must be positive".into());
        }
        if self.n_mentions_per_split.contains(&0) {
            return bad("every split needs at least one mention".into());
        }
        if self.n_overlap > self.n_general.min(self.n_specific) {
            return bad(format!(
                "n_overlap {} exceeds min(n_general, n_specific) = {}",
                self.n_overlap,
                self.n_general.min(self.n_specific)
            ));
        }
        if self.n_overlap + self.n_homonyms > self.n_general.min(self.n_specific) {
            return bad("n_overlap + n_homonyms exceeds the smaller KB".into());
        }
        if self.vocab_pool < 2 * DESCRIPTION_LEN {
            return bad(format!("vocab_pool must be at least {}", 2 * DESCRIPTION_LEN));
        }
        for (name, v) in [
            ("distractor_similarity", self.distractor_similarity),
            ("pair_description_overlap", self.pair_description_overlap),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub general_kb_id: String,
    pub specific_kb_id: String,
    pub general_entities: Vec<EntityRecord>,
    pub specific_entities: Vec<EntityRecord>,
    pub specific_split: DatasetSplit,
    pub general_split: DatasetSplit,
    /// Planted twins, as catalog ordinals (general KB first).
    pub overlaps: Vec<OverlapPair>,
    pub homonyms: Vec<OverlapPair>,
}

impl SyntheticWorld {
    pub fn catalog(&self) -> UnifiedCatalog {
        build_catalog(vec![
            (self.general_kb_id.clone(), self.general_entities.clone()),
            (self.specific_kb_id.clone(), self.specific_entities.clone()),
        ])
        .expect("generated ids are unique")
    }
}

struct Blueprint {
    title: String,
    description: Vec<usize>,
    cues: Vec<usize>,
}

struct WordSource {
    seen: HashSet<String>,
}

impl WordSource {
    fn fresh(&mut self, rng: &mut ChaCha8Rng, syllables: usize) -> String {
        loop {
            let mut w = String::with_capacity(syllables * 2);
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
            }
            if self.seen.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

fn sample_words(rng: &mut ChaCha8Rng, pool: usize, n: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, pool, n).into_vec()
}

/// Replaces all but `keep_fraction` of the words with pool words not already present.
fn perturb(rng: &mut ChaCha8Rng, words: &[usize], pool: usize, keep_fraction: f64) -> Vec<usize> {
    let keep = (keep_fraction * words.len() as f64).round() as usize;
    let mut positions: Vec<usize> = (0..words.len()).collect();
    positions.shuffle(rng);
    let mut out = words.to_vec();
    let mut used: HashSet<usize> = words.iter().copied().collect();
    for &pos in &positions[keep..] {
        let w = loop {
            let w = rng.gen_range(0..pool);
            if used.insert(w) {
                break w;
            }
        };
        out[pos] = w;
    }
    out
}

fn make_mentions(
    rng: &mut ChaCha8Rng,
    blueprints: &[Blueprint],
    entities: &[EntityRecord],
    pool: &[String],
    prefix: &str,
    counts: [usize; 3],
) -> DatasetSplit {
    let mut lists: [Vec<MentionRecord>; 3] = Default::default();
    for (split, (&n, name)) in counts.iter().zip(["train", "valid", "test"]).enumerate() {
        for i in 0..n {
            let gold = rng.gen_range(0..entities.len());
            let bp = &blueprints[gold];
            let side = |rng: &mut ChaCha8Rng| -> String {
                (0..CONTEXT_SIDE_LEN)
                    .map(|_| {
                        if rng.gen_bool(CUE_RATE) {
                            pool[bp.cues[rng.gen_range(0..bp.cues.len())]].as_str()
                        } else {
                            pool[rng.gen_range(0..pool.len())].as_str()
                        }
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let left = side(rng);
            let right = side(rng);
            lists[split].push(MentionRecord {
                mention_id: format!("{prefix}-{name}-{i:05}"),
                context_left: left,
                surface: bp.title.clone(),
                context_right: right,
                gold_kb_id: entities[gold].kb_id.clone(),
                gold_entity_id: entities[gold].entity_id.clone(),
            });
        }
    }
    let [train, valid, test] = lists;
    DatasetSplit { train, valid, test }
}

fn materialize(kb_id: &str, id_prefix: &str, bps: &[Blueprint], pool: &[String]) -> Vec<EntityRecord> {
    bps.iter()
        .enumerate()
        .map(|(i, bp)| EntityRecord {
            kb_id: kb_id.to_string(),
            entity_id: format!("{id_prefix}{i:05}"),
            title: bp.title.clone(),
            description: bp
                .description
                .iter()
                .map(|&w| pool[w].as_str())
                .collect::<Vec<_>>()
                .join(" "),
        })
        .collect()
}

pub fn generate_synthetic_world(cfg: &SyntheticWorldConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut words = WordSource {
        seen: HashSet::new(),
    };
    let pool: Vec<String> = (0..cfg.vocab_pool)
        .map(|i| words.fresh(&mut rng, 2 + i % 2))
        .collect();

    let new_blueprint = |rng: &mut ChaCha8Rng, words: &mut WordSource| Blueprint {
        title: capitalize(&words.fresh(rng, 3)),
        description: sample_words(rng, cfg.vocab_pool, DESCRIPTION_LEN),
        cues: sample_words(rng, cfg.vocab_pool, CUE_WORDS),
    };

    let general: Vec<Blueprint> = (0..cfg.n_general)
        .map(|_| new_blueprint(&mut rng, &mut words))
        .collect();
    let mut specific: Vec<Blueprint> = (0..cfg.n_specific)
        .map(|_| new_blueprint(&mut rng, &mut words))
        .collect();

    let mut general_order: Vec<usize> = (0..cfg.n_general).collect();
    general_order.shuffle(&mut rng);
    let mut specific_order: Vec<usize> = (0..cfg.n_specific).collect();
    specific_order.shuffle(&mut rng);

    let n_linked = cfg.n_overlap + cfg.n_homonyms;
    let mut overlaps = Vec::with_capacity(cfg.n_overlap);
    let mut homonyms = Vec::with_capacity(cfg.n_homonyms);
    for k in 0..n_linked {
        let (g, s) = (general_order[k], specific_order[k]);
        let keep = if k < cfg.n_overlap {
            cfg.pair_description_overlap
        } else {
            cfg.distractor_similarity
        };
        specific[s].title = general[g].title.clone();
        specific[s].description = perturb(&mut rng, &general[g].description, cfg.vocab_pool, keep);
        let pair = OverlapPair::new(g, cfg.n_general + s);
        if k < cfg.n_overlap {
            overlaps.push(pair);
        } else {
            homonyms.push(pair);
        }
    }
    let by_ordinal = |a: &OverlapPair, b: &OverlapPair| {
        (a.general_ordinal, a.specific_ordinal).cmp(&(b.general_ordinal, b.specific_ordinal))
    };
    overlaps.sort_by(by_ordinal);
    homonyms.sort_by(by_ordinal);

    let general_kb_id = "general".to_string();
    let specific_kb_id = "specific".to_string();
    let general_entities = materialize(&general_kb_id, "g", &general, &pool);
    let specific_entities = materialize(&specific_kb_id, "s", &specific, &pool);

    let specific_split = make_mentions(
        &mut rng,
        &specific,
        &specific_entities,
        &pool,
        "specific",
        cfg.n_mentions_per_split,
    );
    let general_split = make_mentions(
        &mut rng,
        &general,
        &general_entities,
        &pool,
        "general",
        cfg.n_mentions_per_split,
    );

    Ok(SyntheticWorld {
        general_kb_id,
        specific_kb_id,
        general_entities,
        specific_entities,
        specific_split,
        general_split,
        overlaps,
        homonyms,
    })
}
