//! Command-line front end: `synth`, `vocab`, `train`, `index`, `link`, `eval`,
//! `intrinsic`, `overlap` and `sigtest`.
//!
//! Every config key is also a flag (`learning_rate` → `--learning-rate`).
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::{Deserialize, Serialize};

use crate::biencoder::{train_variant, BiEncoderModel, Checkpoint, TrainHistory};
use crate::config::{RunConfig, KEYS};
use crate::corpus::{
    build_catalog, generate_synthetic_world, load_entities, load_mentions, load_overlap_truth, write_entities,
    write_mentions, write_overlap_truth, DatasetSplit, MentionRecord, OverlapPair, UnifiedCatalog,
};
use crate::crossencoder::{train_cross_encoder, CrossEncoderModel, CrossTrainConfig};
use crate::encoder::init_params;
use crate::error::{Error, ErrorKind};
use crate::eval::{evaluate_linking, intrinsic_eval, link_mention, EvalReport, EvalStage, IntrinsicReport};
use crate::index::{build_index, EntityIndex, Ranking};
use crate::overlap::{fuzzy_title_match, read_kept_pairs, sample_pairs, semantic_filter, write_kept_pairs, SimilarityStats};
use crate::stats::{randomization_test, SigTestResult};
use crate::tokenizer::{build_vocab, corpus_texts, Vocab};

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("synth", "generate a synthetic two-domain world"),
    ("vocab", "build the vocabulary from entities and train mentions"),
    ("train", "fine-tune the bi-encoder for one variant"),
    ("index", "encode every catalog entity into an index"),
    ("link", "rank candidate entities for a marked mention or a mentions file"),
    ("eval", "score linking on a specific-domain split"),
    ("intrinsic", "MRR and average cosine over overlap pairs"),
    ("overlap", "extract overlapping entities by title and embedding similarity"),
    ("sigtest", "paired randomization test between two eval reports"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedCandidate {
    pub rank: usize,
    pub kb_id: String,
    pub entity_id: String,
    pub title: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedMention {
    pub mention_id: String,
    pub surface: String,
    pub candidates: Vec<LinkedCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub candidates: usize,
    pub kept: usize,
    pub threshold: f64,
    pub similarity: SimilarityStats,
}

/// JSON written by every reporting command; the effective config is echoed in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix_secs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsic: Option<IntrinsicReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigtest: Option<SigTestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<OverlapSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<TrainHistory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub links: Option<Vec<LinkedMention>>,
}

impl ReportDocument {
    fn new(command: &str, cfg: &RunConfig) -> anyhow::Result<Self> {
        let created_unix_secs = if cfg.timestamps()? {
            Some(SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
        } else {
            None
        };
        Ok(Self {
            command: command.to_string(),
            seed: cfg.seed()?,
            config: cfg.echo(),
            created_unix_secs,
            eval: None,
            intrinsic: None,
            sigtest: None,
            overlap: None,
            history: None,
            links: None,
        })
    }

    fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn command() -> Command {
    let mut root = Command::new("xdlink")
        .about("Cross-domain entity linking with overlap-aware bi-encoder training")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(*name).about(*about).args_override_self(true).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value config file; flags override it"),
        );
        for (key, default, help) in KEYS {
            let help = if default.is_empty() {
                help.to_string()
            } else {
                format!("{help} [default: {default}]")
            };
            sub = sub.arg(
                Arg::new(*key)
                    .long(flag_name(key))
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .allow_negative_numbers(true)
                    .help(help),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

fn resolve_config(m: &ArgMatches) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        cfg.apply_file(path)?;
    }
    for (key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Config) => 1,
        Some(ErrorKind::Numeric) => 3,
        Some(ErrorKind::Data) | None => 2,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let result = resolve_config(sub).and_then(|cfg| dispatch(name, &cfg));
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}

fn dispatch(name: &str, cfg: &RunConfig) -> anyhow::Result<()> {
    match name {
        "synth" => cmd_synth(cfg),
        "vocab" => cmd_vocab(cfg),
        "train" => cmd_train(cfg),
        "index" => cmd_index(cfg),
        "link" => cmd_link(cfg),
        "eval" => cmd_eval(cfg),
        "intrinsic" => cmd_intrinsic(cfg),
        "overlap" => cmd_overlap(cfg),
        "sigtest" => cmd_sigtest(cfg),
        other => Err(anyhow!(Error::Config(format!("unknown command {other}")))),
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn load_catalog(cfg: &RunConfig) -> anyhow::Result<UnifiedCatalog> {
    let general_kb = cfg.get("general_kb_id");
    let specific_kb = cfg.get("specific_kb_id");
    let general = load_entities(cfg.input_path("general_entities"), general_kb)?;
    let specific = load_entities(cfg.input_path("specific_entities"), specific_kb)?;
    Ok(build_catalog(vec![
        (general_kb.to_string(), general),
        (specific_kb.to_string(), specific),
    ])?)
}

fn load_split(cfg: &RunConfig, domain: &str) -> anyhow::Result<DatasetSplit> {
    let part = |name: &str| load_mentions(cfg.input_path(&format!("{domain}_{name}")));
    Ok(DatasetSplit::new(part("train")?, part("valid")?, part("test")?)?)
}

fn load_vocab(cfg: &RunConfig) -> anyhow::Result<Vocab> {
    Ok(Vocab::load(cfg.vocab_path())?)
}

fn load_checkpoint(cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let path = cfg.checkpoint_path()?;
    Ok(Checkpoint::load(&path)?)
}

/// Reads overlap pairs in either the ground-truth layout (kb, id, kb, id) or the
/// filtered layout (ordinal, ordinal, similarity).
fn load_pairs(path: &Path, catalog: &UnifiedCatalog) -> anyhow::Result<Vec<OverlapPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let columns = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .map(|l| l.split('\t').count());
    let pairs = match columns {
        Some(3) => {
            let pairs = read_kept_pairs(path)?;
            for p in &pairs {
                catalog.get(p.general_ordinal)?;
                catalog.get(p.specific_ordinal)?;
            }
            pairs
        }
        _ => load_overlap_truth(path, catalog)?,
    };
    Ok(pairs)
}

fn index_for(cfg: &RunConfig, model: &BiEncoderModel, catalog: &UnifiedCatalog, vocab: &Vocab) -> anyhow::Result<EntityIndex> {
    if cfg.get("index_file").is_empty() {
        let max_len = cfg.train_config()?.candidate_max_len;
        Ok(build_index(model, catalog, vocab, max_len)?)
    } else {
        Ok(EntityIndex::load(cfg.index_path()?)?)
    }
}

fn cmd_synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let world = generate_synthetic_world(&cfg.synth_config()?)?;
    let dir = cfg.data_dir();
    ensure_dir(&dir)?;
    let catalog = world.catalog();
    write_entities(dir.join("general_entities.jsonl"), &world.general_entities)?;
    write_entities(dir.join("specific_entities.jsonl"), &world.specific_entities)?;
    for (domain, split) in [("specific", &world.specific_split), ("general", &world.general_split)] {
        for (name, list) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
            write_mentions(dir.join(format!("{domain}_{name}.jsonl")), list)?;
        }
    }
    write_overlap_truth(dir.join("overlap.tsv"), &world.overlaps, &catalog)?;
    write_overlap_truth(dir.join("homonyms.tsv"), &world.homonyms, &catalog)?;
    println!(
        "wrote {} general and {} specific entities, {} overlap pairs to {}",
        world.general_entities.len(),
        world.specific_entities.len(),
        world.overlaps.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_vocab(cfg: &RunConfig) -> anyhow::Result<()> {
    let catalog = load_catalog(cfg)?;
    let mut mentions = load_mentions(cfg.input_path("specific_train"))?;
    let general_train = cfg.input_path("general_train");
    if general_train.exists() {
        mentions.extend(load_mentions(&general_train)?);
    }
    let vocab = build_vocab(&corpus_texts(catalog.entities(), &mentions), cfg.vocab_size()?)?;
    let path = cfg.vocab_path();
    ensure_parent(&path)?;
    vocab.save(&path)?;
    println!("vocabulary of {} tokens written to {}", vocab.len(), path.display());
    Ok(())
}

fn required_input(path: PathBuf, what: &str) -> anyhow::Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(anyhow!(Error::Config(format!("{what} requires {}, which does not exist", path.display()))))
    }
}

fn cmd_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let variant = cfg.variant_config()?;
    let tcfg = cfg.train_config()?;
    let catalog = load_catalog(cfg)?;
    let vocab = load_vocab(cfg)?;
    let specific = load_split(cfg, "specific")?;
    let general = if variant.augmentation {
        let path = required_input(cfg.input_path("general_train"), &format!("variant {}", variant.name))?;
        Some(DatasetSplit::new(load_mentions(path)?, Vec::new(), Vec::new())?)
    } else {
        None
    };
    let pairs = if variant.overlap_stage {
        let path = required_input(cfg.input_path("overlap_file"), &format!("variant {}", variant.name))?;
        Some(load_pairs(&path, &catalog)?)
    } else {
        None
    };
    let init = BiEncoderModel::new(vocab.len(), cfg.dim()?, cfg.seed()?)?;
    let (model, history) = train_variant(
        &init,
        &specific,
        general.as_ref(),
        pairs.as_deref(),
        &variant,
        &tcfg,
        &catalog,
        &vocab,
    )
    .context("training")?;

    let cross = if cfg.train_cross()? {
        let link = cfg.link_options()?;
        let ccfg = CrossTrainConfig {
            epochs: cfg.cross_epochs()?,
            learning_rate: cfg.cross_learning_rate()?,
            top_k: link.k,
            context_max_len: link.context_max_len,
            max_len: link.cross_max_len,
            seed: tcfg.seed,
        };
        let index = build_index(&model, &catalog, &vocab, tcfg.candidate_max_len)?;
        let fresh = CrossEncoderModel::new(vocab.len(), cfg.dim()?, tcfg.seed)?;
        let (cross, _) = train_cross_encoder(&fresh, &model, &index, &specific.train, &catalog, &vocab, &ccfg)
            .context("cross-encoder training")?;
        Some(cross)
    } else {
        None
    };

    let checkpoint = Checkpoint {
        variant: variant.clone(),
        train: tcfg,
        context: model.context,
        candidate: model.candidate,
        cross,
    };
    let path = cfg.checkpoint_path()?;
    ensure_parent(&path)?;
    checkpoint.save(&path)?;

    let mut doc = ReportDocument::new("train", cfg)?;
    println!("{}", serde_json::to_string(&history).expect("history serializes"));
    doc.history = Some(history);
    let report = cfg.report_path(&format!("history_{}.json", variant.name));
    ensure_parent(&report)?;
    doc.write(&report)?;
    eprintln!("checkpoint written to {}", path.display());
    Ok(())
}

fn cmd_index(cfg: &RunConfig) -> anyhow::Result<()> {
    let checkpoint = load_checkpoint(cfg)?;
    let catalog = load_catalog(cfg)?;
    let vocab = load_vocab(cfg)?;
    let index = build_index(&checkpoint.model()?, &catalog, &vocab, checkpoint.train.candidate_max_len)?;
    let path = cfg.index_path()?;
    ensure_parent(&path)?;
    index.save(&path)?;
    println!("indexed {} entities into {}", index.n, path.display());
    Ok(())
}

/// Splits `left [[surface]] right` into a mention without a gold label.
pub fn parse_marked_mention(text: &str) -> crate::Result<MentionRecord> {
    let bad = || Error::Config(format!("mention text must mark exactly one span as [[span]]: {text:?}"));
    let (left, rest) = text.split_once("[[").ok_or_else(bad)?;
    let (surface, right) = rest.split_once("]]").ok_or_else(bad)?;
    if surface.trim().is_empty() || right.contains("[[") || surface.contains("[[") {
        return Err(bad());
    }
    Ok(MentionRecord {
        mention_id: "text".into(),
        context_left: left.trim().to_string(),
        surface: surface.trim().to_string(),
        context_right: right.trim().to_string(),
        gold_kb_id: String::new(),
        gold_entity_id: String::new(),
    })
}

fn describe(ranking: &Ranking, catalog: &UnifiedCatalog) -> crate::Result<Vec<LinkedCandidate>> {
    ranking
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let ent = catalog.get(e.ordinal)?;
            Ok(LinkedCandidate {
                rank: i + 1,
                kb_id: ent.kb_id.clone(),
                entity_id: ent.entity_id.clone(),
                title: ent.title.clone(),
                score: e.score,
            })
        })
        .collect()
}

fn cmd_link(cfg: &RunConfig) -> anyhow::Result<()> {
    let mentions = match (cfg.get("text"), cfg.get("mentions_file")) {
        ("", "") => {
            return Err(anyhow!(Error::Config("link needs --text or --mentions-file".into())));
        }
        (text, "") => vec![parse_marked_mention(text)?],
        ("", path) => load_mentions(path)?,
        _ => {
            return Err(anyhow!(Error::Config("pass either --text or --mentions-file, not both".into())));
        }
    };
    let checkpoint = load_checkpoint(cfg)?;
    let model = checkpoint.model()?;
    let catalog = load_catalog(cfg)?;
    let vocab = load_vocab(cfg)?;
    let index = index_for(cfg, &model, &catalog, &vocab)?;
    let opts = cfg.link_options()?;
    let mut linked = Vec::with_capacity(mentions.len());
    for m in &mentions {
        let ranking = link_mention(&model, &index, m, &catalog, &vocab, &opts, checkpoint.cross.as_ref())?;
        linked.push(LinkedMention {
            mention_id: m.mention_id.clone(),
            surface: m.surface.clone(),
            candidates: describe(&ranking, &catalog)?,
        });
    }
    if cfg.get("mentions_file").is_empty() {
        for c in &linked[0].candidates {
            println!("{}\t{:.6}\t{}\t{}\t{}", c.rank, c.score, c.kb_id, c.entity_id, c.title);
        }
    }
    if !cfg.get("mentions_file").is_empty() || !cfg.get("report").is_empty() {
        let mut doc = ReportDocument::new("link", cfg)?;
        doc.links = Some(linked);
        let path = cfg.report_path(&format!("links_{}.json", cfg.variant()?));
        ensure_parent(&path)?;
        doc.write(&path)?;
        println!("links written to {}", path.display());
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let split = cfg.get("eval_split");
    if !matches!(split, "train" | "valid" | "test") {
        return Err(anyhow!(Error::Config(format!("eval_split must be train, valid or test, got {split:?}"))));
    }
    let opts = cfg.link_options()?;
    let checkpoint = load_checkpoint(cfg)?;
    if opts.stage == EvalStage::CrossEncoder && checkpoint.cross.is_none() {
        return Err(anyhow!(Error::Config(
            "cross-encoder stage needs a checkpoint trained with train_cross = true".into()
        )));
    }
    let model = checkpoint.model()?;
    let catalog = load_catalog(cfg)?;
    let vocab = load_vocab(cfg)?;
    let mentions = load_mentions(cfg.input_path(&format!("specific_{split}")))?;
    let index = index_for(cfg, &model, &catalog, &vocab)?;
    let report = evaluate_linking(&model, &index, &mentions, &catalog, &vocab, &opts, checkpoint.cross.as_ref())?;
    println!(
        "{} {split}: AP@1 {:.4}  MAP@{} {:.4}  ({} mentions)",
        checkpoint.variant.name,
        report.ap_at_1,
        report.k,
        report.map_at_10,
        mentions.len()
    );
    let mut doc = ReportDocument::new("eval", cfg)?;
    doc.eval = Some(report);
    let path = cfg.report_path(&format!("eval_{}_{split}.json", cfg.variant()?));
    ensure_parent(&path)?;
    doc.write(&path)?;
    Ok(())
}

fn cmd_intrinsic(cfg: &RunConfig) -> anyhow::Result<()> {
    let checkpoint = load_checkpoint(cfg)?;
    let catalog = load_catalog(cfg)?;
    let vocab = load_vocab(cfg)?;
    let pairs = load_pairs(&cfg.input_path("overlap_file"), &catalog)?;
    let sample = sample_pairs(&pairs, cfg.sample_size()?, cfg.seed()?)?;
    let report = intrinsic_eval(
        &checkpoint.candidate,
        &sample,
        &catalog,
        &vocab,
        checkpoint.train.candidate_max_len,
    )?;
    println!("MRR {:.4}  ACS {:.4}  ({} pairs)", report.mrr, report.acs, report.pair_count);
    let mut doc = ReportDocument::new("intrinsic", cfg)?;
    doc.intrinsic = Some(report);
    let path = cfg.report_path(&format!("intrinsic_{}.json", cfg.variant()?));
    ensure_parent(&path)?;
    doc.write(&path)?;
    Ok(())
}

fn cmd_overlap(cfg: &RunConfig) -> anyhow::Result<()> {
    let catalog = load_catalog(cfg)?;
    let vocab = load_vocab(cfg)?;
    let max_len = cfg.train_config()?.candidate_max_len;
    let encoder = if cfg.get("checkpoint").is_empty() {
        init_params(vocab.len(), cfg.dim()?, cfg.seed()?)?
    } else {
        load_checkpoint(cfg)?.candidate
    };
    let candidates = fuzzy_title_match(&catalog, cfg.get("general_kb_id"), cfg.get("specific_kb_id"));
    let threshold = cfg.threshold()?;
    let (kept, stats) = semantic_filter(&candidates, &encoder, &catalog, &vocab, max_len, threshold)?;
    let kept_path = cfg.kept_path();
    ensure_parent(&kept_path)?;
    write_kept_pairs(&kept_path, &kept)?;
    println!(
        "{} title matches, {} kept at threshold {threshold}; pairs written to {}",
        candidates.len(),
        kept.len(),
        kept_path.display()
    );
    let mut doc = ReportDocument::new("overlap", cfg)?;
    doc.overlap = Some(OverlapSummary {
        candidates: candidates.len(),
        kept: kept.len(),
        threshold,
        similarity: stats,
    });
    let path = cfg.report_path("overlap_stats.json");
    doc.write(&path)?;
    Ok(())
}

/// Pulls a per-mention array out of an eval report, a bare EvalReport, or a JSON array.
fn read_metric(path: &Path, metric: &str) -> anyhow::Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    let field = match metric {
        "rel1" => "per_mention_rel1",
        _ => "per_mention_ap10",
    };
    let array = if value.is_array() {
        &value
    } else {
        value
            .get("eval")
            .unwrap_or(&value)
            .get(field)
            .ok_or_else(|| parse_err(format!("no {field} array")))?
    };
    let values: Vec<f64> = serde_json::from_value(array.clone()).map_err(|e| parse_err(e.to_string()))?;
    Ok(values)
}

fn cmd_sigtest(cfg: &RunConfig) -> anyhow::Result<()> {
    let metric = cfg.sigtest_metric()?;
    let path = |key: &str| -> anyhow::Result<PathBuf> {
        match cfg.get(key) {
            "" => Err(anyhow!(Error::Config(format!("sigtest needs --{}", flag_name(key))))),
            p => Ok(PathBuf::from(p)),
        }
    };
    let a = read_metric(&path("report_a")?, metric)?;
    let b = read_metric(&path("report_b")?, metric)?;
    let result = randomization_test(&a, &b, cfg.rounds()?, cfg.alpha()?, cfg.seed()?)?;
    println!(
        "mean difference {:+.4}  p = {:.6}  {}",
        result.observed_diff,
        result.p_value,
        if result.significant { "significant" } else { "not significant" }
    );
    let mut doc = ReportDocument::new("sigtest", cfg)?;
    doc.sigtest = Some(result);
    let out = cfg.report_path("sigtest.json");
    ensure_parent(&out)?;
    doc.write(&out)?;
    Ok(())
}
