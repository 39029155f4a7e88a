//! Flat `key = value` run configuration.
//!
//! Every key has a default, may be set in a config file, and may be overridden
//! on the command line by a flag of the same name (underscores become dashes).
//! Path keys left empty resolve to conventional file names under `data_dir`
//! (inputs) or `out_dir` (artifacts).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::biencoder::{Normalizer, TrainConfig, Variant, VariantConfig, PAPER_LEARNING_RATE};
use crate::corpus::SyntheticWorldConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalStage, LinkOptions};

/// `(key, default, help)`
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data_dir", "", "directory holding corpus files (defaults to out_dir)"),
    ("out_dir", "out", "directory for artifacts and reports"),
    ("general_kb_id", "general", "KB id of the general-domain catalog"),
    ("specific_kb_id", "specific", "KB id of the domain-specific catalog"),
    ("general_entities", "", "general-domain entities JSONL"),
    ("specific_entities", "", "domain-specific entities JSONL"),
    ("specific_train", "", "domain-specific train mentions JSONL"),
    ("specific_valid", "", "domain-specific validation mentions JSONL"),
    ("specific_test", "", "domain-specific test mentions JSONL"),
    ("general_train", "", "general-domain train mentions JSONL"),
    ("general_valid", "", "general-domain validation mentions JSONL"),
    ("general_test", "", "general-domain test mentions JSONL"),
    ("overlap_file", "", "overlap ground-truth TSV"),
    ("kept_file", "", "overlap pairs kept by the semantic filter"),
    ("vocab_file", "", "vocabulary JSONL"),
    ("checkpoint", "", "model checkpoint JSON"),
    ("index_file", "", "entity index JSON"),
    ("report", "", "output report path"),
    ("report_a", "", "first eval report for sigtest"),
    ("report_b", "", "second eval report for sigtest"),
    ("metric", "ap10", "per-mention metric compared by sigtest: ap10 or rel1"),
    ("vocab_size", "5000", "maximum vocabulary size including reserved tokens"),
    ("dim", "64", "encoder dimension"),
    ("seed", "7", "seed for generation, initialization, shuffling and sampling"),
    ("batch_size", "16", "training batch size"),
    ("learning_rate", "40", "SGD learning rate"),
    ("overlap_learning_rate", "1", "SGD learning rate for the overlap stage; empty reuses learning_rate"),
    ("epochs", "5", "epochs per training stage"),
    ("k", "10", "candidates retrieved per mention"),
    ("variant", "C", "C, CO, CA, COA, D or DA"),
    ("lambda_mse", "0", "weight of the squared-distance term in the overlap stage"),
    ("normalizer", "include_gold", "include_gold or negatives_only"),
    ("context_max_len", "128", "mention-with-context token budget"),
    ("candidate_max_len", "128", "entity-with-description token budget"),
    ("cross_max_len", "256", "cross-encoder token budget"),
    ("stage", "bi-encoder", "bi-encoder or cross-encoder"),
    ("eval_split", "test", "train, valid or test"),
    ("threshold", "0.5", "semantic filter threshold"),
    ("rounds", "10000", "randomization test rounds"),
    ("alpha", "0.05", "significance level"),
    ("sample_size", "1000", "overlap pairs sampled for intrinsic evaluation"),
    ("train_cross", "false", "also train a cross-encoder"),
    ("cross_epochs", "5", "cross-encoder epochs"),
    ("cross_learning_rate", "0.5", "cross-encoder learning rate"),
    ("text", "", "mention text for link; mark the span as [[span]]"),
    ("mentions_file", "", "mentions JSONL for batch linking"),
    ("synth_n_general", "200", "synthetic general-domain entities"),
    ("synth_n_specific", "100", "synthetic domain-specific entities"),
    ("synth_n_overlap", "10", "synthetic planted overlap pairs"),
    ("synth_n_homonyms", "5", "synthetic same-title distractor pairs"),
    ("synth_train", "500", "synthetic train mentions per domain"),
    ("synth_valid", "100", "synthetic validation mentions per domain"),
    ("synth_test", "200", "synthetic test mentions per domain"),
    ("synth_vocab_pool", "2000", "synthetic word pool size"),
    ("synth_distractor_similarity", "0.1", "description overlap of homonym pairs"),
    ("synth_pair_description_overlap", "0.75", "description overlap of planted pairs"),
    ("timestamps", "false", "stamp reports with the wall-clock time"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {raw:?}: expected true or false"))),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies a `key = value` document; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Every key with its effective value, for embedding in reports.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.values.clone()
    }

    /// Parses every typed key so bad values fail before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.train_config()?;
        self.variant_config()?;
        self.link_options()?;
        self.synth_config()?.validate()?;
        self.vocab_size()?;
        self.dim()?;
        self.threshold()?;
        self.rounds()?;
        self.alpha()?;
        self.sample_size()?;
        self.train_cross()?;
        self.cross_epochs()?;
        self.cross_learning_rate()?;
        self.timestamps()?;
        self.sigtest_metric()?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        parse("seed", self.get("seed"))
    }

    pub fn vocab_size(&self) -> Result<usize> {
        parse("vocab_size", self.get("vocab_size"))
    }

    pub fn dim(&self) -> Result<usize> {
        parse("dim", self.get("dim"))
    }

    pub fn variant(&self) -> Result<Variant> {
        self.get("variant").parse()
    }

    pub fn variant_config(&self) -> Result<VariantConfig> {
        let v = VariantConfig::new(self.variant()?).with_lambda(parse("lambda_mse", self.get("lambda_mse"))?);
        v.validate()?;
        Ok(v)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            batch_size: parse("batch_size", self.get("batch_size"))?,
            learning_rate: parse("learning_rate", self.get("learning_rate"))?,
            epochs: parse("epochs", self.get("epochs"))?,
            seed: self.seed()?,
            top_k: parse("k", self.get("k"))?,
            normalizer: self.get("normalizer").parse::<Normalizer>()?,
            context_max_len: parse("context_max_len", self.get("context_max_len"))?,
            candidate_max_len: parse("candidate_max_len", self.get("candidate_max_len"))?,
            overlap_learning_rate: match self.get("overlap_learning_rate") {
                "" => None,
                v => Some(parse("overlap_learning_rate", v)?),
            },
        };
        t.validate()?;
        Ok(t)
    }

    pub fn link_options(&self) -> Result<LinkOptions> {
        let k: usize = parse("k", self.get("k"))?;
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(LinkOptions {
            k,
            stage: self.get("stage").parse::<EvalStage>()?,
            context_max_len: parse("context_max_len", self.get("context_max_len"))?,
            cross_max_len: parse("cross_max_len", self.get("cross_max_len"))?,
        })
    }

    pub fn synth_config(&self) -> Result<SyntheticWorldConfig> {
        let n = |k: &str| parse::<usize>(k, self.get(k));
        Ok(SyntheticWorldConfig {
            seed: self.seed()?,
            n_general: n("synth_n_general")?,
            n_specific: n("synth_n_specific")?,
            n_overlap: n("synth_n_overlap")?,
            n_homonyms: n("synth_n_homonyms")?,
            n_mentions_per_split: [n("synth_train")?, n("synth_valid")?, n("synth_test")?],
            vocab_pool: n("synth_vocab_pool")?,
            distractor_similarity: parse("synth_distractor_similarity", self.get("synth_distractor_similarity"))?,
            pair_description_overlap: parse(
                "synth_pair_description_overlap",
                self.get("synth_pair_description_overlap"),
            )?,
        })
    }

    pub fn threshold(&self) -> Result<f64> {
        let t: f64 = parse("threshold", self.get("threshold"))?;
        if !t.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        Ok(t)
    }

    pub fn rounds(&self) -> Result<usize> {
        let r: usize = parse("rounds", self.get("rounds"))?;
        if r == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        Ok(r)
    }

    pub fn alpha(&self) -> Result<f64> {
        let a: f64 = parse("alpha", self.get("alpha"))?;
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {a}")));
        }
        Ok(a)
    }

    pub fn sample_size(&self) -> Result<usize> {
        let n: usize = parse("sample_size", self.get("sample_size"))?;
        if n == 0 {
            return Err(Error::Config("sample_size must be at least 1".into()));
        }
        Ok(n)
    }

    pub fn train_cross(&self) -> Result<bool> {
        parse_bool("train_cross", self.get("train_cross"))
    }

    pub fn cross_epochs(&self) -> Result<usize> {
        parse("cross_epochs", self.get("cross_epochs"))
    }

    pub fn cross_learning_rate(&self) -> Result<f64> {
        parse("cross_learning_rate", self.get("cross_learning_rate"))
    }

    pub fn timestamps(&self) -> Result<bool> {
        parse_bool("timestamps", self.get("timestamps"))
    }

    pub fn sigtest_metric(&self) -> Result<&str> {
        match self.get("metric") {
            m @ ("ap10" | "rel1") => Ok(m),
            other => Err(Error::Config(format!("metric must be ap10 or rel1, got {other:?}"))),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    pub fn data_dir(&self) -> PathBuf {
        match self.get("data_dir") {
            "" => self.out_dir(),
            d => PathBuf::from(d),
        }
    }

    /// An explicit path for `key`, or `default_name` under `base`.
    fn path_or(&self, key: &str, base: PathBuf, default_name: &str) -> PathBuf {
        match self.get(key) {
            "" => base.join(default_name),
            p => PathBuf::from(p),
        }
    }

    /// Input corpus file: `general_entities`, `specific_train`, `overlap_file`, ...
    pub fn input_path(&self, key: &str) -> PathBuf {
        let default_name = match key {
            "overlap_file" => "overlap.tsv".to_string(),
            k => format!("{k}.jsonl"),
        };
        self.path_or(key, self.data_dir(), &default_name)
    }

    pub fn kept_path(&self) -> PathBuf {
        self.path_or("kept_file", self.out_dir(), "overlap_kept.tsv")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.path_or("vocab_file", self.out_dir(), "vocab.jsonl")
    }

    pub fn checkpoint_path(&self) -> Result<PathBuf> {
        Ok(self.path_or("checkpoint", self.out_dir(), &format!("checkpoint_{}.json", self.variant()?)))
    }

    pub fn index_path(&self) -> Result<PathBuf> {
        Ok(self.path_or("index_file", self.out_dir(), &format!("index_{}.json", self.variant()?)))
    }

    pub fn report_path(&self, default_name: &str) -> PathBuf {
        self.path_or("report", self.out_dir(), default_name)
    }
}

/// Contents of the shipped default config, with the pretrained-scale learning rate noted.
pub fn default_config_text() -> String {
    let mut out = String::from("# xdlink run configuration\n");
    for (k, v, help) in KEYS {
        if *k == "learning_rate" {
            out.push_str(&format!(
                "# {help}; {PAPER_LEARNING_RATE} suits a pretrained encoder, the toy encoder needs a larger step\n# learning_rate = {PAPER_LEARNING_RATE}\n# overlap_learning_rate =\n"
            ));
        } else {
            out.push_str(&format!("# {help}\n"));
        }
        out.push_str(format!("{k} = {v}").trim_end());
        out.push('\n');
    }
    out
}
