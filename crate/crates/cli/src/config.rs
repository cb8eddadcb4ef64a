//! Flat `key = value` configuration with a fixed key set.
//!
//! Lines starting with `#` and blank lines are ignored. Values are taken
//! verbatim after trimming; list values are comma-separated.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "7", "master seed; every stage derives its own streams from it"),
    ("corpus", "data/synthetic/dialogues.jsonl", "input corpus for ingest"),
    ("corpus_format", "jsonl-dialogue", "jsonl-dialogue or tsv-lines"),
    ("particles", "lah,meh,hor", "particle inventory, in label order"),
    ("particle_aliases", "", "optional TSV of variant -> canonical particle"),
    ("function_labels", "data/synthetic/function_labels.csv", "utterance_key,particle,function_label rows"),
    ("min_frequency", "1", "vocabulary frequency cut-off"),
    ("d_model", "32", "encoder width"),
    ("layers", "2", "encoder blocks"),
    ("heads", "2", "attention heads"),
    ("ffn_dim", "64", "feed-forward width"),
    ("max_len", "64", "maximum packed sequence length"),
    ("dropout", "0.1", "encoder dropout"),
    ("head_hidden", "128", "classifier head hidden width"),
    ("learning_rate", "0.03", "SGD learning rate"),
    ("batch_size", "8", "minibatch size"),
    ("epochs", "60", "training epochs"),
    ("tasks", "ppred,nsp", "tasks trained and analysed by the pipeline"),
    ("lir_context", "true", "encode the two preceding turns with the utterance"),
    ("methods", "naive-word,lir-word,lir-sentence", "representation methods"),
    ("tsne_perplexity", "30", "t-SNE perplexity (clamped for small inputs)"),
    ("tsne_iterations", "1000", "t-SNE iterations"),
    ("tsne_learning_rate", "200", "t-SNE learning rate"),
    ("eps_steps", "16", "eps grid size for the DBSCAN sweep"),
    ("min_pts", "3,5,8,12", "min_pts grid for the DBSCAN sweep"),
    ("min_clusters", "3", "cluster floor for combined-particle runs"),
    ("particle_min_clusters", "1", "cluster floor for per-particle runs"),
    ("max_noise_fraction", "1", "reject DBSCAN cells leaving more than this share of points as noise"),
    ("permutations", "999", "ARI permutation-test trials"),
    ("exemplars", "3", "exemplar utterances per cluster"),
    ("mt_seed_pairs", "data/mt/singlish_pairs.tsv", "parallel seed pairs (source TAB target)"),
    ("mt_monolingual", "data/mt/singlish_monolingual.txt", "monolingual text for back-translation"),
    ("mt_eval", "data/mt/singlish_eval.tsv", "evaluation pairs (source TAB manual translation)"),
    ("mt_aliases", "data/mt/aliases.tsv", "phrase aliases applied before word lookup"),
    ("mt_table", "", "lexical table TSV; empty trains one from mt_seed_pairs"),
    ("translator", "", "external translator command; empty uses the built-in model"),
    ("sentiment_train", "data/mt/sentiment_train.tsv", "labelled sentences (text TAB positive|negative)"),
    ("bt_iterations", "2", "back-translation iterations"),
    ("em_iterations", "10", "EM iterations per alignment model"),
    ("max_length_ratio", "3", "synthetic pair length-ratio filter"),
    ("min_source_length", "2", "synthetic pair minimum source length"),
    ("heldout_fraction", "0.2", "seed pairs held out for BLEU"),
    ("bt_reverse", "false", "train target->source and back-translate target text"),
];

#[derive(Debug)]
pub enum ConfigError {
    UnknownKey(String),
    Syntax { source: String, line: usize, text: String },
    BadValue { key: String, value: String, expected: &'static str },
    Read(PathBuf, std::io::Error),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey(k) => write!(f, "unknown config key `{k}` (see `discourse keys`)"),
            ConfigError::Syntax { source, line, text } => {
                write!(f, "{source}:{line}: expected `key = value`, got `{text}`")
            }
            ConfigError::BadValue { key, value, expected } => {
                write!(f, "config key `{key}`: `{value}` is not {expected}")
            }
            ConfigError::Read(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !known(key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies `key = value` lines from `text`; `source` names it in errors.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                source: source.to_string(),
                line: i + 1,
                text: line.to_string(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (k, v) = spec.split_once('=').ok_or_else(|| ConfigError::Syntax {
            source: "--set".into(),
            line: 1,
            text: spec.to_string(),
        })?;
        self.set(k.trim(), v)
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared config key `{key}`"))
    }

    fn parsed<T: FromStr>(&self, key: &str, expected: &'static str) -> Result<T, ConfigError> {
        let v = self.str(key);
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            expected,
        })
    }

    pub fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64, ConfigError> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.parsed(key, "a number")
    }

    pub fn bool(&self, key: &str) -> Result<bool, ConfigError> {
        self.parsed(key, "true or false")
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.str(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        self.list(key)
            .iter()
            .map(|v| {
                v.parse().map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value: v.clone(),
                    expected: "a list of non-negative integers",
                })
            })
            .collect()
    }

    /// `None` when the value is empty.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.str(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn snapshot(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Parses every typed key so that bad values surface before any work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for key in ["seed"] {
            self.u64(key)?;
        }
        for key in [
            "min_frequency",
            "d_model",
            "layers",
            "heads",
            "ffn_dim",
            "max_len",
            "head_hidden",
            "batch_size",
            "epochs",
            "tsne_iterations",
            "eps_steps",
            "min_clusters",
            "particle_min_clusters",
            "permutations",
            "exemplars",
            "bt_iterations",
            "em_iterations",
            "min_source_length",
        ] {
            self.usize(key)?;
        }
        for key in [
            "dropout",
            "learning_rate",
            "tsne_perplexity",
            "tsne_learning_rate",
            "max_length_ratio",
            "heldout_fraction",
        ] {
            self.f64(key)?;
        }
        let noise = self.f64("max_noise_fraction")?;
        if !(0.0..=1.0).contains(&noise) {
            return Err(ConfigError::BadValue {
                key: "max_noise_fraction".into(),
                value: noise.to_string(),
                expected: "a fraction in [0, 1]",
            });
        }
        for key in ["lir_context", "bt_reverse"] {
            self.bool(key)?;
        }
        self.usize_list("min_pts")?;
        for m in self.list("methods") {
            m.parse::<discourse_core::lir::Method>().map_err(|_| ConfigError::BadValue {
                key: "methods".into(),
                value: m.clone(),
                expected: "one of naive-word, lir-word, lir-sentence",
            })?;
        }
        for t in self.list("tasks") {
            if t != "ppred" && t != "nsp" {
                return Err(ConfigError::BadValue {
                    key: "tasks".into(),
                    value: t,
                    expected: "ppred or nsp",
                });
            }
        }
        self.str("corpus_format")
            .parse::<discourse_core::corpus::CorpusFormat>()
            .map_err(|_| ConfigError::BadValue {
                key: "corpus_format".into(),
                value: self.str("corpus_format").into(),
                expected: "jsonl-dialogue or tsv-lines",
            })?;
        Ok(())
    }

    /// The documented key set, one `key = default  # description` per line.
    pub fn documented() -> String {
        KEYS.iter()
            .map(|(k, v, d)| format!("{k} = {v}  # {d}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let mut c = Config::default();
        c.apply_text("# comment\n\nepochs = 3\nmethods=lir-word\n", "t").unwrap();
        c.apply_override("epochs=5").unwrap();
        assert_eq!(c.usize("epochs").unwrap(), 5);
        assert_eq!(c.list("methods"), vec!["lir-word"]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = Config::default();
        assert!(matches!(c.apply_text("nope = 1", "t"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.apply_text("epochs 3", "t"), Err(ConfigError::Syntax { line: 1, .. })));
        c.set("epochs", "many").unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        assert_eq!(Config::documented().lines().count(), KEYS.len());
    }
}
