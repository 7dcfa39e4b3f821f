// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat `key = value` experiment configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment (also blank lines)
//! key = value
//! ```
//!
//! Keys (defaults in brackets):
//!
//! | key | value |
//! |-----|-------|
//! | `model_name` | label used in reports [`model`] |
//! | `weights` | weight file; excludes the `model.*` keys |
//! | `model.layers`, `model.heads`, `model.d_model`, `model.vocab_size`, `model.max_seq_len`, `model.seed` | random model [2, 2, 32, 256, 512, 0] |
//! | `dataset.<name>` | JSONL file evaluated under `<name>`; repeatable, kept in file order |
//! | `train.<name>` | JSONL training file profiled for dataset `<name>` |
//! | `marker.<name>` | custom marker pair: `<open> <close>` separated by whitespace |
//! | `orders` | comma list of `question_first`, `context_first` [both] |
//! | `methods` | comma list of `NE`, `MP-<marker>`, `AS` [`NE`] |
//! | `targets` | comma list of `question`, `context`, `question_and_context` [all three] |
//! | `alpha` | steering factor, `0 <= alpha < 1` [0.001] |
//! | `k_grid` | `all`, `a..b` (inclusive) or comma list [`all`] |
//! | `k_stride` | stride applied to `all` and `a..b` [1] |
//! | `max_new` | generated tokens per answer [32] |
//! | `stop_on_newline` | `true`/`false` [true] |
//! | `normalize` | case-fold and collapse whitespace before matching [true] |
//! | `ppl_scope` | `prompt` or `prompt_and_gold` [`prompt`] |
//! | `max_len` | length filter in tokens [512] |
//! | `split_seed`, `subset_seed` | seeds for the validation halving and profiling subsets [0, 0] |
//! | `subset_size` | profiling subset size per dataset [500] |
//! | `eval_split` | `test`, `valid` or `all` [`test`] |
//! | `head_set` | profiling JSON consumed by `AS` cells |
//! | `output_dir` | report directory [`out`] |
//!
//! Relative paths resolve against the directory of the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::PplScope;
use crate::prompting::{EmphasisTarget, MarkerPair, PromptOrder};
use crate::steering::DEFAULT_ALPHA;
use crate::transformer::{DecodeConfig, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Weights(PathBuf),
    Random(ModelConfig),
}

/// Method entry from the `methods` key, before a head set is attached.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodEntry {
    NoEmphasis,
    Marked(MarkerPair),
    Steering,
}

impl MethodEntry {
    pub fn label(&self) -> String {
        match self {
            MethodEntry::NoEmphasis => "NE".into(),
            MethodEntry::Marked(m) => format!("MP-{}", m.name),
            MethodEntry::Steering => "AS".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Valid,
    Test,
    All,
}

impl FromStr for EvalSplit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "valid" => Ok(EvalSplit::Valid),
            "test" => Ok(EvalSplit::Test),
            "all" => Ok(EvalSplit::All),
            other => Err(format!("unknown eval_split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model_name: String,
    pub model: ModelSource,
    pub datasets: Vec<(String, PathBuf)>,
    pub train_sets: BTreeMap<String, PathBuf>,
    pub markers: Vec<MarkerPair>,
    pub orders: Vec<PromptOrder>,
    pub methods: Vec<MethodEntry>,
    pub targets: Vec<EmphasisTarget>,
    pub alpha: f32,
    pub k_grid: KGrid,
    pub decode: DecodeConfig,
    pub normalize: bool,
    pub ppl_scope: PplScope,
    pub max_len: usize,
    pub split_seed: u64,
    pub subset_seed: u64,
    pub subset_size: usize,
    pub eval_split: EvalSplit,
    pub head_set: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// SHA-256 of the config text.
    pub config_hash: String,
}

/// Candidate `k` values for head selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KGrid {
    All {
        stride: usize,
    },
    Range {
        start: usize,
        end: usize,
        stride: usize,
    },
    List(Vec<usize>),
}

impl KGrid {
    /// Concrete grid for a model with `num_heads` heads in total.
    pub fn resolve(&self, num_heads: usize) -> Vec<usize> {
        match *self {
            KGrid::All { stride } => (1..=num_heads).step_by(stride).collect(),
            KGrid::Range { start, end, stride } => (start..=end).step_by(stride).collect(),
            KGrid::List(ref v) => v.clone(),
        }
    }
}

struct Entry {
    line: usize,
    value: String,
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        line,
        msg: msg.into(),
    }
}

fn parse_list<T: FromStr<Err = String>>(e: &Entry) -> Result<Vec<T>> {
    let items: Vec<T> = e
        .value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|m| err(e.line, m)))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(err(e.line, "empty list"));
    }
    Ok(items)
}

fn parse_num<T: FromStr>(e: &Entry, key: &str) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| err(e.line, format!("{key}: cannot parse {:?}", e.value)))
}

fn parse_bool(e: &Entry, key: &str) -> Result<bool> {
    match e.value.as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        v => Err(err(
            e.line,
            format!("{key}: expected true/false, got {v:?}"),
        )),
    }
}

const SCALAR_KEYS: &[&str] = &[
    "model_name",
    "weights",
    "model.layers",
    "model.heads",
    "model.d_model",
    "model.vocab_size",
    "model.max_seq_len",
    "model.seed",
    "orders",
    "methods",
    "targets",
    "alpha",
    "k_grid",
    "k_stride",
    "max_new",
    "stop_on_newline",
    "normalize",
    "ppl_scope",
    "max_len",
    "split_seed",
    "subset_seed",
    "subset_size",
    "eval_split",
    "head_set",
    "output_dir",
];

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::ConfigValue(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut scalars: BTreeMap<&str, Entry> = BTreeMap::new();
        let mut datasets: Vec<(String, Entry)> = Vec::new();
        let mut trains: Vec<(String, Entry)> = Vec::new();
        let mut marker_entries: Vec<(String, Entry)> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `key = value`, got {trimmed:?}")))?;
            let (key, value) = (key.trim(), value.trim().to_owned());
            if value.is_empty() {
                return Err(err(line, format!("{key}: empty value")));
            }
            let entry = Entry { line, value };
            let named = |prefix: &str| -> Result<Option<String>> {
                match key.strip_prefix(prefix) {
                    Some("") => Err(err(line, format!("{prefix}<name> needs a name"))),
                    Some(n) => Ok(Some(n.to_owned())),
                    None => Ok(None),
                }
            };
            if let Some(name) = named("dataset.")? {
                if datasets.iter().any(|(n, _)| *n == name) {
                    return Err(err(line, format!("dataset {name:?} defined twice")));
                }
                datasets.push((name, entry));
            } else if let Some(name) = named("train.")? {
                if trains.iter().any(|(n, _)| *n == name) {
                    return Err(err(line, format!("train set {name:?} defined twice")));
                }
                trains.push((name, entry));
            } else if let Some(name) = named("marker.")? {
                if marker_entries.iter().any(|(n, _)| *n == name) {
                    return Err(err(line, format!("marker {name:?} defined twice")));
                }
                marker_entries.push((name, entry));
            } else if let Some(&k) = SCALAR_KEYS.iter().find(|&&k| k == key) {
                if let Some(prev) = scalars.get(k) {
                    return Err(err(line, format!("{k} already set on line {}", prev.line)));
                }
                scalars.insert(k, entry);
            } else {
                return Err(err(line, format!("unknown key {key:?}")));
            }
        }

        let resolve = |e: &Entry, must_exist: bool| -> Result<PathBuf> {
            let p = base.join(&e.value);
            if must_exist && !p.exists() {
                return Err(err(e.line, format!("file not found: {}", p.display())));
            }
            Ok(p)
        };

        // model
        let model_keys: Vec<&str> = scalars
            .keys()
            .copied()
            .filter(|k| k.starts_with("model."))
            .collect();
        let model = match scalars.get("weights") {
            Some(w) => {
                if let Some(k) = model_keys.first() {
                    return Err(err(
                        scalars[k].line,
                        format!("{k} conflicts with weights on line {}", w.line),
                    ));
                }
                ModelSource::Weights(resolve(w, true)?)
            }
            None => {
                let get = |k: &str, d: usize| -> Result<usize> {
                    scalars.get(k).map_or(Ok(d), |e| parse_num(e, k))
                };
                let mut c = ModelConfig::new(
                    get("model.layers", 2)?,
                    get("model.heads", 2)?,
                    get("model.d_model", 32)?,
                    get("model.vocab_size", 256)?,
                )
                .with_max_seq_len(get("model.max_seq_len", 512)?);
                if let Some(e) = scalars.get("model.seed") {
                    c.seed = parse_num(e, "model.seed")?;
                }
                c.validate().map_err(|e| {
                    let line = model_keys.first().map_or(0, |k| scalars[k].line);
                    err(line, e.to_string())
                })?;
                ModelSource::Random(c)
            }
        };

        if datasets.is_empty() {
            return Err(Error::ConfigValue(
                "at least one dataset.<name> entry is required".into(),
            ));
        }
        let datasets = datasets
            .iter()
            .map(|(n, e)| Ok((n.clone(), resolve(e, true)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut train_sets = BTreeMap::new();
        for (n, e) in &trains {
            if !datasets.iter().any(|(d, _)| d == n) {
                return Err(err(
                    e.line,
                    format!("train.{n} has no matching dataset.{n}"),
                ));
            }
            train_sets.insert(n.clone(), resolve(e, true)?);
        }

        let mut markers = MarkerPair::builtins();
        for (name, e) in &marker_entries {
            let parts: Vec<&str> = e.value.split_whitespace().collect();
            let [open, close] = parts[..] else {
                return Err(err(e.line, "marker needs `<open> <close>`"));
            };
            let m = MarkerPair::new(name.clone(), open, close)
                .map_err(|x| err(e.line, x.to_string()))?;
            match markers.iter_mut().find(|b| b.name == *name) {
                Some(slot) => *slot = m,
                None => markers.push(m),
            }
        }

        let orders = match scalars.get("orders") {
            Some(e) => parse_list::<PromptOrder>(e)?,
            None => PromptOrder::ALL.to_vec(),
        };
        let methods = match scalars.get("methods") {
            Some(e) => e
                .value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| match s {
                    "NE" => Ok(MethodEntry::NoEmphasis),
                    "AS" => Ok(MethodEntry::Steering),
                    mp => {
                        let name = mp
                            .strip_prefix("MP-")
                            .ok_or_else(|| err(e.line, format!("unknown method {mp:?}")))?;
                        markers
                            .iter()
                            .find(|m| m.name == name)
                            .cloned()
                            .map(MethodEntry::Marked)
                            .ok_or_else(|| err(e.line, format!("no marker named {name:?}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?,
            None => vec![MethodEntry::NoEmphasis],
        };
        let targets = match scalars.get("targets") {
            Some(e) => {
                let t = parse_list::<EmphasisTarget>(e)?;
                if t.contains(&EmphasisTarget::None) {
                    return Err(err(
                        e.line,
                        "`none` is not an emphasis target; NE cells are implicit",
                    ));
                }
                t
            }
            None => EmphasisTarget::EMPHASIZED.to_vec(),
        };
        if methods.contains(&MethodEntry::Steering)
            && targets.contains(&EmphasisTarget::QuestionAndContext)
        {
            let line = scalars
                .get("targets")
                .map_or(scalars["methods"].line, |e| e.line);
            return Err(err(
                line,
                "AS is undefined for the question_and_context target; drop one of them",
            ));
        }

        let alpha = match scalars.get("alpha") {
            Some(e) => {
                let a: f32 = parse_num(e, "alpha")?;
                if !(0.0..1.0).contains(&a) {
                    return Err(err(
                        e.line,
                        format!("alpha must satisfy 0 <= alpha < 1, got {a}"),
                    ));
                }
                a
            }
            None => DEFAULT_ALPHA,
        };

        let stride = match scalars.get("k_stride") {
            Some(e) => {
                let s: usize = parse_num(e, "k_stride")?;
                if s == 0 {
                    return Err(err(e.line, "k_stride must be at least 1"));
                }
                s
            }
            None => 1,
        };
        let k_grid = match scalars.get("k_grid") {
            None => KGrid::All { stride },
            Some(e) if e.value == "all" => KGrid::All { stride },
            Some(e) => match e.value.split_once("..") {
                Some((a, b)) => {
                    let p = |v: &str| {
                        v.trim()
                            .parse::<usize>()
                            .map_err(|_| err(e.line, format!("bad k_grid {:?}", e.value)))
                    };
                    let (start, end) = (p(a)?, p(b)?);
                    if start == 0 || start > end {
                        return Err(err(e.line, format!("bad k_grid range {start}..{end}")));
                    }
                    KGrid::Range { start, end, stride }
                }
                None => {
                    let v = e
                        .value
                        .split(',')
                        .map(|s| {
                            s.trim()
                                .parse::<usize>()
                                .map_err(|_| err(e.line, format!("bad k_grid {:?}", e.value)))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    if v.contains(&0) {
                        return Err(err(e.line, "k values start at 1"));
                    }
                    KGrid::List(v)
                }
            },
        };

        let usize_or =
            |k: &str, d: usize| scalars.get(k).map_or(Ok(d), |e| parse_num::<usize>(e, k));
        let u64_or = |k: &str, d: u64| scalars.get(k).map_or(Ok(d), |e| parse_num::<u64>(e, k));
        let bool_or = |k: &str, d: bool| scalars.get(k).map_or(Ok(d), |e| parse_bool(e, k));

        let ppl_scope = match scalars.get("ppl_scope") {
            None => PplScope::Prompt,
            Some(e) => match e.value.as_str() {
                "prompt" => PplScope::Prompt,
                "prompt_and_gold" => PplScope::PromptAndGold,
                v => return Err(err(e.line, format!("unknown ppl_scope {v:?}"))),
            },
        };
        let eval_split = match scalars.get("eval_split") {
            None => EvalSplit::Test,
            Some(e) => e.value.parse().map_err(|m: String| err(e.line, m))?,
        };

        Ok(Self {
            model_name: scalars
                .get("model_name")
                .map_or("model".into(), |e| e.value.clone()),
            model,
            datasets,
            train_sets,
            markers,
            orders,
            methods,
            targets,
            alpha,
            k_grid,
            decode: DecodeConfig {
                max_new: usize_or("max_new", 32)?,
                stop_on_newline: bool_or("stop_on_newline", true)?,
            },
            normalize: bool_or("normalize", true)?,
            ppl_scope,
            max_len: usize_or("max_len", 512)?,
            split_seed: u64_or("split_seed", 0)?,
            subset_seed: u64_or("subset_seed", 0)?,
            subset_size: usize_or("subset_size", 500)?,
            eval_split,
            head_set: scalars
                .get("head_set")
                .map(|e| resolve(e, false))
                .transpose()?,
            output_dir: scalars
                .get("output_dir")
                .map_or_else(|| Ok(base.join("out")), |e| resolve(e, false))?,
            config_hash: crate::harness::sha256_hex(text.as_bytes()),
        })
    }

    pub fn uses_steering(&self) -> bool {
        self.methods.contains(&MethodEntry::Steering)
    }
}
