// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment driver: loads a config, runs the evaluation grid, head
//! profiling and the knowledge split, and writes CSV/JSON/text reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{EvalSplit, ExperimentConfig, MethodEntry, ModelSource};
use crate::corpus::{
    filter_by_length, load_jsonl, sample_profiling_subset, split_validation, Corpus, SplitSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate_cell, knowledge_split_row, partition_knowledge, CellResult, EvalOptions,
    KnowledgeCells, KnowledgePartition, KnowledgeRow, MethodSpec,
};
use crate::profiling::{profile_heads, select_k, HeadScoreMap, ProfilingResult};
use crate::prompting::{EmphasisTarget, PromptOrder};
use crate::steering::HeadId;
use crate::transformer::Model;

pub const CELLS_CSV: &str = "cells.csv";
pub const CELLS_TXT: &str = "cells.txt";
pub const EXAMPLES_CSV: &str = "examples.csv";
pub const PROFILE_JSON: &str = "profile.json";
pub const PARTITION_JSON: &str = "partition.json";
pub const KNOWLEDGE_CSV: &str = "knowledge.csv";
pub const KNOWLEDGE_TXT: &str = "knowledge.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs `f` on a dedicated rayon pool with `threads` workers, or on the
/// global pool when `threads` is `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::ConfigValue(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// A loaded experiment: config, model and provenance hashes.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: Model,
    pub weights_hash: String,
}

impl Experiment {
    pub fn load(config: ExperimentConfig) -> Result<Self> {
        let (model, weights_hash) = match &config.model {
            ModelSource::Weights(path) => {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                (Model::from_bytes(&bytes)?, sha256_hex(&bytes))
            }
            ModelSource::Random(c) => {
                let m = Model::init_random(*c)?;
                let h = sha256_hex(&m.to_bytes());
                (m, h)
            }
        };
        Ok(Self {
            config,
            model,
            weights_hash,
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::load(ExperimentConfig::load(path)?)
    }

    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            decode: self.config.decode,
            normalize: self.config.normalize,
            ppl_scope: self.config.ppl_scope,
        }
    }

    fn provenance(&self) -> String {
        format!(
            "# model={} config_sha256={} weights_sha256={}\n",
            self.config.model_name, self.config.config_hash, self.weights_hash
        )
    }

    fn load_filtered(&self, name: &str, path: &Path) -> Result<Corpus> {
        let corpus = load_jsonl(name, path)?;
        let kept = filter_by_length(&corpus, self.model.tokenizer(), self.config.max_len);
        if kept.len() < corpus.len() {
            log::info!(
                "{name}: {} of {} examples exceed max_len {}",
                corpus.len() - kept.len(),
                corpus.len(),
                self.config.max_len
            );
        }
        Ok(kept)
    }

    fn halves(&self) -> Result<Vec<(Corpus, Corpus)>> {
        self.config
            .datasets
            .iter()
            .map(|(name, path)| {
                let c = self.load_filtered(name, path)?;
                split_validation(
                    &c,
                    SplitSpec {
                        seed: self.config.split_seed,
                    },
                )
            })
            .collect()
    }

    /// Evaluation corpora per dataset, after length filtering and splitting.
    pub fn eval_corpora(&self) -> Result<Vec<Corpus>> {
        if self.config.eval_split == EvalSplit::All {
            return self
                .config
                .datasets
                .iter()
                .map(|(n, p)| self.load_filtered(n, p))
                .collect();
        }
        Ok(self
            .halves()?
            .into_iter()
            .map(|(valid, test)| match self.config.eval_split {
                EvalSplit::Valid => valid,
                _ => test,
            })
            .collect())
    }

    pub fn validation_corpora(&self) -> Result<Vec<Corpus>> {
        Ok(self.halves()?.into_iter().map(|(v, _)| v).collect())
    }

    /// Profiling subsets drawn from the `train.<name>` files.
    pub fn profiling_subsets(&self) -> Result<Vec<Corpus>> {
        self.config
            .datasets
            .iter()
            .map(|(name, _)| {
                let path =
                    self.config.train_sets.get(name).ok_or_else(|| {
                        Error::ConfigValue(format!("profiling needs train.{name}"))
                    })?;
                let train = self.load_filtered(name, path)?;
                let n = self.config.subset_size.min(train.len());
                if n < self.config.subset_size {
                    log::warn!(
                        "{name}: subset_size {} clamped to {n}",
                        self.config.subset_size
                    );
                }
                sample_profiling_subset(&train, n, self.config.subset_seed)
            })
            .collect()
    }

    fn method_spec(
        &self,
        entry: &MethodEntry,
        order: PromptOrder,
        target: EmphasisTarget,
        profile: Option<&ProfileReport>,
    ) -> Result<MethodSpec> {
        Ok(match entry {
            MethodEntry::NoEmphasis => MethodSpec::NoEmphasis,
            MethodEntry::Marked(m) => MethodSpec::Marked(m.clone()),
            MethodEntry::Steering => {
                let profile =
                    profile.ok_or_else(|| Error::ConfigValue("AS cells need head_set".into()))?;
                MethodSpec::Steering {
                    heads: profile.head_set(order, target)?.clone(),
                    alpha: self.config.alpha,
                }
            }
        })
    }

    fn load_profile(&self) -> Result<Option<ProfileReport>> {
        if !self.config.uses_steering() {
            return Ok(None);
        }
        let path = self.config.head_set.as_ref().ok_or_else(|| {
            Error::ConfigValue("methods include AS but head_set is not set".into())
        })?;
        let profile = ProfileReport::read(path)?;
        let (l, n) = (self.model.config().n_layers, self.model.config().n_heads);
        for run in &profile.runs {
            for h in &run.selection.head_set {
                h.check(l, n)?;
            }
        }
        if profile.alpha != self.config.alpha {
            log::warn!(
                "head set was profiled with alpha={} but alpha={}",
                profile.alpha,
                self.config.alpha
            );
        }
        Ok(Some(profile))
    }
}

/// Cells for one dataset: NE once per order, every other method once per
/// target.
pub fn cell_grid(config: &ExperimentConfig) -> Vec<(PromptOrder, MethodEntry, EmphasisTarget)> {
    let mut out = Vec::new();
    for &order in &config.orders {
        for m in &config.methods {
            if *m == MethodEntry::NoEmphasis {
                out.push((order, m.clone(), EmphasisTarget::None));
            } else {
                out.extend(config.targets.iter().map(|&t| (order, m.clone(), t)));
            }
        }
    }
    out
}

/// One line of `cells.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub model: String,
    pub dataset: String,
    pub order: PromptOrder,
    pub method: String,
    pub target: EmphasisTarget,
    pub n: usize,
    pub accuracy: f64,
    pub mean_ppl: f64,
}

impl CellRow {
    pub fn from_cell(model: &str, c: &CellResult) -> Self {
        Self {
            model: model.to_owned(),
            dataset: c.dataset.clone(),
            order: c.order,
            method: c.method.clone(),
            target: c.target,
            n: c.n,
            accuracy: c.accuracy,
            mean_ppl: c.mean_ppl,
        }
    }
}

#[derive(Serialize)]
struct ExampleRow<'a> {
    model: &'a str,
    dataset: &'a str,
    order: PromptOrder,
    method: &'a str,
    target: EmphasisTarget,
    id: &'a str,
    status: &'static str,
    correct: Option<bool>,
    generated: &'a str,
    ppl: Option<f64>,
}

fn csv_bytes<T: Serialize>(provenance: &str, rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(provenance.as_bytes().to_vec());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<csv buffer>", e.into_error()))
}

pub fn cells_csv(provenance: &str, rows: &[CellRow]) -> Result<Vec<u8>> {
    csv_bytes(provenance, rows)
}

pub fn read_cells_csv(path: &Path) -> Result<Vec<CellRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<CellRow>, _>>()?)
}

fn examples_csv(provenance: &str, model: &str, cells: &[CellResult]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for c in cells {
        let base = |id, status, correct, generated, ppl| ExampleRow {
            model,
            dataset: &c.dataset,
            order: c.order,
            method: &c.method,
            target: c.target,
            id,
            status,
            correct,
            generated,
            ppl,
        };
        for e in &c.per_example {
            rows.push(base(
                &e.id,
                "ok",
                Some(e.correct),
                &e.generated,
                Some(e.ppl),
            ));
        }
        for id in &c.skipped {
            rows.push(base(id, "skipped", None, "", None));
        }
    }
    csv_bytes(provenance, rows)
}

fn pad(s: &str, w: usize) -> String {
    format!("{s:<w$}")
}

/// Accuracy (percent) and mean PPL laid out with one row per method and
/// one column per (order, target).
pub fn render_cells_table(rows: &[CellRow]) -> String {
    let mut out = String::new();
    let mut datasets: Vec<&str> = Vec::new();
    for r in rows {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    if let Some(r) = rows.first() {
        let _ = writeln!(out, "model: {}", r.model);
    }
    for ds in datasets {
        let sub: Vec<&CellRow> = rows.iter().filter(|r| r.dataset == ds).collect();
        let mut cols: Vec<(PromptOrder, EmphasisTarget)> =
            sub.iter().map(|r| (r.order, r.target)).collect();
        cols.sort();
        cols.dedup();
        let mut methods: Vec<&str> = Vec::new();
        for r in &sub {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let n = sub.iter().map(|r| r.n).max().unwrap_or(0);
        let mw = methods.iter().map(|m| m.len()).max().unwrap_or(0).max(6) + 2;
        const CW: usize = 9;

        for (title, value) in [
            (
                "accuracy (%)",
                (|r: &CellRow| format!("{:.2}", 100.0 * r.accuracy)) as fn(&CellRow) -> String,
            ),
            ("mean ppl", |r: &CellRow| format!("{:.2}", r.mean_ppl)),
        ] {
            let _ = writeln!(out, "\n{ds} (n={n}) {title}");
            let mut head1 = pad("", mw);
            let mut head2 = pad("method", mw);
            let mut prev = None;
            for &(o, t) in &cols {
                head1.push_str(&pad(if prev == Some(o) { "" } else { o.as_str() }, CW));
                head2.push_str(&pad(t.short(), CW));
                prev = Some(o);
            }
            let _ = writeln!(out, "{}", head1.trim_end());
            let _ = writeln!(out, "{}", head2.trim_end());
            for m in &methods {
                let mut line = pad(m, mw);
                for &(o, t) in &cols {
                    let cell = sub
                        .iter()
                        .find(|r| r.method == *m && r.order == o && r.target == t)
                        .map_or(String::new(), |r| value(r));
                    line.push_str(&pad(&cell, CW));
                }
                let _ = writeln!(out, "{}", line.trim_end());
            }
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn out_dir(exp: &Experiment, out: Option<&Path>) -> PathBuf {
    out.map_or_else(|| exp.config.output_dir.clone(), Path::to_path_buf)
}

/// Runs every cell of the grid on every dataset.
pub fn run_eval(exp: &Experiment) -> Result<Vec<CellResult>> {
    let profile = exp.load_profile()?;
    let corpora = exp.eval_corpora()?;
    let opts = exp.options();
    let grid = cell_grid(&exp.config);
    let mut cells = Vec::new();
    for corpus in &corpora {
        for (order, entry, target) in &grid {
            let method = exp.method_spec(entry, *order, *target, profile.as_ref())?;
            log::info!("{} {order} {} {target}", corpus.name, method.label());
            let cell = evaluate_cell(&exp.model, corpus, *order, &method, *target, &opts)?;
            if cell.degenerate_rows > 0 {
                log::warn!(
                    "{}: {} degenerate attention rows left unsteered",
                    corpus.name,
                    cell.degenerate_rows
                );
            }
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// `eval`: writes `cells.csv`, `cells.txt` and `examples.csv`.
pub fn cmd_eval(exp: &Experiment, out: Option<&Path>) -> Result<Vec<CellResult>> {
    let cells = run_eval(exp)?;
    let dir = out_dir(exp, out);
    let prov = exp.provenance();
    let rows: Vec<CellRow> = cells
        .iter()
        .map(|c| CellRow::from_cell(&exp.config.model_name, c))
        .collect();
    write_file(&dir.join(CELLS_CSV), &cells_csv(&prov, &rows)?)?;
    write_file(&dir.join(CELLS_TXT), render_cells_table(&rows).as_bytes())?;
    write_file(
        &dir.join(EXAMPLES_CSV),
        &examples_csv(&prov, &exp.config.model_name, &cells)?,
    )?;
    Ok(cells)
}

/// Profiling outcome for one (order, target).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRun {
    pub order: PromptOrder,
    pub target: EmphasisTarget,
    pub score_maps: Vec<HeadScoreMap>,
    pub selection: ProfilingResult,
}

/// Contents of `profile.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub model: String,
    pub config_sha256: String,
    pub weights_sha256: String,
    pub alpha: f32,
    pub runs: Vec<ProfileRun>,
}

impl ProfileReport {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn head_set(
        &self,
        order: PromptOrder,
        target: EmphasisTarget,
    ) -> Result<&BTreeSet<HeadId>> {
        self.runs
            .iter()
            .find(|r| r.order == order && r.target == target)
            .map(|r| &r.selection.head_set)
            .ok_or_else(|| {
                Error::ConfigValue(format!("head_set has no entry for {order}/{target}"))
            })
    }
}

/// `profile`: per-head scores on the training subsets and a `k` chosen on
/// the validation halves, for every configured order and Q/C target.
pub fn cmd_profile(exp: &Experiment, out: Option<&Path>) -> Result<ProfileReport> {
    let subsets = exp.profiling_subsets()?;
    let valid = exp.validation_corpora()?;
    let opts = exp.options();
    let c = exp.model.config();
    let grid = exp.config.k_grid.resolve(c.n_layers * c.n_heads);
    let targets: Vec<EmphasisTarget> = exp
        .config
        .targets
        .iter()
        .copied()
        .filter(|t| *t != EmphasisTarget::QuestionAndContext)
        .collect();
    if targets.is_empty() {
        return Err(Error::ConfigValue(
            "profiling needs targets question and/or context".into(),
        ));
    }
    let mut runs = Vec::new();
    for &order in &exp.config.orders {
        for &target in &targets {
            log::info!("profiling {order}/{target}");
            let score_maps =
                profile_heads(&exp.model, &subsets, order, target, exp.config.alpha, &opts)?;
            let selection = select_k(
                &exp.model,
                &score_maps,
                &valid,
                order,
                target,
                exp.config.alpha,
                &grid,
                &opts,
            )?;
            if !selection.empty_k.is_empty() {
                log::warn!(
                    "{order}/{target}: empty head intersection for k in {:?}",
                    selection.empty_k
                );
            }
            runs.push(ProfileRun {
                order,
                target,
                score_maps,
                selection,
            });
        }
    }
    let report = ProfileReport {
        model: exp.config.model_name.clone(),
        config_sha256: exp.config.config_hash.clone(),
        weights_sha256: exp.weights_hash.clone(),
        alpha: exp.config.alpha,
        runs,
    };
    write_json(&out_dir(exp, out).join(PROFILE_JSON), &report)?;
    Ok(report)
}

#[derive(Serialize)]
struct KnowledgeCsvRow<'a> {
    model: &'a str,
    dataset: &'a str,
    order: PromptOrder,
    method: &'a str,
    target: EmphasisTarget,
    knowledge_amount: f64,
    n_known: usize,
    n_unknown: usize,
    known_no_emphasis: String,
    known_emphasis: String,
    unknown_no_emphasis: String,
    unknown_emphasis: String,
}

pub fn render_knowledge_table(rows: &[KnowledgeRow]) -> String {
    let mut out = String::new();
    let header = [
        "dataset", "order", "method", "target", "known", "K-NE", "K-E", "U-NE", "U-E",
    ];
    let lines: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dataset.clone(),
                r.order.to_string(),
                r.method.clone(),
                r.target.short().to_owned(),
                format!("{:.4}", r.knowledge_amount),
                r.known_no_emphasis.to_string(),
                r.known_emphasis.to_string(),
                r.unknown_no_emphasis.to_string(),
                r.unknown_emphasis.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            lines
                .iter()
                .map(|l| l[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
                + 2
        })
        .collect();
    let mut push = |cells: Vec<&str>| {
        let line: String = cells.iter().zip(&widths).map(|(c, &w)| pad(c, w)).collect();
        let _ = writeln!(out, "{}", line.trim_end());
    };
    push(header.to_vec());
    for l in &lines {
        push(l.iter().map(String::as_str).collect());
    }
    out
}

/// Output of `partition`.
pub struct PartitionOutput {
    pub partitions: Vec<KnowledgePartition>,
    pub rows: Vec<KnowledgeRow>,
}

/// `partition`: closed-book known/unknown split of each evaluation corpus
/// and accuracy of every emphasis cell on both sides.
pub fn cmd_partition(exp: &Experiment, out: Option<&Path>) -> Result<PartitionOutput> {
    let profile = exp.load_profile()?;
    let corpora = exp.eval_corpora()?;
    let opts = exp.options();
    let mut partitions = Vec::new();
    let mut rows = Vec::new();
    for corpus in &corpora {
        let part = partition_knowledge(&exp.model, corpus, &opts)?;
        let known = part.known_corpus(corpus);
        let unknown = part.unknown_corpus(corpus);
        for &order in &exp.config.orders {
            let ne = MethodSpec::NoEmphasis;
            let none = EmphasisTarget::None;
            let known_ne = evaluate_cell(&exp.model, &known, order, &ne, none, &opts)?;
            let unknown_ne = evaluate_cell(&exp.model, &unknown, order, &ne, none, &opts)?;
            for (o, entry, target) in cell_grid(&exp.config) {
                if o != order || entry == MethodEntry::NoEmphasis {
                    continue;
                }
                let method = exp.method_spec(&entry, order, target, profile.as_ref())?;
                let known_e = evaluate_cell(&exp.model, &known, order, &method, target, &opts)?;
                let unknown_e = evaluate_cell(&exp.model, &unknown, order, &method, target, &opts)?;
                rows.push(knowledge_split_row(
                    &exp.config.model_name,
                    &part,
                    KnowledgeCells {
                        known_ne: &known_ne,
                        known_emphasis: &known_e,
                        unknown_ne: &unknown_ne,
                        unknown_emphasis: &unknown_e,
                    },
                ));
            }
        }
        partitions.push(part);
    }

    let dir = out_dir(exp, out);
    write_json(&dir.join(PARTITION_JSON), &partitions)?;
    let csv_rows = rows.iter().map(|r| KnowledgeCsvRow {
        model: &r.model,
        dataset: &r.dataset,
        order: r.order,
        method: &r.method,
        target: r.target,
        knowledge_amount: r.knowledge_amount,
        n_known: r.known_emphasis.n,
        n_unknown: r.unknown_emphasis.n,
        known_no_emphasis: r.known_no_emphasis.to_string(),
        known_emphasis: r.known_emphasis.to_string(),
        unknown_no_emphasis: r.unknown_no_emphasis.to_string(),
        unknown_emphasis: r.unknown_emphasis.to_string(),
    });
    write_file(
        &dir.join(KNOWLEDGE_CSV),
        &csv_bytes(&exp.provenance(), csv_rows)?,
    )?;
    write_file(
        &dir.join(KNOWLEDGE_TXT),
        render_knowledge_table(&rows).as_bytes(),
    )?;
    Ok(PartitionOutput { partitions, rows })
}

/// `report`: re-renders a `cells.csv` as a text table.
pub fn cmd_report(csv_path: &Path, out: Option<&Path>) -> Result<String> {
    let rows = read_cells_csv(csv_path)?;
    let table = render_cells_table(&rows);
    if let Some(dir) = out {
        write_file(&dir.join(CELLS_TXT), table.as_bytes())?;
    }
    Ok(table)
}
