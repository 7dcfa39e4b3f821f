// SPDX-License-Identifier: MIT OR Apache-2.0

//! Substring accuracy, perplexity, cell evaluation and the closed-book
//! known/unknown split.

use std::collections::BTreeSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, RcExample};
use crate::error::{Error, Result};
use crate::prompting::{
    apply_markers, closed_book_render, emphasized_token_span, render, EmphasisTarget, MarkerPair,
    PromptOrder, RenderedPrompt, Segment,
};
use crate::steering::{HeadId, SteeringConfig};
use crate::transformer::{generate_scored, sequence_logprobs_steered, DecodeConfig, Model};

/// Case-folds, collapses whitespace runs to one space and trims.
pub fn normalize_answer(s: &str) -> String {
    let folded = caseless::default_case_fold_str(s);
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True iff some gold answer occurs in `generated`.
///
/// With `normalize`, both sides go through [`normalize_answer`] first.
/// Gold answers that are empty after normalization never match.
pub fn contains_answer(gold_answers: &[String], generated: &str, normalize: bool) -> bool {
    if normalize {
        let hay = normalize_answer(generated);
        gold_answers.iter().any(|g| {
            let g = normalize_answer(g);
            !g.is_empty() && hay.contains(&g)
        })
    } else {
        gold_answers
            .iter()
            .any(|g| !g.is_empty() && generated.contains(g.as_str()))
    }
}

/// [`contains_answer`] with normalization on.
pub fn contains_accuracy(gold_answers: &[String], generated: &str) -> bool {
    contains_answer(gold_answers, generated, true)
}

/// `exp(-mean(logprobs))`.
pub fn perplexity(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(&bad) = logprobs.iter().find(|v| !v.is_finite() || **v > 0.0) {
        return Err(Error::InvalidLogProb(bad));
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

/// How one cell emphasizes its input.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodSpec {
    /// No emphasis.
    NoEmphasis,
    /// Marked prompting with a marker pair.
    Marked(MarkerPair),
    /// Attention steering on a head set.
    Steering { heads: BTreeSet<HeadId>, alpha: f32 },
}

impl MethodSpec {
    /// `NE`, `MP-<marker name>` or `AS`.
    pub fn label(&self) -> String {
        match self {
            MethodSpec::NoEmphasis => "NE".into(),
            MethodSpec::Marked(m) => format!("MP-{}", m.name),
            MethodSpec::Steering { .. } => "AS".into(),
        }
    }

    /// Rejects combinations outside the evaluation grid.
    pub fn check_target(&self, target: EmphasisTarget) -> Result<()> {
        match (self, target) {
            (MethodSpec::NoEmphasis, EmphasisTarget::None) => Ok(()),
            (MethodSpec::NoEmphasis, t) => Err(Error::InvalidCombination(format!(
                "NE takes no emphasis target, got {t}"
            ))),
            (_, EmphasisTarget::None) => Err(Error::InvalidCombination(format!(
                "{} needs an emphasis target",
                self.label()
            ))),
            (MethodSpec::Steering { .. }, EmphasisTarget::QuestionAndContext) => Err(
                Error::InvalidCombination("AS is undefined for the question+context target".into()),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Which tokens perplexity is measured over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplScope {
    /// The rendered prompt only.
    #[default]
    Prompt,
    /// The prompt followed by a space and the first gold answer.
    PromptAndGold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub decode: DecodeConfig,
    pub normalize: bool,
    pub ppl_scope: PplScope,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::default(),
            normalize: true,
            ppl_scope: PplScope::Prompt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleOutcome {
    pub id: String,
    pub correct: bool,
    pub generated: String,
    pub ppl: f64,
}

/// One (order, method, target) cell over one corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub dataset: String,
    pub order: PromptOrder,
    pub method: String,
    pub target: EmphasisTarget,
    /// `correct / n`; 0 when `n == 0`.
    pub accuracy: f64,
    /// Mean of per-example perplexities; 0 when `n == 0`.
    pub mean_ppl: f64,
    pub n: usize,
    pub per_example: Vec<ExampleOutcome>,
    /// Ids whose prompt did not fit the model context.
    pub skipped: Vec<String>,
    pub degenerate_rows: usize,
}

impl CellResult {
    pub fn correct(&self) -> usize {
        self.per_example.iter().filter(|e| e.correct).count()
    }
}

/// Emphasized prompt for one example under a method and target.
pub fn build_prompt(
    example: &RcExample,
    order: PromptOrder,
    method: &MethodSpec,
    target: EmphasisTarget,
) -> Result<RenderedPrompt> {
    let rp = render(example, order);
    match method {
        MethodSpec::Marked(marker) => apply_markers(&rp, target, marker),
        _ => Ok(rp),
    }
}

enum Scored {
    Done(ExampleOutcome, usize),
    Skipped(String),
}

fn evaluate_example(
    model: &Model,
    example: &RcExample,
    order: PromptOrder,
    method: &MethodSpec,
    target: EmphasisTarget,
    opts: &EvalOptions,
) -> Result<Scored> {
    let tok = model.tokenizer();
    let max_len = model.config().max_seq_len;
    let rp = build_prompt(example, order, method, target)?;
    let tt = tok.tokenize(&rp.text);
    if tt.len() > max_len {
        return Ok(Scored::Skipped(example.id.clone()));
    }
    let steering = match method {
        MethodSpec::Steering { heads, alpha } => {
            let segment = emphasized_token_span(&rp, &tt, Segment::for_target(target)?, true)?;
            Some(SteeringConfig::with_identity_alpha(
                heads.clone(),
                *alpha,
                segment,
            )?)
        }
        _ => None,
    };

    let gen = generate_scored(model, &tt.token_ids, opts.decode, steering.as_ref())?;
    let generated = tok.detokenize(&gen.new_tokens)?;
    let correct = contains_answer(&example.gold_answers, &generated, opts.normalize);

    let logprobs = match opts.ppl_scope {
        PplScope::Prompt => gen.prompt_logprobs,
        PplScope::PromptAndGold => {
            let full = tok.tokenize(&format!("{} {}", rp.text, example.gold_answers[0]));
            if full.len() > max_len {
                return Ok(Scored::Skipped(example.id.clone()));
            }
            sequence_logprobs_steered(model, &full.token_ids, steering.as_ref())?
        }
    };
    let ppl = perplexity(&logprobs)?;
    Ok(Scored::Done(
        ExampleOutcome {
            id: example.id.clone(),
            correct,
            generated,
            ppl,
        },
        gen.degenerate_rows,
    ))
}

/// Evaluates one cell: render, emphasize, (steer and) generate, score.
///
/// Examples run in parallel on the ambient rayon pool and are reduced in
/// corpus order, so the result does not depend on the worker count.
pub fn evaluate_cell(
    model: &Model,
    corpus: &Corpus,
    order: PromptOrder,
    method: &MethodSpec,
    target: EmphasisTarget,
    opts: &EvalOptions,
) -> Result<CellResult> {
    method.check_target(target)?;
    let scored: Vec<Result<Scored>> = corpus
        .examples()
        .par_iter()
        .map(|ex| evaluate_example(model, ex, order, method, target, opts))
        .collect();

    let mut per_example = Vec::with_capacity(corpus.len());
    let mut skipped = Vec::new();
    let mut degenerate_rows = 0;
    for s in scored {
        match s? {
            Scored::Done(outcome, degenerate) => {
                degenerate_rows += degenerate;
                per_example.push(outcome);
            }
            Scored::Skipped(id) => skipped.push(id),
        }
    }
    if !skipped.is_empty() {
        log::warn!(
            "{}: {} example(s) skipped in {order}/{}/{target}: prompt longer than max_seq_len",
            corpus.name,
            skipped.len(),
            method.label()
        );
    }
    let n = per_example.len();
    let correct = per_example.iter().filter(|e| e.correct).count();
    let (accuracy, mean_ppl) = if n == 0 {
        (0.0, 0.0)
    } else {
        (
            correct as f64 / n as f64,
            per_example.iter().map(|e| e.ppl).sum::<f64>() / n as f64,
        )
    };
    Ok(CellResult {
        dataset: corpus.name.clone(),
        order,
        method: method.label(),
        target,
        accuracy,
        mean_ppl,
        n,
        per_example,
        skipped,
        degenerate_rows,
    })
}

/// Closed-book split of a corpus into questions the model answers without
/// context (known) and the rest (unknown). Both lists keep corpus order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgePartition {
    pub dataset: String,
    pub known_ids: Vec<String>,
    pub unknown_ids: Vec<String>,
}

impl KnowledgePartition {
    pub fn total(&self) -> usize {
        self.known_ids.len() + self.unknown_ids.len()
    }

    /// Closed-book accuracy `|known| / n`.
    pub fn knowledge_amount(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.known_ids.len() as f64 / self.total() as f64
        }
    }

    pub fn known_corpus(&self, corpus: &Corpus) -> Corpus {
        let known: BTreeSet<&str> = self.known_ids.iter().map(String::as_str).collect();
        corpus.filtered(corpus.name.clone(), |e| known.contains(e.id.as_str()))
    }

    pub fn unknown_corpus(&self, corpus: &Corpus) -> Corpus {
        let unknown: BTreeSet<&str> = self.unknown_ids.iter().map(String::as_str).collect();
        corpus.filtered(corpus.name.clone(), |e| unknown.contains(e.id.as_str()))
    }
}

/// Closed-book generation per example; correct answers are "known".
/// Questions too long for the model count as unknown.
pub fn partition_knowledge(
    model: &Model,
    corpus: &Corpus,
    opts: &EvalOptions,
) -> Result<KnowledgePartition> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let tok = model.tokenizer();
    let verdicts: Vec<Result<bool>> = corpus
        .examples()
        .par_iter()
        .map(|ex| {
            let rp = closed_book_render(ex);
            let tt = tok.tokenize(&rp.text);
            if tt.len() > model.config().max_seq_len {
                return Ok(false);
            }
            let gen = generate_scored(model, &tt.token_ids, opts.decode, None)?;
            let text = tok.detokenize(&gen.new_tokens)?;
            Ok(contains_answer(&ex.gold_answers, &text, opts.normalize))
        })
        .collect();
    let mut known_ids = Vec::new();
    let mut unknown_ids = Vec::new();
    for (ex, v) in corpus.iter().zip(verdicts) {
        if v? {
            known_ids.push(ex.id.clone());
        } else {
            unknown_ids.push(ex.id.clone());
        }
    }
    Ok(KnowledgePartition {
        dataset: corpus.name.clone(),
        known_ids,
        unknown_ids,
    })
}

/// Accuracy of a cell on one side of the split; `None` when that side is
/// empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitAccuracy {
    pub n: usize,
    pub accuracy: Option<f64>,
}

impl SplitAccuracy {
    pub fn from_cell(cell: &CellResult) -> Self {
        Self {
            n: cell.n,
            accuracy: (cell.n > 0).then_some(cell.accuracy),
        }
    }
}

impl fmt::Display for SplitAccuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.accuracy {
            Some(a) => write!(f, "{a:.6}"),
            None => f.write_str("n=0"),
        }
    }
}

/// One row of the known/unknown report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnowledgeRow {
    pub model: String,
    pub dataset: String,
    pub order: PromptOrder,
    pub method: String,
    pub target: EmphasisTarget,
    pub knowledge_amount: f64,
    pub known_no_emphasis: SplitAccuracy,
    pub known_emphasis: SplitAccuracy,
    pub unknown_no_emphasis: SplitAccuracy,
    pub unknown_emphasis: SplitAccuracy,
}

/// Cells evaluated on the known and unknown sub-corpora for one emphasis
/// setting, plus the matching no-emphasis baselines.
pub struct KnowledgeCells<'a> {
    pub known_ne: &'a CellResult,
    pub known_emphasis: &'a CellResult,
    pub unknown_ne: &'a CellResult,
    pub unknown_emphasis: &'a CellResult,
}

pub fn knowledge_split_row(
    model: &str,
    partition: &KnowledgePartition,
    cells: KnowledgeCells<'_>,
) -> KnowledgeRow {
    KnowledgeRow {
        model: model.to_owned(),
        dataset: partition.dataset.clone(),
        order: cells.known_emphasis.order,
        method: cells.known_emphasis.method.clone(),
        target: cells.known_emphasis.target,
        knowledge_amount: partition.knowledge_amount(),
        known_no_emphasis: SplitAccuracy::from_cell(cells.known_ne),
        known_emphasis: SplitAccuracy::from_cell(cells.known_emphasis),
        unknown_no_emphasis: SplitAccuracy::from_cell(cells.unknown_ne),
        unknown_emphasis: SplitAccuracy::from_cell(cells.unknown_emphasis),
    }
}
