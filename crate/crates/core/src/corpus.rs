// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reading-comprehension datasets: JSONL loading, validation halving,
//! length filtering and profiling subsets.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::{render, PromptOrder};
use crate::tokenizer::Tokenizer;

/// One (question, context, gold answers) triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RcExample {
    pub id: String,
    pub question: String,
    pub context: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
}

impl RcExample {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        context: impl Into<String>,
        gold_answers: Vec<String>,
    ) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            context: context.into(),
            gold_answers,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.context.trim().is_empty() {
            return Err("empty context".into());
        }
        if self.gold_answers.is_empty() {
            return Err("answers list is empty".into());
        }
        if self.gold_answers.iter().any(|a| a.trim().is_empty()) {
            return Err("answers contains an empty string".into());
        }
        Ok(())
    }
}

/// Ordered, id-unique collection of examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    examples: Vec<RcExample>,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate ids.
    pub fn new(name: impl Into<String>, examples: Vec<RcExample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            examples,
        })
    }

    pub fn examples(&self) -> &[RcExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, RcExample> {
        self.examples.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    /// Sub-corpus of the examples satisfying `keep`, order preserved.
    pub fn filtered(
        &self,
        name: impl Into<String>,
        mut keep: impl FnMut(&RcExample) -> bool,
    ) -> Corpus {
        Corpus {
            name: name.into(),
            examples: self.examples.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    fn pick(&self, name: String, mut indices: Vec<usize>) -> Corpus {
        indices.sort_unstable();
        Corpus {
            name,
            examples: indices
                .into_iter()
                .map(|i| self.examples[i].clone())
                .collect(),
        }
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a RcExample;
    type IntoIter = std::slice::Iter<'a, RcExample>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    question: Option<String>,
    context: Option<String>,
    answers: Option<Vec<String>>,
}

/// Parses JSONL text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_jsonl(name: impl Into<String>, text: &str) -> Result<Corpus> {
    let mut examples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord {
            line: line_no,
            reason,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let ex = RcExample {
            id: raw
                .id
                .ok_or_else(|| malformed("missing field `id`".into()))?,
            question: raw
                .question
                .ok_or_else(|| malformed("missing field `question`".into()))?,
            context: raw
                .context
                .ok_or_else(|| malformed("missing field `context`".into()))?,
            gold_answers: raw
                .answers
                .ok_or_else(|| malformed("missing field `answers`".into()))?,
        };
        ex.check().map_err(malformed)?;
        examples.push(ex);
    }
    Corpus::new(name, examples)
}

pub fn load_jsonl(name: impl Into<String>, path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(name, &text)
}

/// Serializes a corpus back to the JSONL schema.
pub fn to_jsonl(corpus: &Corpus) -> Result<String> {
    let mut out = String::new();
    for ex in corpus {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    Ok(out)
}

/// Seed for the validation halving. The two output fractions are fixed at
/// one half each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub seed: u64,
}

/// Randomly halves a corpus into (valid, test).
///
/// The permutation is a seeded ChaCha8 shuffle of the indices; the first
/// `ceil(n/2)` shuffled indices go to the first output. Both outputs keep
/// the original corpus order.
pub fn split_validation(corpus: &Corpus, spec: SplitSpec) -> Result<(Corpus, Corpus)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = corpus.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    perm.shuffle(&mut rng);
    let first = n.div_ceil(2);
    let test = perm.split_off(first);
    Ok((
        corpus.pick(corpus.name.clone(), perm),
        corpus.pick(corpus.name.clone(), test),
    ))
}

/// Token count of the longer of the two unemphasized renderings.
pub fn max_rendered_len(example: &RcExample, tokenizer: &Tokenizer) -> usize {
    PromptOrder::ALL
        .iter()
        .map(|&order| tokenizer.tokenize(&render(example, order).text).len())
        .max()
        .unwrap_or(0)
}

/// Keeps the examples whose longest unemphasized rendering fits in
/// `max_len` tokens.
pub fn filter_by_length(corpus: &Corpus, tokenizer: &Tokenizer, max_len: usize) -> Corpus {
    corpus.filtered(corpus.name.clone(), |ex| {
        max_rendered_len(ex, tokenizer) <= max_len
    })
}

/// Uniform sample of `n` examples without replacement, in corpus order.
pub fn sample_profiling_subset(corpus: &Corpus, n: usize, seed: u64) -> Result<Corpus> {
    if n > corpus.len() {
        return Err(Error::SubsetTooLarge {
            requested: n,
            available: corpus.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, corpus.len(), n).into_vec();
    Ok(corpus.pick(corpus.name.clone(), picked))
}
