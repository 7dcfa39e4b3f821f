// SPDX-License-Identifier: MIT OR Apache-2.0

//! Post-softmax attention steering and segment attention mass.
//!
//! Steering multiplies every attention probability outside the emphasized
//! segment by `alpha` and renormalizes the row. Sums are accumulated in f64
//! left to right; stored probabilities stay f32.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tokenizer::TokenSpan;
use crate::transformer::AttentionMaps;

/// Steering factor used throughout the experiments.
pub const DEFAULT_ALPHA: f32 = 1e-3;

/// One attention head, ordered by `(layer, head)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    /// Every head of an `n_layers x n_heads` model in `(layer, head)` order.
    pub fn all(n_layers: usize, n_heads: usize) -> Vec<HeadId> {
        (0..n_layers)
            .flat_map(|l| (0..n_heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }

    pub fn check(&self, n_layers: usize, n_heads: usize) -> Result<()> {
        if self.layer >= n_layers || self.head >= n_heads {
            return Err(Error::HeadOutOfRange {
                layer: self.layer,
                head: self.head,
                n_layers,
                n_heads,
            });
        }
        Ok(())
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let inner = s
            .trim()
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| format!("expected \"(layer,head)\", got {s:?}"))?;
        let (l, h) = inner
            .split_once(',')
            .ok_or_else(|| format!("expected \"(layer,head)\", got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
        Ok(HeadId::new(parse(l)?, parse(h)?))
    }
}

impl Serialize for HeadId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HeadId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Heads to steer, the scaling factor and the emphasized token segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringConfig {
    pub heads: BTreeSet<HeadId>,
    pub alpha: f32,
    pub segment: TokenSpan,
}

impl SteeringConfig {
    /// Requires `0 <= alpha < 1`.
    pub fn new(heads: BTreeSet<HeadId>, alpha: f32, segment: TokenSpan) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidSteering(format!(
                "alpha must satisfy 0 <= alpha < 1, got {alpha}"
            )));
        }
        Ok(Self {
            heads,
            alpha,
            segment,
        })
    }

    /// Like [`SteeringConfig::new`] but also accepts `alpha == 1`, the
    /// identity factor. Only meant for identity checks.
    pub fn with_identity_alpha(
        heads: BTreeSet<HeadId>,
        alpha: f32,
        segment: TokenSpan,
    ) -> Result<Self> {
        if alpha == 1.0 {
            return Ok(Self {
                heads,
                alpha,
                segment,
            });
        }
        Self::new(heads, alpha, segment)
    }

    /// Bounds checks against a model shape and sequence length.
    pub fn validate(&self, n_layers: usize, n_heads: usize, seq_len: usize) -> Result<()> {
        for h in &self.heads {
            h.check(n_layers, n_heads)?;
        }
        if self.segment.start > self.segment.end || self.segment.end > seq_len {
            return Err(Error::SpanOutOfRange {
                start: self.segment.start,
                end: self.segment.end,
                len: seq_len,
            });
        }
        Ok(())
    }

    pub fn applies_to(&self, layer: usize, head: usize) -> bool {
        self.heads.contains(&HeadId::new(layer, head))
    }
}

/// What happened to a row passed to [`steer_attention_row`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowOutcome {
    /// Row rescaled and renormalized.
    Steered,
    /// Identity case (`alpha == 1` or no position outside the segment);
    /// the row is untouched.
    Unchanged,
    /// All mass lay outside the segment and `alpha == 0`; the row is left
    /// unscaled.
    Degenerate,
}

/// Steers one attention row in place. `in_segment(j)` tells whether key
/// position `j` belongs to the emphasized segment.
pub fn steer_row_with(
    row: &mut [f32],
    in_segment: impl Fn(usize) -> bool,
    alpha: f32,
) -> RowOutcome {
    if alpha == 1.0 || (0..row.len()).all(&in_segment) {
        return RowOutcome::Unchanged;
    }
    let mut sum = 0.0f64;
    for (j, &p) in row.iter().enumerate() {
        let scaled = if in_segment(j) { p } else { p * alpha };
        sum += scaled as f64;
    }
    if sum <= 0.0 {
        return RowOutcome::Degenerate;
    }
    for (j, p) in row.iter_mut().enumerate() {
        let scaled = if in_segment(j) {
            *p as f64
        } else {
            (*p * alpha) as f64
        };
        *p = (scaled / sum) as f32;
    }
    RowOutcome::Steered
}

/// Steers a probability row given an explicit boolean segment mask.
pub fn steer_attention_row(row: &mut [f32], segment_mask: &[bool], alpha: f32) -> RowOutcome {
    assert_eq!(row.len(), segment_mask.len(), "row and mask lengths differ");
    steer_row_with(row, |j| segment_mask[j], alpha)
}

/// Closed form of the post-steering segment mass for a row whose segment
/// mass was `s`.
pub fn steered_segment_mass(s: f64, alpha: f64) -> f64 {
    s / (s + alpha * (1.0 - s))
}

/// Attention mass landing on a token span, averaged over every layer, head
/// and query row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentMass {
    /// Mean per-row mass divided by the span length.
    pub per_token: f64,
    /// Mean per-row summed mass over the span.
    pub raw: f64,
}

pub fn segment_attention_mass(attn: &AttentionMaps, span: TokenSpan) -> Result<SegmentMass> {
    let t = attn.seq_len();
    if span.start > span.end || span.end > t {
        return Err(Error::SpanOutOfRange {
            start: span.start,
            end: span.end,
            len: t,
        });
    }
    if span.is_empty() || t == 0 {
        return Ok(SegmentMass {
            per_token: 0.0,
            raw: 0.0,
        });
    }
    let mut total = 0.0f64;
    let mut rows = 0usize;
    for layer in 0..attn.n_layers() {
        for head in 0..attn.n_heads() {
            for q in 0..t {
                let row = attn.row(layer, head, q);
                total += row[span.start..span.end]
                    .iter()
                    .map(|&p| p as f64)
                    .sum::<f64>();
                rows += 1;
            }
        }
    }
    let raw = total / rows as f64;
    Ok(SegmentMass {
        per_token: raw / span.len() as f64,
        raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alpha_one_is_identity() {
        let mut row = vec![0.1f32, 0.2, 0.3, 0.4];
        let before = row.clone();
        assert_eq!(
            steer_attention_row(&mut row, &[true, false, false, true], 1.0),
            RowOutcome::Unchanged
        );
        assert_eq!(row, before);
    }

    #[test]
    fn hand_arithmetic_example() {
        // scale [0.5, 0.3, 0.2] by [1, a, a] and divide by 0.5 + 0.5a = 0.5005
        let mut row = vec![0.5f32, 0.3, 0.2];
        assert_eq!(
            steer_attention_row(&mut row, &[true, false, false], 1e-3),
            RowOutcome::Steered
        );
        let expected = [0.5 / 0.5005, 0.0003 / 0.5005, 0.0002 / 0.5005];
        for (got, want) in row.iter().zip(expected) {
            assert!((*got as f64 - want).abs() < 1e-7, "{got} vs {want}");
        }
        assert!((row[0] as f64 - 0.999001).abs() < 1e-6);
        assert!((row[1] as f64 - 0.000599401).abs() < 1e-9);
        assert!((row[2] as f64 - 0.000399600).abs() < 1e-9);
    }

    #[test]
    fn full_segment_is_identity() {
        let mut row = vec![0.25f32, 0.5, 0.25];
        let before = row.clone();
        for alpha in [0.0, 1e-3, 0.5] {
            assert_eq!(
                steer_attention_row(&mut row, &[true; 3], alpha),
                RowOutcome::Unchanged
            );
            assert_eq!(row, before);
        }
    }

    #[test]
    fn degenerate_row_falls_back() {
        let mut row = vec![0.6f32, 0.4, 0.0];
        let before = row.clone();
        assert_eq!(
            steer_attention_row(&mut row, &[false, false, true], 0.0),
            RowOutcome::Degenerate
        );
        assert_eq!(row, before);
    }

    #[test]
    fn alpha_bounds() {
        let seg = TokenSpan::new(0, 1);
        assert!(SteeringConfig::new(BTreeSet::new(), 1.0, seg).is_err());
        assert!(SteeringConfig::new(BTreeSet::new(), -0.1, seg).is_err());
        assert!(SteeringConfig::new(BTreeSet::new(), 0.0, seg).is_ok());
        assert!(SteeringConfig::with_identity_alpha(BTreeSet::new(), 1.0, seg).is_ok());
        assert!(SteeringConfig::with_identity_alpha(BTreeSet::new(), 1.5, seg).is_err());
    }

    #[test]
    fn head_id_text_round_trip() {
        let h = HeadId::new(3, 11);
        assert_eq!(h.to_string(), "(3,11)");
        assert_eq!("( 3, 11 )".parse::<HeadId>().unwrap(), h);
        assert!("3,11".parse::<HeadId>().is_err());
        let json = serde_json::to_string(&vec![h]).unwrap();
        assert_eq!(json, r#"["(3,11)"]"#);
    }

    /// Brute-force oracle over a causal T x T pattern with uniform rows.
    fn uniform_causal(t: usize, l: usize, n: usize) -> AttentionMaps {
        let mut maps = AttentionMaps::zeros(l, n, t);
        for layer in 0..l {
            for head in 0..n {
                for q in 0..t {
                    let row = maps.row_mut(layer, head, q);
                    for p in row.iter_mut().take(q + 1) {
                        *p = 1.0 / (q + 1) as f32;
                    }
                }
            }
        }
        maps
    }

    #[test]
    fn uniform_full_span_mass() {
        let t = 4;
        let maps = uniform_causal(t, 2, 3);
        // every row puts all its mass on the full span: mean raw mass = 1
        let mut oracle = 0.0;
        for q in 0..t {
            let mut s = 0.0;
            for _ in 0..=q {
                s += 1.0 / (q + 1) as f64;
            }
            oracle += s;
        }
        oracle /= t as f64;
        let m = segment_attention_mass(&maps, TokenSpan::new(0, t)).unwrap();
        assert!((m.raw - oracle).abs() < 1e-6);
        assert!((m.per_token - 0.25).abs() < 1e-6);
    }

    #[test]
    fn mass_edge_cases() {
        let maps = uniform_causal(4, 1, 1);
        let m = segment_attention_mass(&maps, TokenSpan::new(2, 2)).unwrap();
        assert_eq!(m.per_token, 0.0);
        assert!(segment_attention_mass(&maps, TokenSpan::new(0, 5)).is_err());

        let mut point = AttentionMaps::zeros(2, 2, 5);
        for l in 0..2 {
            for h in 0..2 {
                for q in 0..5 {
                    point.row_mut(l, h, q)[0] = 1.0;
                }
            }
        }
        let m = segment_attention_mass(&point, TokenSpan::new(0, 1)).unwrap();
        assert_eq!(m.per_token, 1.0);
    }

    fn prob_row() -> impl Strategy<Value = (Vec<f32>, Vec<bool>)> {
        (2usize..40)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec(0.001f32..1.0, n),
                    prop::collection::vec(any::<bool>(), n),
                )
            })
            .prop_map(|(raw, mask)| {
                let s: f32 = raw.iter().sum();
                (raw.iter().map(|v| v / s).collect(), mask)
            })
    }

    fn mass(row: &[f32], mask: &[bool]) -> f64 {
        row.iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&p, _)| p as f64)
            .sum()
    }

    proptest! {
        #[test]
        fn steered_rows_sum_to_one_and_follow_closed_form((row, mask) in prob_row(), alpha in 0.0f32..0.999) {
            let s = mass(&row, &mask);
            prop_assume!(s > 0.0);
            let mut out = row.clone();
            steer_attention_row(&mut out, &mask, alpha);
            let total: f64 = out.iter().map(|&p| p as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            let s2 = mass(&out, &mask);
            let s_row: f64 = row.iter().map(|&p| p as f64).sum();
            // closed form with S measured relative to the row total
            let expected = steered_segment_mass(s / s_row, alpha as f64);
            prop_assert!((s2 - expected).abs() < 1e-6, "{} vs {}", s2, expected);
            prop_assert!(s2 + 1e-7 >= s / s_row);
        }

        #[test]
        fn within_group_ratios_preserved((row, mask) in prob_row(), alpha in 0.01f32..0.999) {
            let mut out = row.clone();
            steer_attention_row(&mut out, &mask, alpha);
            for i in 0..row.len() {
                for j in 0..row.len() {
                    if mask[i] == mask[j] {
                        let a = out[i] as f64 * row[j] as f64;
                        let b = out[j] as f64 * row[i] as f64;
                        prop_assert!((a - b).abs() < 1e-6);
                    }
                }
            }
        }

        #[test]
        fn twice_alpha_equals_alpha_squared((row, mask) in prob_row(), alpha in 0.0f32..0.999) {
            prop_assume!(mass(&row, &mask) > 0.0);
            let mut twice = row.clone();
            steer_attention_row(&mut twice, &mask, alpha);
            steer_attention_row(&mut twice, &mask, alpha);
            let mut once = row.clone();
            steer_attention_row(&mut once, &mask, alpha * alpha);
            for (a, b) in twice.iter().zip(&once) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
