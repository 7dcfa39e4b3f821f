// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level tokenizer with offset tracking.
//!
//! The base vocabulary is the 256 byte values. An optional merge table adds
//! one token per merge: merge `i` joins two existing ids into id `256 + i`.
//! Encoding applies merges greedily by rank, like GPT-2 style BPE but
//! without any pre-tokenization, so every byte of the input belongs to
//! exactly one token.
//!
//! Offsets are half-open byte ranges into the UTF-8 text. A token may end in
//! the middle of a multi-byte character; the byte ranges still tile the text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Number of base (single byte) tokens.
pub const BYTE_VOCAB: usize = 256;

/// Half-open token index range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.start <= pos && pos < self.end
    }
}

/// Output of [`Tokenizer::tokenize`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub text: String,
    pub token_ids: Vec<TokenId>,
    /// One `(start, end)` byte range per token.
    pub offsets: Vec<(usize, usize)>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Minimal token span covering every token whose byte range intersects
    /// `[start, end)`.
    ///
    /// An empty range `(s, s)` maps to the empty span at the token that
    /// contains byte `s`, or at the sequence end when `s == text.len()`.
    pub fn align_span(&self, start: usize, end: usize) -> Result<TokenSpan> {
        let len = self.text.len();
        if start > end || end > len {
            return Err(Error::SpanOutOfRange { start, end, len });
        }
        // first token whose end lies past `start`
        let first = self.offsets.partition_point(|&(_, e)| e <= start);
        if start == end {
            return Ok(TokenSpan::new(first, first));
        }
        // one past the last token that starts before `end`
        let last = self.offsets.partition_point(|&(s, _)| s < end);
        Ok(TokenSpan::new(first, last))
    }
}

/// Byte-level tokenizer with an optional merge table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), usize>,
    pieces: Vec<Vec<u8>>,
}

impl Tokenizer {
    /// Tokenizer with no merges: one token per byte.
    pub fn bytes_only() -> Self {
        Self::with_merges(Vec::new()).expect("empty merge table is valid")
    }

    pub fn with_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let known = pieces.len() as TokenId;
            if a >= known || b >= known {
                return Err(Error::InvalidMerges(format!(
                    "merge {rank} ({a},{b}) references an id not yet defined"
                )));
            }
            if ranks.insert((a, b), rank).is_some() {
                return Err(Error::InvalidMerges(format!(
                    "merge {rank} ({a},{b}) repeats an earlier merge"
                )));
            }
            let mut piece = pieces[a as usize].clone();
            piece.extend_from_slice(&pieces[b as usize]);
            pieces.push(piece);
        }
        Ok(Self {
            merges,
            ranks,
            pieces,
        })
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    /// Raw bytes of a single token.
    pub fn token_bytes(&self, id: TokenId) -> Result<&[u8]> {
        self.pieces
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownTokenId(id))
    }

    pub fn tokenize(&self, text: &str) -> TokenizedText {
        let bytes = text.as_bytes();
        let mut ids: Vec<TokenId> = bytes.iter().map(|&b| b as TokenId).collect();
        let mut offsets: Vec<(usize, usize)> = (0..bytes.len()).map(|i| (i, i + 1)).collect();

        if !self.merges.is_empty() {
            loop {
                let best = ids
                    .windows(2)
                    .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                    .min();
                let Some(rank) = best else { break };
                let (a, b) = self.merges[rank];
                let merged = (BYTE_VOCAB + rank) as TokenId;

                let mut new_ids = Vec::with_capacity(ids.len());
                let mut new_offsets = Vec::with_capacity(ids.len());
                let mut i = 0;
                while i < ids.len() {
                    if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                        new_ids.push(merged);
                        new_offsets.push((offsets[i].0, offsets[i + 1].1));
                        i += 2;
                    } else {
                        new_ids.push(ids[i]);
                        new_offsets.push(offsets[i]);
                        i += 1;
                    }
                }
                ids = new_ids;
                offsets = new_offsets;
            }
        }

        TokenizedText {
            text: text.to_owned(),
            token_ids: ids,
            offsets,
        }
    }

    /// Concatenated bytes of `ids`.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(out)
    }

    /// Inverse of [`Tokenizer::tokenize`].
    ///
    /// Id sequences that cut through a multi-byte character (possible for
    /// sub-spans of a tokenized text) decode with U+FFFD at the cut.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }
}
