// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strkit::corpus::{Corpus, RcExample};
use strkit::transformer::{Model, ModelConfig};

const WORDS: &[&str] = &[
    "river", "stone", "castle", "north", "king", "lantern", "seven", "garden", "light", "winter",
    "harbor", "engine", "silver", "Paris", "Ada", "1815", "ocean", "valley", "song", "crown",
];

/// `L=2, N=2, d=32, V=256` with the given seed.
pub fn toy_model(seed: u64) -> Model {
    Model::init_random(ModelConfig::new(2, 2, 32, 256).with_seed(seed)).unwrap()
}

/// Model whose next token is always `token`, whatever the input.
pub fn constant_model(token: u8) -> Model {
    let mut m = toy_model(0);
    m.tensor_mut("ln_f.weight").unwrap().fill(0.0);
    let b = m.tensor_mut("ln_f.bias").unwrap();
    b.fill(0.0);
    b[0] = 1.0;
    let head = m.tensor_mut("lm_head.weight").unwrap();
    head.fill(0.0);
    head[token as usize * 32] = 5.0;
    m
}

/// Model with all-zero logits.
pub fn uniform_model() -> Model {
    let mut m = toy_model(1);
    m.tensor_mut("lm_head.weight").unwrap().fill(0.0);
    m
}

fn sentence(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn toy_corpus(name: &str, n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let (nq, nc) = (rng.random_range(3..7), rng.random_range(8..20));
            let q = format!("{}?", sentence(&mut rng, nq));
            let c = format!("{}.", sentence(&mut rng, nc));
            let answer = WORDS.choose(&mut rng).unwrap().to_string();
            RcExample::new(format!("{name}-{i:03}"), q, c, vec![answer])
        })
        .collect();
    Corpus::new(name, examples).unwrap()
}

/// Random printable text with some multi-byte characters.
pub fn random_text(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    const EXTRA: &[char] = &['é', 'ß', '中', '文', '€', '🙂', ' ', ' ', '*', '<'];
    let len = rng.random_range(1..=max_len);
    let s: String = (0..len)
        .map(|_| {
            if rng.random_bool(0.15) {
                *EXTRA.choose(rng).unwrap()
            } else {
                rng.random_range(b'a'..=b'z') as char
            }
        })
        .collect();
    if s.trim().is_empty() {
        "x".into()
    } else {
        s
    }
}
