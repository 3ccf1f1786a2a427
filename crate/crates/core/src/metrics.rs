//! SQuAD-style answer normalization, Exact Match, token F1 and token-contiguous
//! gold containment.

use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no gold answers supplied")]
    NoGolds,
}

/// Normalized answer tokens: lowercase, punctuation and articles removed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NormalizedAnswer {
    pub tokens: Vec<String>,
}

impl NormalizedAnswer {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

pub fn normalize_answer(text: &str) -> NormalizedAnswer {
    let stripped: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    let tokens = stripped
        .split_whitespace()
        .filter(|t| !ARTICLES.contains(t))
        .map(str::to_string)
        .collect();
    NormalizedAnswer { tokens }
}

fn token_f1(pred: &NormalizedAnswer, gold: &NormalizedAnswer) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold.tokens {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred.tokens {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.tokens.len() as f64;
    let recall = overlap as f64 / gold.tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Max token-bag F1 over the gold answers.
pub fn f1(prediction: &str, golds: &[impl AsRef<str>]) -> Result<f64, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::NoGolds);
    }
    let pred = normalize_answer(prediction);
    Ok(golds
        .iter()
        .map(|g| token_f1(&pred, &normalize_answer(g.as_ref())))
        .fold(0.0, f64::max))
}

pub fn em(prediction: &str, golds: &[impl AsRef<str>]) -> Result<f64, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::NoGolds);
    }
    let pred = normalize_answer(prediction);
    let hit = golds.iter().any(|g| normalize_answer(g.as_ref()) == pred);
    Ok(if hit { 1.0 } else { 0.0 })
}

/// True iff some gold's normalized tokens occur contiguously in `text`'s
/// normalized tokens. Golds that normalize to nothing never match.
pub fn contains_gold(text: &str, golds: &[impl AsRef<str>]) -> Result<bool, MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::NoGolds);
    }
    let hay = normalize_answer(text).tokens;
    Ok(golds.iter().any(|g| {
        let needle = normalize_answer(g.as_ref()).tokens;
        !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
    }))
}
