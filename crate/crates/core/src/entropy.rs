//! Token and action entropies, thresholded trend classification, the five
//! entropy patterns, and per-bucket pattern statistics.
//!
//! All entropies are in nats. Hosted backends only expose the top-k
//! alternatives of each token, so the distribution is truncated: the k listed
//! masses are kept and whatever mass is left over is lumped into one extra
//! outcome. This is a lower bound on the full-vocabulary entropy.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dialogue::Trace;
use crate::protocol::{AgentRole, Segment, SegmentKind, TokenSample};

/// Residual mass below this is treated as zero.
pub const REST_MASS_FLOOR: f64 = 1e-12;
/// Tolerated excess of the listed masses over 1 before rejecting a token.
pub const MASS_OVERFLOW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EntropyError {
    #[error("token {0:?} has no top-k alternatives")]
    EmptyAlternatives(String),
    #[error("top-k masses sum to {0}, more than 1")]
    ProbabilityOverflow(f64),
    #[error("segment has no policy tokens with alternatives")]
    NoPolicyTokens,
    #[error("pattern classification needs exactly 3 entropies, got {0}")]
    WrongLength(usize),
}

/// Entropy of one token's truncated top-k distribution.
pub fn token_entropy(sample: &TokenSample) -> Result<f64, EntropyError> {
    if sample.top_alternatives.is_empty() {
        return Err(EntropyError::EmptyAlternatives(sample.text.clone()));
    }
    let masses: Vec<f64> = sample.top_alternatives.iter().map(|a| a.logprob.exp()).collect();
    let total: f64 = masses.iter().sum();
    if total > 1.0 + MASS_OVERFLOW_TOLERANCE {
        return Err(EntropyError::ProbabilityOverflow(total));
    }
    let rest = (1.0 - total).max(0.0);
    if masses.iter().any(|&p| p >= 1.0 - REST_MASS_FLOOR) {
        return Ok(0.0);
    }
    let mut h: f64 = masses.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    if rest >= REST_MASS_FLOOR {
        h -= rest * rest.ln();
    }
    Ok(h.max(0.0))
}

/// Mean token entropy over a segment's policy tokens. Policy tokens without
/// alternatives are skipped.
pub fn action_entropy(segment: &Segment) -> Result<f64, EntropyError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for token in segment.policy_tokens().filter(|t| !t.top_alternatives.is_empty()) {
        sum += token_entropy(token)?;
        n += 1;
    }
    if n == 0 {
        return Err(EntropyError::NoPolicyTokens);
    }
    Ok(sum / n as f64)
}

/// Entropy of one semantic-step action within a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEntropy {
    pub step_turn: usize,
    pub agent: AgentRole,
    pub kind: SegmentKind,
    pub value: f64,
}

/// Action entropies of `agent`'s segments whose kind is in `kinds`, in trace
/// order. Segments without usable tokens are skipped.
pub fn action_entropies(trace: &Trace, agent: AgentRole, kinds: &[SegmentKind]) -> Vec<ActionEntropy> {
    trace
        .steps
        .iter()
        .filter(|s| s.agent == agent)
        .flat_map(|step| {
            step.segments
                .iter()
                .filter(|seg| seg.is_policy() && kinds.contains(&seg.kind))
                .filter_map(move |seg| {
                    action_entropy(seg).ok().map(|value| ActionEntropy {
                        step_turn: step.turn,
                        agent,
                        kind: seg.kind,
                        value,
                    })
                })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Trend {
    Increase,
    Decrease,
    Flat,
}

/// `delta` strictly beyond `±threshold` is a trend; the boundary is flat.
pub fn classify_trend(delta: f64, threshold: f64) -> Trend {
    if delta > threshold {
        Trend::Increase
    } else if delta < -threshold {
        Trend::Decrease
    } else {
        Trend::Flat
    }
}

/// Shape of the last three monitored action entropies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntropyPattern {
    /// Monotonic decrease.
    D,
    /// Increase then decrease.
    ID,
    /// Flat.
    F,
    /// Decrease then increase.
    DI,
    /// Monotonic increase.
    I,
}

impl EntropyPattern {
    pub const ALL: [EntropyPattern; 5] = [
        EntropyPattern::D,
        EntropyPattern::ID,
        EntropyPattern::F,
        EntropyPattern::DI,
        EntropyPattern::I,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntropyPattern::D => "D",
            EntropyPattern::ID => "ID",
            EntropyPattern::F => "F",
            EntropyPattern::DI => "DI",
            EntropyPattern::I => "I",
        }
    }
}

impl fmt::Display for EntropyPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntropyPattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntropyPattern::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown entropy pattern {s:?}"))
    }
}

/// Maps a pair of consecutive trends to a pattern. A flat leg next to a
/// trend takes that trend's monotone pattern.
pub fn pattern_from_trends(first: Trend, second: Trend) -> EntropyPattern {
    use Trend::*;
    match (first, second) {
        (Decrease, Decrease) | (Flat, Decrease) | (Decrease, Flat) => EntropyPattern::D,
        (Increase, Increase) | (Flat, Increase) | (Increase, Flat) => EntropyPattern::I,
        (Decrease, Increase) => EntropyPattern::DI,
        (Increase, Decrease) => EntropyPattern::ID,
        (Flat, Flat) => EntropyPattern::F,
    }
}

pub fn classify_pattern(entropies: &[f64], threshold: f64) -> Result<EntropyPattern, EntropyError> {
    let [a, b, c] = entropies else {
        return Err(EntropyError::WrongLength(entropies.len()));
    };
    Ok(pattern_from_trends(
        classify_trend(b - a, threshold),
        classify_trend(c - b, threshold),
    ))
}

/// Classifies the last three entropies of a sequence, if there are three.
pub fn classify_tail(entropies: &[f64], threshold: f64) -> Option<EntropyPattern> {
    let tail = entropies.get(entropies.len().checked_sub(3)?..)?;
    classify_pattern(tail, threshold).ok()
}

/// Pattern proportions and accuracies for one bucket of traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternStats {
    pub bucket_label: String,
    pub proportion_per_pattern: BTreeMap<EntropyPattern, f64>,
    /// Only patterns that occur in the bucket have an entry.
    pub accuracy_per_pattern: BTreeMap<EntropyPattern, f64>,
    pub sample_count: usize,
}

impl PatternStats {
    pub fn count(&self, pattern: EntropyPattern) -> usize {
        let p = self.proportion_per_pattern.get(&pattern).copied().unwrap_or(0.0);
        (p * self.sample_count as f64).round() as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct BucketCounts {
    total: HashMap<EntropyPattern, usize>,
    correct: HashMap<EntropyPattern, usize>,
}

/// Streaming pattern aggregation. Accumulators over disjoint partitions can
/// be merged; buckets keep first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatternAggregator {
    threshold: f64,
    monitored: Vec<SegmentKind>,
    order: Vec<String>,
    buckets: HashMap<String, BucketCounts>,
}

impl PatternAggregator {
    pub fn new(threshold: f64, monitored: &[SegmentKind]) -> Self {
        Self {
            threshold,
            monitored: monitored.to_vec(),
            ..Self::default()
        }
    }

    /// Adds a trace; returns its pattern, or `None` if it has fewer than three
    /// monitored reasoner actions and was not counted.
    pub fn add(&mut self, bucket: &str, trace: &Trace, correct: bool) -> Option<EntropyPattern> {
        let seq: Vec<f64> = action_entropies(trace, AgentRole::Reasoner, &self.monitored)
            .into_iter()
            .map(|a| a.value)
            .collect();
        let pattern = classify_tail(&seq, self.threshold)?;
        self.record(bucket, pattern, correct);
        Some(pattern)
    }

    pub fn record(&mut self, bucket: &str, pattern: EntropyPattern, correct: bool) {
        if !self.buckets.contains_key(bucket) {
            self.order.push(bucket.to_string());
        }
        let counts = self.buckets.entry(bucket.to_string()).or_default();
        *counts.total.entry(pattern).or_default() += 1;
        if correct {
            *counts.correct.entry(pattern).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: PatternAggregator) {
        for label in other.order {
            let theirs = &other.buckets[&label];
            if !self.buckets.contains_key(&label) {
                self.order.push(label.clone());
            }
            let ours = self.buckets.entry(label.clone()).or_default();
            for (p, n) in &theirs.total {
                *ours.total.entry(*p).or_default() += n;
            }
            for (p, n) in &theirs.correct {
                *ours.correct.entry(*p).or_default() += n;
            }
        }
    }

    pub fn finish(&self) -> Vec<PatternStats> {
        self.order
            .iter()
            .filter_map(|label| {
                let counts = &self.buckets[label];
                let n: usize = counts.total.values().sum();
                if n == 0 {
                    return None;
                }
                let proportion_per_pattern = EntropyPattern::ALL
                    .into_iter()
                    .map(|p| (p, counts.total.get(&p).copied().unwrap_or(0) as f64 / n as f64))
                    .collect();
                let accuracy_per_pattern = counts
                    .total
                    .iter()
                    .filter(|(_, &t)| t > 0)
                    .map(|(p, &t)| (*p, counts.correct.get(p).copied().unwrap_or(0) as f64 / t as f64))
                    .collect();
                Some(PatternStats {
                    bucket_label: label.clone(),
                    proportion_per_pattern,
                    accuracy_per_pattern,
                    sample_count: n,
                })
            })
            .collect()
    }
}

/// Per-bucket pattern statistics over `(trace, correct)` pairs. Traces with
/// fewer than three monitored reasoner actions are not counted.
pub fn aggregate_patterns<F>(
    traces: &[(Trace, bool)],
    bucket_key: F,
    threshold: f64,
    monitored: &[SegmentKind],
) -> Vec<PatternStats>
where
    F: Fn(usize, &Trace) -> String,
{
    let mut agg = PatternAggregator::new(threshold, monitored);
    for (i, (trace, correct)) in traces.iter().enumerate() {
        agg.add(&bucket_key(i, trace), trace, *correct);
    }
    agg.finish()
}

#[derive(Serialize)]
struct PatternRow<'a> {
    bucket: &'a str,
    pattern: &'static str,
    proportion: f64,
    accuracy: Option<f64>,
    n: usize,
}

/// Writes plot data with columns `bucket,pattern,proportion,accuracy,n`,
/// five rows per bucket. `accuracy` is empty for patterns with no samples.
pub fn write_pattern_csv<W: Write>(stats: &[PatternStats], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for bucket in stats {
        for pattern in EntropyPattern::ALL {
            w.serialize(PatternRow {
                bucket: &bucket.bucket_label,
                pattern: pattern.as_str(),
                proportion: bucket.proportion_per_pattern.get(&pattern).copied().unwrap_or(0.0),
                accuracy: bucket.accuracy_per_pattern.get(&pattern).copied(),
                n: bucket.count(pattern),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
