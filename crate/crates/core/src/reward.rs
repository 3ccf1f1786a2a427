//! Adversarial outcome rewards and the verifier's process advantage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dialogue::{Step, Termination, Trace};
use crate::entropy::{action_entropies, action_entropy, classify_tail, EntropyPattern};
use crate::metrics::{contains_gold, em, f1};
use crate::protocol::{AgentRole, SegmentKind};
use crate::retrieval::Document;

/// Tolerance, in bucket units, within which a scaled difference snaps to the
/// next bucket edge. Keeps `0.7 - 0.45` in the 0.25 bucket.
const BUCKET_EDGE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("verifier step has no credited segment with policy tokens")]
    NoCreditedSegments,
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

fn default_pattern_scores() -> BTreeMap<EntropyPattern, f64> {
    BTreeMap::from([
        (EntropyPattern::D, 1.0),
        (EntropyPattern::ID, 0.8),
        (EntropyPattern::F, 0.6),
        (EntropyPattern::DI, 0.4),
        (EntropyPattern::I, 0.2),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda: f64,
    pub n_buckets: u32,
    pub delta: f64,
    pub pattern_scores: BTreeMap<EntropyPattern, f64>,
    pub monitored_reasoner_kinds: Vec<SegmentKind>,
    pub credited_verifier_kinds: Vec<SegmentKind>,
    pub max_turns: usize,
    pub top_k: usize,
    pub group_size: usize,
    pub epsilon_clip: f64,
    pub beta_kl: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            n_buckets: 4,
            delta: 0.05,
            pattern_scores: default_pattern_scores(),
            monitored_reasoner_kinds: vec![SegmentKind::Think],
            credited_verifier_kinds: vec![SegmentKind::Verify, SegmentKind::Response],
            max_turns: 5,
            top_k: 3,
            group_size: 5,
            epsilon_clip: 0.2,
            beta_kl: 0.001,
        }
    }
}

fn non_negative(x: f64) -> bool {
    x >= 0.0
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |m: String| Err(RewardError::InvalidConfig(m));
        if !non_negative(self.lambda) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.n_buckets == 0 {
            return bad("n_buckets must be >= 1".into());
        }
        if !non_negative(self.delta) {
            return bad(format!("delta must be >= 0, got {}", self.delta));
        }
        for p in EntropyPattern::ALL {
            match self.pattern_scores.get(&p) {
                None => return bad(format!("pattern_scores is missing {p}")),
                Some(s) if !(0.0..=1.0).contains(s) => {
                    return bad(format!("pattern score for {p} must lie in [0, 1], got {s}"))
                }
                _ => {}
            }
        }
        if let Some(k) = self
            .monitored_reasoner_kinds
            .iter()
            .find(|k| !AgentRole::Reasoner.allows(**k))
        {
            return bad(format!("{k} is not a reasoner action"));
        }
        if let Some(k) = self
            .credited_verifier_kinds
            .iter()
            .find(|k| !AgentRole::Verifier.allows(**k))
        {
            return bad(format!("{k} is not a verifier action"));
        }
        if self.max_turns == 0 {
            return bad("max_turns must be >= 1".into());
        }
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if !non_negative(self.epsilon_clip) || !non_negative(self.beta_kl) {
            return bad("epsilon_clip and beta_kl must be >= 0".into());
        }
        Ok(())
    }

    pub fn pattern_score(&self, pattern: EntropyPattern) -> f64 {
        self.pattern_scores
            .get(&pattern)
            .copied()
            .unwrap_or_else(|| default_pattern_scores()[&pattern])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub f1_r: f64,
    pub f1_v: f64,
    pub em_r: f64,
    pub em_v: f64,
    pub bonus_r: f64,
    pub bonus_v: f64,
    pub r_r: f64,
    pub r_v: f64,
    pub clarity_per_verifier_step: Vec<f64>,
    pub impact: f64,
    pub proc_adv_per_verifier_step: Vec<f64>,
}

impl RewardBreakdown {
    pub fn reward(&self, agent: AgentRole) -> f64 {
        match agent {
            AgentRole::Reasoner => self.r_r,
            AgentRole::Verifier => self.r_v,
        }
    }
}

/// Rounds `x` toward zero to a multiple of `1/n`.
pub fn bin_diff(x: f64, n: u32) -> f64 {
    let n = f64::from(n.max(1));
    let scaled = x.abs() * n;
    let next = scaled.ceil();
    let buckets = if next - scaled < BUCKET_EDGE_SNAP {
        next
    } else {
        scaled.floor()
    };
    let magnitude = buckets / n;
    if x < 0.0 {
        -magnitude
    } else {
        magnitude
    }
}

/// Bonus for beating the counterpart by at least one bucket.
pub fn adversarial_bonus(f1_self: f64, f1_other: f64, cfg: &RewardConfig) -> f64 {
    let margin = bin_diff(f1_self - f1_other, cfg.n_buckets).max(0.0);
    if margin == 0.0 {
        0.0
    } else {
        cfg.lambda * margin
    }
}

pub fn adversarial_outcome(f1_self: f64, f1_other: f64, cfg: &RewardConfig) -> f64 {
    f1_self + adversarial_bonus(f1_self, f1_other, cfg)
}

/// Confidence of one verifier step, signed by whether it kept the gold answer
/// that the retrieved documents support.
pub fn clarity(step: &Step, docs: &[Document], golds: &[String], cfg: &RewardConfig) -> Result<f64, RewardError> {
    let credited: Vec<_> = step
        .segments
        .iter()
        .filter(|s| s.is_policy() && cfg.credited_verifier_kinds.contains(&s.kind))
        .collect();
    let entropies: Vec<f64> = credited.iter().filter_map(|s| action_entropy(s).ok()).collect();
    if entropies.is_empty() {
        return Err(RewardError::NoCreditedSegments);
    }
    let h = entropies.iter().sum::<f64>() / entropies.len() as f64;
    let supported = docs
        .iter()
        .any(|d| contains_gold(&format!("{} {}", d.title, d.text), golds).unwrap_or(false));
    if !supported {
        return Ok(0.0);
    }
    let kept = credited.iter().any(|s| contains_gold(&s.text, golds).unwrap_or(false));
    let sign = if kept { 1.0 } else { -1.0 };
    Ok((-h).exp() * sign)
}

/// Mean pattern score of the last three entropies of each monitored reasoner
/// kind. Kinds with fewer than three actions score as flat.
pub fn impact(trace: &Trace, cfg: &RewardConfig) -> f64 {
    let neutral = cfg.pattern_score(EntropyPattern::F);
    if cfg.monitored_reasoner_kinds.is_empty() {
        return neutral;
    }
    let total: f64 = cfg
        .monitored_reasoner_kinds
        .iter()
        .map(|kind| {
            let seq: Vec<f64> = action_entropies(trace, AgentRole::Reasoner, &[*kind])
                .into_iter()
                .map(|a| a.value)
                .collect();
            classify_tail(&seq, cfg.delta).map_or(neutral, |p| cfg.pattern_score(p))
        })
        .sum();
    total / cfg.monitored_reasoner_kinds.len() as f64
}

/// Per-verifier-step clarity (0 for steps without credited tokens), the
/// trace impact, and `f1_r * clarity * impact` per step.
pub fn process_advantage(trace: &Trace, f1_r: f64, cfg: &RewardConfig) -> (Vec<f64>, f64, Vec<f64>) {
    let impact = impact(trace, cfg);
    let clarities: Vec<f64> = trace
        .steps
        .iter()
        .filter(|s| s.agent == AgentRole::Verifier)
        .map(|step| {
            let docs: &[Document] = trace
                .retrievals
                .iter()
                .find(|r| r.turn == step.turn)
                .map_or(&[], |r| r.documents.as_slice());
            clarity(step, docs, &trace.gold_answers, cfg).unwrap_or(0.0)
        })
        .collect();
    let proc = clarities
        .iter()
        .map(|c| if f1_r == 0.0 { 0.0 } else { f1_r * c * impact })
        .collect();
    (clarities, impact, proc)
}

fn answer_scores(answer: Option<&str>, golds: &[String]) -> (f64, f64) {
    match answer {
        Some(a) if !golds.is_empty() => (f1(a, golds).unwrap_or(0.0), em(a, golds).unwrap_or(0.0)),
        _ => (0.0, 0.0),
    }
}

/// Scores a finished trace. An agent that broke the protocol gets zero F1, EM
/// and reward.
pub fn score_trace(trace: &Trace, cfg: &RewardConfig) -> RewardBreakdown {
    let (mut f1_r, mut em_r) = answer_scores(trace.reasoner_answer.as_deref(), &trace.gold_answers);
    let (mut f1_v, mut em_v) = answer_scores(trace.verifier_answer.as_deref(), &trace.gold_answers);
    if trace.termination == Termination::ProtocolError {
        match trace.incident.as_ref().and_then(|i| i.agent) {
            Some(AgentRole::Reasoner) => (f1_r, em_r) = (0.0, 0.0),
            Some(AgentRole::Verifier) => (f1_v, em_v) = (0.0, 0.0),
            None => {}
        }
    }
    let bonus_r = adversarial_bonus(f1_r, f1_v, cfg);
    let bonus_v = adversarial_bonus(f1_v, f1_r, cfg);
    let (clarity_per_verifier_step, impact, proc_adv_per_verifier_step) = process_advantage(trace, f1_r, cfg);
    RewardBreakdown {
        f1_r,
        f1_v,
        em_r,
        em_v,
        bonus_r,
        bonus_v,
        r_r: f1_r + bonus_r,
        r_v: f1_v + bonus_v,
        clarity_per_verifier_step,
        impact,
        proc_adv_per_verifier_step,
    }
}
