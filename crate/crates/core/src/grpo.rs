//! Group-relative advantages, token-level advantage sheets and the clipped
//! objective with a KL penalty.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dialogue::Trace;
use crate::protocol::{AgentRole, Origin};
use crate::reward::{RewardBreakdown, RewardConfig};

pub const BATCH_SCHEMA: &str = "arr-batch/1";
/// Groups whose reward spread is below this get all-zero advantages.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("group too small: {0} rollouts, need at least 2")]
    GroupTooSmall(usize),
    #[error("no unmasked tokens")]
    EmptyMask,
    #[error("input lists differ in length: {0}")]
    LengthMismatch(String),
    #[error("batch line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `(r - mean) / std` with the population standard deviation.
pub fn group_normalize(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// G scored traces of one query with their group-normalized rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub query_id: String,
    pub traces: Vec<Trace>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub rewards_r: Vec<f64>,
    pub rewards_v: Vec<f64>,
    pub base_adv_r: Vec<f64>,
    pub base_adv_v: Vec<f64>,
}

impl GroupRollout {
    pub fn from_scored(
        query_id: impl Into<String>,
        traces: Vec<Trace>,
        breakdowns: Vec<RewardBreakdown>,
    ) -> Result<Self, GrpoError> {
        if traces.len() != breakdowns.len() {
            return Err(GrpoError::LengthMismatch(format!(
                "{} traces, {} breakdowns",
                traces.len(),
                breakdowns.len()
            )));
        }
        let rewards_r: Vec<f64> = breakdowns.iter().map(|b| b.r_r).collect();
        let rewards_v: Vec<f64> = breakdowns.iter().map(|b| b.r_v).collect();
        let base_adv_r = group_normalize(&rewards_r)?;
        let base_adv_v = group_normalize(&rewards_v)?;
        Ok(Self {
            query_id: query_id.into(),
            traces,
            breakdowns,
            rewards_r,
            rewards_v,
            base_adv_r,
            base_adv_v,
        })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Token advantage sheets for every trace, in trace order.
    pub fn sheets(&self, cfg: &RewardConfig) -> Vec<TokenAdvantageSheet> {
        (0..self.len())
            .map(|i| {
                assemble_token_advantages(
                    &self.traces[i],
                    &self.breakdowns[i],
                    self.base_adv_r[i],
                    self.base_adv_v[i],
                    cfg,
                )
            })
            .collect()
    }
}

/// One agent's token stream across a trace, environment tokens included.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentTokenSheet {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub loss_mask: Vec<bool>,
}

impl AgentTokenSheet {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenAdvantageSheet {
    pub reasoner: AgentTokenSheet,
    pub verifier: AgentTokenSheet,
}

impl TokenAdvantageSheet {
    pub fn agent(&self, agent: AgentRole) -> &AgentTokenSheet {
        match agent {
            AgentRole::Reasoner => &self.reasoner,
            AgentRole::Verifier => &self.verifier,
        }
    }
}

/// Per-token advantages. Every reasoner token gets `base_adv_r`; verifier
/// tokens get `base_adv_v`, plus the step's process advantage inside credited
/// verifier segments. The mask keeps only the agent's own sampled tokens.
pub fn assemble_token_advantages(
    trace: &Trace,
    breakdown: &RewardBreakdown,
    base_adv_r: f64,
    base_adv_v: f64,
    cfg: &RewardConfig,
) -> TokenAdvantageSheet {
    let mut sheet = TokenAdvantageSheet::default();
    let mut verifier_step = 0;
    for step in &trace.steps {
        let (out, base, own) = match step.agent {
            AgentRole::Reasoner => (&mut sheet.reasoner, base_adv_r, Origin::Reasoner),
            AgentRole::Verifier => (&mut sheet.verifier, base_adv_v, Origin::Verifier),
        };
        let proc = match step.agent {
            AgentRole::Verifier => {
                let p = breakdown
                    .proc_adv_per_verifier_step
                    .get(verifier_step)
                    .copied()
                    .unwrap_or(0.0);
                verifier_step += 1;
                p
            }
            AgentRole::Reasoner => 0.0,
        };
        for segment in &step.segments {
            let credited = step.agent == AgentRole::Verifier
                && segment.origin == Origin::Verifier
                && cfg.credited_verifier_kinds.contains(&segment.kind);
            let value = if credited { base + proc } else { base };
            for token in &segment.tokens {
                out.tokens.push(token.text.clone());
                out.logprobs.push(token.logprob);
                out.values.push(value);
                out.loss_mask.push(segment.origin == own && token.policy_generated);
            }
        }
    }
    sheet
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoInputs {
    pub new_logprobs: Vec<f64>,
    pub old_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mask: Vec<bool>,
    pub epsilon: f64,
    pub beta: f64,
}

/// `exp(ref - new) - (ref - new) - 1`, a non-negative KL estimate.
pub fn kl_estimate(new_logprob: f64, ref_logprob: f64) -> f64 {
    let d = ref_logprob - new_logprob;
    d.exp() - d - 1.0
}

/// Clipped surrogate of one token.
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Mean over unmasked tokens of the clipped surrogate minus `beta` times the
/// KL estimate.
pub fn grpo_objective(inputs: &GrpoInputs) -> Result<f64, GrpoError> {
    let n = inputs.new_logprobs.len();
    let lens = [
        inputs.old_logprobs.len(),
        inputs.ref_logprobs.len(),
        inputs.advantages.len(),
        inputs.mask.len(),
    ];
    if lens.iter().any(|&l| l != n) {
        return Err(GrpoError::LengthMismatch(format!(
            "new {n}, old {}, ref {}, advantages {}, mask {}",
            lens[0], lens[1], lens[2], lens[3]
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in (0..n).filter(|&i| inputs.mask[i]) {
        let ratio = (inputs.new_logprobs[i] - inputs.old_logprobs[i]).exp();
        let surrogate = clipped_term(ratio, inputs.advantages[i], inputs.epsilon);
        sum += surrogate - inputs.beta * kl_estimate(inputs.new_logprobs[i], inputs.ref_logprobs[i]);
        count += 1;
    }
    if count == 0 {
        return Err(GrpoError::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// One `(trace, agent)` record of a training batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub schema: String,
    pub query_id: String,
    pub trace_index: usize,
    pub agent: AgentRole,
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mask: Vec<bool>,
    pub reward: RewardBreakdown,
}

/// Two records per trace, reasoner first.
pub fn batch_records(group: &GroupRollout, sheets: &[TokenAdvantageSheet]) -> Vec<BatchRecord> {
    let mut records = Vec::with_capacity(2 * sheets.len());
    for (i, sheet) in sheets.iter().enumerate() {
        for agent in [AgentRole::Reasoner, AgentRole::Verifier] {
            let s = sheet.agent(agent);
            records.push(BatchRecord {
                schema: BATCH_SCHEMA.to_string(),
                query_id: group.query_id.clone(),
                trace_index: i,
                agent,
                tokens: s.tokens.clone(),
                logprobs: s.logprobs.clone(),
                advantages: s.values.clone(),
                mask: s.loss_mask.clone(),
                reward: group.breakdowns[i].clone(),
            });
        }
    }
    records
}

pub fn write_batch<W: Write>(records: &[BatchRecord], mut out: W) -> Result<(), GrpoError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the group's batch records to a fresh file at `path`.
pub fn export_training_batch(
    group: &GroupRollout,
    sheets: &[TokenAdvantageSheet],
    path: impl AsRef<Path>,
) -> Result<(), GrpoError> {
    let file = BufWriter::new(File::create(path)?);
    write_batch(&batch_records(group, sheets), file)
}

pub fn read_batch(path: impl AsRef<Path>) -> Result<Vec<BatchRecord>, GrpoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: BatchRecord = serde_json::from_str(&line).map_err(|e| GrpoError::SchemaViolation {
            line: i + 1,
            message: e.to_string(),
        })?;
        if record.schema != BATCH_SCHEMA {
            return Err(GrpoError::SchemaViolation {
                line: i + 1,
                message: format!("unsupported schema {:?}", record.schema),
            });
        }
        records.push(record);
    }
    Ok(records)
}
