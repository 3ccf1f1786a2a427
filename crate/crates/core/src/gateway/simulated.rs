use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{contains_gold, normalize_answer};
use crate::prompts::{identify, PromptRole};
use crate::protocol::SegmentKind;

use super::{fnv1a, GatewayError, GenerationBackend, GenerationRequest, GenerationResult, ScriptedReply};

/// Think-segment spreads of the ideal reasoner by turn. Each step lowers the
/// spread enough that consecutive entropies differ by more than 0.05 nats for
/// any top-k width of at least 2.
const IDEAL_THINK_SPREADS: [f64; 5] = [0.9, 0.6, 0.3, 0.15, 0.05];
const IDEAL_SEARCHES: usize = 2;
const CALM_SPREAD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Two searches, then the correct answer, with steadily falling think
    /// entropy. The verifier is faithful.
    #[default]
    Ideal,
    /// Random search counts, a reasoner that is right about two times in
    /// three, an occasionally misleading verifier and random spreads.
    Noisy,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Ideal => "ideal",
            Profile::Noisy => "noisy",
        })
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ideal" => Ok(Profile::Ideal),
            "noisy" => Ok(Profile::Noisy),
            other => Err(format!("unknown profile {other:?} (expected ideal or noisy)")),
        }
    }
}

/// Per-trace decisions of the noisy profile, shared by every call of one
/// dialogue.
struct Plan {
    searches: usize,
    reasoner_answer: String,
    verifier_fixes: bool,
}

/// Plays the reasoner, the verifier and the final generator from an answer
/// key. The role is read from the system prompt and the turn from the
/// transcript, so the agent is stateless and deterministic given the request
/// seed.
#[derive(Debug, Clone)]
pub struct SimulatedAgent {
    profile: Profile,
    answers: HashMap<String, String>,
    distractors: Vec<String>,
}

impl SimulatedAgent {
    /// `answers` maps question text to the answer the agents converge on.
    pub fn new(profile: Profile, answers: HashMap<String, String>) -> Self {
        let mut distractors: Vec<String> = answers.values().cloned().collect();
        distractors.sort();
        distractors.dedup();
        Self {
            profile,
            answers,
            distractors,
        }
    }

    pub fn profile(&self) -> Profile {
        self.profile
    }

    fn answer_for(&self, question: &str) -> String {
        self.answers
            .get(question)
            .cloned()
            .unwrap_or_else(|| "unknown".to_string())
    }

    fn plan(&self, question: &str, seed: u64) -> Plan {
        let key = self.answer_for(question);
        if self.profile == Profile::Ideal {
            return Plan {
                searches: IDEAL_SEARCHES,
                reasoner_answer: key,
                verifier_fixes: true,
            };
        }
        let mut rng = rng_for(seed, b"plan", question, 0);
        let searches = rng.random_range(1..=5);
        let correct = rng.random_bool(0.65);
        let verifier_fixes = rng.random_bool(0.5);
        let reasoner_answer = if correct {
            key
        } else {
            let words: Vec<&str> = key.split_whitespace().collect();
            let others: Vec<&String> = self.distractors.iter().filter(|d| **d != key).collect();
            if words.len() > 1 && rng.random_bool(0.5) {
                words[0].to_string()
            } else if !others.is_empty() {
                others[rng.random_range(0..others.len())].clone()
            } else {
                "unknown".to_string()
            }
        };
        Plan {
            searches,
            reasoner_answer,
            verifier_fixes,
        }
    }

    fn reasoner(&self, user: &str, seed: u64) -> ScriptedReply {
        let question = first_question(user);
        let turn = user.matches("<feedback>").count();
        let plan = self.plan(&question, seed);
        let mut rng = rng_for(seed, b"reasoner", &question, turn);
        let mut text = String::new();
        if turn > 0 {
            text.push_str("<verify>The feedback is relevant to the question.</verify>");
        }
        if self.profile == Profile::Noisy && rng.random_bool(0.03) {
            text.push_str("<think>Let me pick a document myself.</think><selected_doc>Doc 1</selected_doc>");
        } else if turn < plan.searches {
            let (think, query) = if turn == 0 {
                (
                    "I do not know the answer yet, so I should search for it.",
                    question.clone(),
                )
            } else {
                (
                    "The feedback narrows it down; one more search should confirm it.",
                    format!("{question} details"),
                )
            };
            text.push_str(&format!("<think>{think}</think><search>{query}</search>"));
        } else {
            text.push_str(&format!(
                "<think>I now have enough information to answer.</think><answer>{}</answer>",
                plan.reasoner_answer
            ));
        }
        let reply = ScriptedReply::new(text);
        match self.profile {
            Profile::Ideal => reply.default_spread(CALM_SPREAD).spread(
                SegmentKind::Think,
                IDEAL_THINK_SPREADS[turn.min(IDEAL_THINK_SPREADS.len() - 1)],
            ),
            Profile::Noisy => random_spreads(reply, &mut rng),
        }
    }

    fn verifier(&self, user: &str, seed: u64) -> ScriptedReply {
        let question = first_question(user);
        let turn = user.matches("<information>").count().saturating_sub(1);
        let key = self.answer_for(&question);
        let plan = self.plan(&question, seed);
        let mut rng = rng_for(seed, b"verifier", &question, turn);
        let block = latest_block(user, "information").unwrap_or_default();
        let text = if let Some(proposed) = between(block, "<answer>", "</answer>") {
            let proposed = proposed.trim();
            let settled = if normalize_answer(proposed) == normalize_answer(&key) || plan.verifier_fixes {
                key.clone()
            } else {
                proposed.to_string()
            };
            format!(
                "<verify>The proposed answer {proposed} was checked against the evidence.</verify><final_answer>{settled}</final_answer>"
            )
        } else {
            let docs = doc_lines(block);
            let faithful = self.profile == Profile::Ideal || rng.random_bool(0.85);
            let supporting = docs
                .iter()
                .find(|(_, line)| contains_gold(line, &[&key]).unwrap_or(false))
                .map(|(rank, _)| *rank);
            let chosen = match (faithful, supporting) {
                (true, Some(rank)) => Some((rank, true)),
                (false, _) if !docs.is_empty() => {
                    let (rank, line) = &docs[rng.random_range(0..docs.len())];
                    Some((*rank, contains_gold(line, &[&key]).unwrap_or(false)))
                }
                _ => None,
            };
            match chosen {
                Some((rank, true)) => format!(
                    "<verify>The query targets the question and the results are on topic.</verify><selected_doc>Doc {rank}</selected_doc><response>Doc {rank} supports this: the answer is {key}.</response>"
                ),
                Some((rank, false)) => format!(
                    "<verify>The query is related to the question.</verify><selected_doc>Doc {rank}</selected_doc><response>Doc {rank} gives background but does not settle the question.</response>"
                ),
                None => "<verify>The retrieved documents do not address the question.</verify><response>The query is ineffective; rephrase it around the entity being asked about.</response>".to_string(),
            }
        };
        let reply = ScriptedReply::new(text);
        match self.profile {
            Profile::Ideal => reply.default_spread(CALM_SPREAD),
            Profile::Noisy => random_spreads(reply, &mut rng),
        }
    }

    fn final_generator(&self, user: &str) -> ScriptedReply {
        let trajectory = user;
        let answer = latest_block(trajectory, "final_answer")
            .or_else(|| latest_block(trajectory, "answer"))
            .map(|a| a.trim().to_string())
            .unwrap_or_default();
        ScriptedReply::new(answer)
    }
}

impl GenerationBackend for SimulatedAgent {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        let rejected = |body: &str| GatewayError::Rejected {
            status: 400,
            body: body.to_string(),
        };
        let system = request
            .system_prompt()
            .ok_or_else(|| rejected("missing system prompt"))?;
        let role = identify(system).ok_or_else(|| rejected("unrecognised system prompt"))?;
        let user = request.user_content().unwrap_or_default();
        let seed = request.seed.unwrap_or(0);
        let reply = match role {
            PromptRole::Reasoner => self.reasoner(user, seed),
            PromptRole::Verifier => self.verifier(user, seed),
            PromptRole::FinalGenerator => self.final_generator(user),
        };
        Ok(reply.render(request.top_logprobs_k))
    }
}

fn rng_for(seed: u64, role: &[u8], question: &str, turn: usize) -> ChaCha8Rng {
    let h = fnv1a(&[
        &seed.to_le_bytes(),
        role,
        question.as_bytes(),
        &(turn as u64).to_le_bytes(),
    ]);
    ChaCha8Rng::seed_from_u64(h)
}

fn random_spreads(reply: ScriptedReply, rng: &mut ChaCha8Rng) -> ScriptedReply {
    let mut reply = reply.default_spread(rng.random_range(0.05..0.95));
    for kind in SegmentKind::ALL {
        reply = reply.spread(kind, rng.random_range(0.05..0.95));
    }
    reply
}

fn first_question(user: &str) -> String {
    user.lines()
        .find_map(|l| l.strip_prefix("Question: "))
        .unwrap_or_default()
        .trim()
        .to_string()
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.rfind(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(&text[start..end])
}

/// Content of the last `<tag>...</tag>` block in `text`.
fn latest_block<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    between(text, &format!("<{tag}>"), &format!("</{tag}>"))
}

/// `(rank, line)` for every `Doc {rank}: ...` line.
fn doc_lines(block: &str) -> Vec<(usize, &str)> {
    block
        .lines()
        .filter_map(|line| {
            let rest = line.strip_prefix("Doc ")?;
            let (rank, _) = rest.split_once(':')?;
            Some((rank.trim().parse().ok()?, line))
        })
        .collect()
}
