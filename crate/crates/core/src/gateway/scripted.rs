use std::sync::Mutex;

use crate::protocol::{tag_at, whitespace_chunks, Alternative, SegmentKind, TokenSample};

use super::{FinishReason, GatewayError, GenerationBackend, GenerationRequest, GenerationResult};

/// Top-k distribution of a synthetic token: the sampled token keeps
/// `1 - spread + spread/k`, and `k - 1` filler tokens share the rest evenly.
/// The listed masses sum to one, so the truncated entropy is exact.
pub fn spread_distribution(token: &str, spread: f64, k: usize) -> (f64, Vec<Alternative>) {
    let k = k.max(1);
    let spread = spread.clamp(0.0, 1.0);
    if spread == 0.0 || k == 1 {
        return (0.0, vec![Alternative::new(token, 0.0)]);
    }
    let other = spread / k as f64;
    let top = 1.0 - spread + other;
    let mut alts = vec![Alternative::new(token, top.ln())];
    alts.extend((1..k).map(|j| Alternative::new(format!("<|alt{j}|>"), other.ln())));
    (top.ln(), alts)
}

/// Closed-form entropy of [`spread_distribution`].
pub fn spread_entropy(spread: f64, k: usize) -> f64 {
    let k = k.max(1);
    let spread = spread.clamp(0.0, 1.0);
    if spread == 0.0 || k == 1 {
        return 0.0;
    }
    let other = spread / k as f64;
    let top = 1.0 - spread + other;
    -top * top.ln() - (k - 1) as f64 * other * other.ln()
}

/// Splits `text` into tag tokens and whitespace-led word tokens. Content
/// tokens take the spread returned for the enclosing tag kind; tag markup is
/// deterministic.
pub fn synthesize_tokens<F>(text: &str, k: usize, spread_of: F) -> Vec<TokenSample>
where
    F: Fn(Option<SegmentKind>) -> f64,
{
    let mut tokens = Vec::new();
    let mut current: Option<SegmentKind> = None;
    let mut content_start = 0;
    let mut i = 0;
    let push_content = |tokens: &mut Vec<TokenSample>, piece: &str, kind: Option<SegmentKind>| {
        for chunk in whitespace_chunks(piece) {
            let (lp, alts) = spread_distribution(chunk, spread_of(kind), k);
            tokens.push(TokenSample::policy(chunk, lp, alts));
        }
    };
    while i < text.len() {
        if let Some(tag) = tag_at(text, i) {
            push_content(&mut tokens, &text[content_start..i], current);
            let markup = &text[i..tag.end];
            let (lp, alts) = spread_distribution(markup, 0.0, k);
            tokens.push(TokenSample::policy(markup, lp, alts));
            if let Some(kind) = SegmentKind::from_tag(tag.name) {
                current = if tag.closing { None } else { Some(kind) };
            }
            i = tag.end;
            content_start = i;
        } else {
            i += text[i..].chars().next().map_or(1, char::len_utf8);
        }
    }
    push_content(&mut tokens, &text[content_start..], current);
    tokens
}

/// One canned reply with per-kind token spreads.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedReply {
    pub text: String,
    pub default_spread: f64,
    pub spreads: Vec<(SegmentKind, f64)>,
    pub finish_reason: FinishReason,
}

impl ScriptedReply {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            default_spread: 0.0,
            spreads: Vec::new(),
            finish_reason: FinishReason::Stop,
        }
    }

    pub fn default_spread(mut self, spread: f64) -> Self {
        self.default_spread = spread;
        self
    }

    pub fn spread(mut self, kind: SegmentKind, spread: f64) -> Self {
        self.spreads.push((kind, spread));
        self
    }

    fn spread_for(&self, kind: Option<SegmentKind>) -> f64 {
        kind.and_then(|k| self.spreads.iter().find(|(sk, _)| *sk == k).map(|(_, s)| *s))
            .unwrap_or(self.default_spread)
    }

    pub fn render(&self, k: usize) -> GenerationResult {
        GenerationResult {
            text: self.text.clone(),
            tokens: synthesize_tokens(&self.text, k, |kind| self.spread_for(kind)),
            finish_reason: self.finish_reason,
        }
    }
}

/// Replays replies in order, one per call, regardless of the request.
#[derive(Debug)]
pub struct ScriptedBackend {
    replies: Vec<ScriptedReply>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(replies: Vec<ScriptedReply>) -> Self {
        Self {
            replies,
            cursor: Mutex::new(0),
        }
    }

    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(texts.into_iter().map(ScriptedReply::new).collect())
    }

    pub fn calls(&self) -> usize {
        *self.cursor.lock().unwrap()
    }
}

impl GenerationBackend for ScriptedBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        let mut cursor = self.cursor.lock().unwrap();
        let reply = self
            .replies
            .get(*cursor)
            .ok_or(GatewayError::ScriptExhausted(self.replies.len()))?;
        *cursor += 1;
        Ok(reply.render(request.top_logprobs_k))
    }
}
