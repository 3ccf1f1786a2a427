//! Action-tag protocol spoken by the reasoner and the verifier.
//!
//! Both agents answer with flat sequences of XML-like tags
//! (`<think>…</think><search>…</search>`). Each tag pair is one semantic-step
//! action: the unit that entropies, rewards and advantages are computed on.
//! Tags never nest, and the tag names are fixed (see [`SegmentKind::tag`]).

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Kind of a tagged span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Think,
    Search,
    Verify,
    Answer,
    Feedback,
    Information,
    SelectedDoc,
    Response,
    FinalAnswer,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 9] = [
        SegmentKind::Think,
        SegmentKind::Search,
        SegmentKind::Verify,
        SegmentKind::Answer,
        SegmentKind::Feedback,
        SegmentKind::Information,
        SegmentKind::SelectedDoc,
        SegmentKind::Response,
        SegmentKind::FinalAnswer,
    ];

    /// Exact tag name used on the wire.
    pub fn tag(self) -> &'static str {
        match self {
            SegmentKind::Think => "think",
            SegmentKind::Search => "search",
            SegmentKind::Verify => "verify",
            SegmentKind::Answer => "answer",
            SegmentKind::Feedback => "feedback",
            SegmentKind::Information => "information",
            SegmentKind::SelectedDoc => "selected_doc",
            SegmentKind::Response => "response",
            SegmentKind::FinalAnswer => "final_answer",
        }
    }

    pub fn from_tag(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.tag() == name)
    }

    /// Kinds that only the environment injects (never emitted by a policy).
    pub fn is_environment(self) -> bool {
        matches!(self, SegmentKind::Feedback | SegmentKind::Information)
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SegmentKind {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SegmentKind::from_tag(s).ok_or_else(|| ProtocolError::UnknownTag {
            name: s.to_string(),
            position: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Reasoner,
    Verifier,
}

const REASONER_ACTIONS: [SegmentKind; 4] = [
    SegmentKind::Think,
    SegmentKind::Search,
    SegmentKind::Verify,
    SegmentKind::Answer,
];

const VERIFIER_ACTIONS: [SegmentKind; 4] = [
    SegmentKind::Verify,
    SegmentKind::SelectedDoc,
    SegmentKind::Response,
    SegmentKind::FinalAnswer,
];

impl AgentRole {
    /// Kinds this role is allowed to generate.
    pub fn action_space(self) -> &'static [SegmentKind] {
        match self {
            AgentRole::Reasoner => &REASONER_ACTIONS,
            AgentRole::Verifier => &VERIFIER_ACTIONS,
        }
    }

    pub fn allows(self, kind: SegmentKind) -> bool {
        self.action_space().contains(&kind)
    }

    /// The kind that carries this role's answer.
    pub fn terminal_kind(self) -> SegmentKind {
        match self {
            AgentRole::Reasoner => SegmentKind::Answer,
            AgentRole::Verifier => SegmentKind::FinalAnswer,
        }
    }

    pub fn counterpart(self) -> AgentRole {
        match self {
            AgentRole::Reasoner => AgentRole::Verifier,
            AgentRole::Verifier => AgentRole::Reasoner,
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentRole::Reasoner => f.write_str("reasoner"),
            AgentRole::Verifier => f.write_str("verifier"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Reasoner,
    Verifier,
    Environment,
}

impl From<AgentRole> for Origin {
    fn from(role: AgentRole) -> Self {
        match role {
            AgentRole::Reasoner => Origin::Reasoner,
            AgentRole::Verifier => Origin::Verifier,
        }
    }
}

/// One entry of a token's top-k list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub token: String,
    pub logprob: f64,
}

impl Alternative {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
        }
    }
}

/// A sampled token with its log-probability (nats) and top-k alternatives,
/// ordered by descending log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSample {
    pub text: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_alternatives: Vec<Alternative>,
    pub policy_generated: bool,
}

impl TokenSample {
    pub fn policy(text: impl Into<String>, logprob: f64, top_alternatives: Vec<Alternative>) -> Self {
        Self {
            text: text.into(),
            logprob,
            top_alternatives,
            policy_generated: true,
        }
    }

    /// A context token that no policy sampled.
    pub fn environment(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            logprob: 0.0,
            top_alternatives: Vec::new(),
            policy_generated: false,
        }
    }
}

/// A typed action span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
    #[serde(default)]
    pub tokens: Vec<TokenSample>,
    pub origin: Origin,
}

impl Segment {
    pub fn new(kind: SegmentKind, text: impl Into<String>, origin: Origin) -> Self {
        Self {
            kind,
            text: text.into(),
            tokens: Vec::new(),
            origin,
        }
    }

    /// Environment-injected segment. The text is split into whitespace-led
    /// chunks so the token stream still lines up with what the agent saw.
    pub fn environment(kind: SegmentKind, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = whitespace_chunks(&text).map(TokenSample::environment).collect();
        Self {
            kind,
            text,
            tokens,
            origin: Origin::Environment,
        }
    }

    pub fn policy_tokens(&self) -> impl Iterator<Item = &TokenSample> {
        self.tokens.iter().filter(|t| t.policy_generated)
    }

    pub fn is_policy(&self) -> bool {
        self.origin != Origin::Environment
    }
}

/// Splits text into chunks that each start with their leading whitespace,
/// e.g. `"a  bc d"` -> `["a", "  bc", " d"]`.
pub(crate) fn whitespace_chunks(text: &str) -> impl Iterator<Item = &str> {
    let mut bounds = vec![0];
    let mut prev: Option<char> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() && prev.is_some_and(|p| !p.is_whitespace()) {
            bounds.push(i);
        }
        prev = Some(c);
    }
    bounds.push(text.len());
    let pieces: Vec<&str> = bounds
        .windows(2)
        .map(|w| &text[w[0]..w[1]])
        .filter(|s| !s.is_empty())
        .collect();
    pieces.into_iter()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("unclosed <{tag}> opened at byte {position}")]
    UnclosedTag { tag: String, position: usize },
    #[error("unknown tag <{name}> at byte {position}")]
    UnknownTag { name: String, position: usize },
    #[error("<{kind}> at byte {position} is not in the {role} action space")]
    ForbiddenKindForRole {
        kind: SegmentKind,
        role: AgentRole,
        position: usize,
    },
    #[error("<{tag}> nested inside another tag at byte {position}")]
    NestedTag { tag: String, position: usize },
    #[error("closing </{tag}> without a matching opening tag at byte {position}")]
    StrayClosingTag { tag: String, position: usize },
    #[error("untagged text at byte {position}")]
    StrayText { position: usize },
    #[error("{count} <{kind}> segments where at most one is allowed")]
    MultipleAnswers { kind: SegmentKind, count: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Reject text outside tags instead of discarding it.
    pub strict: bool,
}

/// Location of one tag pair inside a raw turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSpan {
    pub kind: SegmentKind,
    /// Byte offset of the opening `<`.
    pub open: usize,
    /// Byte range of the content between the tags (untrimmed).
    pub inner: Range<usize>,
}

pub(crate) struct TagToken<'a> {
    pub(crate) closing: bool,
    pub(crate) name: &'a str,
    pub(crate) end: usize,
}

/// Recognises `<name>` or `</name>` at byte `i`.
pub(crate) fn tag_at(raw: &str, i: usize) -> Option<TagToken<'_>> {
    let bytes = raw.as_bytes();
    if bytes.get(i) != Some(&b'<') {
        return None;
    }
    let mut j = i + 1;
    let closing = bytes.get(j) == Some(&b'/');
    if closing {
        j += 1;
    }
    let name_start = j;
    match bytes.get(j) {
        Some(b) if b.is_ascii_alphabetic() || *b == b'_' => j += 1,
        _ => return None,
    }
    while let Some(b) = bytes.get(j) {
        if b.is_ascii_alphanumeric() || *b == b'_' {
            j += 1;
        } else {
            break;
        }
    }
    if bytes.get(j) != Some(&b'>') {
        return None;
    }
    Some(TagToken {
        closing,
        name: &raw[name_start..j],
        end: j + 1,
    })
}

fn check_stray(raw: &str, range: Range<usize>, opts: &ParseOptions) -> Result<(), ProtocolError> {
    let gap = &raw[range.clone()];
    if let Some(offset) = gap.find(|c: char| !c.is_whitespace()) {
        let position = range.start + offset;
        if opts.strict {
            return Err(ProtocolError::StrayText { position });
        }
        log::warn!("discarding untagged text at byte {position}: {:?}", gap.trim());
    }
    Ok(())
}

/// Locates every tag pair of one agent turn and checks it against the role.
pub fn scan_tags(raw: &str, role: AgentRole, opts: &ParseOptions) -> Result<Vec<TagSpan>, ProtocolError> {
    let mut spans = Vec::new();
    let mut cursor = 0;
    let mut open: Option<(SegmentKind, usize, usize)> = None;
    let mut search_from = 0;

    while let Some(rel) = raw[search_from..].find('<') {
        let i = search_from + rel;
        let Some(tag) = tag_at(raw, i) else {
            search_from = i + 1;
            continue;
        };
        let known = SegmentKind::from_tag(tag.name);
        match open {
            None => {
                if tag.closing {
                    return Err(match known {
                        Some(_) => ProtocolError::StrayClosingTag {
                            tag: tag.name.to_string(),
                            position: i,
                        },
                        None => ProtocolError::UnknownTag {
                            name: tag.name.to_string(),
                            position: i,
                        },
                    });
                }
                let kind = known.ok_or_else(|| ProtocolError::UnknownTag {
                    name: tag.name.to_string(),
                    position: i,
                })?;
                if kind.is_environment() || !role.allows(kind) {
                    return Err(ProtocolError::ForbiddenKindForRole {
                        kind,
                        role,
                        position: i,
                    });
                }
                check_stray(raw, cursor..i, opts)?;
                open = Some((kind, i, tag.end));
            }
            Some((kind, open_at, inner_start)) => match (tag.closing, known) {
                (true, Some(k)) if k == kind => {
                    spans.push(TagSpan {
                        kind,
                        open: open_at,
                        inner: inner_start..i,
                    });
                    open = None;
                    cursor = tag.end;
                }
                (true, Some(_)) => {
                    return Err(ProtocolError::UnclosedTag {
                        tag: kind.tag().to_string(),
                        position: open_at,
                    })
                }
                (false, Some(_)) => {
                    return Err(ProtocolError::NestedTag {
                        tag: tag.name.to_string(),
                        position: i,
                    })
                }
                // Unknown tag-like text inside content is literal content.
                (_, None) => {}
            },
        }
        search_from = tag.end;
    }

    if let Some((kind, open_at, _)) = open {
        return Err(ProtocolError::UnclosedTag {
            tag: kind.tag().to_string(),
            position: open_at,
        });
    }
    check_stray(raw, cursor..raw.len(), opts)?;
    Ok(spans)
}

/// Parses one agent turn into segments (no token alignment).
pub fn parse_transcript(raw: &str, role: AgentRole) -> Result<Vec<Segment>, ProtocolError> {
    parse_transcript_with(raw, role, &ParseOptions::default())
}

pub fn parse_transcript_with(raw: &str, role: AgentRole, opts: &ParseOptions) -> Result<Vec<Segment>, ProtocolError> {
    parse_generation(raw, &[], role, opts)
}

/// Parses one agent turn and attaches the generated tokens to the segments
/// they overlap. Tokens that only cover tag markup or inter-tag whitespace are
/// dropped. If the token texts do not concatenate to `raw` no tokens are
/// attached.
pub fn parse_generation(
    raw: &str,
    tokens: &[TokenSample],
    role: AgentRole,
    opts: &ParseOptions,
) -> Result<Vec<Segment>, ProtocolError> {
    let spans = scan_tags(raw, role, opts)?;
    let origin = Origin::from(role);
    let mut segments: Vec<Segment> = spans
        .iter()
        .map(|s| Segment::new(s.kind, raw[s.inner.clone()].trim(), origin))
        .collect();

    if tokens.is_empty() {
        return Ok(segments);
    }
    if !tokens_match(raw, tokens) {
        log::warn!("token texts do not reproduce the generated text; tokens not attached");
        return Ok(segments);
    }

    let mut offset = 0;
    for token in tokens {
        let start = offset;
        let end = offset + token.text.len();
        offset = end;
        if let Some(idx) = spans.iter().position(|s| overlaps(&s.inner, start, end)) {
            segments[idx].tokens.push(token.clone());
        }
    }
    Ok(segments)
}

fn tokens_match(raw: &str, tokens: &[TokenSample]) -> bool {
    let mut rest = raw;
    for t in tokens {
        match rest.strip_prefix(t.text.as_str()) {
            Some(r) => rest = r,
            None => return false,
        }
    }
    rest.is_empty()
}

fn overlaps(inner: &Range<usize>, start: usize, end: usize) -> bool {
    if start == end {
        return inner.contains(&start);
    }
    start < inner.end && end > inner.start
}

/// Renders a segment as `<kind>text</kind>`.
pub fn render_segment(segment: &Segment) -> String {
    render_tag(segment.kind, &segment.text)
}

pub fn render_tag(kind: SegmentKind, text: &str) -> String {
    format!("<{tag}>{text}</{tag}>", tag = kind.tag())
}

/// Shape check outcome for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepVerdict {
    CompleteIntermediate,
    CompleteFinal,
    Malformed(String),
}

/// Checks the policy-origin segments of one step against the role's step shape.
///
/// Reasoner: `verify? think search verify?` (intermediate) or
/// `verify? think answer` (final). The optional leading `verify` is the
/// previous step's self-check, which arrives in the next generation call.
/// Verifier: `verify selected_doc? response` (intermediate) or
/// `verify final_answer` (final).
///
/// `is_final` marks a step that must close the dialogue; a verifier step that
/// is not final may not carry a `final_answer`.
pub fn validate_step(segments: &[Segment], role: AgentRole, is_final: bool) -> StepVerdict {
    let kinds: Vec<SegmentKind> = segments.iter().filter(|s| s.is_policy()).map(|s| s.kind).collect();
    let verdict = match role {
        AgentRole::Reasoner => reasoner_shape(&kinds),
        AgentRole::Verifier => verifier_shape(&kinds, is_final),
    };
    match verdict {
        StepVerdict::CompleteIntermediate if is_final => StepVerdict::Malformed(match role {
            AgentRole::Reasoner => "expected answer".into(),
            AgentRole::Verifier => "expected final_answer".into(),
        }),
        v => v,
    }
}

fn reasoner_shape(kinds: &[SegmentKind]) -> StepVerdict {
    use SegmentKind::*;
    let mut rest = kinds;
    if rest.first() == Some(&Verify) {
        rest = &rest[1..];
    }
    if rest.first() != Some(&Think) {
        return StepVerdict::Malformed("missing think".into());
    }
    match &rest[1..] {
        [Search] | [Search, Verify] => StepVerdict::CompleteIntermediate,
        [Answer] => StepVerdict::CompleteFinal,
        [] => StepVerdict::Malformed("missing search or answer".into()),
        [Search, Search, ..] => StepVerdict::Malformed("more than one search".into()),
        other => StepVerdict::Malformed(format!("unexpected sequence after think: {}", join_kinds(other))),
    }
}

fn verifier_shape(kinds: &[SegmentKind], is_final: bool) -> StepVerdict {
    use SegmentKind::*;
    if kinds.first() != Some(&Verify) {
        return StepVerdict::Malformed("missing verify".into());
    }
    match &kinds[1..] {
        [SelectedDoc, Response] | [Response] => StepVerdict::CompleteIntermediate,
        [FinalAnswer] if is_final => StepVerdict::CompleteFinal,
        [FinalAnswer] => StepVerdict::Malformed("final_answer before the reasoner answered".into()),
        [] => StepVerdict::Malformed("missing response".into()),
        other => StepVerdict::Malformed(format!("unexpected sequence after verify: {}", join_kinds(other))),
    }
}

fn join_kinds(kinds: &[SegmentKind]) -> String {
    kinds.iter().map(|k| k.tag()).collect::<Vec<_>>().join(", ")
}

/// Returns the trimmed text of the role's terminal segment, if any.
pub fn extract_answer(segments: &[Segment], role: AgentRole) -> Result<Option<String>, ProtocolError> {
    let kind = role.terminal_kind();
    let answers: Vec<&Segment> = segments.iter().filter(|s| s.kind == kind && s.is_policy()).collect();
    match answers.as_slice() {
        [] => Ok(None),
        [one] => Ok(Some(one.text.trim().to_string())),
        many => Err(ProtocolError::MultipleAnswers {
            kind,
            count: many.len(),
        }),
    }
}
