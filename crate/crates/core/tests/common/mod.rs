#![allow(dead_code)]

use arr_core::dialogue::{Step, Termination, Trace};
use arr_core::gateway::{spread_distribution, spread_entropy};
use arr_core::protocol::{AgentRole, Origin, Segment, SegmentKind, TokenSample};
use arr_core::retrieval::{Document, RetrievalEvent};

/// A five-way token whose truncated entropy is `h` (up to bisection error).
pub fn token_with_entropy(text: &str, h: f64) -> TokenSample {
    assert!((0.0..5f64.ln()).contains(&h));
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if spread_entropy(mid, 5) < h {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (lp, alts) = spread_distribution(text, 0.5 * (lo + hi), 5);
    TokenSample::policy(text, lp, alts)
}

/// Policy segment whose every token has entropy `h`.
pub fn seg(kind: SegmentKind, text: &str, origin: Origin, h: f64) -> Segment {
    let mut s = Segment::new(kind, text, origin);
    s.tokens = text.split_inclusive(' ').map(|w| token_with_entropy(w, h)).collect();
    s
}

pub fn reasoner_step(turn: usize, think_h: f64, tail: Vec<Segment>) -> Step {
    let mut segments = vec![seg(SegmentKind::Think, "thinking it over", Origin::Reasoner, think_h)];
    segments.extend(tail);
    Step {
        turn,
        agent: AgentRole::Reasoner,
        segments,
    }
}

pub fn search(q: &str) -> Segment {
    seg(SegmentKind::Search, q, Origin::Reasoner, 0.1)
}

pub fn verifier_step(turn: usize, segments: Vec<Segment>) -> Step {
    let mut all = vec![Segment::environment(SegmentKind::Information, "Query: q")];
    all.extend(segments);
    Step {
        turn,
        agent: AgentRole::Verifier,
        segments: all,
    }
}

pub fn doc(rank: usize, title: &str, text: &str) -> Document {
    Document {
        doc_id: format!("d{rank}"),
        title: title.into(),
        text: text.into(),
        rank,
        source_query: "q".into(),
    }
}

pub fn retrieval(turn: usize, docs: Vec<Document>) -> RetrievalEvent {
    RetrievalEvent {
        turn,
        query: "q".into(),
        documents: docs,
    }
}

/// Three search-free reasoner steps with the given think entropies, each
/// followed by a verifier step with a single deterministic response.
pub fn trace_with_think_entropies(hs: &[f64]) -> Trace {
    let mut t = Trace::new("q", "question", vec!["Paris".into()]);
    for (turn, h) in hs.iter().enumerate() {
        t.steps.push(reasoner_step(turn, *h, vec![search("q")]));
        t.steps.push(verifier_step(
            turn,
            vec![
                seg(SegmentKind::Verify, "checked", Origin::Verifier, 0.0),
                seg(SegmentKind::Response, "fine", Origin::Verifier, 0.0),
            ],
        ));
    }
    t.termination = Termination::MaxTurns;
    t
}
