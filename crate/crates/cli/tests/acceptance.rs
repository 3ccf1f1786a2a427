//! Acceptance suite. Each criterion prints one PASS or FAIL line; the process
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use arr_cli::{execute, group_by_query, rollout, BackendKind, FileConfig, RolloutOptions};
use arr_core::dialogue::{Step, Termination, Trace};
use arr_core::entropy::{
    aggregate_patterns, classify_pattern, classify_tail, classify_trend, token_entropy, EntropyPattern, Trend,
};
use arr_core::gateway::{spread_distribution, spread_entropy, Profile};
use arr_core::grpo::{
    clipped_term, group_normalize, grpo_objective, kl_estimate, read_batch, GroupRollout, GrpoInputs,
};
use arr_core::metrics::{em, f1};
use arr_core::protocol::{
    parse_transcript, render_segment, AgentRole, Alternative, Origin, ProtocolError, Segment, SegmentKind, TokenSample,
};
use arr_core::retrieval::{Document, RetrievalEvent};
use arr_core::reward::{adversarial_bonus, adversarial_outcome, clarity, impact, process_advantage, RewardConfig};
use arr_core::store::{read_traces, TraceWriter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    }};
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("protocol round-trip", protocol_round_trip),
        ("metrics oracle", metrics_oracle),
        ("adversarial reward grid", adversarial_grid),
        ("pattern classifier", pattern_classifier),
        ("entropy", entropy_oracle),
        ("clarity/impact/process advantage", clarity_impact_process),
        ("grpo", grpo_identities),
        ("end-to-end scripted run", end_to_end),
        ("ideal backend shadow", ideal_shadow),
        ("persistence", persistence),
    ];
    let mut failed = 0;
    for (name, criterion) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{took:.2?}]"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason} [{took:.2?}]");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

// ---------------------------------------------------------------- protocol

const WORDS: &[&str] = &[
    "capital",
    "of",
    "France",
    "Paris",
    "is",
    "the",
    "a",
    "Doc",
    "1:",
    "2.5",
    "what?",
    "x<y",
    "3 < 4",
    "<note>",
    "it's",
    "\"quoted\"",
    "a&b",
    "über",
    "naïve",
    "</b>",
    "<br/>",
    "{json}",
    "tab\there",
    "line\nbreak",
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=6);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn own_kind(role: AgentRole) -> SegmentKind {
    match role {
        AgentRole::Reasoner => SegmentKind::Think,
        AgentRole::Verifier => SegmentKind::Verify,
    }
}

fn other_kind(role: AgentRole) -> SegmentKind {
    match role {
        AgentRole::Reasoner => SegmentKind::Search,
        AgentRole::Verifier => SegmentKind::Response,
    }
}

fn malformed_fixtures() -> Vec<(AgentRole, String, ProtocolError)> {
    let reasoner_prefixes = [
        "",
        "<think>t</think>",
        "<verify>ok</verify>\n",
        "<think>a b</think> ",
        "<think>x</think><search>q</search>",
    ];
    let verifier_prefixes = [
        "",
        "<verify>v</verify>",
        "<verify>v</verify>\n<selected_doc>Doc 1</selected_doc>",
        "<response>fine</response>\n\n",
        "<verify>a</verify><response>b</response>",
    ];
    let unknown = ["plan", "tool", "reflect", "doc", "query"];
    let reasoner_forbidden = [
        SegmentKind::SelectedDoc,
        SegmentKind::Response,
        SegmentKind::FinalAnswer,
        SegmentKind::Feedback,
        SegmentKind::Information,
    ];
    let verifier_forbidden = [
        SegmentKind::Search,
        SegmentKind::Think,
        SegmentKind::Answer,
        SegmentKind::Feedback,
        SegmentKind::Information,
    ];
    let mut out = Vec::new();
    for i in 0..50 {
        let role = if (i / 5) % 2 == 0 {
            AgentRole::Reasoner
        } else {
            AgentRole::Verifier
        };
        let v = i / 10;
        let prefix = match role {
            AgentRole::Reasoner => reasoner_prefixes[v],
            AgentRole::Verifier => verifier_prefixes[v],
        };
        let p = prefix.len();
        let own = own_kind(role).tag();
        let other = other_kind(role).tag();
        let (body, err) = match i % 5 {
            0 => (
                format!("<{own}>no end"),
                ProtocolError::UnclosedTag {
                    tag: own.into(),
                    position: p,
                },
            ),
            1 => (
                format!("<{own}>a</{other}>"),
                ProtocolError::UnclosedTag {
                    tag: own.into(),
                    position: p,
                },
            ),
            2 => (
                format!("<{name}>x</{name}>", name = unknown[v]),
                ProtocolError::UnknownTag {
                    name: unknown[v].into(),
                    position: p,
                },
            ),
            3 => (
                format!("<{own}>ab <{other}>q</{other}></{own}>"),
                ProtocolError::NestedTag {
                    tag: other.into(),
                    position: p + own.len() + 2 + 3,
                },
            ),
            _ => {
                let kind = match role {
                    AgentRole::Reasoner => reasoner_forbidden[v],
                    AgentRole::Verifier => verifier_forbidden[v],
                };
                (
                    format!("<{t}>z</{t}>", t = kind.tag()),
                    ProtocolError::ForbiddenKindForRole {
                        kind,
                        role,
                        position: p,
                    },
                )
            }
        };
        out.push((role, format!("{prefix}{body}"), err));
    }
    out
}

fn protocol_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let separators = ["", "\n", " ", "\n\n"];
    for case in 0..1000 {
        let role = if rng.random_bool(0.5) {
            AgentRole::Reasoner
        } else {
            AgentRole::Verifier
        };
        let space = role.action_space();
        let n = rng.random_range(1..=6);
        let expected: Vec<Segment> = (0..n)
            .map(|_| {
                let kind = space[rng.random_range(0..space.len())];
                Segment::new(kind, random_text(&mut rng), Origin::from(role))
            })
            .collect();
        let sep = separators[rng.random_range(0..separators.len())];
        let raw = expected.iter().map(render_segment).collect::<Vec<_>>().join(sep);
        let parsed = parse_transcript(&raw, role).map_err(|e| format!("case {case}: {e} on {raw:?}"))?;
        ensure!(parsed == expected, "case {case}: parse(render) differs for {raw:?}");
        ensure!(
            parsed.iter().all(|s| role.allows(s.kind)),
            "case {case}: kind outside the {role:?} action space"
        );
        let rerendered = parsed.iter().map(render_segment).collect::<Vec<_>>().join(sep);
        ensure!(rerendered == raw, "case {case}: render(parse) differs for {raw:?}");
    }
    let fixtures = malformed_fixtures();
    for (i, (role, raw, want)) in fixtures.iter().enumerate() {
        match parse_transcript(raw, *role) {
            Err(got) if got == *want => {}
            other => return Err(format!("malformed #{i} {raw:?}: want {want:?}, got {other:?}")),
        }
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(2), "took {took:?}");
    Ok(format!(
        "1000 sequences, {} malformed fixtures in {took:.2?}",
        fixtures.len()
    ))
}

// ----------------------------------------------------------------- metrics

fn metrics_oracle() -> Outcome {
    let table: [(&str, &[&str], f64, f64); 20] = [
        ("barack obama", &["obama"], 0.0, 2.0 / 3.0),
        ("Obama", &["obama"], 1.0, 1.0),
        ("The Obama", &["obama"], 1.0, 1.0),
        ("obama!", &["Obama"], 1.0, 1.0),
        ("George Bush", &["obama"], 0.0, 0.0),
        ("Paris", &["Lyon", "paris"], 1.0, 1.0),
        ("barack obama", &["obama", "barack hussein obama"], 0.0, 0.8),
        ("", &["Paris"], 0.0, 0.0),
        ("new york city", &["new york"], 0.0, 0.8),
        ("New  York", &["new york"], 1.0, 1.0),
        ("the the cat", &["cat"], 1.0, 1.0),
        ("cat cat", &["cat"], 0.0, 2.0 / 3.0),
        ("1,000", &["1000"], 1.0, 1.0),
        ("Leonardo da Vinci", &["da Vinci"], 0.0, 0.8),
        ("Pacific", &["Pacific Ocean", "Pacific"], 1.0, 1.0),
        ("Atlantic Ocean", &["Pacific Ocean", "Pacific"], 0.0, 0.5),
        ("Jane Austen novelist", &["Jane Austen"], 0.0, 0.8),
        ("einstein", &["Albert Einstein", "Einstein"], 1.0, 1.0),
        ("U.S.A.", &["usa"], 1.0, 1.0),
        ("a b c d", &["c d e f"], 0.0, 4.0 / 7.0),
    ];
    for (pred, golds, want_em, want_f1) in table {
        let got_em = em(pred, golds).map_err(|e| e.to_string())?;
        let got_f1 = f1(pred, golds).map_err(|e| e.to_string())?;
        ensure!(
            (got_em - want_em).abs() <= 1e-9 && (got_f1 - want_f1).abs() <= 1e-9,
            "{pred:?} vs {golds:?}: em {got_em} f1 {got_f1}, want {want_em} {want_f1}"
        );
    }
    Ok("20 cases within 1e-9".into())
}

// ------------------------------------------------------- adversarial reward

fn adversarial_grid() -> Outcome {
    let mut cells = 0;
    for n in [1u32, 2, 4, 10] {
        for lambda in [0.0, 0.5, 1.0] {
            let cfg = RewardConfig {
                lambda,
                n_buckets: n,
                ..RewardConfig::default()
            };
            for i in 0..=20i64 {
                for j in 0..=20i64 {
                    let (a, b) = (i as f64 / 20.0, j as f64 / 20.0);
                    let ab = adversarial_bonus(a, b, &cfg);
                    let ba = adversarial_bonus(b, a, &cfg);
                    if lambda == 0.0 {
                        ensure!(adversarial_outcome(a, b, &cfg) == a, "lambda=0 changed F1 {a} vs {b}");
                    }
                    ensure!(!(ab > 0.0 && ba > 0.0), "both agents got a bonus at {a}, {b}, n={n}");
                    let buckets = (i - j) * n as i64 / 20;
                    if (i - j).abs() * (n as i64) < 20 {
                        ensure!(ab == 0.0 && ba == 0.0, "sub-bucket gap {a} vs {b} got a bonus, n={n}");
                    }
                    let want = lambda * buckets.max(0) as f64 / n as f64;
                    ensure!(
                        (ab - want).abs() <= 1e-12,
                        "bonus({a}, {b}) with n={n}, lambda={lambda}: got {ab}, want {want}"
                    );
                    cells += 1;
                }
            }
        }
    }
    Ok(format!("{cells} cells"))
}

// ------------------------------------------------------ pattern classifier

fn pattern_classifier() -> Outcome {
    use EntropyPattern::*;
    let step = |t: char| match t {
        'D' => -0.5,
        'F' => 0.0,
        _ => 0.5,
    };
    let table = [
        ("DD", D),
        ("DF", D),
        ("FD", D),
        ("II", I),
        ("IF", I),
        ("FI", I),
        ("DI", DI),
        ("ID", ID),
        ("FF", F),
    ];
    let delta = 0.25;
    for (pair, want) in table {
        let mut chars = pair.chars();
        let (x, y) = (step(chars.next().unwrap()), step(chars.next().unwrap()));
        let hs = [1.0, 1.0 + x, 1.0 + x + y];
        let got = classify_pattern(&hs, delta).map_err(|e| e.to_string())?;
        ensure!(got == want, "{pair}: got {got}, want {want}");
    }
    // |delta| equal to the threshold is flat, one ulp beyond is a trend
    let up = f64::from_bits(delta.to_bits() + 1);
    ensure!(classify_trend(delta, delta) == Trend::Flat, "+delta not flat");
    ensure!(classify_trend(-delta, delta) == Trend::Flat, "-delta not flat");
    ensure!(
        classify_trend(up, delta) == Trend::Increase,
        "beyond +delta not increase"
    );
    ensure!(
        classify_trend(-up, delta) == Trend::Decrease,
        "beyond -delta not decrease"
    );
    ensure!(classify_pattern(&[1.0, 1.25, 1.5], delta) == Ok(F), "boundary rise");
    ensure!(classify_pattern(&[1.0, 0.75, 0.5], delta) == Ok(F), "boundary fall");
    ensure!(classify_pattern(&[1.0, 1.25, 1.0], delta) == Ok(F), "boundary peak");
    ensure!(
        classify_pattern(&[1.0, 0.5, 0.75], delta) == Ok(D),
        "fall then boundary"
    );
    ensure!(classify_pattern(&[0.9, 0.7, 0.4], 0.05) == Ok(D), "0.9, 0.7, 0.4");
    ensure!(classify_tail(&[0.1, 0.9, 0.7, 0.4], 0.05) == Some(D), "tail of four");
    ensure!(classify_tail(&[0.9, 0.7], 0.05).is_none(), "short sequence classified");

    let cfg = RewardConfig::default();
    let scores = [(D, 1.0), (ID, 0.8), (F, 0.6), (DI, 0.4), (I, 0.2)];
    for (p, s) in scores {
        ensure!(cfg.pattern_score(p) == s, "score of {p} is {}", cfg.pattern_score(p));
    }
    Ok("9 trend pairs, 11 boundary cases, score map".into())
}

// ----------------------------------------------------------------- entropy

/// Neumaier-compensated sum.
fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn oracle_entropy(logprobs: &[f64]) -> f64 {
    let masses: Vec<f64> = logprobs.iter().map(|lp| lp.exp()).collect();
    let rest = 1.0 - compensated_sum(masses.iter().copied());
    let mut terms: Vec<f64> = masses.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).collect();
    if rest >= 1e-12 {
        terms.push(-rest * rest.ln());
    }
    terms.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    compensated_sum(terms)
}

fn sample(logprobs: &[f64]) -> TokenSample {
    let alts = logprobs
        .iter()
        .enumerate()
        .map(|(i, lp)| Alternative::new(format!("t{i}"), *lp))
        .collect();
    TokenSample::policy("t0", logprobs[0], alts)
}

fn entropy_oracle() -> Outcome {
    let h = token_entropy(&sample(&[0.0])).map_err(|e| e.to_string())?;
    ensure!(h == 0.0, "deterministic entropy {h}");
    let h = token_entropy(&sample(&[0.0, -800.0])).map_err(|e| e.to_string())?;
    ensure!(h == 0.0, "deterministic entropy with a vanishing alternative {h}");
    let half = 0.5f64.ln();
    let h = token_entropy(&sample(&[half, half])).map_err(|e| e.to_string())?;
    ensure!((h - LN_2).abs() <= 1e-12, "uniform-2 entropy {h}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let k = rng.random_range(1..=10);
        let mass = if case % 10 == 0 {
            1.0
        } else {
            rng.random_range(0.05..1.0)
        };
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut lps: Vec<f64> = weights.iter().map(|w| (w / total * mass).ln()).collect();
        lps.sort_by(|a, b| b.total_cmp(a));
        if lps.iter().map(|l| l.exp()).sum::<f64>() > 1.0 + 1e-6 {
            continue;
        }
        let got = token_entropy(&sample(&lps)).map_err(|e| format!("case {case}: {e}"))?;
        let want = oracle_entropy(&lps);
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure!(err <= 1e-12, "case {case}: {got} vs oracle {want}");
    }
    Ok(format!("1000 random distributions, max error {worst:.1e}"))
}

// ----------------------------------------------- clarity, impact, process

fn token_with_entropy(text: &str, h: f64) -> TokenSample {
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

fn uniform2_token(text: &str) -> TokenSample {
    let half = 0.5f64.ln();
    TokenSample::policy(
        text,
        half,
        vec![Alternative::new(text, half), Alternative::new("other", half)],
    )
}

fn seg_with(kind: SegmentKind, text: &str, origin: Origin, token: impl Fn(&str) -> TokenSample) -> Segment {
    let mut s = Segment::new(kind, text, origin);
    s.tokens = text.split_inclusive(' ').map(token).collect();
    s
}

fn seg(kind: SegmentKind, text: &str, origin: Origin, h: f64) -> Segment {
    if h == 0.0 {
        seg_with(kind, text, origin, |w| {
            TokenSample::policy(w, 0.0, vec![Alternative::new(w, 0.0)])
        })
    } else {
        seg_with(kind, text, origin, |w| token_with_entropy(w, h))
    }
}

fn verifier_step(turn: usize, segments: Vec<Segment>) -> Step {
    let mut all = vec![Segment::environment(SegmentKind::Information, "Query: q")];
    all.extend(segments);
    Step {
        turn,
        agent: AgentRole::Verifier,
        segments: all,
    }
}

fn reasoner_step(turn: usize, think_h: f64, tail: Segment) -> Step {
    Step {
        turn,
        agent: AgentRole::Reasoner,
        segments: vec![
            seg(SegmentKind::Think, "thinking it over", Origin::Reasoner, think_h),
            tail,
        ],
    }
}

fn doc(title: &str, text: &str) -> Document {
    Document {
        doc_id: "d1".into(),
        title: title.into(),
        text: text.into(),
        rank: 1,
        source_query: "q".into(),
    }
}

fn think_trace(hs: &[f64]) -> Trace {
    let mut t = Trace::new("q", "question", vec!["Paris".into()]);
    for (turn, h) in hs.iter().enumerate() {
        t.steps.push(reasoner_step(
            turn,
            *h,
            seg(SegmentKind::Search, "q", Origin::Reasoner, 0.1),
        ));
        t.steps.push(verifier_step(
            turn,
            vec![seg(SegmentKind::Response, "fine", Origin::Verifier, 0.0)],
        ));
    }
    t.termination = Termination::MaxTurns;
    t
}

/// Think entropies 0.4, 0.7, 0.3; verifier clarities -0.5, 0.8 and 0.
fn process_fixture() -> Trace {
    let docs = vec![doc("Obama", "Barack Obama was president.")];
    let mut t = Trace::new("q", "Who was president?", vec!["obama".into()]);
    t.steps.push(reasoner_step(
        0,
        0.4,
        seg(SegmentKind::Search, "president", Origin::Reasoner, 0.1),
    ));
    t.steps.push(verifier_step(
        0,
        vec![
            seg_with(SegmentKind::Verify, "on topic", Origin::Verifier, uniform2_token),
            seg_with(
                SegmentKind::Response,
                "the answer is bush",
                Origin::Verifier,
                uniform2_token,
            ),
        ],
    ));
    t.steps.push(reasoner_step(
        1,
        0.7,
        seg(SegmentKind::Search, "president obama", Origin::Reasoner, 0.1),
    ));
    let h = 1.25f64.ln();
    t.steps.push(verifier_step(
        1,
        vec![
            seg(SegmentKind::Verify, "on topic", Origin::Verifier, h),
            seg(SegmentKind::SelectedDoc, "Doc 1", Origin::Verifier, 1.5),
            seg(SegmentKind::Response, "it was obama", Origin::Verifier, h),
        ],
    ));
    t.steps.push(reasoner_step(
        2,
        0.3,
        seg(SegmentKind::Answer, "barack obama", Origin::Reasoner, 0.0),
    ));
    t.steps.push(verifier_step(
        2,
        vec![
            seg(SegmentKind::Verify, "ok", Origin::Verifier, 0.0),
            seg(SegmentKind::FinalAnswer, "obama", Origin::Verifier, 0.0),
        ],
    ));
    for turn in 0..2 {
        t.retrievals.push(RetrievalEvent {
            turn,
            query: "q".into(),
            documents: docs.clone(),
        });
    }
    t.reasoner_answer = Some("barack obama".into());
    t.verifier_answer = Some("obama".into());
    t.final_answer = Some("obama".into());
    t.termination = Termination::Answered;
    t
}

fn clarity_impact_process() -> Outcome {
    let cfg = RewardConfig::default();
    let golds = vec!["Paris".to_string()];
    let with_gold = [doc("France", "The capital of France is Paris.")];
    let without_gold = [doc("France", "France is in Europe.")];
    let kept = verifier_step(
        0,
        vec![
            seg(SegmentKind::Verify, "relevant", Origin::Verifier, 0.0),
            seg(SegmentKind::Response, "the answer is Paris", Origin::Verifier, 0.0),
        ],
    );
    let filtered = verifier_step(
        0,
        vec![
            seg_with(SegmentKind::Verify, "relevant", Origin::Verifier, uniform2_token),
            seg_with(
                SegmentKind::Response,
                "the answer is Lyon",
                Origin::Verifier,
                uniform2_token,
            ),
        ],
    );
    let c = |step: &Step, docs: &[Document]| clarity(step, docs, &golds, &cfg).map_err(|e| e.to_string());
    ensure!(c(&kept, &with_gold)? == 1.0, "supported and kept");
    ensure!(c(&kept, &without_gold)? == 0.0, "unsupported");
    ensure!(
        c(&filtered, &with_gold)? == -0.5,
        "supported but dropped: {}",
        c(&filtered, &with_gold)?
    );

    ensure!(impact(&think_trace(&[0.9, 0.6, 0.2]), &cfg) == 1.0, "impact of D");
    ensure!(impact(&think_trace(&[0.2, 0.6, 0.9]), &cfg) == 0.2, "impact of I");
    ensure!(
        impact(&think_trace(&[0.9, 0.6]), &cfg) == 0.6,
        "impact of a short trace"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..300 {
        let n = rng.random_range(0..6);
        let hs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.5)).collect();
        let trace = think_trace(&hs);
        let v = impact(&trace, &cfg);
        ensure!((0.2..=1.0).contains(&v), "impact {v} for {hs:?}");
        let (_, _, gated) = process_advantage(&trace, 0.0, &cfg);
        ensure!(gated.iter().all(|p| *p == 0.0), "f1_r = 0 did not gate {hs:?}");
    }

    let trace = process_fixture();
    let f1_r = 2.0 / 3.0;
    let (clarities, imp, proc) = process_advantage(&trace, f1_r, &cfg);
    ensure!(clarities.len() == 3 && proc.len() == 3, "one value per verifier step");
    ensure!((clarities[0] + 0.5).abs() <= 1e-12, "clarity 0: {}", clarities[0]);
    ensure!((clarities[1] - 0.8).abs() <= 1e-12, "clarity 1: {}", clarities[1]);
    ensure!(clarities[2] == 0.0, "final step clarity {}", clarities[2]);
    ensure!(imp == 0.8, "impact of ID: {imp}");
    for (i, (p, c)) in proc.iter().zip(&clarities).enumerate() {
        ensure!(*p == f1_r * c * imp, "proc[{i}] = {p} is not the product");
    }
    ensure!(
        (proc[0] + 0.2667).abs() < 1e-4 && (proc[1] - 0.4267).abs() < 1e-4,
        "{proc:?}"
    );
    let (_, _, gated) = process_advantage(&trace, 0.0, &cfg);
    ensure!(gated == [0.0, 0.0, 0.0], "fixture not gated");
    Ok(format!("sign table, 300 random traces, fixture {proc:.4?}"))
}

// -------------------------------------------------------------------- grpo

fn grpo_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut groups = 0;
    while groups < 1000 {
        let g = rng.random_range(2..=16);
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(-5.0..5.0)).collect();
        let adv = group_normalize(&rewards).map_err(|e| e.to_string())?;
        let n = g as f64;
        let mean = compensated_sum(adv.iter().copied()) / n;
        let std = (compensated_sum(adv.iter().map(|a| (a - mean).powi(2))) / n).sqrt();
        ensure!(mean.abs() <= 1e-9, "mean {mean} for {rewards:?}");
        ensure!((std - 1.0).abs() <= 1e-9, "std {std} for {rewards:?}");
        groups += 1;
    }
    for g in 2..=12 {
        let c = rng.random_range(-3.0..3.0);
        for rewards in [vec![c; g], (0..g).map(|i| c + i as f64 * 1e-12).collect()] {
            let adv = group_normalize(&rewards).map_err(|e| e.to_string())?;
            ensure!(
                adv.iter().all(|a| *a == 0.0),
                "degenerate group {rewards:?} gave {adv:?}"
            );
        }
    }

    for batch in 0..1000 {
        let len = rng.random_range(1..=64);
        let new: Vec<f64> = (0..len).map(|_| rng.random_range(-6.0..0.0)).collect();
        let advantages: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.7)).collect();
        mask[rng.random_range(0..len)] = true;
        let eps = rng.random_range(0.05..0.4);
        let at_identity = GrpoInputs {
            new_logprobs: new.clone(),
            old_logprobs: new.clone(),
            ref_logprobs: new.clone(),
            advantages: advantages.clone(),
            mask: mask.clone(),
            epsilon: eps,
            beta: rng.random_range(0.0..1.0),
        };
        let masked: Vec<f64> = (0..len).filter(|&i| mask[i]).map(|i| advantages[i]).collect();
        let mean = compensated_sum(masked.iter().copied()) / masked.len() as f64;
        let obj = grpo_objective(&at_identity).map_err(|e| e.to_string())?;
        ensure!(
            (obj - mean).abs() <= 1e-12,
            "batch {batch}: rho=1 gave {obj}, mean {mean}"
        );

        let old: Vec<f64> = new.iter().map(|l| l + rng.random_range(-0.5..0.5)).collect();
        let moved = GrpoInputs {
            old_logprobs: old.clone(),
            beta: 0.0,
            ..at_identity.clone()
        };
        let with_beta = GrpoInputs {
            beta: 0.9,
            ..moved.clone()
        };
        let (a, b) = (
            grpo_objective(&moved).map_err(|e| e.to_string())?,
            grpo_objective(&with_beta).map_err(|e| e.to_string())?,
        );
        ensure!(a == b, "batch {batch}: ref = new but beta changed the objective");

        for i in 0..len {
            let ratio = (new[i] - old[i]).exp();
            let t = clipped_term(ratio, advantages[i], eps);
            let adv = advantages[i];
            let bound = if adv > 0.0 {
                (1.0 + eps) * adv
            } else {
                (1.0 - eps) * adv
            };
            ensure!(
                t <= bound + 1e-12,
                "batch {batch}: clip bound broken ({ratio}, {adv}, {eps})"
            );
            if (1.0 - eps..=1.0 + eps).contains(&ratio) {
                ensure!(t == ratio * adv, "batch {batch}: unclipped term changed");
            }
            let r = new[i] + rng.random_range(-2.0..2.0);
            ensure!(kl_estimate(new[i], r) >= 0.0, "negative KL estimate");
        }
    }
    Ok("1000 groups, 22 degenerate groups, 1000 token batches".into())
}

// ------------------------------------------------------------- end to end

const RUN_SEED: u64 = 2024;

fn run_fixture(out: &Path, profile: Profile) -> Result<(FileConfig, Duration), String> {
    let mut cfg = FileConfig::default();
    cfg.backend.corpus = Some(fixtures().join("corpus.jsonl"));
    cfg.backend.scripted_profile = profile;
    let opts = RolloutOptions {
        backend: BackendKind::Scripted,
        seed: RUN_SEED,
        parallel: 4,
        limit: None,
        strict: false,
    };
    let start = Instant::now();
    rollout(&fixtures().join("dataset.jsonl"), out, &cfg, &opts).map_err(|e| format!("{e:#}"))?;
    Ok((cfg, start.elapsed()))
}

fn load(path: &Path) -> Result<Vec<Trace>, String> {
    read_traces(path, true)
        .map_err(|e| e.to_string())?
        .map(|r| r.map(|(t, _)| t).map_err(|e| e.to_string()))
        .collect()
}

fn check_trace(trace: &Trace, cfg: &FileConfig) -> Result<(), String> {
    let id = format!("{} seed {}", trace.query_id, trace.seed);
    trace.check_alternation().map_err(|e| format!("{id}: {e}"))?;
    let max_turns = cfg.reward.max_turns;
    let reasoner: Vec<&Step> = trace.steps_of(AgentRole::Reasoner).collect();
    ensure!(reasoner.len() <= max_turns, "{id}: {} reasoner turns", reasoner.len());
    ensure!(
        trace.steps.iter().all(|s| s.turn < max_turns),
        "{id}: turn beyond the cap"
    );
    if trace.termination == Termination::MaxTurns {
        ensure!(
            reasoner.len() == max_turns,
            "{id}: max_turns after {} turns",
            reasoner.len()
        );
    }
    for r in &trace.retrievals {
        ensure!(
            r.documents.len() <= cfg.reward.top_k,
            "{id}: {} documents",
            r.documents.len()
        );
    }
    for v in trace.steps_of(AgentRole::Verifier) {
        let info = &v.segments[0];
        ensure!(
            info.kind == SegmentKind::Information && info.origin == Origin::Environment,
            "{id}: verifier step {} does not open with information",
            v.turn
        );
        if let Some(r) = trace.retrievals.iter().find(|r| r.turn == v.turn) {
            for d in &r.documents {
                ensure!(
                    info.text.contains(&d.render()),
                    "{id}: turn {} lost document {}",
                    v.turn,
                    d.rank
                );
            }
        }
        let response = v
            .segments
            .iter()
            .find(|s| s.kind == SegmentKind::Response)
            .map(|s| s.text.as_str());
        let r = trace
            .steps_of(AgentRole::Reasoner)
            .find(|s| s.turn == v.turn)
            .ok_or(format!("{id}: verifier turn {} without reasoner", v.turn))?;
        let feedback = r.segments.iter().find(|s| s.kind == SegmentKind::Feedback);
        match (feedback, response) {
            (Some(f), Some(resp)) => ensure!(f.text == resp, "{id}: feedback differs from the response"),
            (Some(f), None) => ensure!(f.text.is_empty(), "{id}: feedback without a response"),
            (None, _) => ensure!(
                v.segments.iter().any(|s| s.kind == SegmentKind::FinalAnswer)
                    || trace.termination != Termination::Answered,
                "{id}: intermediate verifier turn {} without feedback",
                v.turn
            ),
        }
    }
    for s in &trace.steps {
        for seg in &s.segments {
            if seg.origin == Origin::Environment {
                ensure!(
                    seg.tokens.iter().all(|t| !t.policy_generated),
                    "{id}: policy token in environment text"
                );
            } else {
                ensure!(
                    seg.origin == Origin::from(s.agent),
                    "{id}: segment origin differs from its step"
                );
                ensure!(
                    s.agent.allows(seg.kind),
                    "{id}: {:?} outside the action space",
                    seg.kind
                );
            }
        }
    }
    Ok(())
}

fn check_masks(group: &GroupRollout, cfg: &FileConfig) -> Result<usize, String> {
    let sheets = group.sheets(&cfg.reward);
    let mut masked = 0;
    for (trace, sheet) in group.traces.iter().zip(&sheets) {
        for agent in [AgentRole::Reasoner, AgentRole::Verifier] {
            let sheet = sheet.agent(agent);
            let own = Origin::from(agent);
            let mut i = 0;
            for seg in trace.steps_of(agent).flat_map(|s| &s.segments) {
                for token in &seg.tokens {
                    ensure!(
                        i < sheet.len(),
                        "{}: sheet shorter than the token stream",
                        trace.query_id
                    );
                    let want = seg.origin == own && token.policy_generated;
                    ensure!(
                        sheet.loss_mask[i] == want,
                        "{}: wrong mask for {:?}",
                        trace.query_id,
                        token.text
                    );
                    ensure!(sheet.tokens[i] == token.text, "{}: token order differs", trace.query_id);
                    masked += usize::from(want);
                    i += 1;
                }
            }
            ensure!(
                i == sheet.len(),
                "{}: sheet longer than the token stream",
                trace.query_id
            );
        }
    }
    Ok(masked)
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let (cfg, took) = run_fixture(&a, Profile::Noisy)?;
    run_fixture(&b, Profile::Noisy)?;
    ensure!(took < Duration::from_secs(10), "rollout took {took:?}");
    let bytes_a = std::fs::read(&a).map_err(|e| e.to_string())?;
    ensure!(
        bytes_a == std::fs::read(&b).map_err(|e| e.to_string())?,
        "rollout is not deterministic"
    );

    let traces = load(&a)?;
    let g = cfg.reward.group_size;
    ensure!(traces.len() == 10 * g, "{} traces, want {}", traces.len(), 10 * g);
    for t in &traces {
        check_trace(t, &cfg)?;
    }
    let mut masked = 0;
    let mut terminations: BTreeMap<String, usize> = BTreeMap::new();
    for t in &traces {
        *terminations.entry(format!("{:?}", t.termination)).or_default() += 1;
    }
    let groups = group_by_query(traces);
    ensure!(
        groups.len() == 10 && groups.iter().all(|(_, t)| t.len() == g),
        "groups of unequal size"
    );
    for (qid, group) in groups {
        let breakdowns = group
            .iter()
            .map(|t| arr_core::reward::score_trace(t, &cfg.reward))
            .collect();
        let rollout = GroupRollout::from_scored(qid, group, breakdowns).map_err(|e| e.to_string())?;
        masked += check_masks(&rollout, &cfg)?;
    }
    Ok(format!(
        "{} traces, {terminations:?}, {masked} trainable tokens, rollout {took:.2?}",
        10 * g
    ))
}

fn ideal_shadow() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ideal.jsonl");
    let (cfg, _) = run_fixture(&path, Profile::Ideal)?;
    let traces = load(&path)?;
    ensure!(traces.len() == 10 * cfg.reward.group_size, "{} traces", traces.len());
    let monitored = &cfg.reward.monitored_reasoner_kinds;
    for t in &traces {
        let hs: Vec<f64> = arr_core::entropy::action_entropies(t, AgentRole::Reasoner, monitored)
            .into_iter()
            .map(|a| a.value)
            .collect();
        let p = classify_tail(&hs, cfg.reward.delta);
        ensure!(
            p == Some(EntropyPattern::D),
            "{} seed {}: {p:?} from {hs:?}",
            t.query_id,
            t.seed
        );
    }
    let pairs: Vec<(Trace, bool)> = traces.into_iter().map(|t| (t, true)).collect();
    let stats = aggregate_patterns(&pairs, |_, _| "all".into(), cfg.reward.delta, monitored);
    ensure!(stats.len() == 1, "{} buckets", stats.len());
    let want: BTreeMap<EntropyPattern, f64> = EntropyPattern::ALL
        .into_iter()
        .map(|p| (p, if p == EntropyPattern::D { 1.0 } else { 0.0 }))
        .collect();
    ensure!(
        stats[0].proportion_per_pattern == want,
        "{:?}",
        stats[0].proportion_per_pattern
    );
    ensure!(
        stats[0].sample_count == pairs.len(),
        "{} counted",
        stats[0].sample_count
    );
    Ok(format!("{} traces, proportion {{D: 1.0}}", pairs.len()))
}

// ------------------------------------------------------------- persistence

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let traces_path = dir.path().join("traces.jsonl");
    let (cfg, _) = run_fixture(&traces_path, Profile::Noisy)?;
    let original = std::fs::read(&traces_path).map_err(|e| e.to_string())?;

    let rewritten = dir.path().join("rewritten.jsonl");
    let writer = TraceWriter::create(&rewritten).map_err(|e| e.to_string())?;
    let mut records = Vec::new();
    for r in read_traces(&traces_path, true).map_err(|e| e.to_string())? {
        let (trace, reward) = r.map_err(|e| e.to_string())?;
        writer.write(&trace, &reward).map_err(|e| e.to_string())?;
        records.push((trace, reward));
    }
    drop(writer);
    ensure!(
        std::fs::read(&rewritten).map_err(|e| e.to_string())? == original,
        "trace file changed on rewrite"
    );
    let again = read_traces(&rewritten, true)
        .map_err(|e| e.to_string())?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    ensure!(again == records, "traces differ after a second round trip");

    let batch = |name: &str| -> Result<(PathBuf, Vec<u8>), String> {
        let out = dir.path().join(name);
        let code = execute([
            "arr",
            "score",
            "--traces",
            traces_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        ensure!(code == 0, "score exited with {code}");
        let bytes = std::fs::read(&out).map_err(|e| e.to_string())?;
        Ok((out, bytes))
    };
    let (first, bytes1) = batch("batch1.jsonl")?;
    let (_, bytes2) = batch("batch2.jsonl")?;
    ensure!(bytes1 == bytes2, "score output is not byte-idempotent");

    let batch_records = read_batch(&first).map_err(|e| e.to_string())?;
    let mut checked = 0;
    let traces: Vec<Trace> = records.into_iter().map(|(t, _)| t).collect();
    let mut offset = 0;
    for (qid, group) in group_by_query(traces) {
        let n = group.len();
        let breakdowns = group
            .iter()
            .map(|t| arr_core::reward::score_trace(t, &cfg.reward))
            .collect();
        let rollout = GroupRollout::from_scored(qid, group, breakdowns).map_err(|e| e.to_string())?;
        let sheets = rollout.sheets(&cfg.reward);
        for rec in &batch_records[offset..offset + 2 * n] {
            let sheet = sheets[rec.trace_index].agent(rec.agent);
            let same =
                |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure!(same(&rec.advantages, &sheet.values), "advantages not bit-exact");
            ensure!(same(&rec.logprobs, &sheet.logprobs), "logprobs not bit-exact");
            ensure!(rec.mask == sheet.loss_mask, "mask differs");
            ensure!(rec.reward == rollout.breakdowns[rec.trace_index], "reward differs");
            checked += 1;
        }
        offset += 2 * n;
    }
    ensure!(
        offset == batch_records.len(),
        "{} extra batch records",
        batch_records.len() - offset
    );

    let text = String::from_utf8(bytes1).map_err(|e| e.to_string())?;
    let reparsed = text.lines().count();
    Ok(format!(
        "{} traces, {checked} batch records ({reparsed} lines) bit-exact; score idempotent",
        again.len()
    ))
}
