//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use copland::am::{appraise, AmConfig, AmState, AppraisalResult, Check, Finding, Outcome};
use copland::conformance::{
    gen_case, gen_phrase, gen_trace, Case, Checker, ConformanceReport, GenConfig, ORACLE_EVENTS, PREFIX_BASE,
};
use copland::cvm::{compile_unchecked, run_cvm, CvmError, CvmState, PlaceRegistry, ProviderMode};
use copland::events::{events_of, traces_of};
use copland::evidence::{eval, KeyedProvider};
use copland::scenario::run_demo;
use copland::term::{AnnoNode, Range};
use copland::text::{decode, encode, parse_phrase, print_phrase, AspTable, Canonical};
use copland::{annotate, ev_sys, is_trace, AnnoPhrase, Bits, Event, EventSystem, Evidence, Phrase, Place, SplitSpec};

const CORPUS: usize = 1200;
const PROPERTY_CASES: usize = 500;
const ROUND_TRIPS: usize = 500;

struct Line {
    name: &'static str,
    ok: bool,
    detail: String,
}

fn line(name: &'static str, ok: bool, detail: String) -> Line {
    Line { name, ok, detail }
}

fn has_bpar(t: &Phrase) -> bool {
    match t {
        Phrase::BPar(..) => true,
        Phrase::At(_, b) => has_bpar(b),
        Phrase::LSeq(a, b) | Phrase::BSeq(_, a, b) => has_bpar(a) || has_bpar(b),
        _ => false,
    }
}

fn splits(t: &Phrase, out: &mut BTreeSet<SplitSpec>) {
    match t {
        Phrase::BSeq(sp, a, b) | Phrase::BPar(sp, a, b) => {
            out.insert(*sp);
            splits(a, out);
            splits(b, out);
        }
        Phrase::At(_, b) => splits(b, out),
        Phrase::LSeq(a, b) => {
            splits(a, out);
            splits(b, out);
        }
        _ => {}
    }
}

/// Results of running every corpus phrase under its scheduler seeds.
struct Corpus {
    cases: Vec<Case>,
    reports: Vec<(usize, ConformanceReport)>,
    elapsed: Duration,
    splits: BTreeSet<SplitSpec>,
    par_cases: usize,
    par_seed_counts: Vec<usize>,
}

fn corpus() -> Corpus {
    let mut master = ChaCha8Rng::seed_from_u64(2024);
    let mut splits_seen = BTreeSet::new();
    let cases: Vec<Case> = (0..CORPUS)
        .map(|_| {
            let case = gen_case(GenConfig::new(4, 3, master.random()));
            splits(&case.phrase, &mut splits_seen);
            case
        })
        .collect();
    let started = Instant::now();
    let checker = Checker::new();
    let mut reports = Vec::new();
    let mut par_seed_counts = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let seeds: Vec<u64> = if has_bpar(&case.phrase) {
            let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
            let mut s = BTreeSet::from([0]);
            while s.len() < 3 {
                s.insert(rng.random());
            }
            par_seed_counts.push(s.len());
            s.into_iter().collect()
        } else {
            vec![0]
        };
        for s in seeds {
            reports.push((i, checker.refines(&case.phrase, case.place, &case.init, s)));
        }
    }
    Corpus {
        par_cases: par_seed_counts.len(),
        cases,
        reports,
        elapsed: started.elapsed(),
        splits: splits_seen,
        par_seed_counts,
    }
}

/// Runs that passed `check`, and the number that reported it at all.
fn tally(c: &Corpus, check: &str) -> (usize, usize) {
    let mut seen = 0;
    let mut passed = 0;
    for (_, r) in &c.reports {
        for x in r.checks.iter().filter(|x| x.name == check) {
            seen += 1;
            passed += x.passed() as usize;
        }
    }
    (passed, seen)
}

fn first_failure(c: &Corpus, check: &str) -> String {
    c.reports
        .iter()
        .find(|(_, r)| r.checks.iter().any(|x| x.name == check && !x.passed()) || r.checks.iter().any(|x| x.name == "run"))
        .map(|(_, r)| format!("; first failure:\n{r}"))
        .unwrap_or_default()
}

fn refinement(c: &Corpus) -> Line {
    let (passed, seen) = tally(c, "is_trace");
    let ok = passed == seen
        && seen == c.reports.len()
        && c.cases.len() >= 1000
        && c.splits.len() == 4
        && c.elapsed < Duration::from_secs(60);
    line(
        "refinement",
        ok,
        format!(
            "{passed}/{} runs of {} phrases are traces of their event systems; {} split kinds; {:.2}s{}",
            c.reports.len(),
            c.cases.len(),
            c.splits.len(),
            c.elapsed.as_secs_f64(),
            first_failure(c, "is_trace")
        ),
    )
}

fn ordering(c: &Corpus) -> Line {
    let (passed, seen) = tally(c, "ordering");
    let min_seeds = c.par_seed_counts.iter().copied().min().unwrap_or(0);
    let ok = passed == seen && seen == c.reports.len() && c.par_cases > 0 && min_seeds >= 3;
    line(
        "event ordering",
        ok,
        format!(
            "{passed}/{seen} runs keep every ordered pair in order; {} parallel phrases with at least {min_seeds} seeds each{}",
            c.par_cases,
            first_failure(c, "ordering")
        ),
    )
}

/// Random candidate traces: genuine ones, shuffles and corrupted lists.
fn candidate(rng: &mut ChaCha8Rng, es: &EventSystem, all: &BTreeSet<Vec<Event>>) -> Vec<Event> {
    let events: Vec<Event> = events_of(es).into_values().cloned().collect();
    match rng.random_range(0..5) {
        0 | 1 => {
            let i = rng.random_range(0..all.len());
            all.iter().nth(i).unwrap().clone()
        }
        2 => {
            let mut t = events;
            t.shuffle(rng);
            t
        }
        3 => {
            let i = rng.random_range(0..all.len());
            let mut t = all.iter().nth(i).unwrap().clone();
            if t.len() > 1 {
                let (a, b) = (rng.random_range(0..t.len()), rng.random_range(0..t.len()));
                t.swap(a, b);
            }
            t
        }
        _ => {
            let i = rng.random_range(0..all.len());
            let mut t = all.iter().nth(i).unwrap().clone();
            let at = rng.random_range(0..t.len());
            if rng.random_bool(0.5) {
                t.remove(at);
            } else {
                let dup = t[at].clone();
                t.insert(rng.random_range(0..=t.len()), dup);
            }
            t
        }
    }
}

fn oracle(c: &Corpus) -> Line {
    let (passed, seen) = tally(c, "oracle");
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut pairs = 0;
    let mut agree = 0;
    let mut members = 0;
    let mut first_disagreement = String::new();
    while pairs < 1000 {
        let t = gen_phrase(GenConfig::new(rng.random_range(1..=4), 3, rng.random()));
        let (at, _) = annotate(&t, 0);
        let es = ev_sys(&at, Place(rng.random_range(0..3))).unwrap();
        if es.len() > ORACLE_EVENTS {
            continue;
        }
        let all = traces_of(&es).unwrap();
        let tr = candidate(&mut rng, &es, &all);
        let member = all.contains(&tr);
        members += member as usize;
        if is_trace(&es, &tr) == member {
            agree += 1;
        } else if first_disagreement.is_empty() {
            first_disagreement = format!("; disagreement on {tr:?}");
        }
        pairs += 1;
    }
    let small = c
        .reports
        .iter()
        .filter(|(i, _)| c.cases[*i].phrase.event_count() as usize <= ORACLE_EVENTS)
        .count();
    let ok = passed == small && seen == small && small > 0 && agree == pairs && members > 0 && members < pairs;
    line(
        "oracle equivalence",
        ok,
        format!(
            "{passed}/{small} small-system runs found in the enumerated trace sets; is_trace agrees with enumeration on {agree}/{pairs} pairs ({members} members){first_disagreement}{}",
            first_failure(c, "oracle")
        ),
    )
}

fn trace_properties() -> Line {
    let checker = Checker::new();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let (mut cumul, mut irrel) = (0, 0);
    let mut failure = String::new();
    for _ in 0..PROPERTY_CASES {
        let case = gen_case(GenConfig::new(4, 3, rng.random()));
        let (t, p, e) = (&case.phrase, case.place, &case.init);
        let seed = if has_bpar(t) { rng.random() } else { 0 };
        let (lm, lk, l2) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let m = gen_trace(&mut rng, lm, PREFIX_BASE);
        let k = gen_trace(&mut rng, lk, PREFIX_BASE + 100);
        let other = gen_trace(&mut rng, l2, PREFIX_BASE + 200);
        let a = checker.cumul(t, p, e, &m, &k, seed);
        let b = checker.irrel(t, p, e, &[], &other, seed);
        cumul += a.passed() as usize;
        irrel += b.passed() as usize;
        if failure.is_empty() && !(a.passed() && b.passed()) {
            failure = format!("; case seed {}: {} / {}", case.seed, a.detail, b.detail);
        }
    }
    line(
        "trace cumulativity and irrelevance",
        cumul == PROPERTY_CASES && irrel == PROPERTY_CASES,
        format!("cumulativity {cumul}/{PROPERTY_CASES}, irrelevance {irrel}/{PROPERTY_CASES}{failure}"),
    )
}

fn store_overlap(c: &Corpus) -> Line {
    let fired = c
        .reports
        .iter()
        .filter(|(_, r)| r.checks.iter().any(|x| x.name == "run" && x.detail.contains("overlap")))
        .count();
    let errors = c.reports.iter().filter(|(_, r)| r.checks.iter().any(|x| x.name == "run")).count();
    let par_runs = c.reports.iter().filter(|(i, _)| has_bpar(&c.cases[*i].phrase)).count();

    let sp = SplitSpec::ALL[0];
    let leaf = |lo| AnnoPhrase::new(Range::new(lo, lo + 1), AnnoNode::Sig);
    let bad = AnnoPhrase::new(Range::new(0, 4), AnnoNode::BPar(sp, Box::new(leaf(1)), Box::new(leaf(1))));
    let reg = PlaceRegistry::uniform(1, ProviderMode::Abstract);
    let hand_built = run_cvm(&compile_unchecked(&bad), CvmState::new(Evidence::Mt, Place(0)), &reg);
    let caught = matches!(hand_built, Err(CvmError::StoreOverlap(_)));
    line(
        "store non-overlap",
        fired == 0 && errors == 0 && par_runs > 0 && caught,
        format!(
            "check fired on {fired} of {par_runs} parallel runs ({errors} run errors); hand-built overlapping branches {}",
            if caught { "rejected".to_string() } else { format!("gave {hand_built:?}") }
        ),
    )
}

fn evidence_agreement(c: &Corpus) -> Line {
    let (passed, seen) = tally(c, "evidence");
    line(
        "evidence agreement",
        passed == seen && seen == c.reports.len(),
        format!("{passed}/{seen} runs end with the evidence eval computes{}", first_failure(c, "evidence")),
    )
}

fn scenario() -> Line {
    let mut notes = Vec::new();
    let mut ok = true;
    for mode in [ProviderMode::Abstract, ProviderMode::Keyed] {
        match run_demo(0, mode) {
            Ok(d) => {
                let caught: Vec<String> = d
                    .tampers
                    .iter()
                    .map(|t| match t.detected() {
                        true => format!("{} caught by {} at {}", t.name, t.check.as_str(), t.path),
                        false => format!("{} MISSED", t.name),
                    })
                    .collect();
                ok &= d.honest.passed() && d.state.next_id() == 1 && d.tampers.len() == 3;
                ok &= d.tampers.iter().all(|t| t.detected());
                notes.push(format!("{}: honest run {}, {}", mode.as_str(), d.honest.verdict.as_str(), caught.join(", ")));
            }
            Err(e) => {
                ok = false;
                notes.push(format!("{}: {e}", mode.as_str()));
            }
        }
    }
    line("end-to-end scenario", ok, notes.join("; "))
}

fn random_evidence(rng: &mut ChaCha8Rng, depth: u32) -> Evidence {
    let bits = |rng: &mut ChaCha8Rng| {
        let mut b = vec![0u8; rng.random_range(0..40)];
        rng.fill(&mut b[..]);
        Bits(b)
    };
    let leaf = depth == 0 || rng.random_bool(0.3);
    match if leaf { rng.random_range(0..2) } else { rng.random_range(2..7) } {
        0 => Evidence::Mt,
        1 => Evidence::H { bits: bits(rng) },
        2 => Evidence::U {
            asp_id: rng.random_range(0..1 << 40),
            args: (0..rng.random_range(0..3)).map(|i| format!("a\"{i}\\\u{e9}\n")).collect(),
            place: Place(rng.random()),
            bits: bits(rng),
            sub: Box::new(random_evidence(rng, depth - 1)),
        },
        3 => Evidence::G {
            bits: bits(rng),
            sub: Box::new(random_evidence(rng, depth - 1)),
        },
        4 => Evidence::nonce(rng.random(), bits(rng), random_evidence(rng, depth - 1)),
        5 => Evidence::ss(random_evidence(rng, depth - 1), random_evidence(rng, depth - 1)),
        _ => Evidence::pp(random_evidence(rng, depth - 1), random_evidence(rng, depth - 1)),
    }
}

/// Encodes, decodes and re-encodes; both the value and the bytes must
/// survive.
fn survives<T: Canonical + PartialEq + std::fmt::Debug>(v: &T) -> bool {
    let bytes = encode(v);
    match decode::<T>(&bytes) {
        Ok(back) => back == *v && encode(&back) == bytes,
        Err(_) => false,
    }
}

fn round_trips() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut bump = |name, ok: bool| {
        let e = counts.entry(name).or_default();
        e.0 += ok as usize;
        e.1 += 1;
    };
    let mut table = AspTable::new();
    for (name, id) in [("vc", 0), ("attest", 1), ("hash_fs", 2)] {
        table.insert(name, id).unwrap();
    }
    for _ in 0..ROUND_TRIPS {
        let case = gen_case(GenConfig::new(rng.random_range(1..=5), 4, rng.random()));
        let t = &case.phrase;
        let printed = print_phrase(t, &table);
        let reparsed = parse_phrase(&printed, &mut table.clone());
        bump("parse/print", reparsed.as_ref() == Ok(t));
        bump("phrase", survives(t));
        let (at, _) = annotate(t, rng.random_range(0..1000));
        bump("annotated phrase", survives(&at));
        bump("evidence", survives(&random_evidence(&mut rng, 5)));
        let keyed = KeyedProvider::from_seed(rng.random());
        let produced = eval(t, case.place, &case.init, &keyed, 0).unwrap();
        bump("evidence", survives(&produced));
        let es = ev_sys(&at, case.place).unwrap();
        bump("event system", survives(&es));
        let trace: Vec<Event> = events_of(&es).into_values().cloned().collect();
        bump("trace", survives(&trace));
        bump("event", trace.iter().all(survives));

        let mut st = AmState::new();
        for _ in 0..rng.random_range(0..4) {
            st.gen_nonce(&mut rng);
        }
        bump("manager state", survives(&st));
        let mut cfg = AmConfig::new(Place(rng.random_range(0..4)), PlaceRegistry::uniform(3, ProviderMode::Keyed));
        cfg.registry.asps = table.clone();
        cfg.golden.insert((rng.random_range(0..4), Place(1), rng.random_range(0..9)), Bits(vec![rng.random()]));
        let cfg_bytes = encode(&cfg);
        bump("config", decode::<AmConfig>(&cfg_bytes).map(|c| encode(&c)) == Ok(cfg_bytes));
        let report = appraise(t, case.place, &produced, &cfg, &st);
        bump("appraisal", survives(&report));
    }
    let synthetic = AppraisalResult {
        verdict: Outcome::Fail,
        findings: vec![Finding {
            path: "$.left".into(),
            check: Check::Golden,
            outcome: Outcome::Fail,
            detail: "ünïcode \"quoted\"".into(),
        }],
    };
    bump("appraisal", survives(&synthetic));
    let ok = counts.values().all(|(p, n)| p == n && *n >= ROUND_TRIPS);
    let detail = counts
        .iter()
        .map(|(k, (p, n))| format!("{k} {p}/{n}"))
        .collect::<Vec<_>>()
        .join(", ");
    line("round trips", ok, detail)
}

fn main() -> ExitCode {
    let c = corpus();
    let results = [
        refinement(&c),
        ordering(&c),
        oracle(&c),
        trace_properties(),
        store_overlap(&c),
        evidence_agreement(&c),
        scenario(),
        round_trips(),
    ];
    for (i, r) in results.iter().enumerate() {
        println!("[{}] {}. {}: {}", if r.ok { "PASS" } else { "FAIL" }, i + 1, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
