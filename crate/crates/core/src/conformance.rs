//! Executable checks that CVM runs refine the event-system semantics.
//!
//! Phrases are generated at random from a seed; each check reports a
//! pass/fail entry together with the seed that reproduces it.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::am::{array, expect_tag, Outcome};
use crate::cvm::{compile, Cvm, CvmState, Faults, PlaceRegistry, ProviderMode};
use crate::events::{earlier_pairs, ev_sys, is_trace, traces_of, Event, EventSystem, Trace};
use crate::evidence::{eval, Bits, Evidence};
use crate::term::{annotate, AspSpec, Phrase, Place, SplitSpec};
use crate::text::{bad, print_phrase, AspTable, Canonical, Obj, ParseError};

/// Systems up to this many events are also checked against the brute-force
/// trace enumeration.
pub const ORACLE_EVENTS: usize = 8;

/// Ids for generated prefix traces start here, clear of any phrase's ids.
pub const PREFIX_BASE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenConfig {
    pub max_depth: usize,
    pub max_places: u64,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(max_depth: usize, max_places: u64, seed: u64) -> Self {
        assert!(max_depth >= 1, "phrases have depth at least 1");
        assert!(max_places >= 1, "phrases need a place");
        GenConfig {
            max_depth,
            max_places,
            seed,
        }
    }
}

const ARGS: [&str; 3] = ["-r", "/bin", "quick"];

fn gen_leaf(rng: &mut impl Rng, places: u64) -> Phrase {
    match rng.random_range(0..4) {
        0 => {
            let args = (0..rng.random_range(0..=2))
                .map(|_| ARGS[rng.random_range(0..ARGS.len())].to_string())
                .collect();
            Phrase::Asp(AspSpec::new(
                rng.random_range(0..4),
                args,
                rng.random_range(0..places),
                rng.random_range(0..4),
            ))
        }
        1 => Phrase::Cpy,
        2 => Phrase::Sig,
        _ => Phrase::Hsh,
    }
}

fn gen_split(rng: &mut impl Rng) -> SplitSpec {
    SplitSpec::ALL[rng.random_range(0..4)]
}

fn gen_in(rng: &mut impl Rng, depth: usize, places: u64) -> Phrase {
    if depth <= 1 {
        return gen_leaf(rng, places);
    }
    let sub = |rng: &mut _| gen_in(rng, depth - 1, places);
    match rng.random_range(0..8) {
        0..=3 => gen_leaf(rng, places),
        4 => {
            let q = rng.random_range(0..places);
            Phrase::at(q, sub(rng))
        }
        5 => Phrase::lseq(sub(rng), sub(rng)),
        6 => {
            let sp = gen_split(rng);
            Phrase::bseq(sp, sub(rng), sub(rng))
        }
        _ => {
            let sp = gen_split(rng);
            Phrase::bpar(sp, sub(rng), sub(rng))
        }
    }
}

/// A random phrase of depth at most `max_depth` over places
/// `0..max_places`, determined by the seed.
pub fn gen_phrase(cfg: GenConfig) -> Phrase {
    gen_in(&mut ChaCha8Rng::seed_from_u64(cfg.seed), cfg.max_depth, cfg.max_places)
}

/// A generated test case: phrase, starting place and initial evidence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Case {
    pub phrase: Phrase,
    pub place: Place,
    pub init: Evidence,
    pub seed: u64,
}

pub fn gen_case(cfg: GenConfig) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phrase = gen_in(&mut rng, cfg.max_depth, cfg.max_places);
    let place = Place(rng.random_range(0..cfg.max_places));
    let init = if rng.random_bool(0.5) {
        Evidence::Mt
    } else {
        let mut bits = vec![0u8; 16];
        rng.fill(&mut bits[..]);
        Evidence::nonce(rng.random_range(0..4), Bits(bits), Evidence::Mt)
    };
    Case {
        phrase,
        place,
        init,
        seed: cfg.seed,
    }
}

/// A trace of `len` unrelated events with ids from `base` upwards.
pub fn gen_trace(rng: &mut impl Rng, len: usize, base: u64) -> Trace {
    (0..len as u64)
        .map(|i| {
            let (id, place) = (base + i, Place(rng.random_range(0..4)));
            match rng.random_range(0..3) {
                0 => Event::Copy { id, place },
                1 => Event::Sign { id, place },
                _ => Event::Hash { id, place },
            }
        })
        .collect()
}

/// Abstract-mode registry covering every place `t` may reach from `p`.
pub fn registry_for(t: &Phrase, p: Place) -> PlaceRegistry {
    let top = t.places(p).into_iter().max().unwrap_or(p);
    PlaceRegistry::uniform(top.0 + 1, ProviderMode::Abstract)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckResult {
    pub name: String,
    pub outcome: Outcome,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, ok: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            outcome: if ok { Outcome::Pass } else { Outcome::Fail },
            detail: detail.into(),
        }
    }

    pub fn passed(&self) -> bool {
        self.outcome == Outcome::Pass
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConformanceReport {
    pub phrase: Phrase,
    pub place: Place,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shown = print_phrase(&self.phrase, &AspTable::new());
        writeln!(f, "seed {} place {}: {shown}", self.seed, self.place)?;
        for c in &self.checks {
            writeln!(f, "  {:<4} {:<10} {}", c.outcome.as_str(), c.name, c.detail)?;
        }
        Ok(())
    }
}

/// The first earlier-ordered pair of ids that `trace` lists out of order
/// or omits.
pub fn ordering_violation(es: &EventSystem, trace: &[Event]) -> Option<(u64, u64)> {
    let pos: BTreeMap<u64, usize> = trace.iter().enumerate().map(|(i, e)| (e.id(), i)).collect();
    earlier_pairs(es)
        .into_iter()
        .find(|(v, w)| match (pos.get(v), pos.get(w)) {
            (Some(i), Some(j)) => i >= j,
            _ => true,
        })
}

/// Trace-level checks: membership, ordering and, for small systems, the
/// brute-force oracle.
pub fn trace_checks(es: &EventSystem, trace: &[Event]) -> Vec<CheckResult> {
    let mut out = vec![CheckResult::new(
        "is_trace",
        is_trace(es, trace),
        format!("{} events", trace.len()),
    )];
    out.push(match ordering_violation(es, trace) {
        None => CheckResult::new("ordering", true, "every earlier pair in order"),
        Some((v, w)) => CheckResult::new("ordering", false, format!("event {v} must precede event {w}")),
    });
    if es.len() <= ORACLE_EVENTS {
        let member = traces_of(es).is_ok_and(|all| all.iter().any(|t| t.as_slice() == trace));
        out.push(CheckResult::new("oracle", member, "membership in enumerated traces"));
    }
    out
}

/// Runs conformance checks against a CVM configured with `faults`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Checker {
    pub faults: Faults,
    pub threaded: bool,
}

impl Checker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_faults(faults: Faults) -> Self {
        Checker { faults, threaded: false }
    }

    fn run(&self, t: &Phrase, p: Place, e: &Evidence, trace: Trace, seed: u64) -> Result<CvmState, String> {
        let (at, _) = annotate(t, 0);
        let prog = compile(&at).map_err(|e| e.to_string())?;
        let reg = registry_for(t, p);
        Cvm::new(&reg)
            .seed(seed)
            .threaded(self.threaded)
            .faults(self.faults)
            .run(&prog, CvmState::new(e.clone(), p).with_trace(trace))
            .map_err(|e| e.to_string())
    }

    /// Runs `t` at `p` from an empty trace and checks the trace against the
    /// event system, the evidence against `eval`, and the final place.
    pub fn refines(&self, t: &Phrase, p: Place, e: &Evidence, seed: u64) -> ConformanceReport {
        let mut report = ConformanceReport {
            phrase: t.clone(),
            place: p,
            seed,
            checks: Vec::new(),
        };
        let st = match self.run(t, p, e, Vec::new(), seed) {
            Ok(st) => st,
            Err(err) => {
                report.checks.push(CheckResult::new("run", false, err));
                return report;
            }
        };
        let (at, _) = annotate(t, 0);
        match ev_sys(&at, p) {
            Ok(es) => report.checks.extend(trace_checks(&es, &st.trace)),
            Err(err) => report.checks.push(CheckResult::new("is_trace", false, err.to_string())),
        }
        let expected = eval(t, p, e, &registry_for(t, p), 0);
        report.checks.push(match expected {
            Ok(ev) if ev == st.ev => CheckResult::new("evidence", true, "equals eval"),
            Ok(_) => CheckResult::new("evidence", false, "differs from eval"),
            Err(err) => CheckResult::new("evidence", false, err.to_string()),
        });
        report.checks.push(CheckResult::new(
            "place",
            st.place == p,
            format!("ended at place {}", st.place),
        ));
        report
    }

    /// The final trace from `m ++ k` equals `m` followed by the final trace
    /// from `k`.
    pub fn cumul(&self, t: &Phrase, p: Place, e: &Evidence, m: &[Event], k: &[Event], seed: u64) -> CheckResult {
        if let Some(clash) = clash(t, m.iter().chain(k)) {
            return CheckResult::new("cumul", false, format!("prefix reuses phrase event id {clash}"));
        }
        let whole = self.run(t, p, e, [m, k].concat(), seed);
        let tail = self.run(t, p, e, k.to_vec(), seed);
        match (whole, tail) {
            (Ok(a), Ok(b)) => {
                let ok = a.trace == [m, &b.trace].concat();
                CheckResult::new("cumul", ok, format!("prefix of {} then {} events", m.len(), k.len()))
            }
            (Err(err), _) | (_, Err(err)) => CheckResult::new("cumul", false, err),
        }
    }

    /// Evidence, store and place do not depend on the initial trace.
    pub fn irrel(&self, t: &Phrase, p: Place, e: &Evidence, tr1: &[Event], tr2: &[Event], seed: u64) -> CheckResult {
        if let Some(clash) = clash(t, tr1.iter().chain(tr2)) {
            return CheckResult::new("irrel", false, format!("prefix reuses phrase event id {clash}"));
        }
        match (self.run(t, p, e, tr1.to_vec(), seed), self.run(t, p, e, tr2.to_vec(), seed)) {
            (Ok(a), Ok(b)) => {
                let diff = [
                    (a.ev != b.ev, "evidence"),
                    (a.store != b.store, "store"),
                    (a.place != b.place, "place"),
                ]
                .into_iter()
                .filter_map(|(d, name)| d.then_some(name))
                .collect::<Vec<_>>();
                if diff.is_empty() {
                    CheckResult::new("irrel", true, format!("initial traces of {} and {} events", tr1.len(), tr2.len()))
                } else {
                    CheckResult::new("irrel", false, format!("{} changed with the initial trace", diff.join(", ")))
                }
            }
            (Err(err), _) | (_, Err(err)) => CheckResult::new("irrel", false, err),
        }
    }
}

fn clash<'a>(t: &Phrase, mut events: impl Iterator<Item = &'a Event>) -> Option<u64> {
    let n = t.event_count();
    events.find(|e| e.id() < n).map(Event::id)
}

pub fn check_refines(t: &Phrase, p: Place, e: &Evidence, seed: u64) -> ConformanceReport {
    Checker::new().refines(t, p, e, seed)
}

pub fn check_cumul(t: &Phrase, p: Place, e: &Evidence, m: &[Event], k: &[Event], seed: u64) -> CheckResult {
    Checker::new().cumul(t, p, e, m, k, seed)
}

pub fn check_irrel(t: &Phrase, p: Place, e: &Evidence, tr1: &[Event], tr2: &[Event], seed: u64) -> CheckResult {
    Checker::new().irrel(t, p, e, tr1, tr2, seed)
}

fn has_bpar(t: &Phrase) -> bool {
    match t {
        Phrase::BPar(..) => true,
        Phrase::At(_, b) => has_bpar(b),
        Phrase::LSeq(a, b) | Phrase::BSeq(_, a, b) => has_bpar(a) || has_bpar(b),
        _ => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteConfig {
    pub count: usize,
    pub max_depth: usize,
    pub max_places: u64,
    pub seed: u64,
    /// Scheduler seeds tried on phrases with parallel branches.
    pub par_seeds: usize,
    pub threaded: bool,
}

impl SuiteConfig {
    pub fn new(count: usize, max_depth: usize, seed: u64) -> Self {
        SuiteConfig {
            count,
            max_depth,
            max_places: 3,
            seed,
            par_seeds: 3,
            threaded: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SuiteReport {
    pub cases: usize,
    /// Passing and failing runs per check name.
    pub tally: BTreeMap<String, (usize, usize)>,
    pub failures: Vec<ConformanceReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, report: ConformanceReport) {
        for c in &report.checks {
            let slot = self.tally.entry(c.name.clone()).or_default();
            if c.passed() {
                slot.0 += 1;
            } else {
                slot.1 += 1;
            }
        }
        if !report.passed() {
            self.failures.push(report);
        }
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cases: {}", self.cases)?;
        for (name, (pass, fail)) in &self.tally {
            writeln!(f, "  {name:<10} {pass:>6} passed {fail:>4} failed")?;
        }
        for r in &self.failures {
            write!(f, "{r}")?;
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Generates `count` cases and runs every check on each: refinement under
/// one scheduler seed (several for parallel phrases), cumulativity and
/// irrelevance with random prefix traces.
pub fn run_suite(cfg: SuiteConfig) -> SuiteReport {
    let checker = Checker {
        faults: Faults::default(),
        threaded: cfg.threaded,
    };
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut suite = SuiteReport::default();
    for _ in 0..cfg.count {
        let case_seed: u64 = master.random();
        let case = gen_case(GenConfig::new(cfg.max_depth, cfg.max_places, case_seed));
        let (t, p, e) = (&case.phrase, case.place, &case.init);
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed ^ 0x5eed);
        let runs = if has_bpar(t) { cfg.par_seeds.max(1) } else { 1 };
        let sched: Vec<u64> = (0..runs as u64).map(|i| if i == 0 { 0 } else { rng.random::<u64>() | 1 }).collect();
        for &s in &sched {
            let mut report = checker.refines(t, p, e, s);
            report.seed = case_seed;
            report.checks.iter_mut().for_each(|c| c.detail = format!("{} (schedule {s})", c.detail));
            suite.record(report);
        }
        let (lm, lk) = (rng.random_range(0..5), rng.random_range(0..5));
        let m = gen_trace(&mut rng, lm, PREFIX_BASE);
        let k = gen_trace(&mut rng, lk, PREFIX_BASE + 100);
        let s = sched[sched.len() - 1];
        let props = vec![checker.cumul(t, p, e, &m, &k, s), checker.irrel(t, p, e, &[], &k, s)];
        suite.record(ConformanceReport {
            phrase: t.clone(),
            place: p,
            seed: case_seed,
            checks: props,
        });
        suite.cases += 1;
    }
    suite
}

impl Canonical for ConformanceReport {
    fn write_canonical(&self, out: &mut String) {
        Obj::new(out, "CONFORMANCE")
            .node("phrase", &self.phrase)
            .nat("place", self.place.0)
            .nat("seed", self.seed)
            .raw("checks", |out| {
                out.push('[');
                for (i, c) in self.checks.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    Obj::new(out, "CHECK")
                        .str("name", &c.name)
                        .str("outcome", c.outcome.as_str())
                        .str("detail", &c.detail)
                        .done();
                }
                out.push(']');
            })
            .done();
    }

    fn from_value(v: &Value) -> Result<Self, ParseError> {
        let f = expect_tag(v, "CONFORMANCE")?;
        let checks = array(&f, "checks")?
            .iter()
            .map(|x| {
                let g = expect_tag(x, "CHECK")?;
                let outcome = match g.str("outcome")? {
                    "pass" => Outcome::Pass,
                    "fail" => Outcome::Fail,
                    _ => return Err(bad("`pass` or `fail`", g.get("outcome")?)),
                };
                Ok(CheckResult {
                    name: g.str("name")?.to_string(),
                    outcome,
                    detail: g.str("detail")?.to_string(),
                })
            })
            .collect::<Result<Vec<_>, ParseError>>()?;
        Ok(ConformanceReport {
            phrase: f.node("phrase")?,
            place: Place(f.nat("place")?),
            seed: f.nat("seed")?,
            checks,
        })
    }
}

impl Canonical for SuiteReport {
    fn write_canonical(&self, out: &mut String) {
        Obj::new(out, "SUITE")
            .nat("cases", self.cases as u64)
            .raw("tally", |out| {
                out.push('[');
                for (i, (name, (pass, fail))) in self.tally.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    Obj::new(out, "TALLY")
                        .str("name", name)
                        .nat("passed", *pass as u64)
                        .nat("failed", *fail as u64)
                        .done();
                }
                out.push(']');
            })
            .list("failures", &self.failures)
            .done();
    }

    fn from_value(v: &Value) -> Result<Self, ParseError> {
        let f = expect_tag(v, "SUITE")?;
        let mut tally = BTreeMap::new();
        for x in array(&f, "tally")? {
            let g = expect_tag(x, "TALLY")?;
            tally.insert(g.str("name")?.to_string(), (g.nat("passed")? as usize, g.nat("failed")? as usize));
        }
        Ok(SuiteReport {
            cases: f.nat("cases")? as usize,
            tally,
            failures: f.list("failures")?,
        })
    }
}
