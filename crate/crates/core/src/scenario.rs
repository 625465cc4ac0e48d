//! The layered virus-checker attestation, end to end.
//!
//! Place 0 is the appraiser, place 1 the target platform running the virus
//! checker and place 2 a measurer that vouches for place 1's measurement
//! service. The appraiser sends a fresh nonce, runs the phrase, appraises the
//! result, then replays three tampered copies of the evidence.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::am::{appraise, record_golden, run_avm, AmConfig, AmState, AppraisalResult, Check};
use crate::cvm::{compile, CvmError, PlaceRegistry, ProviderMode};
use crate::evidence::Evidence;
use crate::term::{annotate, Phrase, Place};
use crate::text::{self, parse_phrase, print_phrase, AspTable, ParseError};

pub const SOURCE: &str = "\
# The measurer at place 2 checks the measurement service at place 1 and
# signs; place 1 then hashes its checker binaries, runs the virus checker
# and signs the whole bundle.
@1 [
  @2 [ m(1, 12) -> SIG ]
  -> h(1, 11)
  -> vc(1, 10, \"full\")
  -> SIG
]
";

pub const APPRAISER: Place = Place(0);

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("run failed: {0}")]
    Run(#[from] CvmError),
}

/// A tampered copy of the honest evidence and what appraisal made of it.
#[derive(Clone, Debug)]
pub struct Tamper {
    pub name: &'static str,
    pub path: &'static str,
    pub check: Check,
    pub evidence: Evidence,
    pub result: AppraisalResult,
}

impl Tamper {
    /// Appraisal failed and blamed the tampered location.
    pub fn detected(&self) -> bool {
        !self.result.passed() && self.result.failures().any(|f| f.check == self.check && f.path == self.path)
    }
}

#[derive(Clone, Debug)]
pub struct Demo {
    pub phrase: Phrase,
    pub table: AspTable,
    pub config: AmConfig,
    pub state: AmState,
    pub evidence: Evidence,
    pub honest: AppraisalResult,
    pub tampers: Vec<Tamper>,
    /// Human-readable log of every stage.
    pub log: String,
}

impl Demo {
    pub fn passed(&self) -> bool {
        self.honest.passed() && self.tampers.iter().all(Tamper::detected)
    }
}

fn sub_mut(e: &mut Evidence, depth: usize) -> &mut Evidence {
    let mut cur = e;
    for _ in 0..depth {
        cur = match cur {
            Evidence::U { sub, .. } | Evidence::G { sub, .. } | Evidence::N { sub, .. } => sub,
            other => return other,
        };
    }
    cur
}

fn section(log: &mut String, title: &str) {
    let _ = writeln!(log, "\n== {title}");
}

/// Runs the scenario. `seed` drives the nonce generator.
pub fn run_demo(seed: u64, mode: ProviderMode) -> Result<Demo, ScenarioError> {
    let mut log = String::new();
    let mut table = AspTable::new();
    let phrase = parse_phrase(SOURCE, &mut table)?;
    let mut registry = PlaceRegistry::uniform(3, mode);
    registry.asps = table.clone();
    let _ = write!(log, "== phrase (appraiser at place {APPRAISER}, {} providers)\n{}", mode.as_str(), SOURCE);
    let _ = writeln!(log, "parsed: {}", print_phrase(&phrase, &table));

    section(&mut log, "program");
    let (at, _) = annotate(&phrase, 0);
    let _ = write!(log, "{}", compile(&at).expect("annotation is well formed"));

    let reference = AmConfig::new(APPRAISER, registry.clone());
    let (reference_ev, _) = run_avm(&phrase, Evidence::Mt, &reference, seed)?;
    let golden = record_golden(&phrase, APPRAISER, &reference_ev, &reference);
    let config = reference.with_golden(golden);
    section(&mut log, "golden values from reference run");
    for ((asp, place, target), bits) in &config.golden {
        let _ = writeln!(log, "{} at place {place} on target {target}: {bits}", table.name_of(*asp));
    }

    let mut state = AmState::new();
    let (nonce_id, nonce) = state.gen_nonce(&mut ChaCha8Rng::seed_from_u64(seed));
    section(&mut log, "nonce");
    let _ = writeln!(log, "id {nonce_id}: {nonce}");

    let init = Evidence::nonce(nonce_id, nonce, Evidence::Mt);
    let (evidence, trace) = run_avm(&phrase, init, &config, seed)?;
    section(&mut log, "trace");
    for e in &trace {
        let _ = writeln!(log, "{e}");
    }
    section(&mut log, "evidence");
    let _ = writeln!(log, "{}", text::encode_string(&evidence));

    let honest = appraise(&phrase, APPRAISER, &evidence, &config, &state);
    section(&mut log, "appraisal");
    let _ = write!(log, "{honest}");

    let mut tampers = Vec::new();
    let mut tamper = |name, path, check, edit: &dyn Fn(&mut Evidence)| {
        let mut e = evidence.clone();
        edit(&mut e);
        let result = appraise(&phrase, APPRAISER, &e, &config, &state);
        tampers.push(Tamper {
            name,
            path,
            check,
            evidence: e,
            result,
        });
    };
    tamper("flipped signature byte", "$", Check::Signature, &|e| {
        if let Evidence::G { bits, .. } = e {
            bits.0[0] ^= 0x01;
        }
    });
    tamper("wrong nonce id", "$.sub.sub.sub.sub.sub", Check::Nonce, &|e| {
        if let Evidence::N { nonce_id, .. } = sub_mut(e, 5) {
            *nonce_id += 1;
        }
    });
    tamper("altered virus checker result", "$.sub", Check::Golden, &|e| {
        if let Evidence::U { bits, .. } = sub_mut(e, 1) {
            let last = bits.0.len() - 1;
            bits.0[last] ^= 0x80;
        }
    });
    for t in &tampers {
        section(&mut log, &format!("tamper: {} at {}", t.name, t.path));
        let _ = write!(log, "{}", t.result);
        let _ = writeln!(log, "{}", if t.detected() { "detected" } else { "MISSED" });
    }

    let demo = Demo {
        phrase,
        table,
        config,
        state,
        evidence,
        honest,
        tampers,
        log,
    };
    let mut log = demo.log.clone();
    section(&mut log, "result");
    let _ = writeln!(log, "{}", if demo.passed() { "PASS" } else { "FAIL" });
    Ok(Demo { log, ..demo })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_passes_in_both_modes() {
        for mode in [ProviderMode::Abstract, ProviderMode::Keyed] {
            let d = run_demo(0, mode).unwrap();
            assert!(d.honest.passed(), "{}", d.log);
            for t in &d.tampers {
                assert!(t.detected(), "{}: {}", t.name, t.result);
            }
            assert!(d.log.ends_with("PASS\n"));
        }
    }

    #[test]
    fn demo_is_deterministic() {
        let a = run_demo(3, ProviderMode::Keyed).unwrap().log;
        assert_eq!(a, run_demo(3, ProviderMode::Keyed).unwrap().log);
        assert_ne!(a, run_demo(4, ProviderMode::Keyed).unwrap().log);
    }

    #[test]
    fn tamper_paths_name_the_edited_nodes() {
        let d = run_demo(0, ProviderMode::Abstract).unwrap();
        assert!(matches!(sub_mut(&mut d.evidence.clone(), 5), Evidence::N { .. }));
        assert!(matches!(sub_mut(&mut d.evidence.clone(), 1), Evidence::U { .. }));
        for t in &d.tampers {
            assert_ne!(t.evidence, d.evidence, "{}", t.name);
        }
    }
}
