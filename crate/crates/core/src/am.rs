//! The attestation manager: nonce bookkeeping, phrase invocation through the
//! CVM, and appraisal of the evidence that comes back.

use std::collections::BTreeMap;
use std::fmt;

use rand::RngCore;
use serde_json::Value;

use crate::cvm::{compile, Cvm, CvmError, CvmState, PlaceEntry, PlaceRegistry, ProviderMode};
use crate::events::Trace;
use crate::evidence::{Bits, Evidence, ProviderSet};
use crate::term::{annotate, AspSpec, Phrase, Place, Selector, SplitSpec};
use crate::text::{self, bad, AspTable, Canonical, Fields, Obj, ParseError};

pub const NONCE_LEN: usize = 16;

/// Nonces issued by one attestation manager session.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AmState {
    next_id: u64,
    nonces: BTreeMap<u64, Bits>,
}

impl AmState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Id the next nonce will receive.
    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn nonces(&self) -> &BTreeMap<u64, Bits> {
        &self.nonces
    }

    pub fn nonce(&self, id: u64) -> Option<&Bits> {
        self.nonces.get(&id)
    }

    /// Issues a fresh nonce and remembers it.
    pub fn gen_nonce(&mut self, rng: &mut impl RngCore) -> (u64, Bits) {
        let mut bytes = vec![0u8; NONCE_LEN];
        rng.fill_bytes(&mut bytes);
        let id = self.next_id;
        let bits = Bits(bytes);
        self.nonces.insert(id, bits.clone());
        self.next_id += 1;
        (id, bits)
    }

    /// Rebuilds a state from its nonce map.
    pub fn from_nonces(nonces: BTreeMap<u64, Bits>) -> Self {
        let next_id = nonces.keys().next_back().map_or(0, |k| k + 1);
        AmState { next_id, nonces }
    }
}

/// `(asp_id, place, target_id)`
pub type GoldenKey = (u64, Place, u64);

/// What an appraiser trusts: the places with their keys, the ASP names, and
/// expected measurement values.
#[derive(Clone, Debug, Default)]
pub struct AmConfig {
    /// The manager's own place.
    pub place: Place,
    pub registry: PlaceRegistry,
    pub golden: BTreeMap<GoldenKey, Bits>,
}

impl AmConfig {
    pub fn new(place: Place, registry: PlaceRegistry) -> Self {
        AmConfig {
            place,
            registry,
            golden: BTreeMap::new(),
        }
    }

    pub fn with_golden(mut self, golden: BTreeMap<GoldenKey, Bits>) -> Self {
        self.golden = golden;
        self
    }
}

/// Runs `t` at the manager's own place, starting from `init`.
pub fn run_avm(t: &Phrase, init: Evidence, cfg: &AmConfig, seed: u64) -> Result<(Evidence, Trace), CvmError> {
    let (at, _) = annotate(t, 0);
    let prog = compile(&at)?;
    let st = Cvm::new(&cfg.registry)
        .seed(seed)
        .run(&prog, CvmState::new(init, cfg.place))?;
    Ok((st.ev, st.trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Outcome {
    Pass,
    Fail,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Pass => "pass",
            Outcome::Fail => "fail",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Check {
    Shape,
    Signature,
    Nonce,
    Golden,
    UnverifiableHash,
}

impl Check {
    pub fn as_str(self) -> &'static str {
        match self {
            Check::Shape => "shape",
            Check::Signature => "signature",
            Check::Nonce => "nonce",
            Check::Golden => "golden",
            Check::UnverifiableHash => "unverifiable-hash",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Check::Shape, Check::Signature, Check::Nonce, Check::Golden, Check::UnverifiableHash]
            .into_iter()
            .find(|c| c.as_str() == s)
    }
}

/// One appraisal check applied at a path into the evidence, such as
/// `$.sub.left`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Finding {
    pub path: String,
    pub check: Check,
    pub outcome: Outcome,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AppraisalResult {
    pub verdict: Outcome,
    pub findings: Vec<Finding>,
}

impl AppraisalResult {
    pub fn passed(&self) -> bool {
        self.verdict == Outcome::Pass
    }

    pub fn failures(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.outcome == Outcome::Fail)
    }
}

impl fmt::Display for AppraisalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "verdict: {}", self.verdict.as_str().to_uppercase())?;
        for x in &self.findings {
            writeln!(f, "  {:<4} {:<17} {:<24} {}", x.outcome.as_str(), x.check.as_str(), x.path, x.detail)?;
        }
        Ok(())
    }
}

/// The evidence a subterm started from, if it can be recovered.
type Input<'e> = Option<(&'e Evidence, String)>;

struct Walker<'a> {
    cfg: &'a AmConfig,
    st: &'a AmState,
    findings: Vec<Finding>,
    shape_ok: bool,
    measured: BTreeMap<GoldenKey, Option<Bits>>,
}

fn tag(e: &Evidence) -> &'static str {
    match e {
        Evidence::Mt => "MT",
        Evidence::U { .. } => "U",
        Evidence::G { .. } => "G",
        Evidence::H { .. } => "H",
        Evidence::N { .. } => "N",
        Evidence::SS(..) => "SS",
        Evidence::PP(..) => "PP",
    }
}

impl<'a> Walker<'a> {
    fn new(cfg: &'a AmConfig, st: &'a AmState) -> Self {
        Walker {
            cfg,
            st,
            findings: Vec::new(),
            shape_ok: true,
            measured: BTreeMap::new(),
        }
    }

    fn note(&mut self, path: &str, check: Check, ok: bool, detail: String) {
        self.findings.push(Finding {
            path: path.to_string(),
            check,
            outcome: if ok { Outcome::Pass } else { Outcome::Fail },
            detail,
        });
    }

    fn bad_shape(&mut self, path: &str, detail: String) {
        self.shape_ok = false;
        self.note(path, Check::Shape, false, detail);
    }

    /// Matches `e` against the evidence `t` produces at `p` and returns the
    /// evidence `t` must have started from.
    fn walk<'e>(&mut self, t: &Phrase, p: Place, e: &'e Evidence, path: &str) -> Input<'e> {
        match (t, e) {
            (Phrase::Cpy, _) => Some((e, path.to_string())),
            (Phrase::At(q, body), _) => self.walk(body, *q, e, path),
            (Phrase::LSeq(a, b), _) => {
                let (mid, mid_path) = self.walk(b, p, e, path)?;
                self.walk(a, p, mid, &mid_path)
            }
            (
                Phrase::Asp(a),
                Evidence::U {
                    asp_id,
                    args,
                    place,
                    bits,
                    sub,
                },
            ) if *asp_id == a.asp_id && *args == a.args && *place == p => {
                self.measurement(a, p, bits, path);
                Some((sub, format!("{path}.sub")))
            }
            (Phrase::Sig, Evidence::G { bits, sub }) => {
                let msg = text::encode(&**sub);
                match self.cfg.registry.provider_at(p) {
                    Ok(prov) => {
                        let ok = prov.verify(p, &msg, bits);
                        let detail = if ok { "verified" } else { "does not verify" };
                        self.note(path, Check::Signature, ok, format!("signature by place {p} {detail}"));
                    }
                    Err(_) => self.note(path, Check::Signature, false, format!("no key for place {p}")),
                }
                Some((sub, format!("{path}.sub")))
            }
            (Phrase::Hsh, Evidence::H { .. }) => {
                self.note(path, Check::UnverifiableHash, true, format!("hash by place {p} checked by shape only"));
                None
            }
            (Phrase::BSeq(sp, l, r), Evidence::SS(el, er)) | (Phrase::BPar(sp, l, r), Evidence::PP(el, er)) => {
                let (pl, pr) = (format!("{path}.left"), format!("{path}.right"));
                let il = self.walk(l, p, el, &pl);
                let ir = self.walk(r, p, er, &pr);
                self.join_inputs(*sp, il, ir, path)
            }
            _ => {
                let want = match t {
                    Phrase::Asp(a) => format!("U from asp {} at place {p}", a.asp_id),
                    Phrase::Sig => "G".into(),
                    Phrase::Hsh => "H".into(),
                    Phrase::BSeq(..) => "SS".into(),
                    _ => "PP".into(),
                };
                self.bad_shape(path, format!("expected {want}, found {}", describe(e)));
                None
            }
        }
    }

    fn measurement(&mut self, a: &AspSpec, p: Place, bits: &Bits, path: &str) {
        let key = (a.asp_id, p, a.target_id);
        self.measured
            .entry(key)
            .and_modify(|v| {
                if v.as_ref() != Some(bits) {
                    *v = None;
                }
            })
            .or_insert_with(|| Some(bits.clone()));
        if let Some(g) = self.cfg.golden.get(&key) {
            let ok = g == bits;
            let detail = format!(
                "asp {} at place {p} on target {} {}",
                a.asp_id,
                a.target_id,
                if ok { "matches golden value" } else { "differs from golden value" }
            );
            self.note(path, Check::Golden, ok, detail);
        }
    }

    fn join_inputs<'e>(&mut self, sp: SplitSpec, l: Input<'e>, r: Input<'e>, path: &str) -> Input<'e> {
        let mut side = |sel, input: Input<'e>| match sel {
            Selector::All => input,
            Selector::None => {
                if let Some((e, at)) = input {
                    if *e != Evidence::Mt {
                        self.bad_shape(&at, format!("branch without input evidence starts from {}", describe(e)));
                    }
                }
                None
            }
        };
        let (l, r) = (side(sp.left, l), side(sp.right, r));
        match (l, r) {
            (Some(a), Some(b)) => {
                if a.0 != b.0 {
                    self.bad_shape(path, "branches started from different evidence".into());
                }
                Some(a)
            }
            (a, b) => a.or(b),
        }
    }

    /// The evidence a run started from: nonces over empty evidence.
    fn initial(&mut self, mut e: &Evidence, mut path: String) {
        loop {
            match e {
                Evidence::Mt => return,
                Evidence::N { nonce_id, bits, sub } => {
                    match self.st.nonce(*nonce_id) {
                        Some(b) if b == bits => {
                            self.note(&path, Check::Nonce, true, format!("nonce {nonce_id} is current"))
                        }
                        Some(_) => self.note(&path, Check::Nonce, false, format!("nonce {nonce_id} has wrong bits")),
                        None => self.note(&path, Check::Nonce, false, format!("nonce {nonce_id} was never issued")),
                    }
                    e = sub;
                    path.push_str(".sub");
                }
                other => {
                    let detail = format!("initial evidence may hold only nonces, found {}", describe(other));
                    self.bad_shape(&path, detail);
                    return;
                }
            }
        }
    }

    fn finish(mut self, t: &Phrase, p: Place, e: &Evidence) -> Self {
        if let Some((init, path)) = self.walk(t, p, e, "$") {
            self.initial(init, path);
        }
        if self.shape_ok {
            self.findings.insert(
                0,
                Finding {
                    path: "$".into(),
                    check: Check::Shape,
                    outcome: Outcome::Pass,
                    detail: "evidence matches the phrase".into(),
                },
            );
        }
        self
    }
}

fn describe(e: &Evidence) -> String {
    match e {
        Evidence::U { asp_id, place, .. } => format!("U from asp {asp_id} at place {place}"),
        other => tag(other).to_string(),
    }
}

/// Appraises evidence returned by running `t` at `p`. Every check performed
/// is reported; the verdict passes iff all of them do.
pub fn appraise(t: &Phrase, p: Place, e: &Evidence, cfg: &AmConfig, st: &AmState) -> AppraisalResult {
    let w = Walker::new(cfg, st).finish(t, p, e);
    let verdict = if w.findings.iter().all(|f| f.outcome == Outcome::Pass) {
        Outcome::Pass
    } else {
        Outcome::Fail
    };
    AppraisalResult {
        verdict,
        findings: w.findings,
    }
}

/// Golden values taken from a trusted reference run of `t` at `p`.
/// Measurements that produced different values within the run are left
/// out.
pub fn record_golden(t: &Phrase, p: Place, e: &Evidence, cfg: &AmConfig) -> BTreeMap<GoldenKey, Bits> {
    let unused = AmState::new();
    let bare = AmConfig {
        golden: BTreeMap::new(),
        ..cfg.clone()
    };
    Walker::new(&bare, &unused)
        .finish(t, p, e)
        .measured
        .into_iter()
        .filter_map(|(k, v)| Some((k, v?)))
        .collect()
}

impl Canonical for AmState {
    fn write_canonical(&self, out: &mut String) {
        Obj::new(out, "AMSTATE")
            .nat("next", self.next_id)
            .raw("nonces", |out| {
                out.push('[');
                for (i, (id, bits)) in self.nonces.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    Obj::new(out, "NONCE").nat("id", *id).bits("bits", bits).done();
                }
                out.push(']');
            })
            .done();
    }

    fn from_value(v: &Value) -> Result<Self, ParseError> {
        let f = expect_tag(v, "AMSTATE")?;
        let mut nonces = BTreeMap::new();
        for n in array(&f, "nonces")? {
            let g = expect_tag(n, "NONCE")?;
            if nonces.insert(g.nat("id")?, g.bits("bits")?).is_some() {
                return Err(bad("distinct nonce ids", n));
            }
        }
        let st = AmState::from_nonces(nonces);
        if f.nat("next")? != st.next_id {
            return Err(bad(format!("`next` equal to {}", st.next_id), f.get("next")?));
        }
        Ok(st)
    }
}

impl Canonical for AmConfig {
    fn write_canonical(&self, out: &mut String) {
        Obj::new(out, "AMCONFIG")
            .nat("place", self.place.0)
            .raw("places", |out| {
                out.push('[');
                for (i, (p, e)) in self.registry.places().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    Obj::new(out, "PLACE")
                        .nat("id", p.0)
                        .str("mode", e.mode.as_str())
                        .nat("seed", e.key_seed)
                        .done();
                }
                out.push(']');
            })
            .raw("asps", |out| {
                out.push('[');
                let mut asps: Vec<_> = self.registry.asps.iter().collect();
                asps.sort_by_key(|(_, id)| *id);
                for (i, (name, id)) in asps.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    Obj::new(out, "ASP").str("name", name).nat("id", id).done();
                }
                out.push(']');
            })
            .raw("golden", |out| {
                out.push('[');
                for (i, ((asp, place, target), bits)) in self.golden.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    Obj::new(out, "GOLDEN")
                        .nat("asp", *asp)
                        .nat("place", place.0)
                        .nat("target", *target)
                        .bits("bits", bits)
                        .done();
                }
                out.push(']');
            })
            .done();
    }

    fn from_value(v: &Value) -> Result<Self, ParseError> {
        let f = expect_tag(v, "AMCONFIG")?;
        let mut registry = PlaceRegistry::new();
        for x in array(&f, "places")? {
            let g = expect_tag(x, "PLACE")?;
            let mode: ProviderMode = g.str("mode")?.parse().map_err(|_| bad("`abstract` or `keyed`", g.get("mode").unwrap_or(x)))?;
            let place = Place(g.nat("id")?);
            if registry.contains(place) {
                return Err(bad("distinct place ids", x));
            }
            registry.register(place, PlaceEntry::new(mode, g.nat("seed")?));
        }
        let mut asps = AspTable::new();
        for x in array(&f, "asps")? {
            let g = expect_tag(x, "ASP")?;
            asps.insert(g.str("name")?, g.nat("id")?)
                .map_err(|e| bad(format!("valid ASP entry ({e})"), x))?;
        }
        registry.asps = asps;
        let mut golden = BTreeMap::new();
        for x in array(&f, "golden")? {
            let g = expect_tag(x, "GOLDEN")?;
            let key = (g.nat("asp")?, Place(g.nat("place")?), g.nat("target")?);
            if golden.insert(key, g.bits("bits")?).is_some() {
                return Err(bad("distinct golden keys", x));
            }
        }
        Ok(AmConfig {
            place: Place(f.nat("place")?),
            registry,
            golden,
        })
    }
}

impl Canonical for AppraisalResult {
    fn write_canonical(&self, out: &mut String) {
        Obj::new(out, "APPRAISAL")
            .str("verdict", self.verdict.as_str())
            .raw("findings", |out| {
                out.push('[');
                for (i, x) in self.findings.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    Obj::new(out, "FINDING")
                        .str("path", &x.path)
                        .str("check", x.check.as_str())
                        .str("outcome", x.outcome.as_str())
                        .str("detail", &x.detail)
                        .done();
                }
                out.push(']');
            })
            .done();
    }

    fn from_value(v: &Value) -> Result<Self, ParseError> {
        let f = expect_tag(v, "APPRAISAL")?;
        let outcome = |g: &Fields<'_>, name: &str| match g.str(name)? {
            "pass" => Ok(Outcome::Pass),
            "fail" => Ok(Outcome::Fail),
            _ => Err(bad("`pass` or `fail`", g.get(name)?)),
        };
        let findings = array(&f, "findings")?
            .iter()
            .map(|x| {
                let g = expect_tag(x, "FINDING")?;
                Ok(Finding {
                    path: g.str("path")?.to_string(),
                    check: Check::parse(g.str("check")?).ok_or_else(|| bad("check name", x))?,
                    outcome: outcome(&g, "outcome")?,
                    detail: g.str("detail")?.to_string(),
                })
            })
            .collect::<Result<Vec<_>, ParseError>>()?;
        Ok(AppraisalResult {
            verdict: outcome(&f, "verdict")?,
            findings,
        })
    }
}

pub(crate) fn expect_tag<'v>(v: &'v Value, tag: &str) -> Result<Fields<'v>, ParseError> {
    let f = Fields::of(v)?;
    if f.tag != tag {
        return Err(bad(format!("`{tag}` node"), v));
    }
    Ok(f)
}

pub(crate) fn array<'v>(f: &Fields<'v>, name: &str) -> Result<&'v Vec<Value>, ParseError> {
    let v = f.get(name)?;
    v.as_array().ok_or_else(|| bad(format!("array for `{name}`"), v))
}
