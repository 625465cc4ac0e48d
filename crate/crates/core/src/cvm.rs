//! The Copland compiler and virtual machine.
//!
//! [`compile`] turns an annotated phrase into a [`CvmProgram`];
//! [`Cvm::run`] executes it over a [`CvmState`]. Remote requests run the
//! requested phrase on a nested machine at the target place, and parallel
//! branches run on separate machines whose traces are interleaved at the join.
//! Event ids double as store indices, so distinct subterms never touch the
//! same store slot.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::events::{Event, Trace};
use crate::evidence::{
    split_evidence, AbstractProvider, Evidence, EvidenceError, KeyedProvider, MeasureRequest, Provider,
    ProviderError, ProviderSet,
};
use crate::term::{ensure_well_formed, unanno, AnnoNode, AnnoPhrase, AspSpec, NotWellFormed, Phrase, Place, Range, SplitSpec};
use crate::text::{self, AspTable};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prim {
    Asp(AspSpec),
    Cpy,
    Sig,
    Hsh,
}

impl fmt::Display for Prim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prim::Asp(a) => write!(f, "ASP asp={} args={:?} place={} target={}", a.asp_id, a.args, a.place, a.target_id),
            Prim::Cpy => f.write_str("CPY"),
            Prim::Sig => f.write_str("SIG"),
            Prim::Hsh => f.write_str("HSH"),
        }
    }
}

/// Store indices used by a parallel branch: where each side's initial
/// evidence is placed and where its result is collected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreSlots {
    pub left_in: u64,
    pub left_out: u64,
    pub right_in: u64,
    pub right_out: u64,
}

impl StoreSlots {
    /// Slots for branches annotated with `left` and `right`: each side's
    /// input goes at its first id and its result at its last id.
    pub fn for_ranges(left: Range, right: Range) -> Self {
        StoreSlots {
            left_in: left.lo,
            left_out: left.last(),
            right_in: right.lo,
            right_out: right.last(),
        }
    }

    /// The non-interference conditions between the two branches.
    pub fn check(&self) -> Result<(), CvmError> {
        let ok = self.left_in != self.right_in
            && self.left_out != self.right_in
            && self.left_out != self.right_out;
        if ok {
            Ok(())
        } else {
            Err(CvmError::StoreOverlap(*self))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Instr {
    DoPrim { id: u64, prim: Prim },
    SendReq { body: Phrase, to: Place, reqi: u64 },
    DoRemote { body: AnnoPhrase, to: Place, reqi: u64, rpyi: u64 },
    ReceiveResp { rpyi: u64, from: Place },
    SplitEv { id: u64, split: SplitSpec },
    RunBranchSeq { left: CvmProgram, right: CvmProgram, join_id: u64 },
    RunBranchPar { left: CvmProgram, right: CvmProgram, slots: StoreSlots, join_id: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CvmProgram(pub Vec<Instr>);

impl CvmProgram {
    pub fn instrs(&self) -> &[Instr] {
        &self.0
    }

    fn write(&self, indent: usize, out: &mut String) {
        use std::fmt::Write as _;
        let pad = "  ".repeat(indent);
        for i in &self.0 {
            let _ = match i {
                Instr::DoPrim { id, prim } => writeln!(out, "{pad}do_prim {id} {prim}"),
                Instr::SendReq { to, reqi, .. } => writeln!(out, "{pad}send_req to={to} reqi={reqi}"),
                Instr::DoRemote { body, to, reqi, rpyi } => {
                    let _ = writeln!(out, "{pad}do_remote at={to} reqi={reqi} rpyi={rpyi}");
                    compile_unchecked(body).write(indent + 1, out);
                    Ok(())
                }
                Instr::ReceiveResp { rpyi, from } => writeln!(out, "{pad}receive_resp rpyi={rpyi} from={from}"),
                Instr::SplitEv { id, split } => writeln!(out, "{pad}split {id} {split}"),
                Instr::RunBranchSeq { left, right, join_id } => {
                    let _ = writeln!(out, "{pad}branch_seq join={join_id}");
                    left.write(indent + 1, out);
                    let _ = writeln!(out, "{pad}  ;;");
                    right.write(indent + 1, out);
                    Ok(())
                }
                Instr::RunBranchPar { left, right, slots, join_id } => {
                    let s = slots;
                    let _ = writeln!(
                        out,
                        "{pad}branch_par join={join_id} store=({},{}) ({},{})",
                        s.left_in, s.left_out, s.right_in, s.right_out
                    );
                    left.write(indent + 1, out);
                    let _ = writeln!(out, "{pad}  ||");
                    right.write(indent + 1, out);
                    Ok(())
                }
            };
        }
    }
}

impl fmt::Display for CvmProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        self.write(0, &mut out);
        f.write_str(&out)
    }
}

/// Compiles a well-formed annotated phrase.
pub fn compile(at: &AnnoPhrase) -> Result<CvmProgram, NotWellFormed> {
    ensure_well_formed(at)?;
    Ok(compile_unchecked(at))
}

/// Compiles without checking well-formedness. Ill-formed input yields a
/// program whose store accesses may collide.
pub fn compile_unchecked(at: &AnnoPhrase) -> CvmProgram {
    let mut out = Vec::new();
    emit(at, &mut out);
    CvmProgram(out)
}

fn emit(at: &AnnoPhrase, out: &mut Vec<Instr>) {
    let r = at.range;
    let prim = |prim| Instr::DoPrim { id: r.lo, prim };
    match &at.node {
        AnnoNode::Asp(a) => out.push(prim(Prim::Asp(a.clone()))),
        AnnoNode::Cpy => out.push(prim(Prim::Cpy)),
        AnnoNode::Sig => out.push(prim(Prim::Sig)),
        AnnoNode::Hsh => out.push(prim(Prim::Hsh)),
        AnnoNode::At(q, body) => {
            let (reqi, rpyi) = (r.lo, r.last());
            out.push(Instr::SendReq {
                body: unanno(body),
                to: *q,
                reqi,
            });
            out.push(Instr::DoRemote {
                body: (**body).clone(),
                to: *q,
                reqi,
                rpyi,
            });
            out.push(Instr::ReceiveResp { rpyi, from: *q });
        }
        AnnoNode::LSeq(a, b) => {
            emit(a, out);
            emit(b, out);
        }
        AnnoNode::BSeq(split, a, b) => {
            out.push(Instr::SplitEv { id: r.lo, split: *split });
            out.push(Instr::RunBranchSeq {
                left: compile_unchecked(a),
                right: compile_unchecked(b),
                join_id: r.last(),
            });
        }
        AnnoNode::BPar(split, a, b) => {
            out.push(Instr::SplitEv { id: r.lo, split: *split });
            out.push(Instr::RunBranchPar {
                left: compile_unchecked(a),
                right: compile_unchecked(b),
                slots: StoreSlots::for_ranges(a.range, b.range),
                join_id: r.last(),
            });
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CvmState {
    pub ev: Evidence,
    pub trace: Trace,
    pub place: Place,
    pub store: BTreeMap<u64, Evidence>,
}

impl CvmState {
    pub fn new(ev: Evidence, place: Place) -> Self {
        CvmState {
            ev,
            trace: Vec::new(),
            place,
            store: BTreeMap::new(),
        }
    }

    pub fn with_trace(mut self, trace: Trace) -> Self {
        self.trace = trace;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CvmError {
    #[error("place {0} is not registered")]
    UnknownPlace(Place),
    #[error("store has no evidence at index {0}")]
    StoreMiss(u64),
    #[error("provider failure: {0}")]
    ProviderFailure(ProviderError),
    #[error("parallel branch store slots overlap: {0:?}")]
    StoreOverlap(StoreSlots),
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("traces share event id {0}")]
    IdCollision(u64),
}

impl From<EvidenceError> for CvmError {
    fn from(e: EvidenceError) -> Self {
        match e {
            EvidenceError::UnknownPlace(p) => CvmError::UnknownPlace(p),
            EvidenceError::Provider(p) => CvmError::ProviderFailure(p),
        }
    }
}

impl From<NotWellFormed> for CvmError {
    fn from(e: NotWellFormed) -> Self {
        CvmError::Malformed(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProviderMode {
    Abstract,
    Keyed,
}

impl ProviderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderMode::Abstract => "abstract",
            ProviderMode::Keyed => "keyed",
        }
    }
}

impl std::str::FromStr for ProviderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "abstract" => Ok(ProviderMode::Abstract),
            "keyed" | "real" => Ok(ProviderMode::Keyed),
            other => Err(format!("unknown provider mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlaceEntry {
    pub mode: ProviderMode,
    pub key_seed: u64,
    provider: Arc<dyn Provider>,
}

impl PlaceEntry {
    pub fn new(mode: ProviderMode, key_seed: u64) -> Self {
        let provider: Arc<dyn Provider> = match mode {
            ProviderMode::Abstract => Arc::new(AbstractProvider),
            ProviderMode::Keyed => Arc::new(KeyedProvider::from_seed(key_seed)),
        };
        PlaceEntry { mode, key_seed, provider }
    }

    /// Entry backed by a custom provider.
    pub fn custom(provider: Arc<dyn Provider>) -> Self {
        PlaceEntry {
            mode: ProviderMode::Abstract,
            key_seed: 0,
            provider,
        }
    }

    pub fn provider(&self) -> &dyn Provider {
        &*self.provider
    }
}

/// The attestation places a run may reach, with their providers and the ASP
/// name table.
#[derive(Clone, Debug, Default)]
pub struct PlaceRegistry {
    places: BTreeMap<Place, PlaceEntry>,
    pub asps: AspTable,
}

impl PlaceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Places `0..count`, each with the given provider mode and its id as key
    /// seed.
    pub fn uniform(count: u64, mode: ProviderMode) -> Self {
        let mut reg = PlaceRegistry::new();
        for p in 0..count {
            reg.register(Place(p), PlaceEntry::new(mode, p));
        }
        reg
    }

    pub fn register(&mut self, place: Place, entry: PlaceEntry) -> &mut Self {
        self.places.insert(place, entry);
        self
    }

    pub fn get(&self, place: Place) -> Option<&PlaceEntry> {
        self.places.get(&place)
    }

    pub fn places(&self) -> impl Iterator<Item = (Place, &PlaceEntry)> {
        self.places.iter().map(|(p, e)| (*p, e))
    }

    pub fn contains(&self, place: Place) -> bool {
        self.places.contains_key(&place)
    }
}

impl ProviderSet for PlaceRegistry {
    fn provider_at(&self, place: Place) -> Result<&dyn Provider, EvidenceError> {
        self.places
            .get(&place)
            .map(PlaceEntry::provider)
            .ok_or(EvidenceError::UnknownPlace(place))
    }
}

/// Deliberate machine defects, used to confirm that the conformance checks
/// catch a misbehaving implementation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Insert new events at the front of the trace instead of appending.
    pub prepend_events: bool,
    /// Fold the current trace length into measurement bits.
    pub trace_dependent_measurements: bool,
}

/// Merges two traces, preserving the order within each. Seed `0`
/// concatenates; any other seed picks an interleaving deterministically,
/// uniformly over all interleavings.
pub fn interleave(left: &[Event], right: &[Event], seed: u64) -> Result<Trace, CvmError> {
    let ids: std::collections::BTreeSet<u64> = left.iter().map(Event::id).collect();
    if let Some(e) = right.iter().find(|e| ids.contains(&e.id())) {
        return Err(CvmError::IdCollision(e.id()));
    }
    if seed == 0 {
        return Ok(left.iter().chain(right).cloned().collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut l, mut r) = (left.iter().peekable(), right.iter().peekable());
    let (mut nl, mut nr) = (left.len(), right.len());
    let mut out = Vec::with_capacity(nl + nr);
    while nl + nr > 0 {
        if rng.random_range(0..nl + nr) < nl {
            out.push(l.next().expect("count tracks iterator").clone());
            nl -= 1;
        } else {
            out.push(r.next().expect("count tracks iterator").clone());
            nr -= 1;
        }
    }
    Ok(out)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A virtual machine bound to a registry and a scheduling policy.
#[derive(Clone, Copy, Debug)]
pub struct Cvm<'r> {
    registry: &'r PlaceRegistry,
    seed: u64,
    threaded: bool,
    faults: Faults,
}

impl<'r> Cvm<'r> {
    pub fn new(registry: &'r PlaceRegistry) -> Self {
        Cvm {
            registry,
            seed: 0,
            threaded: false,
            faults: Faults::default(),
        }
    }

    /// Scheduler seed for parallel branch interleavings; `0` runs the left
    /// branch's events first.
    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Run parallel branches on separate OS threads.
    pub fn threaded(mut self, threaded: bool) -> Self {
        self.threaded = threaded;
        self
    }

    pub fn faults(mut self, faults: Faults) -> Self {
        self.faults = faults;
        self
    }

    fn join_seed(&self, join_id: u64) -> u64 {
        if self.seed == 0 {
            0
        } else {
            splitmix(self.seed ^ splitmix(join_id)).max(1)
        }
    }

    pub fn run(&self, prog: &CvmProgram, mut st: CvmState) -> Result<CvmState, CvmError> {
        self.exec(prog, &mut st)?;
        Ok(st)
    }

    fn add_trace(&self, st: &mut CvmState, events: impl IntoIterator<Item = Event>) {
        if self.faults.prepend_events {
            let mut new: Trace = events.into_iter().collect();
            new.append(&mut st.trace);
            st.trace = new;
        } else {
            st.trace.extend(events);
        }
    }

    fn exec(&self, prog: &CvmProgram, st: &mut CvmState) -> Result<(), CvmError> {
        let mut split: Option<(Evidence, Evidence)> = None;
        for instr in &prog.0 {
            match instr {
                Instr::DoPrim { id, prim } => self.do_prim(*id, prim, st)?,
                Instr::SendReq { body, to, reqi } => {
                    st.store.insert(*reqi, st.ev.clone());
                    let req = Event::Req {
                        id: *reqi,
                        from: st.place,
                        to: *to,
                        body: body.clone(),
                    };
                    self.add_trace(st, [req]);
                }
                Instr::DoRemote { body, to, reqi, rpyi } => {
                    let input = st.store.get(reqi).cloned().ok_or(CvmError::StoreMiss(*reqi))?;
                    if !self.registry.contains(*to) {
                        return Err(CvmError::UnknownPlace(*to));
                    }
                    let remote_prog = compile(body)?;
                    let mut remote = CvmState {
                        ev: input,
                        trace: Vec::new(),
                        place: *to,
                        store: std::mem::take(&mut st.store),
                    };
                    let outcome = self.exec(&remote_prog, &mut remote);
                    st.store = std::mem::take(&mut remote.store);
                    outcome?;
                    self.add_trace(st, remote.trace);
                    st.store.insert(*rpyi, remote.ev);
                }
                Instr::ReceiveResp { rpyi, from } => {
                    let e = st.store.get(rpyi).cloned().ok_or(CvmError::StoreMiss(*rpyi))?;
                    let rpy = Event::Rpy {
                        id: *rpyi,
                        from: st.place,
                        to: *from,
                    };
                    self.add_trace(st, [rpy]);
                    st.ev = e;
                }
                Instr::SplitEv { id, split: sp } => {
                    split = Some(split_evidence(*sp, &st.ev));
                    let ev = Event::Split { id: *id, place: st.place };
                    self.add_trace(st, [ev]);
                }
                Instr::RunBranchSeq { left, right, join_id } => {
                    let (e1, e2) = split
                        .take()
                        .ok_or_else(|| CvmError::Malformed("branch without a preceding split".into()))?;
                    st.ev = e1;
                    self.exec(left, st)?;
                    let r1 = std::mem::replace(&mut st.ev, e2);
                    self.exec(right, st)?;
                    let r2 = std::mem::take(&mut st.ev);
                    st.ev = Evidence::ss(r1, r2);
                    let join = Event::Join { id: *join_id, place: st.place };
                    self.add_trace(st, [join]);
                }
                Instr::RunBranchPar { left, right, slots, join_id } => {
                    let (e1, e2) = split
                        .take()
                        .ok_or_else(|| CvmError::Malformed("branch without a preceding split".into()))?;
                    self.branch_par(left, right, *slots, *join_id, (e1, e2), st)?;
                }
            }
        }
        Ok(())
    }

    fn do_prim(&self, id: u64, prim: &Prim, st: &mut CvmState) -> Result<(), CvmError> {
        let p = st.place;
        let provider = self.registry.provider_at(p)?;
        match prim {
            Prim::Cpy => self.add_trace(st, [Event::Copy { id, place: p }]),
            Prim::Asp(asp) => {
                let mut bits = provider
                    .measure(&MeasureRequest {
                        asp,
                        place: p,
                        event_id: id,
                        input: &st.ev,
                    })
                    .map_err(CvmError::ProviderFailure)?;
                if self.faults.trace_dependent_measurements {
                    bits.0.extend_from_slice(&(st.trace.len() as u64).to_be_bytes());
                }
                self.add_trace(
                    st,
                    [Event::Meas {
                        id,
                        place: p,
                        asp: asp.clone(),
                    }],
                );
                let sub = Box::new(std::mem::take(&mut st.ev));
                st.ev = Evidence::U {
                    asp_id: asp.asp_id,
                    args: asp.args.clone(),
                    place: p,
                    bits,
                    sub,
                };
            }
            Prim::Sig => {
                let bits = provider
                    .sign(p, &text::encode(&st.ev))
                    .map_err(CvmError::ProviderFailure)?;
                self.add_trace(st, [Event::Sign { id, place: p }]);
                let sub = Box::new(std::mem::take(&mut st.ev));
                st.ev = Evidence::G { bits, sub };
            }
            Prim::Hsh => {
                let bits = provider.hash(&text::encode(&st.ev));
                self.add_trace(st, [Event::Hash { id, place: p }]);
                st.ev = Evidence::H { bits };
            }
        }
        Ok(())
    }

    fn branch_par(
        &self,
        left: &CvmProgram,
        right: &CvmProgram,
        slots: StoreSlots,
        join_id: u64,
        (e1, e2): (Evidence, Evidence),
        st: &mut CvmState,
    ) -> Result<(), CvmError> {
        slots.check()?;
        st.store.insert(slots.left_in, e1);
        st.store.insert(slots.right_in, e2);
        let read = |store: &BTreeMap<u64, Evidence>, i: u64| store.get(&i).cloned().ok_or(CvmError::StoreMiss(i));
        let (in1, in2) = (read(&st.store, slots.left_in)?, read(&st.store, slots.right_in)?);
        let fresh = |ev, store| CvmState {
            ev,
            trace: Vec::new(),
            place: st.place,
            store,
        };

        let (t1, t2) = if self.threaded {
            let mut s1 = fresh(in1, st.store.clone());
            let mut s2 = fresh(in2, st.store.clone());
            let (r1, r2) = std::thread::scope(|scope| {
                let h1 = scope.spawn(|| self.exec(left, &mut s1));
                let h2 = scope.spawn(|| self.exec(right, &mut s2));
                (
                    h1.join().expect("branch thread panicked"),
                    h2.join().expect("branch thread panicked"),
                )
            });
            r1?;
            r2?;
            // Each branch writes only ids inside its own range.
            let mut merged = std::mem::take(&mut s1.store);
            for (k, v) in std::mem::take(&mut s2.store) {
                if st.store.get(&k) != Some(&v) {
                    merged.insert(k, v);
                }
            }
            merged.insert(slots.left_out, s1.ev);
            merged.insert(slots.right_out, s2.ev);
            st.store = merged;
            (s1.trace, s2.trace)
        } else {
            let mut s1 = fresh(in1, std::mem::take(&mut st.store));
            let r1 = self.exec(left, &mut s1);
            st.store = std::mem::take(&mut s1.store);
            r1?;
            st.store.insert(slots.left_out, s1.ev);
            let mut s2 = fresh(in2, std::mem::take(&mut st.store));
            let r2 = self.exec(right, &mut s2);
            st.store = std::mem::take(&mut s2.store);
            r2?;
            st.store.insert(slots.right_out, s2.ev);
            (s1.trace, s2.trace)
        };

        let r1 = read(&st.store, slots.left_out)?;
        let r2 = read(&st.store, slots.right_out)?;
        let merged = interleave(&t1, &t2, self.join_seed(join_id))?;
        self.add_trace(st, merged);
        st.ev = Evidence::pp(r1, r2);
        let join = Event::Join { id: join_id, place: st.place };
        self.add_trace(st, [join]);
        Ok(())
    }
}

/// Runs `prog` with the default (seed `0`, sequential) schedule.
pub fn run_cvm(prog: &CvmProgram, st: CvmState, registry: &PlaceRegistry) -> Result<CvmState, CvmError> {
    Cvm::new(registry).run(prog, st)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{ev_sys, events_of, is_trace, traces_of, EventSystem};
    use crate::evidence::{eval, Bits};
    use crate::term::tests::{arb_phrase, sig_at};
    use crate::term::{annotate, Selector};
    use proptest::prelude::*;

    fn reg() -> PlaceRegistry {
        PlaceRegistry::uniform(4, ProviderMode::Abstract)
    }

    fn run(t: &Phrase, p: u64, e: Evidence, seed: u64) -> CvmState {
        let (at, _) = annotate(t, 0);
        let r = reg();
        Cvm::new(&r)
            .seed(seed)
            .run(&compile(&at).unwrap(), CvmState::new(e, Place(p)))
            .unwrap()
    }

    #[test]
    fn compile_sig() {
        assert_eq!(
            compile(&sig_at(0)).unwrap(),
            CvmProgram(vec![Instr::DoPrim { id: 0, prim: Prim::Sig }])
        );
    }

    #[test]
    fn compile_at() {
        let (at, _) = annotate(&Phrase::at(2, Phrase::Sig), 0);
        assert_eq!(
            compile(&at).unwrap(),
            CvmProgram(vec![
                Instr::SendReq {
                    body: Phrase::Sig,
                    to: Place(2),
                    reqi: 0
                },
                Instr::DoRemote {
                    body: sig_at(1),
                    to: Place(2),
                    reqi: 0,
                    rpyi: 2
                },
                Instr::ReceiveResp { rpyi: 2, from: Place(2) },
            ])
        );
    }

    #[test]
    fn compile_lseq_concatenates() {
        let t = Phrase::lseq(Phrase::at(1, Phrase::Hsh), Phrase::lseq(Phrase::Sig, Phrase::Cpy));
        let (at, _) = annotate(&t, 0);
        let AnnoNode::LSeq(a, b) = &at.node else { unreachable!() };
        let mut expected = compile(a).unwrap().0;
        expected.extend(compile(b).unwrap().0);
        assert_eq!(compile(&at).unwrap().0, expected);
    }

    #[test]
    fn compile_rejects_ill_formed() {
        let bad = AnnoPhrase::new(Range::new(0, 2), AnnoNode::Sig);
        assert!(compile(&bad).is_err());
    }

    #[test]
    fn run_single_measurement() {
        let asp = AspSpec::new(3, vec![], 1, 7);
        let st = run(&Phrase::Asp(asp.clone()), 1, Evidence::Mt, 0);
        assert_eq!(
            st.ev,
            Evidence::U {
                asp_id: 3,
                args: vec![],
                place: Place(1),
                bits: Bits(0u64.to_be_bytes().to_vec()),
                sub: Box::new(Evidence::Mt)
            }
        );
        assert_eq!(st.trace, vec![Event::Meas { id: 0, place: Place(1), asp }]);
    }

    #[test]
    fn run_remote_signature() {
        let st = run(&Phrase::at(2, Phrase::Sig), 1, Evidence::Mt, 0);
        assert_eq!(
            st.trace,
            vec![
                Event::Req {
                    id: 0,
                    from: Place(1),
                    to: Place(2),
                    body: Phrase::Sig
                },
                Event::Sign { id: 1, place: Place(2) },
                Event::Rpy {
                    id: 2,
                    from: Place(1),
                    to: Place(2)
                },
            ]
        );
        assert!(matches!(st.ev, Evidence::G { ref sub, .. } if **sub == Evidence::Mt));
        assert_eq!(st.place, Place(1));
        let (at, _) = annotate(&Phrase::at(2, Phrase::Sig), 0);
        let es = ev_sys(&at, Place(1)).unwrap();
        assert_eq!(traces_of(&es).unwrap().into_iter().collect::<Vec<_>>(), vec![st.trace]);
    }

    #[test]
    fn parallel_schedules_differ_but_conform() {
        let sp = SplitSpec::new(Selector::All, Selector::All);
        let t = Phrase::bpar(
            sp,
            Phrase::lseq(Phrase::Sig, Phrase::Hsh),
            Phrase::lseq(Phrase::Cpy, Phrase::Sig),
        );
        let (at, _) = annotate(&t, 0);
        let es = ev_sys(&at, Place(0)).unwrap();
        let traces: std::collections::BTreeSet<Trace> = (0..16)
            .map(|seed| {
                let st = run(&t, 0, Evidence::Mt, seed);
                assert!(is_trace(&es, &st.trace), "seed {seed}");
                st.trace
            })
            .collect();
        assert!(traces.len() > 1, "seeds never changed the interleaving");
    }

    #[test]
    fn interleave_conventions() {
        let a = Event::Sign { id: 0, place: Place(0) };
        let b = Event::Sign { id: 1, place: Place(0) };
        let both = vec![a.clone(), b.clone()];
        assert_eq!(interleave(std::slice::from_ref(&a), std::slice::from_ref(&b), 0).unwrap(), both);
        for seed in 0..20 {
            assert_eq!(interleave(&both, &[], seed).unwrap(), both);
        }
        let one = std::slice::from_ref(&a);
        assert_eq!(interleave(one, one, 3), Err(CvmError::IdCollision(0)));
    }

    #[test]
    fn interleavings_are_merges() {
        let l: Trace = (0..3).map(|id| Event::Copy { id, place: Place(0) }).collect();
        let r: Trace = (3..6).map(|id| Event::Copy { id, place: Place(0) }).collect();
        let chain = |t: &Trace| {
            t.iter()
                .map(|e| EventSystem::Leaf(e.clone()))
                .reduce(EventSystem::before)
                .unwrap()
        };
        let es = EventSystem::merge(chain(&l), chain(&r));
        let all = traces_of(&es).unwrap();
        assert_eq!(all.len(), 20);
        let seen: std::collections::BTreeSet<Trace> =
            (0..400).map(|s| interleave(&l, &r, s).unwrap()).inspect(|t| assert!(all.contains(t))).collect();
        assert_eq!(seen.len(), 20, "some interleavings are unreachable");
    }

    #[test]
    fn store_slots_follow_branch_ranges() {
        let sp = SplitSpec::new(Selector::All, Selector::All);
        let (at, _) = annotate(&Phrase::bpar(sp, Phrase::Sig, Phrase::at(1, Phrase::Sig)), 0);
        let prog = compile(&at).unwrap();
        let Instr::RunBranchPar { slots, .. } = &prog.0[1] else { unreachable!() };
        assert_eq!(
            *slots,
            StoreSlots {
                left_in: 1,
                left_out: 1,
                right_in: 2,
                right_out: 4
            }
        );
        assert!(slots.check().is_ok());
    }

    #[test]
    fn overlapping_slots_are_refused() {
        let sp = SplitSpec::new(Selector::All, Selector::All);
        let bad = AnnoPhrase::new(
            Range::new(0, 4),
            AnnoNode::BPar(sp, Box::new(sig_at(1)), Box::new(sig_at(1))),
        );
        let r = reg();
        let err = run_cvm(&compile_unchecked(&bad), CvmState::new(Evidence::Mt, Place(0)), &r).unwrap_err();
        assert!(matches!(err, CvmError::StoreOverlap(_)));
    }

    #[test]
    fn unknown_places_fail() {
        let r = PlaceRegistry::uniform(2, ProviderMode::Abstract);
        let (at, _) = annotate(&Phrase::at(5, Phrase::Sig), 0);
        let prog = compile(&at).unwrap();
        assert_eq!(
            run_cvm(&prog, CvmState::new(Evidence::Mt, Place(0)), &r),
            Err(CvmError::UnknownPlace(Place(5)))
        );
        assert_eq!(
            run_cvm(&compile(&sig_at(0)).unwrap(), CvmState::new(Evidence::Mt, Place(9)), &r),
            Err(CvmError::UnknownPlace(Place(9)))
        );
    }

    #[test]
    fn missing_store_entry_fails() {
        let prog = CvmProgram(vec![Instr::ReceiveResp { rpyi: 4, from: Place(1) }]);
        let r = reg();
        assert_eq!(
            run_cvm(&prog, CvmState::new(Evidence::Mt, Place(0)), &r),
            Err(CvmError::StoreMiss(4))
        );
    }

    #[derive(Debug)]
    struct Failing;
    impl Provider for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn measure(&self, _: &MeasureRequest<'_>) -> Result<Bits, ProviderError> {
            Err(ProviderError::Other("sensor offline".into()))
        }
        fn sign(&self, p: Place, _: &[u8]) -> Result<Bits, ProviderError> {
            Err(ProviderError::MissingKey(p))
        }
        fn hash(&self, _: &[u8]) -> Bits {
            Bits::default()
        }
        fn verify(&self, _: Place, _: &[u8], _: &Bits) -> bool {
            false
        }
    }

    #[test]
    fn provider_failures_surface() {
        let mut r = PlaceRegistry::new();
        r.register(Place(0), PlaceEntry::custom(Arc::new(Failing)));
        let prog = compile(&sig_at(0)).unwrap();
        assert_eq!(
            run_cvm(&prog, CvmState::new(Evidence::Mt, Place(0)), &r),
            Err(CvmError::ProviderFailure(ProviderError::MissingKey(Place(0))))
        );
    }

    proptest! {
        #[test]
        fn matches_eval_and_event_system(t in arb_phrase(), p in 0u64..4, seed in 0u64..1000) {
            let nonce = Evidence::nonce(0, Bits(vec![1, 2]), Evidence::Mt);
            let st = run(&t, p, nonce.clone(), seed);
            prop_assert_eq!(&st.ev, &eval(&t, Place(p), &nonce, &reg(), 0).unwrap());
            let (at, _) = annotate(&t, 0);
            let es = ev_sys(&at, Place(p)).unwrap();
            prop_assert!(is_trace(&es, &st.trace));
            prop_assert_eq!(st.trace.len(), events_of(&es).len());
            prop_assert_eq!(st.place, Place(p));
        }

        #[test]
        fn threaded_matches_sequential(t in arb_phrase(), p in 0u64..4, seed in 0u64..1000) {
            let (at, _) = annotate(&t, 0);
            let prog = compile(&at).unwrap();
            let r = PlaceRegistry::uniform(4, ProviderMode::Keyed);
            let st0 = CvmState::new(Evidence::Mt, Place(p));
            let seq = Cvm::new(&r).seed(seed).run(&prog, st0.clone()).unwrap();
            let thr = Cvm::new(&r).seed(seed).threaded(true).run(&prog, st0).unwrap();
            prop_assert_eq!(seq, thr);
        }
    }
}
