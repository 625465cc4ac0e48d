//! Attestation events and event systems.
//!
//! An [`EventSystem`] denotes the strict partial order on the events of one
//! execution: `Before` orders every event on its left ahead of every event on
//! its right, and `Merge` leaves its sides unordered with respect to each
//! other. A [`Trace`] is one linear execution; [`is_trace`] decides whether
//! it is consistent with a system, and [`traces_of`] enumerates every such
//! trace for small systems.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::term::{ensure_well_formed, unanno, AnnoNode, AnnoPhrase, AspSpec, NotWellFormed, Phrase, Place};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Event {
    Copy { id: u64, place: Place },
    /// Measurement by `asp` requested while executing at `place`.
    Meas { id: u64, place: Place, asp: AspSpec },
    Sign { id: u64, place: Place },
    Hash { id: u64, place: Place },
    Split { id: u64, place: Place },
    Join { id: u64, place: Place },
    Req { id: u64, from: Place, to: Place, body: Phrase },
    Rpy { id: u64, from: Place, to: Place },
}

impl Event {
    pub fn id(&self) -> u64 {
        match self {
            Event::Copy { id, .. }
            | Event::Meas { id, .. }
            | Event::Sign { id, .. }
            | Event::Hash { id, .. }
            | Event::Split { id, .. }
            | Event::Join { id, .. }
            | Event::Req { id, .. }
            | Event::Rpy { id, .. } => *id,
        }
    }

    /// Place where the event happens.
    pub fn place(&self) -> Place {
        match self {
            Event::Copy { place, .. }
            | Event::Meas { place, .. }
            | Event::Sign { place, .. }
            | Event::Hash { place, .. }
            | Event::Split { place, .. }
            | Event::Join { place, .. } => *place,
            Event::Req { from, .. } | Event::Rpy { from, .. } => *from,
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Copy { id, place } => write!(f, "{id}: CPY @{place}"),
            Event::Meas { id, place, asp } => write!(
                f,
                "{id}: MEAS @{place} asp={} args={:?} host={} target={}",
                asp.asp_id, asp.args, asp.place, asp.target_id
            ),
            Event::Sign { id, place } => write!(f, "{id}: SIG @{place}"),
            Event::Hash { id, place } => write!(f, "{id}: HSH @{place}"),
            Event::Split { id, place } => write!(f, "{id}: SPLIT @{place}"),
            Event::Join { id, place } => write!(f, "{id}: JOIN @{place}"),
            Event::Req { id, from, to, .. } => write!(f, "{id}: REQ {from} -> {to}"),
            Event::Rpy { id, from, to } => write!(f, "{id}: RPY {from} <- {to}"),
        }
    }
}

pub type Trace = Vec<Event>;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventSystem {
    Leaf(Event),
    Before(Box<EventSystem>, Box<EventSystem>),
    Merge(Box<EventSystem>, Box<EventSystem>),
}

impl EventSystem {
    pub fn before(l: EventSystem, r: EventSystem) -> Self {
        EventSystem::Before(Box::new(l), Box::new(r))
    }

    pub fn merge(l: EventSystem, r: EventSystem) -> Self {
        EventSystem::Merge(Box::new(l), Box::new(r))
    }

    fn contains_id(&self, id: u64) -> bool {
        match self {
            EventSystem::Leaf(e) => e.id() == id,
            EventSystem::Before(l, r) | EventSystem::Merge(l, r) => {
                l.contains_id(id) || r.contains_id(id)
            }
        }
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Event>) {
        match self {
            EventSystem::Leaf(e) => out.push(e),
            EventSystem::Before(l, r) | EventSystem::Merge(l, r) => {
                l.collect(out);
                r.collect(out);
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EventSystem::Leaf(_) => 1,
            EventSystem::Before(l, r) | EventSystem::Merge(l, r) => l.len() + r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum EventsError {
    #[error(transparent)]
    NotWellFormed(#[from] NotWellFormed),
    #[error("event {0} is not in the event system")]
    NotMember(u64),
    #[error("event system has {0} events; enumeration is limited to {MAX_ENUMERATED_EVENTS}")]
    TooLarge(usize),
}

/// Largest system [`traces_of`] will enumerate.
pub const MAX_ENUMERATED_EVENTS: usize = 10;

/// Event system of `at` executed at `place`.
pub fn ev_sys(at: &AnnoPhrase, place: Place) -> Result<EventSystem, EventsError> {
    ensure_well_formed(at)?;
    Ok(denote(at, place))
}

fn denote(at: &AnnoPhrase, p: Place) -> EventSystem {
    use EventSystem::Leaf;
    let (i, last) = (at.range.lo, at.range.hi - 1);
    match &at.node {
        AnnoNode::Asp(asp) => Leaf(Event::Meas {
            id: i,
            place: p,
            asp: asp.clone(),
        }),
        AnnoNode::Cpy => Leaf(Event::Copy { id: i, place: p }),
        AnnoNode::Sig => Leaf(Event::Sign { id: i, place: p }),
        AnnoNode::Hsh => Leaf(Event::Hash { id: i, place: p }),
        AnnoNode::At(q, body) => EventSystem::before(
            Leaf(Event::Req {
                id: i,
                from: p,
                to: *q,
                body: unanno(body),
            }),
            EventSystem::before(
                denote(body, *q),
                Leaf(Event::Rpy {
                    id: last,
                    from: p,
                    to: *q,
                }),
            ),
        ),
        AnnoNode::LSeq(a, b) => EventSystem::before(denote(a, p), denote(b, p)),
        AnnoNode::BSeq(_, a, b) | AnnoNode::BPar(_, a, b) => {
            let inner = match &at.node {
                AnnoNode::BSeq(..) => EventSystem::before(denote(a, p), denote(b, p)),
                _ => EventSystem::merge(denote(a, p), denote(b, p)),
            };
            EventSystem::before(
                Leaf(Event::Split { id: i, place: p }),
                EventSystem::before(inner, Leaf(Event::Join { id: last, place: p })),
            )
        }
    }
}

/// Every event of the system, keyed by id.
pub fn events_of(es: &EventSystem) -> BTreeMap<u64, &Event> {
    let mut all = Vec::new();
    es.collect(&mut all);
    all.into_iter().map(|e| (e.id(), e)).collect()
}

/// Whether `v` strictly precedes `w` in the order `es` denotes.
pub fn earlier(es: &EventSystem, v: &Event, w: &Event) -> Result<bool, EventsError> {
    for e in [v, w] {
        if !es.contains_id(e.id()) {
            return Err(EventsError::NotMember(e.id()));
        }
    }
    Ok(precedes(es, v.id(), w.id()))
}

fn precedes(es: &EventSystem, v: u64, w: u64) -> bool {
    match es {
        EventSystem::Leaf(_) => false,
        EventSystem::Before(l, r) => {
            let (vl, wl) = (l.contains_id(v), l.contains_id(w));
            match (vl, wl) {
                (true, true) => precedes(l, v, w),
                (true, false) => r.contains_id(w),
                (false, false) => precedes(r, v, w),
                (false, true) => false,
            }
        }
        EventSystem::Merge(l, r) => {
            if l.contains_id(v) && l.contains_id(w) {
                precedes(l, v, w)
            } else if r.contains_id(v) && r.contains_id(w) {
                precedes(r, v, w)
            } else {
                false
            }
        }
    }
}

/// All ordered pairs `(v, w)` of ids with `v` strictly earlier than `w`.
pub fn earlier_pairs(es: &EventSystem) -> BTreeSet<(u64, u64)> {
    let mut out = BTreeSet::new();
    fn ids(es: &EventSystem) -> Vec<u64> {
        let mut all = Vec::new();
        es.collect(&mut all);
        all.into_iter().map(Event::id).collect()
    }
    fn walk(es: &EventSystem, out: &mut BTreeSet<(u64, u64)>) {
        match es {
            EventSystem::Leaf(_) => {}
            EventSystem::Before(l, r) => {
                let right = ids(r);
                for a in ids(l) {
                    out.extend(right.iter().map(|&b| (a, b)));
                }
                walk(l, out);
                walk(r, out);
            }
            EventSystem::Merge(l, r) => {
                walk(l, out);
                walk(r, out);
            }
        }
    }
    walk(es, &mut out);
    out
}

/// Every linearization of `es`, by brute-force enumeration.
pub fn traces_of(es: &EventSystem) -> Result<BTreeSet<Trace>, EventsError> {
    let n = es.len();
    if n > MAX_ENUMERATED_EVENTS {
        return Err(EventsError::TooLarge(n));
    }
    Ok(enumerate(es))
}

fn enumerate(es: &EventSystem) -> BTreeSet<Trace> {
    match es {
        EventSystem::Leaf(e) => BTreeSet::from([vec![e.clone()]]),
        EventSystem::Before(l, r) => {
            let (ls, rs) = (enumerate(l), enumerate(r));
            let mut out = BTreeSet::new();
            for a in &ls {
                for b in &rs {
                    out.insert(a.iter().chain(b).cloned().collect());
                }
            }
            out
        }
        EventSystem::Merge(l, r) => {
            let (ls, rs) = (enumerate(l), enumerate(r));
            let mut out = BTreeSet::new();
            for a in &ls {
                for b in &rs {
                    shuffles(a, b, &mut Vec::new(), &mut out);
                }
            }
            out
        }
    }
}

fn shuffles(a: &[Event], b: &[Event], prefix: &mut Vec<Event>, out: &mut BTreeSet<Trace>) {
    match (a.split_first(), b.split_first()) {
        (None, _) => {
            out.insert(prefix.iter().chain(b).cloned().collect());
        }
        (_, None) => {
            out.insert(prefix.iter().chain(a).cloned().collect());
        }
        (Some((x, rest_a)), Some((y, rest_b))) => {
            prefix.push(x.clone());
            shuffles(rest_a, b, prefix, out);
            prefix.pop();
            prefix.push(y.clone());
            shuffles(a, rest_b, prefix, out);
            prefix.pop();
        }
    }
}

/// Whether `trace` is a linearization of `es`: it holds exactly the events of
/// `es`, once each, and respects every `Before` node.
pub fn is_trace(es: &EventSystem, trace: &[Event]) -> bool {
    let events = events_of(es);
    if trace.len() != events.len() {
        return false;
    }
    let mut position = BTreeMap::new();
    for (idx, e) in trace.iter().enumerate() {
        if events.get(&e.id()) != Some(&e) || position.insert(e.id(), idx).is_some() {
            return false;
        }
    }
    // Each node yields the (min, max) trace position of its events; a Before
    // node requires all of its left side to finish before its right starts.
    fn span(es: &EventSystem, position: &BTreeMap<u64, usize>) -> Option<(usize, usize)> {
        match es {
            EventSystem::Leaf(e) => position.get(&e.id()).map(|&i| (i, i)),
            EventSystem::Before(l, r) => {
                let (lmin, lmax) = span(l, position)?;
                let (rmin, rmax) = span(r, position)?;
                (lmax < rmin).then_some((lmin, rmax))
            }
            EventSystem::Merge(l, r) => {
                let (lmin, lmax) = span(l, position)?;
                let (rmin, rmax) = span(r, position)?;
                Some((lmin.min(rmin), lmax.max(rmax)))
            }
        }
    }
    span(es, &position).is_some()
}
