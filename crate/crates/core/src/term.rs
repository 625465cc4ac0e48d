//! Copland phrases and their event-id annotations.
//!
//! A [`Phrase`] says what to measure, where, and in what order. Before a
//! phrase can be compiled or given an event semantics it is annotated: every
//! node receives a half-open [`Range`] of event ids such that each event the
//! phrase can produce owns exactly one id in the root range.
//!
//! Id placement:
//!
//! * primitives (`ASP`, `CPY`, `SIG`, `HSH`) take one id, `(i, i + 1)`;
//! * `@q t` takes its first id for the request and its last for the reply;
//! * branch nodes take their first id for the split and their last for the
//!   join;
//! * `t1 -> t2` takes no id of its own.

use std::fmt;

/// An attestation manager's execution domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Place(pub u64);

impl fmt::Display for Place {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u64> for Place {
    fn from(id: u64) -> Self {
        Place(id)
    }
}

/// Static parameters of an attestation service provider invocation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AspSpec {
    pub asp_id: u64,
    pub args: Vec<String>,
    /// Place hosting the measurement.
    pub place: Place,
    pub target_id: u64,
}

impl AspSpec {
    pub fn new(asp_id: u64, args: Vec<String>, place: impl Into<Place>, target_id: u64) -> Self {
        AspSpec {
            asp_id,
            args,
            place: place.into(),
            target_id,
        }
    }
}

/// Evidence selector for one side of a branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Selector {
    /// Pass all input evidence to the branch.
    All,
    /// Start the branch from empty evidence.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SplitSpec {
    pub left: Selector,
    pub right: Selector,
}

impl SplitSpec {
    pub const fn new(left: Selector, right: Selector) -> Self {
        SplitSpec { left, right }
    }

    /// All four selector combinations.
    pub const ALL: [SplitSpec; 4] = [
        SplitSpec::new(Selector::All, Selector::All),
        SplitSpec::new(Selector::All, Selector::None),
        SplitSpec::new(Selector::None, Selector::All),
        SplitSpec::new(Selector::None, Selector::None),
    ];
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |sel| match sel {
            Selector::All => '+',
            Selector::None => '-',
        };
        write!(f, "<{},{}>", s(self.left), s(self.right))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phrase {
    Asp(AspSpec),
    Cpy,
    Sig,
    Hsh,
    /// Remote request: run the body at another place.
    At(Place, Box<Phrase>),
    /// Linear sequence; evidence of the first flows into the second.
    LSeq(Box<Phrase>, Box<Phrase>),
    /// Branch in sequence.
    BSeq(SplitSpec, Box<Phrase>, Box<Phrase>),
    /// Branch in parallel.
    BPar(SplitSpec, Box<Phrase>, Box<Phrase>),
}

impl Phrase {
    pub fn asp(asp_id: u64, args: Vec<String>, place: impl Into<Place>, target_id: u64) -> Self {
        Phrase::Asp(AspSpec::new(asp_id, args, place, target_id))
    }

    pub fn at(place: impl Into<Place>, body: Phrase) -> Self {
        Phrase::At(place.into(), Box::new(body))
    }

    pub fn lseq(first: Phrase, second: Phrase) -> Self {
        Phrase::LSeq(Box::new(first), Box::new(second))
    }

    pub fn bseq(split: SplitSpec, left: Phrase, right: Phrase) -> Self {
        Phrase::BSeq(split, Box::new(left), Box::new(right))
    }

    pub fn bpar(split: SplitSpec, left: Phrase, right: Phrase) -> Self {
        Phrase::BPar(split, Box::new(left), Box::new(right))
    }

    /// Number of events one execution of this phrase produces.
    pub fn event_count(&self) -> u64 {
        match self {
            Phrase::Asp(_) | Phrase::Cpy | Phrase::Sig | Phrase::Hsh => 1,
            Phrase::At(_, body) => body.event_count() + 2,
            Phrase::LSeq(a, b) => a.event_count() + b.event_count(),
            Phrase::BSeq(_, a, b) | Phrase::BPar(_, a, b) => a.event_count() + b.event_count() + 2,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Phrase::Asp(_) | Phrase::Cpy | Phrase::Sig | Phrase::Hsh => 1,
            Phrase::At(_, body) => body.depth() + 1,
            Phrase::LSeq(a, b) | Phrase::BSeq(_, a, b) | Phrase::BPar(_, a, b) => {
                a.depth().max(b.depth()) + 1
            }
        }
    }

    /// Every place the phrase names as an execution domain (not ASP hosts).
    pub fn places(&self, start: Place) -> Vec<Place> {
        fn walk(t: &Phrase, p: Place, out: &mut Vec<Place>) {
            if !out.contains(&p) {
                out.push(p);
            }
            match t {
                Phrase::At(q, body) => walk(body, *q, out),
                Phrase::LSeq(a, b) | Phrase::BSeq(_, a, b) | Phrase::BPar(_, a, b) => {
                    walk(a, p, out);
                    walk(b, p, out);
                }
                _ => {}
            }
        }
        let mut out = Vec::new();
        walk(self, start, &mut out);
        out
    }
}

/// Half-open range of event ids, `lo..hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Range {
    pub lo: u64,
    pub hi: u64,
}

impl Range {
    pub const fn new(lo: u64, hi: u64) -> Self {
        Range { lo, hi }
    }

    pub fn len(&self) -> u64 {
        self.hi.saturating_sub(self.lo)
    }

    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }

    pub fn contains(&self, id: u64) -> bool {
        self.lo <= id && id < self.hi
    }

    /// Id of the last event in the range.
    pub fn last(&self) -> u64 {
        self.hi - 1
    }
}

impl fmt::Display for Range {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.lo, self.hi)
    }
}

/// A phrase node carrying the event ids reserved for it.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AnnoPhrase {
    pub range: Range,
    pub node: AnnoNode,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnnoNode {
    Asp(AspSpec),
    Cpy,
    Sig,
    Hsh,
    At(Place, Box<AnnoPhrase>),
    LSeq(Box<AnnoPhrase>, Box<AnnoPhrase>),
    BSeq(SplitSpec, Box<AnnoPhrase>, Box<AnnoPhrase>),
    BPar(SplitSpec, Box<AnnoPhrase>, Box<AnnoPhrase>),
}

impl AnnoPhrase {
    pub fn new(range: Range, node: AnnoNode) -> Self {
        AnnoPhrase { range, node }
    }

    pub fn range(&self) -> Range {
        self.range
    }
}

/// Annotates `t` with event ids starting at `start`, returning the annotated
/// phrase and the next unused id.
pub fn annotate(t: &Phrase, start: u64) -> (AnnoPhrase, u64) {
    let i = start;
    let leaf = |node| (AnnoPhrase::new(Range::new(i, i + 1), node), i + 1);
    match t {
        Phrase::Asp(a) => leaf(AnnoNode::Asp(a.clone())),
        Phrase::Cpy => leaf(AnnoNode::Cpy),
        Phrase::Sig => leaf(AnnoNode::Sig),
        Phrase::Hsh => leaf(AnnoNode::Hsh),
        Phrase::At(q, body) => {
            let (body, k) = annotate(body, i + 1);
            let next = k + 1;
            (
                AnnoPhrase::new(Range::new(i, next), AnnoNode::At(*q, Box::new(body))),
                next,
            )
        }
        Phrase::LSeq(a, b) => {
            let (a, j) = annotate(a, i);
            let (b, k) = annotate(b, j);
            (
                AnnoPhrase::new(Range::new(i, k), AnnoNode::LSeq(Box::new(a), Box::new(b))),
                k,
            )
        }
        Phrase::BSeq(sp, a, b) | Phrase::BPar(sp, a, b) => {
            let (a, j) = annotate(a, i + 1);
            let (b, k) = annotate(b, j);
            let next = k + 1;
            let (a, b) = (Box::new(a), Box::new(b));
            let node = match t {
                Phrase::BSeq(..) => AnnoNode::BSeq(*sp, a, b),
                _ => AnnoNode::BPar(*sp, a, b),
            };
            (AnnoPhrase::new(Range::new(i, next), node), next)
        }
    }
}

/// Strips annotations.
pub fn unanno(at: &AnnoPhrase) -> Phrase {
    match &at.node {
        AnnoNode::Asp(a) => Phrase::Asp(a.clone()),
        AnnoNode::Cpy => Phrase::Cpy,
        AnnoNode::Sig => Phrase::Sig,
        AnnoNode::Hsh => Phrase::Hsh,
        AnnoNode::At(q, body) => Phrase::At(*q, Box::new(unanno(body))),
        AnnoNode::LSeq(a, b) => Phrase::LSeq(Box::new(unanno(a)), Box::new(unanno(b))),
        AnnoNode::BSeq(sp, a, b) => Phrase::BSeq(*sp, Box::new(unanno(a)), Box::new(unanno(b))),
        AnnoNode::BPar(sp, a, b) => Phrase::BPar(*sp, Box::new(unanno(a)), Box::new(unanno(b))),
    }
}

/// True iff `at` is exactly what [`annotate`] produces for its underlying
/// phrase, starting from its own lower bound.
pub fn well_formed(at: &AnnoPhrase) -> bool {
    let (expected, _) = annotate(&unanno(at), at.range.lo);
    &expected == at
}

pub fn range(at: &AnnoPhrase) -> Range {
    at.range
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("annotated phrase is not well formed (root range {0})")]
pub struct NotWellFormed(pub Range);

/// Returns `Err` unless [`well_formed`] holds.
pub fn ensure_well_formed(at: &AnnoPhrase) -> Result<(), NotWellFormed> {
    if well_formed(at) {
        Ok(())
    } else {
        Err(NotWellFormed(at.range))
    }
}
