//! Concrete evidence, its shape, and the providers that produce raw bits.
//!
//! [`eval`] is the denotational evidence semantics of a phrase. It walks the
//! phrase structure directly and assigns event ids with its own counter, so
//! it serves as an independent reference for what the virtual machine must
//! produce.

use std::fmt;

use hmac::{Hmac, KeyInit, Mac};
use sha2::{Digest, Sha256};

use crate::term::{AspSpec, Phrase, Place, Selector, SplitSpec};
use crate::text;

/// Raw binary data: a measurement, signature, hash, or nonce value.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bits(pub Vec<u8>);

impl Bits {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<u8>> for Bits {
    fn from(raw: Vec<u8>) -> Self {
        Bits(raw)
    }
}

impl From<&[u8]> for Bits {
    fn from(raw: &[u8]) -> Self {
        Bits(raw.to_vec())
    }
}

impl fmt::Debug for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bits({})", self.to_hex())
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Evidence produced by executing a phrase. Deeper nesting means earlier
/// collection.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Evidence {
    #[default]
    Mt,
    /// A measurement taken by `asp_id` while executing at `place`.
    U {
        asp_id: u64,
        args: Vec<String>,
        place: Place,
        bits: Bits,
        sub: Box<Evidence>,
    },
    /// Signature over the canonical encoding of `sub`.
    G { bits: Bits, sub: Box<Evidence> },
    /// Hash of evidence that is no longer carried.
    H { bits: Bits },
    N {
        nonce_id: u64,
        bits: Bits,
        sub: Box<Evidence>,
    },
    SS(Box<Evidence>, Box<Evidence>),
    PP(Box<Evidence>, Box<Evidence>),
}

impl Evidence {
    pub fn nonce(nonce_id: u64, bits: Bits, sub: Evidence) -> Self {
        Evidence::N {
            nonce_id,
            bits,
            sub: Box::new(sub),
        }
    }

    pub fn ss(left: Evidence, right: Evidence) -> Self {
        Evidence::SS(Box::new(left), Box::new(right))
    }

    pub fn pp(left: Evidence, right: Evidence) -> Self {
        Evidence::PP(Box::new(left), Box::new(right))
    }
}

/// Evidence with every `Bits` field erased.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Shape {
    Mt,
    U {
        asp_id: u64,
        args: Vec<String>,
        place: Place,
        sub: Box<Shape>,
    },
    G(Box<Shape>),
    H,
    N { nonce_id: u64, sub: Box<Shape> },
    SS(Box<Shape>, Box<Shape>),
    PP(Box<Shape>, Box<Shape>),
}

pub fn shape_of(e: &Evidence) -> Shape {
    match e {
        Evidence::Mt => Shape::Mt,
        Evidence::U {
            asp_id,
            args,
            place,
            sub,
            ..
        } => Shape::U {
            asp_id: *asp_id,
            args: args.clone(),
            place: *place,
            sub: Box::new(shape_of(sub)),
        },
        Evidence::G { sub, .. } => Shape::G(Box::new(shape_of(sub))),
        Evidence::H { .. } => Shape::H,
        Evidence::N { nonce_id, sub, .. } => Shape::N {
            nonce_id: *nonce_id,
            sub: Box::new(shape_of(sub)),
        },
        Evidence::SS(l, r) => Shape::SS(Box::new(shape_of(l)), Box::new(shape_of(r))),
        Evidence::PP(l, r) => Shape::PP(Box::new(shape_of(l)), Box::new(shape_of(r))),
    }
}

fn select(sel: Selector, e: &Evidence) -> Evidence {
    match sel {
        Selector::All => e.clone(),
        Selector::None => Evidence::Mt,
    }
}

pub fn split_evidence(split: SplitSpec, e: &Evidence) -> (Evidence, Evidence) {
    (select(split.left, e), select(split.right, e))
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("no key material for place {0}")]
    MissingKey(Place),
    #[error("{0}")]
    Other(String),
}

/// Inputs to one measurement.
#[derive(Clone, Copy, Debug)]
pub struct MeasureRequest<'a> {
    pub asp: &'a AspSpec,
    /// Place executing the measurement request.
    pub place: Place,
    /// Unique id of the measurement event.
    pub event_id: u64,
    pub input: &'a Evidence,
}

/// Source of measurement, signature, and hash bits.
///
/// Implementations are shared between concurrently running branches.
pub trait Provider: Send + Sync + fmt::Debug {
    /// Name recorded alongside evidence files.
    fn name(&self) -> &str;

    fn measure(&self, req: &MeasureRequest<'_>) -> Result<Bits, ProviderError>;

    fn sign(&self, place: Place, bytes: &[u8]) -> Result<Bits, ProviderError>;

    fn hash(&self, bytes: &[u8]) -> Bits;

    fn verify(&self, place: Place, bytes: &[u8], signature: &Bits) -> bool;
}

fn sha256(parts: &[&[u8]]) -> Vec<u8> {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().to_vec()
}

/// Deterministic provider for conformance runs: a measurement is the event
/// id itself, and a signature is a place-tagged digest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AbstractProvider;

impl AbstractProvider {
    fn tag(place: Place, bytes: &[u8]) -> Bits {
        let mut out = b"SIG".to_vec();
        out.extend_from_slice(&place.0.to_be_bytes());
        out.extend_from_slice(&sha256(&[bytes]));
        Bits(out)
    }
}

impl Provider for AbstractProvider {
    fn name(&self) -> &str {
        "abstract/sha256"
    }

    fn measure(&self, req: &MeasureRequest<'_>) -> Result<Bits, ProviderError> {
        Ok(Bits(req.event_id.to_be_bytes().to_vec()))
    }

    fn sign(&self, place: Place, bytes: &[u8]) -> Result<Bits, ProviderError> {
        Ok(Self::tag(place, bytes))
    }

    fn hash(&self, bytes: &[u8]) -> Bits {
        Bits(sha256(&[bytes]))
    }

    fn verify(&self, place: Place, bytes: &[u8], signature: &Bits) -> bool {
        Self::tag(place, bytes) == *signature
    }
}

/// Provider with a secret per place: HMAC-SHA256 signatures and measurements
/// that digest the ASP parameters (independent of event ids, so golden values
/// are stable across runs).
#[derive(Clone, PartialEq, Eq)]
pub struct KeyedProvider {
    key: Vec<u8>,
}

impl fmt::Debug for KeyedProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyedProvider").finish_non_exhaustive()
    }
}

impl KeyedProvider {
    pub fn new(key: Vec<u8>) -> Self {
        KeyedProvider { key }
    }

    pub fn from_seed(seed: u64) -> Self {
        KeyedProvider::new(sha256(&[b"copland-place-key", &seed.to_be_bytes()]))
    }

    fn mac(&self) -> Hmac<Sha256> {
        <Hmac<Sha256> as KeyInit>::new_from_slice(&self.key).expect("hmac accepts any key length")
    }
}

impl Provider for KeyedProvider {
    fn name(&self) -> &str {
        "hmac-sha256/sha256"
    }

    fn measure(&self, req: &MeasureRequest<'_>) -> Result<Bits, ProviderError> {
        let mut h = Sha256::new();
        h.update(b"MEAS");
        h.update(req.asp.asp_id.to_be_bytes());
        h.update((req.asp.args.len() as u64).to_be_bytes());
        for a in &req.asp.args {
            h.update((a.len() as u64).to_be_bytes());
            h.update(a.as_bytes());
        }
        h.update(req.asp.place.0.to_be_bytes());
        h.update(req.asp.target_id.to_be_bytes());
        h.update(req.place.0.to_be_bytes());
        Ok(Bits(h.finalize().to_vec()))
    }

    fn sign(&self, _place: Place, bytes: &[u8]) -> Result<Bits, ProviderError> {
        let mut mac = self.mac();
        mac.update(bytes);
        Ok(Bits(mac.finalize().into_bytes().to_vec()))
    }

    fn hash(&self, bytes: &[u8]) -> Bits {
        Bits(sha256(&[bytes]))
    }

    fn verify(&self, _place: Place, bytes: &[u8], signature: &Bits) -> bool {
        let mut mac = self.mac();
        mac.update(bytes);
        mac.verify_slice(signature.as_bytes()).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum EvidenceError {
    #[error("place {0} is not registered")]
    UnknownPlace(Place),
    #[error("provider failure: {0}")]
    Provider(#[from] ProviderError),
}

/// Resolves the provider serving a place.
pub trait ProviderSet {
    fn provider_at(&self, place: Place) -> Result<&dyn Provider, EvidenceError>;
}

impl<P: Provider> ProviderSet for P {
    fn provider_at(&self, _place: Place) -> Result<&dyn Provider, EvidenceError> {
        Ok(self)
    }
}

/// Evidence semantics of `t` run at `place` on input `e`, with event ids
/// assigned from `first_id` in annotation order.
pub fn eval(
    t: &Phrase,
    place: Place,
    e: &Evidence,
    providers: &impl ProviderSet,
    first_id: u64,
) -> Result<Evidence, EvidenceError> {
    let mut next = first_id;
    eval_at(t, place, e, providers, &mut next)
}

fn eval_at(
    t: &Phrase,
    p: Place,
    e: &Evidence,
    providers: &impl ProviderSet,
    next: &mut u64,
) -> Result<Evidence, EvidenceError> {
    let id = *next;
    Ok(match t {
        Phrase::Cpy => {
            *next += 1;
            e.clone()
        }
        Phrase::Asp(asp) => {
            *next += 1;
            let bits = providers.provider_at(p)?.measure(&MeasureRequest {
                asp,
                place: p,
                event_id: id,
                input: e,
            })?;
            Evidence::U {
                asp_id: asp.asp_id,
                args: asp.args.clone(),
                place: p,
                bits,
                sub: Box::new(e.clone()),
            }
        }
        Phrase::Sig => {
            *next += 1;
            let bits = providers.provider_at(p)?.sign(p, &text::encode(e))?;
            Evidence::G {
                bits,
                sub: Box::new(e.clone()),
            }
        }
        Phrase::Hsh => {
            *next += 1;
            Evidence::H {
                bits: providers.provider_at(p)?.hash(&text::encode(e)),
            }
        }
        Phrase::At(q, body) => {
            *next += 1;
            let out = eval_at(body, *q, e, providers, next)?;
            *next += 1;
            out
        }
        Phrase::LSeq(a, b) => {
            let mid = eval_at(a, p, e, providers, next)?;
            eval_at(b, p, &mid, providers, next)?
        }
        Phrase::BSeq(sp, a, b) | Phrase::BPar(sp, a, b) => {
            *next += 1;
            let (ea, eb) = split_evidence(*sp, e);
            let ra = eval_at(a, p, &ea, providers, next)?;
            let rb = eval_at(b, p, &eb, providers, next)?;
            *next += 1;
            match t {
                Phrase::BSeq(..) => Evidence::ss(ra, rb),
                _ => Evidence::pp(ra, rb),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::term::tests::arb_phrase;
    use proptest::prelude::*;

    const ALL_NONE: SplitSpec = SplitSpec::new(Selector::All, Selector::None);

    fn nonce0() -> Evidence {
        Evidence::nonce(0, Bits(vec![7, 7]), Evidence::Mt)
    }

    #[test]
    fn eval_sig_on_empty() {
        let got = eval(&Phrase::Sig, Place(1), &Evidence::Mt, &AbstractProvider, 0).unwrap();
        let expected = Evidence::G {
            bits: AbstractProvider.sign(Place(1), &text::encode(&Evidence::Mt)).unwrap(),
            sub: Box::new(Evidence::Mt),
        };
        assert_eq!(got, expected);
    }

    #[test]
    fn eval_cpy_is_identity() {
        let e = nonce0();
        assert_eq!(eval(&Phrase::Cpy, Place(3), &e, &AbstractProvider, 0).unwrap(), e);
    }

    #[test]
    fn eval_bseq_split() {
        let e = nonce0();
        let t = Phrase::bseq(ALL_NONE, Phrase::Cpy, Phrase::Cpy);
        assert_eq!(
            eval(&t, Place(0), &e, &AbstractProvider, 0).unwrap(),
            Evidence::ss(e, Evidence::Mt)
        );
    }

    #[test]
    fn abstract_measurement_is_event_id() {
        let t = Phrase::lseq(Phrase::Sig, Phrase::asp(7, vec![], 1, 2));
        let got = eval(&t, Place(1), &Evidence::Mt, &AbstractProvider, 10).unwrap();
        match got {
            Evidence::U { bits, asp_id, place, .. } => {
                assert_eq!(bits, Bits(11u64.to_be_bytes().to_vec()));
                assert_eq!((asp_id, place), (7, Place(1)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn splits() {
        let e = nonce0();
        let sel = |l, r| SplitSpec::new(l, r);
        assert_eq!(split_evidence(sel(Selector::All, Selector::All), &e), (e.clone(), e.clone()));
        assert_eq!(
            split_evidence(sel(Selector::None, Selector::None), &e),
            (Evidence::Mt, Evidence::Mt)
        );
        assert_eq!(split_evidence(ALL_NONE, &e), (e.clone(), Evidence::Mt));
    }

    #[test]
    fn shapes_erase_bits() {
        let g = Evidence::G {
            bits: Bits(vec![1, 2, 3]),
            sub: Box::new(Evidence::Mt),
        };
        assert_eq!(shape_of(&g), Shape::G(Box::new(Shape::Mt)));
        let u = Evidence::U {
            asp_id: 7,
            args: vec![],
            place: Place(1),
            bits: Bits(vec![9]),
            sub: Box::new(Evidence::Mt),
        };
        assert_eq!(
            shape_of(&u),
            Shape::U {
                asp_id: 7,
                args: vec![],
                place: Place(1),
                sub: Box::new(Shape::Mt)
            }
        );
    }

    #[test]
    fn keyed_signatures_verify_per_key() {
        let a = KeyedProvider::from_seed(1);
        let b = KeyedProvider::from_seed(2);
        let sig = a.sign(Place(1), b"payload").unwrap();
        assert!(a.verify(Place(1), b"payload", &sig));
        assert!(!a.verify(Place(1), b"payloaD", &sig));
        assert!(!b.verify(Place(1), b"payload", &sig));
    }

    fn signatures_verify(t: &Phrase, p: Place, e: &Evidence, prov: &dyn Provider) -> bool {
        // Walks phrase and evidence together so that each G node is checked
        // with the place that produced it.
        fn walk(t: &Phrase, p: Place, e: &Evidence, prov: &dyn Provider) -> bool {
            match (t, e) {
                (Phrase::Sig, Evidence::G { bits, sub }) => {
                    prov.verify(p, &text::encode(&**sub), bits)
                }
                (Phrase::At(q, body), _) => walk(body, *q, e, prov),
                (Phrase::LSeq(_, b), _) => walk(b, p, e, prov),
                (Phrase::BSeq(_, a, b), Evidence::SS(l, r))
                | (Phrase::BPar(_, a, b), Evidence::PP(l, r)) => {
                    walk(a, p, l, prov) && walk(b, p, r, prov)
                }
                _ => true,
            }
        }
        walk(t, p, e, prov)
    }

    proptest! {
        #[test]
        fn shape_is_independent_of_provider(t in arb_phrase(), p in 0u64..4) {
            let a = eval(&t, Place(p), &nonce0(), &AbstractProvider, 0).unwrap();
            let k = eval(&t, Place(p), &nonce0(), &KeyedProvider::from_seed(9), 0).unwrap();
            prop_assert_eq!(shape_of(&a), shape_of(&k));
            let shifted = eval(&t, Place(p), &Evidence::nonce(0, Bits(vec![1]), Evidence::Mt), &AbstractProvider, 50).unwrap();
            prop_assert_eq!(shape_of(&a), shape_of(&shifted));
        }

        #[test]
        fn produced_signatures_verify(t in arb_phrase(), p in 0u64..4) {
            for prov in [&AbstractProvider as &dyn Provider, &KeyedProvider::from_seed(3)] {
                let e = eval(&t, Place(p), &nonce0(), &prov_set(prov), 0).unwrap();
                prop_assert!(signatures_verify(&t, Place(p), &e, prov));
            }
        }
    }

    struct Fixed<'a>(&'a dyn Provider);
    impl ProviderSet for Fixed<'_> {
        fn provider_at(&self, _: Place) -> Result<&dyn Provider, EvidenceError> {
            Ok(self.0)
        }
    }
    fn prov_set(p: &dyn Provider) -> Fixed<'_> {
        Fixed(p)
    }
}
