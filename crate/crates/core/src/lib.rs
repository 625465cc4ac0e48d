//! Copland attestation toolkit.
//!
//! Phrases are parsed ([`text`]), annotated with event ids ([`term`]),
//! compiled and executed on the virtual machine ([`cvm`]), and checked
//! against their event-system semantics ([`events`], [`conformance`]). The
//! attestation manager ([`am`]) wraps execution with nonce handling and
//! appraisal of the returned [`evidence`].

pub mod am;
pub mod conformance;
pub mod cvm;
pub mod evidence;
pub mod events;
pub mod scenario;
pub mod term;
pub mod text;

pub use am::{appraise, run_avm, AmConfig, AmState, AppraisalResult};
pub use conformance::{check_cumul, check_irrel, check_refines, gen_phrase, ConformanceReport, GenConfig};
pub use cvm::{compile, run_cvm, Cvm, CvmError, CvmProgram, CvmState, PlaceRegistry, ProviderMode};
pub use evidence::{eval, AbstractProvider, Bits, Evidence, KeyedProvider, Provider, Shape};
pub use events::{ev_sys, is_trace, Event, EventSystem, Trace};
pub use term::{annotate, unanno, well_formed, AnnoPhrase, AspSpec, Phrase, Place, Range, Selector, SplitSpec};
pub use text::{decode, encode, parse_phrase, print_phrase, AspTable, ParseError};
