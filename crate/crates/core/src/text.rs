//! Concrete syntax for phrases and the canonical byte encoding.
//!
//! Phrase syntax:
//!
//! ```text
//! phrase := term | term "->" phrase
//! term   := factor | factor "-<" splits ">-" term | factor "~<" splits ">~" term
//! factor := "CPY" | "SIG" | "HSH"
//!         | IDENT "(" NAT "," NAT { "," STRING } ")"
//!         | "@" NAT "[" phrase "]"
//!         | "(" phrase ")"
//! splits := sp "," sp        sp := "+" | "-"
//! ```
//!
//! An ASP is written `name(place, target, args...)`; names map to numeric
//! ASP ids through an [`AspTable`].
//!
//! The canonical encoding is compact JSON: every node is an object whose
//! first field `"k"` is the constructor tag, followed by the constructor's
//! fields in a fixed order. Equal values encode to identical bytes, which is
//! what signatures and hashes are computed over.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde_json::Value;

use crate::events::{Event, EventSystem};
use crate::evidence::{Bits, Evidence};
use crate::term::{AnnoNode, AnnoPhrase, AspSpec, Phrase, Place, Range, Selector, SplitSpec};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{line}:{column}: expected {expected}, found {found}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub expected: String,
    pub found: String,
}

impl ParseError {
    fn new(line: usize, column: usize, expected: impl Into<String>, found: impl Into<String>) -> Self {
        ParseError {
            line,
            column,
            expected: expected.into(),
            found: found.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TableError {
    #[error("`{0}` is not a valid ASP name")]
    InvalidName(String),
    #[error("ASP name `{name}` is already bound to id {existing}")]
    NameTaken { name: String, existing: u64 },
    #[error("ASP id {id} is already named `{existing}`")]
    IdTaken { id: u64, existing: String },
}

const RESERVED: [&str; 3] = ["CPY", "SIG", "HSH"];

/// Bidirectional map between ASP names and ids.
///
/// Ids without a registered name print as `asp<id>`, and an unregistered
/// name of that form parses back to the same id, so printing and parsing
/// round-trip under any table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AspTable {
    by_name: BTreeMap<String, u64>,
    by_id: BTreeMap<u64, String>,
}

fn default_id(name: &str) -> Option<u64> {
    let digits = name.strip_prefix("asp")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || (digits.len() > 1 && digits.starts_with('0')) {
        return None;
    }
    digits.parse().ok()
}

fn is_ident(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !RESERVED.contains(&name)
}

impl AspTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, id: u64) -> Result<(), TableError> {
        if !is_ident(name) || default_id(name).is_some_and(|n| n != id) {
            return Err(TableError::InvalidName(name.to_string()));
        }
        match (self.by_name.get(name), self.by_id.get(&id)) {
            (Some(&existing), _) if existing == id => return Ok(()),
            (Some(&existing), _) => {
                return Err(TableError::NameTaken {
                    name: name.to_string(),
                    existing,
                })
            }
            (None, Some(existing)) => {
                return Err(TableError::IdTaken {
                    id,
                    existing: existing.clone(),
                })
            }
            (None, None) => {}
        }
        self.by_name.insert(name.to_string(), id);
        self.by_id.insert(id, name.to_string());
        Ok(())
    }

    pub fn id_of(&self, name: &str) -> Option<u64> {
        self.by_name
            .get(name)
            .copied()
            .or_else(|| default_id(name).filter(|n| !self.by_id.contains_key(n)))
    }

    /// Id for `name`, binding a fresh id if the name is new.
    pub fn intern(&mut self, name: &str) -> u64 {
        if let Some(id) = self.id_of(name) {
            return id;
        }
        let fresh = self.by_id.keys().next_back().map_or(0, |m| m + 1);
        self.by_name.insert(name.to_string(), fresh);
        self.by_id.insert(fresh, name.to_string());
        fresh
    }

    pub fn name_of(&self, id: u64) -> String {
        self.by_id.get(&id).cloned().unwrap_or_else(|| format!("asp{id}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.by_name.iter().map(|(n, &id)| (n.as_str(), id))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Clone, Debug, PartialEq, Eq)]
enum Token {
    Arrow,
    BseqOpen,
    BseqClose,
    BparOpen,
    BparClose,
    Comma,
    LParen,
    RParen,
    LBracket,
    RBracket,
    At,
    Nat(u64),
    Ident(String),
    Str(String),
    Eof,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Arrow => f.write_str("`->`"),
            Token::BseqOpen => f.write_str("`-<`"),
            Token::BseqClose => f.write_str("`>-`"),
            Token::BparOpen => f.write_str("`~<`"),
            Token::BparClose => f.write_str("`>~`"),
            Token::Comma => f.write_str("`,`"),
            Token::LParen => f.write_str("`(`"),
            Token::RParen => f.write_str("`)`"),
            Token::LBracket => f.write_str("`[`"),
            Token::RBracket => f.write_str("`]`"),
            Token::At => f.write_str("`@`"),
            Token::Nat(n) => write!(f, "number {n}"),
            Token::Ident(s) => write!(f, "`{s}`"),
            Token::Str(s) => write!(f, "string {s:?}"),
            Token::Eof => f.write_str("end of input"),
        }
    }
}

struct Parser<'t> {
    src: Vec<char>,
    pos: usize,
    line: usize,
    column: usize,
    table: &'t mut AspTable,
}

#[derive(Clone, Copy)]
struct Mark {
    pos: usize,
    line: usize,
    column: usize,
}

impl<'t> Parser<'t> {
    fn new(src: &str, table: &'t mut AspTable) -> Self {
        Parser {
            src: src.chars().collect(),
            pos: 0,
            line: 1,
            column: 1,
            table,
        }
    }

    fn mark(&self) -> Mark {
        Mark {
            pos: self.pos,
            line: self.line,
            column: self.column,
        }
    }

    fn reset(&mut self, m: Mark) {
        self.pos = m.pos;
        self.line = m.line;
        self.column = m.column;
    }

    fn peek_char(&self) -> Option<char> {
        self.src.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.src.get(self.pos).copied()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn skip_ws(&mut self) {
        loop {
            match self.peek_char() {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some('#') => {
                    while !matches!(self.peek_char(), None | Some('\n')) {
                        self.bump();
                    }
                }
                _ => break,
            }
        }
    }

    fn error_at(&self, m: Mark, expected: &str, found: impl fmt::Display) -> ParseError {
        ParseError::new(m.line, m.column, expected, found.to_string())
    }

    /// Lexes one token, returning it with its starting position.
    fn lex(&mut self) -> Result<(Token, Mark), ParseError> {
        self.skip_ws();
        let start = self.mark();
        let Some(c) = self.bump() else {
            return Ok((Token::Eof, start));
        };
        let two = |p: &mut Self, tok| {
            p.bump();
            Ok((tok, start))
        };
        match (c, self.peek_char()) {
            ('-', Some('>')) => two(self, Token::Arrow),
            ('-', Some('<')) => two(self, Token::BseqOpen),
            ('>', Some('-')) => two(self, Token::BseqClose),
            ('~', Some('<')) => two(self, Token::BparOpen),
            ('>', Some('~')) => two(self, Token::BparClose),
            (',', _) => Ok((Token::Comma, start)),
            ('(', _) => Ok((Token::LParen, start)),
            (')', _) => Ok((Token::RParen, start)),
            ('[', _) => Ok((Token::LBracket, start)),
            (']', _) => Ok((Token::RBracket, start)),
            ('@', _) => Ok((Token::At, start)),
            ('"', _) => self.lex_string(start),
            (d, _) if d.is_ascii_digit() => {
                let mut text = d.to_string();
                while let Some(d) = self.peek_char().filter(char::is_ascii_digit) {
                    text.push(d);
                    self.bump();
                }
                text.parse()
                    .map(|n| (Token::Nat(n), start))
                    .map_err(|_| self.error_at(start, "natural number", format!("`{text}` (too large)")))
            }
            (a, _) if a.is_ascii_alphabetic() || a == '_' => {
                let mut text = a.to_string();
                while let Some(a) = self.peek_char().filter(|c| c.is_ascii_alphanumeric() || *c == '_') {
                    text.push(a);
                    self.bump();
                }
                Ok((Token::Ident(text), start))
            }
            (other, _) => Err(self.error_at(start, "token", format!("`{other}`"))),
        }
    }

    fn lex_string(&mut self, start: Mark) -> Result<(Token, Mark), ParseError> {
        let mut out = String::new();
        loop {
            let here = self.mark();
            match self.bump() {
                None => return Err(self.error_at(here, "closing `\"`", Token::Eof)),
                Some('"') => return Ok((Token::Str(out), start)),
                Some('\\') => match self.bump() {
                    Some('"') => out.push('"'),
                    Some('\\') => out.push('\\'),
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some(other) => return Err(self.error_at(here, "escape sequence", format!("`\\{other}`"))),
                    None => return Err(self.error_at(here, "escape sequence", Token::Eof)),
                },
                Some(c) => out.push(c),
            }
        }
    }

    fn peek(&mut self) -> Result<(Token, Mark), ParseError> {
        let m = self.mark();
        let tok = self.lex();
        self.reset(m);
        tok
    }

    fn expect(&mut self, want: Token, what: &str) -> Result<Mark, ParseError> {
        let (tok, at) = self.lex()?;
        if tok == want {
            Ok(at)
        } else {
            Err(self.error_at(at, what, tok))
        }
    }

    fn nat(&mut self, what: &str) -> Result<u64, ParseError> {
        match self.lex()? {
            (Token::Nat(n), _) => Ok(n),
            (tok, at) => Err(self.error_at(at, what, tok)),
        }
    }

    fn phrase(&mut self) -> Result<Phrase, ParseError> {
        let first = self.term()?;
        if self.peek()?.0 == Token::Arrow {
            self.lex()?;
            let rest = self.phrase()?;
            return Ok(Phrase::lseq(first, rest));
        }
        Ok(first)
    }

    fn term(&mut self) -> Result<Phrase, ParseError> {
        let left = self.factor()?;
        let close = match self.peek()?.0 {
            Token::BseqOpen => Token::BseqClose,
            Token::BparOpen => Token::BparClose,
            _ => return Ok(left),
        };
        self.lex()?;
        let split = self.splits()?;
        self.expect(close.clone(), &close.to_string())?;
        let right = self.term()?;
        Ok(match close {
            Token::BseqClose => Phrase::bseq(split, left, right),
            _ => Phrase::bpar(split, left, right),
        })
    }

    /// Selectors are read character by character: `-` would otherwise lex
    /// as part of an arrow.
    fn splits(&mut self) -> Result<SplitSpec, ParseError> {
        let left = self.selector()?;
        self.skip_ws();
        let here = self.mark();
        match self.bump() {
            Some(',') => {}
            other => return Err(self.error_at(here, "`,`", found_char(other))),
        }
        let right = self.selector()?;
        Ok(SplitSpec::new(left, right))
    }

    fn selector(&mut self) -> Result<Selector, ParseError> {
        self.skip_ws();
        let here = self.mark();
        match self.bump() {
            Some('+') => Ok(Selector::All),
            Some('-') => Ok(Selector::None),
            other => Err(self.error_at(here, "split selector `+` or `-`", found_char(other))),
        }
    }

    fn factor(&mut self) -> Result<Phrase, ParseError> {
        let (tok, at) = self.lex()?;
        match tok {
            Token::Ident(name) if name == "CPY" => Ok(Phrase::Cpy),
            Token::Ident(name) if name == "SIG" => Ok(Phrase::Sig),
            Token::Ident(name) if name == "HSH" => Ok(Phrase::Hsh),
            Token::Ident(name) => {
                self.expect(Token::LParen, "`(`")?;
                let place = self.nat("place")?;
                self.expect(Token::Comma, "`,`")?;
                let target = self.nat("target")?;
                let mut args = Vec::new();
                loop {
                    match self.lex()? {
                        (Token::RParen, _) => break,
                        (Token::Comma, _) => match self.lex()? {
                            (Token::Str(s), _) => args.push(s),
                            (tok, at) => return Err(self.error_at(at, "string argument", tok)),
                        },
                        (tok, at) => return Err(self.error_at(at, "`,` or `)`", tok)),
                    }
                }
                let asp_id = self.table.intern(&name);
                Ok(Phrase::asp(asp_id, args, place, target))
            }
            Token::At => {
                let q = self.nat("place")?;
                self.expect(Token::LBracket, "`[`")?;
                let body = self.phrase()?;
                self.expect(Token::RBracket, "`]`")?;
                Ok(Phrase::at(q, body))
            }
            Token::LParen => {
                let inner = self.phrase()?;
                self.expect(Token::RParen, "`)`")?;
                Ok(inner)
            }
            other => Err(self.error_at(at, "term", other)),
        }
    }
}

fn found_char(c: Option<char>) -> String {
    match c {
        Some(c) => format!("`{c}`"),
        None => Token::Eof.to_string(),
    }
}

/// Parses a phrase, interning ASP names into `table`.
pub fn parse_phrase(src: &str, table: &mut AspTable) -> Result<Phrase, ParseError> {
    let mut p = Parser::new(src, table);
    let t = p.phrase()?;
    match p.lex()? {
        (Token::Eof, _) => Ok(t),
        (tok, at) => Err(p.error_at(at, "end of input", tok)),
    }
}

fn quote(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
}

fn selector_char(s: Selector) -> char {
    match s {
        Selector::All => '+',
        Selector::None => '-',
    }
}

/// Prints a phrase in fully parenthesized concrete syntax.
pub fn print_phrase(t: &Phrase, table: &AspTable) -> String {
    let mut out = String::new();
    print_into(t, table, &mut out);
    out
}

fn print_into(t: &Phrase, table: &AspTable, out: &mut String) {
    match t {
        Phrase::Cpy => out.push_str("CPY"),
        Phrase::Sig => out.push_str("SIG"),
        Phrase::Hsh => out.push_str("HSH"),
        Phrase::Asp(a) => {
            let _ = write!(out, "{}({}, {}", table.name_of(a.asp_id), a.place, a.target_id);
            for arg in &a.args {
                out.push_str(", ");
                quote(arg, out);
            }
            out.push(')');
        }
        Phrase::At(q, body) => {
            let _ = write!(out, "@{q} [");
            print_into(body, table, out);
            out.push(']');
        }
        Phrase::LSeq(a, b) => {
            out.push('(');
            print_into(a, table, out);
            out.push_str(" -> ");
            print_into(b, table, out);
            out.push(')');
        }
        Phrase::BSeq(sp, a, b) | Phrase::BPar(sp, a, b) => {
            let (open, close) = match t {
                Phrase::BSeq(..) => ("-<", ">-"),
                _ => ("~<", ">~"),
            };
            out.push('(');
            print_into(a, table, out);
            let _ = write!(
                out,
                " {open}{},{}{close} ",
                selector_char(sp.left),
                selector_char(sp.right)
            );
            print_into(b, table, out);
            out.push(')');
        }
    }
}

// ---------------------------------------------------------------------------
// Canonical encoding

/// Builds one canonical JSON object.
pub(crate) struct Obj<'a> {
    out: &'a mut String,
}

impl<'a> Obj<'a> {
    pub(crate) fn new(out: &'a mut String, tag: &str) -> Self {
        out.push_str("{\"k\":");
        write_str(tag, out);
        Obj { out }
    }

    fn key(&mut self, name: &str) -> &mut String {
        self.out.push(',');
        write_str(name, self.out);
        self.out.push(':');
        self.out
    }

    pub(crate) fn nat(mut self, name: &str, n: u64) -> Self {
        let _ = write!(self.key(name), "{n}");
        self
    }

    pub(crate) fn str(mut self, name: &str, s: &str) -> Self {
        write_str(s, self.key(name));
        self
    }

    pub(crate) fn bits(self, name: &str, b: &Bits) -> Self {
        self.str(name, &b.to_hex())
    }

    pub(crate) fn strs(mut self, name: &str, items: &[String]) -> Self {
        let out = self.key(name);
        out.push('[');
        for (i, s) in items.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write_str(s, out);
        }
        out.push(']');
        self
    }

    pub(crate) fn node<T: Canonical>(mut self, name: &str, v: &T) -> Self {
        v.write_canonical(self.key(name));
        self
    }

    pub(crate) fn list<T: Canonical>(mut self, name: &str, items: &[T]) -> Self {
        items.to_vec_canonical(self.key(name));
        self
    }

    pub(crate) fn raw(mut self, name: &str, f: impl FnOnce(&mut String)) -> Self {
        f(self.key(name));
        self
    }

    pub(crate) fn done(self) {
        self.out.push('}');
    }
}

trait SliceCanonical {
    fn to_vec_canonical(&self, out: &mut String);
}

impl<T: Canonical> SliceCanonical for [T] {
    fn to_vec_canonical(&self, out: &mut String) {
        out.push('[');
        for (i, v) in self.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            v.write_canonical(out);
        }
        out.push(']');
    }
}

pub(crate) fn write_str(s: &str, out: &mut String) {
    out.push_str(&serde_json::to_string(s).expect("strings always serialize"));
}

/// Read access to one decoded JSON object.
pub(crate) struct Fields<'v> {
    map: &'v serde_json::Map<String, Value>,
    pub(crate) tag: &'v str,
}

pub(crate) fn bad(expected: impl Into<String>, found: &Value) -> ParseError {
    let mut shown = found.to_string();
    if shown.chars().count() > 48 {
        shown = shown.chars().take(45).collect::<String>() + "...";
    }
    ParseError::new(1, 1, expected, shown)
}

impl<'v> Fields<'v> {
    pub(crate) fn of(v: &'v Value) -> Result<Self, ParseError> {
        let map = v.as_object().ok_or_else(|| bad("object", v))?;
        let tag = map
            .get("k")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("object with a string tag `k`", v))?;
        Ok(Fields { map, tag })
    }

    pub(crate) fn get(&self, name: &str) -> Result<&'v Value, ParseError> {
        self.map.get(name).ok_or_else(|| {
            ParseError::new(1, 1, format!("field `{name}` in `{}` node", self.tag), "nothing")
        })
    }

    pub(crate) fn nat(&self, name: &str) -> Result<u64, ParseError> {
        let v = self.get(name)?;
        v.as_u64().ok_or_else(|| bad(format!("natural number for `{name}`"), v))
    }

    pub(crate) fn str(&self, name: &str) -> Result<&'v str, ParseError> {
        let v = self.get(name)?;
        v.as_str().ok_or_else(|| bad(format!("string for `{name}`"), v))
    }

    pub(crate) fn bits(&self, name: &str) -> Result<Bits, ParseError> {
        let s = self.str(name)?;
        hex::decode(s)
            .map(Bits)
            .map_err(|_| bad(format!("hex string for `{name}`"), self.get(name).unwrap_or(&Value::Null)))
    }

    pub(crate) fn strs(&self, name: &str) -> Result<Vec<String>, ParseError> {
        let v = self.get(name)?;
        v.as_array()
            .ok_or_else(|| bad(format!("array for `{name}`"), v))?
            .iter()
            .map(|s| {
                s.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| bad("string", s))
            })
            .collect()
    }

    pub(crate) fn node<T: Canonical>(&self, name: &str) -> Result<T, ParseError> {
        T::from_value(self.get(name)?)
    }

    pub(crate) fn list<T: Canonical>(&self, name: &str) -> Result<Vec<T>, ParseError> {
        Vec::<T>::from_value(self.get(name)?)
    }

    fn unknown(&self, family: &str) -> ParseError {
        ParseError::new(1, 1, format!("{family} tag"), format!("`{}`", self.tag))
    }
}

/// Values with a canonical byte encoding.
pub trait Canonical: Sized + Clone {
    fn write_canonical(&self, out: &mut String);
    fn from_value(v: &Value) -> Result<Self, ParseError>;
}

pub fn encode<T: Canonical>(v: &T) -> Vec<u8> {
    encode_string(v).into_bytes()
}

pub fn encode_string<T: Canonical>(v: &T) -> String {
    let mut out = String::new();
    v.write_canonical(&mut out);
    out
}

pub fn decode<T: Canonical>(bytes: &[u8]) -> Result<T, ParseError> {
    let v: Value = serde_json::from_slice(bytes).map_err(|e| {
        let found = if e.is_eof() { "end of input" } else { "malformed JSON" };
        ParseError::new(e.line().max(1), e.column().max(1), "canonical JSON value", format!("{found} ({e})"))
    })?;
    T::from_value(&v)
}

impl<T: Canonical> Canonical for Vec<T> {
    fn write_canonical(&self, out: &mut String) {
        self.as_slice().to_vec_canonical(out);
    }

    fn from_value(v: &Value) -> Result<Self, ParseError> {
        v.as_array()
            .ok_or_else(|| bad("array", v))?
            .iter()
            .map(T::from_value)
            .collect()
    }
}

fn split_str(sp: SplitSpec) -> String {
    let s = |sel| match sel {
        Selector::All => "ALL",
        Selector::None => "NONE",
    };
    format!("{},{}", s(sp.left), s(sp.right))
}

fn parse_split(f: &Fields<'_>) -> Result<SplitSpec, ParseError> {
    let raw = f.str("split")?;
    let sel = |s: &str| match s {
        "ALL" => Some(Selector::All),
        "NONE" => Some(Selector::None),
        _ => None,
    };
    raw.split_once(',')
        .and_then(|(l, r)| Some(SplitSpec::new(sel(l)?, sel(r)?)))
        .ok_or_else(|| bad("split `ALL|NONE,ALL|NONE`", f.get("split").unwrap_or(&Value::Null)))
}

fn write_asp<'a>(o: Obj<'a>, a: &AspSpec) -> Obj<'a> {
    o.nat("asp", a.asp_id)
        .strs("args", &a.args)
        .nat("place", a.place.0)
        .nat("target", a.target_id)
}

fn read_asp(f: &Fields<'_>) -> Result<AspSpec, ParseError> {
    Ok(AspSpec::new(f.nat("asp")?, f.strs("args")?, f.nat("place")?, f.nat("target")?))
}

impl Canonical for Phrase {
    fn write_canonical(&self, out: &mut String) {
        match self {
            Phrase::Asp(a) => write_asp(Obj::new(out, "ASP"), a).done(),
            Phrase::Cpy => Obj::new(out, "CPY").done(),
            Phrase::Sig => Obj::new(out, "SIG").done(),
            Phrase::Hsh => Obj::new(out, "HSH").done(),
            Phrase::At(q, body) => Obj::new(out, "AT").nat("place", q.0).node("body", &**body).done(),
            Phrase::LSeq(a, b) => Obj::new(out, "LSEQ").node("first", &**a).node("second", &**b).done(),
            Phrase::BSeq(sp, a, b) => Obj::new(out, "BSEQ")
                .str("split", &split_str(*sp))
                .node("left", &**a)
                .node("right", &**b)
                .done(),
            Phrase::BPar(sp, a, b) => Obj::new(out, "BPAR")
                .str("split", &split_str(*sp))
                .node("left", &**a)
                .node("right", &**b)
                .done(),
        }
    }

    fn from_value(v: &Value) -> Result<Self, ParseError> {
        let f = Fields::of(v)?;
        Ok(match f.tag {
            "ASP" => Phrase::Asp(read_asp(&f)?),
            "CPY" => Phrase::Cpy,
            "SIG" => Phrase::Sig,
            "HSH" => Phrase::Hsh,
            "AT" => Phrase::at(f.nat("place")?, f.node("body")?),
            "LSEQ" => Phrase::lseq(f.node("first")?, f.node("second")?),
            "BSEQ" => Phrase::bseq(parse_split(&f)?, f.node("left")?, f.node("right")?),
            "BPAR" => Phrase::bpar(parse_split(&f)?, f.node("left")?, f.node("right")?),
            _ => return Err(f.unknown("phrase")),
        })
    }
}

impl Canonical for AnnoPhrase {
    fn write_canonical(&self, out: &mut String) {
        let r = self.range;
        fn o<'a>(out: &'a mut String, tag: &str, r: Range) -> Obj<'a> {
            Obj::new(out, tag).nat("lo", r.lo).nat("hi", r.hi)
        }
        match &self.node {
            AnnoNode::Asp(a) => write_asp(o(out, "ASP", r), a).done(),
            AnnoNode::Cpy => o(out, "CPY", r).done(),
            AnnoNode::Sig => o(out, "SIG", r).done(),
            AnnoNode::Hsh => o(out, "HSH", r).done(),
            AnnoNode::At(q, body) => o(out, "AT", r).nat("place", q.0).node("body", &**body).done(),
            AnnoNode::LSeq(a, b) => o(out, "LSEQ", r).node("first", &**a).node("second", &**b).done(),
            AnnoNode::BSeq(sp, a, b) => o(out, "BSEQ", r)
                .str("split", &split_str(*sp))
                .node("left", &**a)
                .node("right", &**b)
                .done(),
            AnnoNode::BPar(sp, a, b) => o(out, "BPAR", r)
                .str("split", &split_str(*sp))
                .node("left", &**a)
                .node("right", &**b)
                .done(),
        }
    }

    fn from_value(v: &Value) -> Result<Self, ParseError> {
        let f = Fields::of(v)?;
        let range = Range::new(f.nat("lo")?, f.nat("hi")?);
        let bx = |name| f.node::<AnnoPhrase>(name).map(Box::new);
        let node = match f.tag {
            "ASP" => AnnoNode::Asp(read_asp(&f)?),
            "CPY" => AnnoNode::Cpy,
            "SIG" => AnnoNode::Sig,
            "HSH" => AnnoNode::Hsh,
            "AT" => AnnoNode::At(Place(f.nat("place")?), bx("body")?),
            "LSEQ" => AnnoNode::LSeq(bx("first")?, bx("second")?),
            "BSEQ" => AnnoNode::BSeq(parse_split(&f)?, bx("left")?, bx("right")?),
            "BPAR" => AnnoNode::BPar(parse_split(&f)?, bx("left")?, bx("right")?),
            _ => return Err(f.unknown("annotated phrase")),
        };
        Ok(AnnoPhrase::new(range, node))
    }
}

impl Canonical for Evidence {
    fn write_canonical(&self, out: &mut String) {
        match self {
            Evidence::Mt => Obj::new(out, "MT").done(),
            Evidence::U {
                asp_id,
                args,
                place,
                bits,
                sub,
            } => Obj::new(out, "U")
                .nat("asp", *asp_id)
                .strs("args", args)
                .nat("place", place.0)
                .bits("bits", bits)
                .node("sub", &**sub)
                .done(),
            Evidence::G { bits, sub } => Obj::new(out, "G").bits("bits", bits).node("sub", &**sub).done(),
            Evidence::H { bits } => Obj::new(out, "H").bits("bits", bits).done(),
            Evidence::N { nonce_id, bits, sub } => Obj::new(out, "N")
                .nat("nonce", *nonce_id)
                .bits("bits", bits)
                .node("sub", &**sub)
                .done(),
            Evidence::SS(l, r) => Obj::new(out, "SS").node("left", &**l).node("right", &**r).done(),
            Evidence::PP(l, r) => Obj::new(out, "PP").node("left", &**l).node("right", &**r).done(),
        }
    }

    fn from_value(v: &Value) -> Result<Self, ParseError> {
        let f = Fields::of(v)?;
        let sub = || f.node::<Evidence>("sub").map(Box::new);
        Ok(match f.tag {
            "MT" => Evidence::Mt,
            "U" => Evidence::U {
                asp_id: f.nat("asp")?,
                args: f.strs("args")?,
                place: Place(f.nat("place")?),
                bits: f.bits("bits")?,
                sub: sub()?,
            },
            "G" => Evidence::G {
                bits: f.bits("bits")?,
                sub: sub()?,
            },
            "H" => Evidence::H { bits: f.bits("bits")? },
            "N" => Evidence::N {
                nonce_id: f.nat("nonce")?,
                bits: f.bits("bits")?,
                sub: sub()?,
            },
            "SS" => Evidence::ss(f.node("left")?, f.node("right")?),
            "PP" => Evidence::pp(f.node("left")?, f.node("right")?),
            _ => return Err(f.unknown("evidence")),
        })
    }
}

impl Canonical for Event {
    fn write_canonical(&self, out: &mut String) {
        match self {
            Event::Copy { id, place } => Obj::new(out, "COPY").nat("id", *id).nat("place", place.0).done(),
            Event::Meas { id, place, asp } => {
                write_asp(Obj::new(out, "MEAS").nat("id", *id).nat("at", place.0), asp).done()
            }
            Event::Sign { id, place } => Obj::new(out, "SIGN").nat("id", *id).nat("place", place.0).done(),
            Event::Hash { id, place } => Obj::new(out, "HASH").nat("id", *id).nat("place", place.0).done(),
            Event::Split { id, place } => Obj::new(out, "SPLIT").nat("id", *id).nat("place", place.0).done(),
            Event::Join { id, place } => Obj::new(out, "JOIN").nat("id", *id).nat("place", place.0).done(),
            Event::Req { id, from, to, body } => Obj::new(out, "REQ")
                .nat("id", *id)
                .nat("from", from.0)
                .nat("to", to.0)
                .node("body", body)
                .done(),
            Event::Rpy { id, from, to } => Obj::new(out, "RPY")
                .nat("id", *id)
                .nat("from", from.0)
                .nat("to", to.0)
                .done(),
        }
    }

    fn from_value(v: &Value) -> Result<Self, ParseError> {
        let f = Fields::of(v)?;
        let id = f.nat("id")?;
        let place = || f.nat("place").map(Place);
        Ok(match f.tag {
            "COPY" => Event::Copy { id, place: place()? },
            "MEAS" => Event::Meas {
                id,
                place: Place(f.nat("at")?),
                asp: read_asp(&f)?,
            },
            "SIGN" => Event::Sign { id, place: place()? },
            "HASH" => Event::Hash { id, place: place()? },
            "SPLIT" => Event::Split { id, place: place()? },
            "JOIN" => Event::Join { id, place: place()? },
            "REQ" => Event::Req {
                id,
                from: Place(f.nat("from")?),
                to: Place(f.nat("to")?),
                body: f.node("body")?,
            },
            "RPY" => Event::Rpy {
                id,
                from: Place(f.nat("from")?),
                to: Place(f.nat("to")?),
            },
            _ => return Err(f.unknown("event")),
        })
    }
}

impl Canonical for EventSystem {
    fn write_canonical(&self, out: &mut String) {
        match self {
            EventSystem::Leaf(e) => Obj::new(out, "LEAF").node("event", e).done(),
            EventSystem::Before(l, r) => Obj::new(out, "BEFORE").node("left", &**l).node("right", &**r).done(),
            EventSystem::Merge(l, r) => Obj::new(out, "MERGE").node("left", &**l).node("right", &**r).done(),
        }
    }

    fn from_value(v: &Value) -> Result<Self, ParseError> {
        let f = Fields::of(v)?;
        Ok(match f.tag {
            "LEAF" => EventSystem::Leaf(f.node("event")?),
            "BEFORE" => EventSystem::before(f.node("left")?, f.node("right")?),
            "MERGE" => EventSystem::merge(f.node("left")?, f.node("right")?),
            _ => return Err(f.unknown("event system")),
        })
    }
}
