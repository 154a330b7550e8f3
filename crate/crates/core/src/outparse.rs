//! Turning raw model output into canonical grounded records.
//!
//! The structured path is `extract_candidate -> repair -> normalize_records`.
//! Repair is a deterministic rewrite over a tolerant token stream:
//!
//! 1. single-quoted strings become double-quoted,
//! 2. bare keys are quoted,
//! 3. trailing (and doubled) commas are dropped, missing commas inserted,
//! 4. `//` and `/* */` comments are removed,
//! 5. strings left open at a line end are closed there,
//! 6. brackets still open at the end are closed,
//!
//! after which the result must pass a strict JSON parse.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::geometry::{clip_box, BBox, ImageDims};
use crate::span::GroundedSpan;
use crate::taskgen::OutputFormat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseKind {
    PlainText,
    Spans,
    Boxes,
    Invalid,
}

impl fmt::Display for ParseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParseKind::PlainText => "plain_text",
            ParseKind::Spans => "spans",
            ParseKind::Boxes => "boxes",
            ParseKind::Invalid => "invalid",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    PlainText(String),
    Spans(Vec<GroundedSpan>),
    Boxes(Vec<BBox>),
    Invalid,
}

/// A repaired prediction plus notes on what was changed or dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOutput {
    pub payload: Payload,
    pub diagnostics: Vec<String>,
}

impl ParsedOutput {
    pub fn invalid(reason: impl Into<String>) -> Self {
        Self {
            payload: Payload::Invalid,
            diagnostics: vec![reason.into()],
        }
    }

    pub fn plain(text: impl Into<String>) -> Self {
        Self {
            payload: Payload::PlainText(text.into()),
            diagnostics: Vec::new(),
        }
    }

    pub fn kind(&self) -> ParseKind {
        match self.payload {
            Payload::PlainText(_) => ParseKind::PlainText,
            Payload::Spans(_) => ParseKind::Spans,
            Payload::Boxes(_) => ParseKind::Boxes,
            Payload::Invalid => ParseKind::Invalid,
        }
    }

    pub fn is_invalid(&self) -> bool {
        matches!(self.payload, Payload::Invalid)
    }
}

/// Coordinate frame the model reports boxes in.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum CoordSpace {
    #[default]
    Pixel,
    /// Both axes scaled to `[0, scale]`, e.g. 1000.
    Normalized(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ParseOptions {
    pub coords: CoordSpace,
}

// ---------------------------------------------------------------------------
// Candidate extraction

fn is_fence_tag(s: &str) -> bool {
    s.chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '+' | '.'))
}

/// Contents of the first fenced code block, or the input when there is none.
pub fn strip_code_fences(raw: &str) -> &str {
    let Some(open) = raw.find("```") else {
        return raw;
    };
    let after = &raw[open + 3..];
    let body = match after.find('\n') {
        Some(nl) if is_fence_tag(after[..nl].trim_end_matches('\r')) => &after[nl + 1..],
        _ => {
            let tag_len = after
                .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
                .unwrap_or(after.len());
            let rest = &after[tag_len..];
            if rest.starts_with("```") || rest.trim_start().starts_with(['[', '{']) {
                rest
            } else {
                after
            }
        }
    };
    let body = match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    };
    let body = body.strip_suffix('\n').unwrap_or(body);
    body.strip_suffix('\r').unwrap_or(body)
}

/// Strip fences, then return the longest bracket-balanced `[...]` or `{...}`
/// span. An opener that is never closed yields the tail from that opener
/// when it is longer than any balanced span. Text without brackets is
/// returned as is.
pub fn extract_candidate(raw: &str) -> String {
    let text = strip_code_fences(raw);
    let mut best: Option<(usize, usize)> = None;
    let mut stack: Vec<char> = Vec::new();
    let mut start = 0usize;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    let consider = |s: usize, e: usize, best: &mut Option<(usize, usize)>| {
        if best.is_none_or(|(bs, be)| e - s > be - bs) {
            *best = Some((s, e));
        }
    };
    for (i, c) in text.char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q || (c == '\n' && q == '\'') {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' if !stack.is_empty() => quote = Some(c),
            '[' | '{' => {
                if stack.is_empty() {
                    start = i;
                }
                stack.push(c);
            }
            ']' | '}' => {
                let want = if c == ']' { '[' } else { '{' };
                match stack.last() {
                    Some(&top) if top == want => {
                        stack.pop();
                        if stack.is_empty() {
                            consider(start, i + 1, &mut best);
                        }
                    }
                    Some(_) => stack.clear(),
                    None => {}
                }
            }
            _ => {}
        }
    }
    if !stack.is_empty() {
        consider(start, text.len(), &mut best);
    }
    match best {
        Some((s, e)) => text[s..e].to_string(),
        None => text.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Repair

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepairError {
    /// Byte offset into the candidate of the first unrecoverable token.
    pub position: usize,
    pub message: String,
}

impl fmt::Display for RepairError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unrecoverable at byte {}: {}", self.position, self.message)
    }
}

impl std::error::Error for RepairError {}

#[derive(Debug, Clone, PartialEq)]
pub struct Repaired {
    pub value: Value,
    /// Repaired JSON text that was strictly parsed.
    pub text: String,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Open(char),
    Close(char),
    Colon,
    Comma,
    Str(String),
    Num(String),
    Word(String),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

struct Lexer<'a> {
    src: &'a str,
    chars: Vec<(usize, char)>,
    i: usize,
    notes: Vec<String>,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src,
            chars: src.char_indices().collect(),
            i: 0,
            notes: Vec::new(),
        }
    }

    fn peek(&self, k: usize) -> Option<char> {
        self.chars.get(self.i + k).map(|&(_, c)| c)
    }

    fn pos(&self) -> usize {
        self.chars.get(self.i).map_or(self.src.len(), |&(p, _)| p)
    }

    fn skip_line_comment(&mut self) {
        while let Some(c) = self.peek(0) {
            if c == '\n' {
                break;
            }
            self.i += 1;
        }
    }

    fn skip_block_comment(&mut self) {
        self.i += 2;
        while self.i < self.chars.len() {
            if self.peek(0) == Some('*') && self.peek(1) == Some('/') {
                self.i += 2;
                return;
            }
            self.i += 1;
        }
    }

    fn read_hex4(&mut self) -> Option<u32> {
        let mut v = 0u32;
        for k in 0..4 {
            v = v * 16 + self.peek(k)?.to_digit(16)?;
        }
        self.i += 4;
        Some(v)
    }

    fn read_escape(&mut self, out: &mut String) {
        let Some(c) = self.peek(0) else { return };
        self.i += 1;
        match c {
            'n' => out.push('\n'),
            't' => out.push('\t'),
            'r' => out.push('\r'),
            'b' => out.push('\u{8}'),
            'f' => out.push('\u{c}'),
            'u' => match self.read_hex4() {
                Some(hi @ 0xD800..=0xDBFF) => {
                    if self.peek(0) == Some('\\') && self.peek(1) == Some('u') {
                        self.i += 2;
                        match self.read_hex4() {
                            Some(lo @ 0xDC00..=0xDFFF) => {
                                let cp = 0x10000 + ((hi - 0xD800) << 10) + (lo - 0xDC00);
                                out.push(char::from_u32(cp).unwrap_or('\u{FFFD}'));
                            }
                            _ => out.push('\u{FFFD}'),
                        }
                    } else {
                        out.push('\u{FFFD}');
                    }
                }
                Some(v) => out.push(char::from_u32(v).unwrap_or('\u{FFFD}')),
                None => out.push('u'),
            },
            other => out.push(other),
        }
    }

    /// Double-quoted string; an unescaped newline or end of input closes it.
    fn read_double(&mut self) -> String {
        let start = self.pos();
        self.i += 1;
        let mut out = String::new();
        while let Some(c) = self.peek(0) {
            match c {
                '"' => {
                    self.i += 1;
                    return out;
                }
                '\\' => {
                    self.i += 1;
                    self.read_escape(&mut out);
                }
                '\n' => {
                    self.notes
                        .push(format!("closed string opened at byte {start} at line end"));
                    return out;
                }
                _ => {
                    out.push(c);
                    self.i += 1;
                }
            }
        }
        self.notes
            .push(format!("closed string opened at byte {start} at end of input"));
        out
    }

    /// Single-quoted string. A quote only closes it when followed by a
    /// structural character, so apostrophes inside words survive.
    fn read_single(&mut self) -> String {
        let start = self.pos();
        self.i += 1;
        let mut out = String::new();
        while let Some(c) = self.peek(0) {
            match c {
                '\\' => {
                    self.i += 1;
                    self.read_escape(&mut out);
                }
                '\'' => {
                    let mut k = 1;
                    while matches!(self.peek(k), Some(' ' | '\t' | '\r')) {
                        k += 1;
                    }
                    if matches!(self.peek(k), None | Some(',' | ':' | ']' | '}' | '\n')) {
                        self.i += 1;
                        return out;
                    }
                    out.push(c);
                    self.i += 1;
                }
                '\n' => {
                    self.notes
                        .push(format!("closed string opened at byte {start} at line end"));
                    return out;
                }
                _ => {
                    out.push(c);
                    self.i += 1;
                }
            }
        }
        self.notes
            .push(format!("closed string opened at byte {start} at end of input"));
        out
    }

    fn read_while(&mut self, keep: impl Fn(char) -> bool) -> String {
        let mut out = String::new();
        while let Some(c) = self.peek(0) {
            if !keep(c) {
                break;
            }
            out.push(c);
            self.i += 1;
        }
        out
    }

    fn tokens(mut self) -> (Vec<Token>, Vec<String>) {
        let mut toks = Vec::new();
        let mut single_noted = false;
        while let Some(c) = self.peek(0) {
            let pos = self.pos();
            let tok = match c {
                c if c.is_whitespace() => {
                    self.i += 1;
                    continue;
                }
                '/' if self.peek(1) == Some('/') => {
                    self.notes.push(format!("removed comment at byte {pos}"));
                    self.skip_line_comment();
                    continue;
                }
                '/' if self.peek(1) == Some('*') => {
                    self.notes.push(format!("removed comment at byte {pos}"));
                    self.skip_block_comment();
                    continue;
                }
                '[' | '{' => {
                    self.i += 1;
                    Tok::Open(c)
                }
                ']' | '}' => {
                    self.i += 1;
                    Tok::Close(c)
                }
                ':' => {
                    self.i += 1;
                    Tok::Colon
                }
                ',' => {
                    self.i += 1;
                    Tok::Comma
                }
                '"' => Tok::Str(self.read_double()),
                '\'' => {
                    if !single_noted {
                        self.notes.push("converted single-quoted strings".into());
                        single_noted = true;
                    }
                    Tok::Str(self.read_single())
                }
                c if c.is_ascii_digit() || matches!(c, '-' | '+' | '.') => {
                    let raw = self.read_while(|c| c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'e' | 'E'));
                    match clean_number(&raw) {
                        Some(n) => {
                            if n != raw {
                                self.notes.push(format!("rewrote number {raw:?} as {n}"));
                            }
                            Tok::Num(n)
                        }
                        None => Tok::Word(raw),
                    }
                }
                c if c.is_alphabetic() || c == '_' || c == '$' => {
                    Tok::Word(self.read_while(|c| c.is_alphanumeric() || matches!(c, '_' | '$' | '-')))
                }
                other => {
                    self.notes.push(format!("skipped stray {other:?} at byte {pos}"));
                    self.i += 1;
                    continue;
                }
            };
            toks.push(Token { tok, pos });
        }
        (toks, self.notes)
    }
}

fn clean_number(raw: &str) -> Option<String> {
    let mut s = raw.strip_prefix('+').unwrap_or(raw).to_string();
    while s.ends_with(['.', 'e', 'E', '+', '-']) && s.len() > 1 {
        s.pop();
    }
    if s.starts_with('.') {
        s.insert(0, '0');
    } else if s.starts_with("-.") {
        s.insert(1, '0');
    }
    if serde_json::from_str::<serde_json::Number>(&s).is_ok() {
        return Some(s);
    }
    let v: f64 = s.parse().ok()?;
    v.is_finite()
        .then(|| serde_json::Number::from_f64(v).map(|n| n.to_string()))?
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    KeyOrEnd,
    Colon,
    Value,
    CommaOrEnd,
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    open: char,
    expect: Expect,
}

struct Emitter {
    out: String,
    stack: Vec<Frame>,
    pending_comma: bool,
    done: bool,
    /// `(output offset, source offset)` for each emitted token.
    marks: Vec<(usize, usize)>,
    notes: Vec<String>,
}

fn closer_for(open: char) -> char {
    if open == '[' {
        ']'
    } else {
        '}'
    }
}

impl Emitter {
    fn mark(&mut self, src: usize) {
        self.marks.push((self.out.len(), src));
    }

    fn flush_comma(&mut self) {
        if self.pending_comma {
            self.out.push(',');
            self.pending_comma = false;
        }
    }

    /// Called after a complete value lands in the current container.
    fn value_done(&mut self) {
        match self.stack.last_mut() {
            Some(f) => f.expect = Expect::CommaOrEnd,
            None => self.done = true,
        }
    }

    fn emit_scalar(&mut self, text: &str, pos: usize) {
        self.flush_comma();
        self.mark(pos);
        self.out.push_str(text);
        self.value_done();
    }

    fn close_top(&mut self) {
        let f = self.stack.pop().expect("open frame");
        if self.pending_comma {
            self.pending_comma = false;
            self.notes.push("removed trailing comma".into());
        }
        match f.expect {
            Expect::Colon => {
                self.out.push_str(":null");
                self.notes.push("filled missing value with null".into());
            }
            Expect::Value if f.open == '{' => {
                self.out.push_str("null");
                self.notes.push("filled missing value with null".into());
            }
            _ => {}
        }
        self.out.push(closer_for(f.open));
        self.value_done();
    }

    fn scalar_text(&mut self, tok: &Tok, pos: usize) -> Result<String, RepairError> {
        Ok(match tok {
            Tok::Str(s) => serde_json::to_string(s).expect("string serializes"),
            Tok::Num(n) => n.clone(),
            Tok::Word(w) => match w.as_str() {
                "true" | "false" | "null" => w.clone(),
                "True" => "true".into(),
                "False" => "false".into(),
                "None" | "NaN" | "undefined" => {
                    self.notes.push(format!("mapped {w} to null"));
                    "null".into()
                }
                _ => {
                    return Err(RepairError {
                        position: pos,
                        message: format!("bare word {w:?} in value position"),
                    })
                }
            },
            _ => unreachable!("scalar token"),
        })
    }

    fn value(&mut self, tok: &Tok, pos: usize) -> Result<(), RepairError> {
        match tok {
            Tok::Open(c) => {
                self.flush_comma();
                self.mark(pos);
                self.out.push(*c);
                self.stack.push(Frame {
                    open: *c,
                    expect: if *c == '{' { Expect::KeyOrEnd } else { Expect::Value },
                });
                Ok(())
            }
            Tok::Str(_) | Tok::Num(_) | Tok::Word(_) => {
                let text = self.scalar_text(tok, pos)?;
                self.emit_scalar(&text, pos);
                Ok(())
            }
            _ => unreachable!("value token"),
        }
    }

    fn key(&mut self, tok: &Tok, pos: usize) {
        let name = match tok {
            Tok::Str(s) => s.clone(),
            Tok::Num(s) | Tok::Word(s) => {
                self.notes.push(format!("quoted bare key {s:?}"));
                s.clone()
            }
            _ => unreachable!("key token"),
        };
        self.flush_comma();
        self.mark(pos);
        self.out
            .push_str(&serde_json::to_string(&name).expect("string serializes"));
        if let Some(f) = self.stack.last_mut() {
            f.expect = Expect::Colon;
        }
    }

    fn close(&mut self, c: char, pos: usize) {
        let want = if c == ']' { '[' } else { '{' };
        let depth = self.stack.iter().rposition(|f| f.open == want);
        let pops = match depth {
            Some(d) => self.stack.len() - d,
            None => 1,
        };
        if pops > 1 || depth.is_none() {
            self.notes.push(format!("mismatched {c:?} at byte {pos}"));
        }
        self.mark(pos);
        for _ in 0..pops {
            self.close_top();
        }
    }

    fn feed(&mut self, t: &Token) -> Result<(), RepairError> {
        let pos = t.pos;
        let Some(frame) = self.stack.last().copied() else {
            return match &t.tok {
                Tok::Open(_) | Tok::Str(_) | Tok::Num(_) | Tok::Word(_) => self.value(&t.tok, pos),
                _ => Err(RepairError {
                    position: pos,
                    message: "expected a value".into(),
                }),
            };
        };
        let is_value = matches!(t.tok, Tok::Open(_) | Tok::Str(_) | Tok::Num(_) | Tok::Word(_));
        match (frame.open, frame.expect, &t.tok) {
            (_, _, Tok::Close(c)) => {
                if frame.expect == Expect::KeyOrEnd && frame.open == '{' && self.out.ends_with(':') {
                    // unreachable in practice; keys always move to Colon
                }
                self.close(*c, pos);
                Ok(())
            }
            ('{', Expect::KeyOrEnd, Tok::Str(_) | Tok::Num(_) | Tok::Word(_)) => {
                self.key(&t.tok, pos);
                Ok(())
            }
            ('{', Expect::KeyOrEnd, Tok::Comma) | ('[', Expect::Value, Tok::Comma) => {
                self.notes.push(format!("dropped extra comma at byte {pos}"));
                Ok(())
            }
            ('{', Expect::Colon, Tok::Colon) => {
                self.out.push(':');
                self.stack.last_mut().unwrap().expect = Expect::Value;
                Ok(())
            }
            ('{', Expect::Colon, _) if is_value => {
                self.notes.push(format!("inserted missing colon at byte {pos}"));
                self.out.push(':');
                self.stack.last_mut().unwrap().expect = Expect::Value;
                self.value(&t.tok, pos)
            }
            (_, Expect::Value, _) if is_value => self.value(&t.tok, pos),
            (_, Expect::CommaOrEnd, Tok::Comma) => {
                self.pending_comma = true;
                self.stack.last_mut().unwrap().expect = if frame.open == '{' {
                    Expect::KeyOrEnd
                } else {
                    Expect::Value
                };
                Ok(())
            }
            ('[', Expect::CommaOrEnd, _) if is_value => {
                self.notes.push(format!("inserted missing comma at byte {pos}"));
                self.pending_comma = true;
                self.value(&t.tok, pos)
            }
            ('{', Expect::CommaOrEnd, Tok::Str(_) | Tok::Word(_)) => {
                self.notes.push(format!("inserted missing comma at byte {pos}"));
                self.pending_comma = true;
                self.key(&t.tok, pos);
                Ok(())
            }
            _ => Err(RepairError {
                position: pos,
                message: format!("unexpected {:?}", t.tok),
            }),
        }
    }
}

/// Repair a JSON-like candidate. Strictly valid input is returned unchanged.
pub fn repair(candidate: &str) -> Result<Repaired, RepairError> {
    if let Ok(value) = serde_json::from_str::<Value>(candidate) {
        return Ok(Repaired {
            value,
            text: candidate.to_string(),
            notes: Vec::new(),
        });
    }
    let (tokens, lex_notes) = Lexer::new(candidate).tokens();
    let mut em = Emitter {
        out: String::new(),
        stack: Vec::new(),
        pending_comma: false,
        done: false,
        marks: Vec::new(),
        notes: lex_notes,
    };
    for t in &tokens {
        if em.done {
            em.notes.push(format!("ignored trailing content at byte {}", t.pos));
            break;
        }
        em.feed(t)?;
    }
    if em.out.is_empty() {
        return Err(RepairError {
            position: candidate.len(),
            message: "no JSON value found".into(),
        });
    }
    if !em.stack.is_empty() {
        em.notes
            .push(format!("closed {} unbalanced bracket(s)", em.stack.len()));
        while !em.stack.is_empty() {
            em.close_top();
        }
    }
    match serde_json::from_str::<Value>(&em.out) {
        Ok(value) => Ok(Repaired {
            value,
            text: em.out,
            notes: em.notes,
        }),
        Err(e) => {
            let offset = e.column().saturating_sub(1);
            let position = em
                .marks
                .iter()
                .rev()
                .find(|&&(o, _)| o <= offset)
                .map_or(0, |&(_, s)| s);
            Err(RepairError {
                position,
                message: e.to_string(),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Key and shape normalization

fn as_coord(v: &Value, notes: &mut Vec<String>) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => {
            let parsed = s.trim().parse::<f64>().ok()?;
            notes.push(format!("coerced coordinate {s:?} to a number"));
            Some(parsed)
        }
        _ => None,
    }
}

/// Four coordinates from a 4-element array of numbers or numeric strings.
fn as_raw_box(v: &Value, notes: &mut Vec<String>) -> Option<[f64; 4]> {
    let arr = v.as_array()?;
    if arr.len() != 4 {
        return None;
    }
    let mut local = Vec::new();
    let mut out = [0.0; 4];
    for (slot, item) in out.iter_mut().zip(arr) {
        *slot = as_coord(item, &mut local)?;
    }
    notes.extend(local);
    Some(out)
}

fn is_boxlike(v: &Value) -> bool {
    as_raw_box(v, &mut Vec::new()).is_some()
}

fn text_of(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Pick the text and box fields of a record by key name. Text keys rank
/// exact `text` over keys containing `text` over keys containing `label`;
/// box keys rank exact `bbox` over keys containing `box`. Values must have
/// the right shape to qualify.
fn record_fields(obj: &Map<String, Value>) -> (Option<&Value>, Option<&Value>) {
    let mut text: Option<(u8, &Value)> = None;
    let mut bbox: Option<(u8, &Value)> = None;
    for (k, v) in obj {
        let key = k.to_lowercase();
        if key.contains("box") && is_boxlike(v) {
            let rank = if key == "bbox" { 0 } else { 1 };
            if bbox.is_none_or(|(r, _)| rank < r) {
                bbox = Some((rank, v));
            }
            continue;
        }
        if text_of(v).is_some() {
            let rank = if key == "text" {
                0
            } else if key.contains("text") {
                1
            } else if key.contains("label") {
                2
            } else {
                continue;
            };
            if text.is_none_or(|(r, _)| rank < r) {
                text = Some((rank, v));
            }
        }
    }
    (text.map(|t| t.1), bbox.map(|b| b.1))
}

fn to_pixels(raw: [f64; 4], dims: ImageDims, coords: CoordSpace) -> [f64; 4] {
    match coords {
        CoordSpace::Pixel => raw,
        CoordSpace::Normalized(scale) => {
            let sx = f64::from(dims.width) / scale;
            let sy = f64::from(dims.height) / scale;
            [raw[0] * sx, raw[1] * sy, raw[2] * sx, raw[3] * sy]
        }
    }
}

pub fn normalize_records_with(value: &Value, dims: ImageDims, options: &ParseOptions) -> ParsedOutput {
    let mut notes = Vec::new();
    let items: Vec<&Value> = match value {
        Value::Array(arr) if is_boxlike(value) && !arr.iter().all(Value::is_array) => vec![value],
        Value::Array(arr) => arr.iter().collect(),
        Value::Object(obj) => {
            let (t, b) = record_fields(obj);
            if t.is_some() || b.is_some() {
                vec![value]
            } else if let Some((k, Value::Array(arr))) = obj.iter().find(|(_, v)| v.is_array()) {
                notes.push(format!("unwrapped array under key {k:?}"));
                arr.iter().collect()
            } else {
                return ParsedOutput::invalid("object without text, box, or array fields");
            }
        }
        _ => return ParsedOutput::invalid(format!("expected an array, got {value}")),
    };

    let mut spans = Vec::new();
    let mut boxes = Vec::new();
    let clip = |raw: [f64; 4], idx: usize, notes: &mut Vec<String>| -> Option<BBox> {
        match clip_box(to_pixels(raw, dims, options.coords), dims) {
            Ok(Some(b)) => Some(b),
            Ok(None) => {
                notes.push(format!("item {idx}: dropped degenerate box {raw:?}"));
                None
            }
            Err(e) => {
                notes.push(format!("item {idx}: {e}"));
                None
            }
        }
    };
    for (idx, item) in items.iter().enumerate() {
        match item {
            Value::Array(_) => match as_raw_box(item, &mut notes) {
                Some(raw) => boxes.extend(clip(raw, idx, &mut notes)),
                None => notes.push(format!("item {idx}: array is not a box")),
            },
            Value::Object(obj) => {
                let (t, b) = record_fields(obj);
                let raw = b.and_then(|v| as_raw_box(v, &mut notes));
                match (t.and_then(text_of), raw) {
                    (Some(text), Some(raw)) => {
                        if let Some(bbox) = clip(raw, idx, &mut notes) {
                            spans.push(GroundedSpan { text, bbox });
                        }
                    }
                    (None, Some(raw)) => boxes.extend(clip(raw, idx, &mut notes)),
                    (Some(_), None) => notes.push(format!("item {idx}: record has no box")),
                    (None, None) => notes.push(format!("item {idx}: record has neither text nor box")),
                }
            }
            other => notes.push(format!("item {idx}: unexpected {other}")),
        }
    }

    let payload = if !spans.is_empty() {
        if !boxes.is_empty() {
            notes.push(format!("dropped {} box-only item(s) among text records", boxes.len()));
        }
        Payload::Spans(spans)
    } else if !boxes.is_empty() {
        Payload::Boxes(boxes)
    } else if items.is_empty() {
        Payload::Boxes(Vec::new())
    } else {
        notes.push("no usable boxes or text".into());
        Payload::Invalid
    };
    ParsedOutput {
        payload,
        diagnostics: notes,
    }
}

pub fn normalize_records(value: &Value, dims: ImageDims) -> ParsedOutput {
    normalize_records_with(value, dims, &ParseOptions::default())
}

// ---------------------------------------------------------------------------
// Entry point

pub fn parse_prediction_with(
    raw: &str,
    expected: OutputFormat,
    dims: ImageDims,
    options: &ParseOptions,
) -> ParsedOutput {
    let want_spans = match expected {
        OutputFormat::Text | OutputFormat::Text2d => {
            return ParsedOutput::plain(strip_code_fences(raw));
        }
        OutputFormat::Lines | OutputFormat::Paragraphs => true,
        OutputFormat::Box => false,
    };
    let candidate = extract_candidate(raw);
    if !candidate.contains(['[', '{']) {
        return ParsedOutput::invalid("no JSON structure found");
    }
    let repaired = match repair(&candidate) {
        Ok(r) => r,
        Err(e) => return ParsedOutput::invalid(e.to_string()),
    };
    let mut parsed = normalize_records_with(&repaired.value, dims, options);
    let mut diagnostics = repaired.notes;
    diagnostics.append(&mut parsed.diagnostics);
    let payload = match (parsed.payload, want_spans) {
        (Payload::Spans(s), true) => Payload::Spans(s),
        (Payload::Boxes(b), false) => Payload::Boxes(b),
        (Payload::Boxes(b), true) if b.is_empty() => Payload::Spans(Vec::new()),
        (Payload::Spans(s), false) if s.is_empty() => Payload::Boxes(Vec::new()),
        (Payload::Invalid, _) => Payload::Invalid,
        (other, _) => {
            let got = match other {
                Payload::Spans(_) => "text records",
                _ => "bare boxes",
            };
            diagnostics.push(format!("got {got} where {expected} output was expected"));
            Payload::Invalid
        }
    };
    ParsedOutput { payload, diagnostics }
}

pub fn parse_prediction(raw: &str, expected: OutputFormat, dims: ImageDims) -> ParsedOutput {
    parse_prediction_with(raw, expected, dims, &ParseOptions::default())
}

/// Canonical JSON for span lists: `[{"text": ..., "bbox": [x1,y1,x2,y2]}, ...]`.
pub fn spans_to_json(spans: &[GroundedSpan]) -> String {
    serde_json::to_string(spans).expect("spans serialize")
}

/// Canonical JSON for box lists: `[[x1,y1,x2,y2], ...]`.
pub fn boxes_to_json(boxes: &[BBox]) -> String {
    serde_json::to_string(boxes).expect("boxes serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn dims() -> ImageDims {
        ImageDims::new(800, 600).unwrap()
    }

    fn b(x1: i64, y1: i64, x2: i64, y2: i64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn extract_examples() {
        assert_eq!(extract_candidate("```json\n[[1,2,3,4]]\n```"), "[[1,2,3,4]]");
        let c = extract_candidate("Sure! Here are the boxes: [[1,2,3,4]]");
        assert_eq!(c, "[[1,2,3,4]]");
        assert!(serde_json::from_str::<Value>(&c).is_ok());
        assert_eq!(extract_candidate("no structure here"), "no structure here");
    }

    #[test]
    fn extract_prefers_largest_and_truncated_tail() {
        assert_eq!(extract_candidate("a [1] then [[1,2],[3,4]] done"), "[[1,2],[3,4]]");
        assert_eq!(extract_candidate("x: [[1,2,3,4],[5,6"), "[[1,2,3,4],[5,6");
        assert_eq!(extract_candidate(r#"[{"text": "a]"}]"#), r#"[{"text": "a]"}]"#);
        assert_eq!(extract_candidate("It's here: [{'text': 'x]'}]"), "[{'text': 'x]'}]");
    }

    #[test]
    fn fences() {
        assert_eq!(strip_code_fences("```text\nHi\n```"), "Hi");
        assert_eq!(strip_code_fences("```text2d\n    A\n\nB\n```"), "    A\n\nB");
        assert_eq!(strip_code_fences("```\n```"), "");
        assert_eq!(strip_code_fences("plain"), "plain");
        assert_eq!(strip_code_fences("```[1,2]```"), "[1,2]");
        assert_eq!(strip_code_fences("```json[[1,2,3,4]]```"), "[[1,2,3,4]]");
        assert_eq!(strip_code_fences("pre\n```json\n[1]\n"), "[1]");
    }

    #[test]
    fn repair_examples() {
        let ok = r#"[{"text":"a","bbox":[1,2,3,4]}]"#;
        let r = repair(ok).unwrap();
        assert_eq!(r.value, serde_json::from_str::<Value>(ok).unwrap());
        assert!(r.notes.is_empty());

        let r = repair("[[1,2,3,4],]").unwrap();
        assert_eq!(r.value, json!([[1, 2, 3, 4]]));
        assert!(serde_json::from_str::<Value>(&r.text).is_ok());

        assert!(repair("{{{{").is_err());
    }

    #[test]
    fn repair_rules() {
        let cases: &[(&str, Value)] = &[
            (
                "[{'text': 'a', 'bbox': [1,2,3,4]}]",
                json!([{"text": "a", "bbox": [1, 2, 3, 4]}]),
            ),
            (
                "[{text: \"a\", bbox: [1,2,3,4]}]",
                json!([{"text": "a", "bbox": [1, 2, 3, 4]}]),
            ),
            ("[1, 2, // two\n 3]", json!([1, 2, 3])),
            ("[1, /* x */ 2]", json!([1, 2])),
            ("[\"abc\n]", json!(["abc"])),
            (
                "[{\"text\": \"a\", \"bbox\": [1,2,3",
                json!([{"text": "a", "bbox": [1, 2, 3]}]),
            ),
            ("[[1,2,3,4] [5,6,7,8]]", json!([[1, 2, 3, 4], [5, 6, 7, 8]])),
            ("{\"a\": 1,, \"b\": 2,}", json!({"a": 1, "b": 2})),
            (
                "[{'text': 'it's', 'bbox': [1,2,3,4]}]",
                json!([{"text": "it's", "bbox": [1, 2, 3, 4]}]),
            ),
            ("[{\"text\": \"a\", \"bbox\":", json!([{"text": "a", "bbox": null}])),
            ("{\"k\" 5}", json!({"k": 5})),
            ("[1.5e, +2, .5]", json!([1.5, 2, 0.5])),
            ("[True, None]", json!([true, null])),
            ("[1,2}", json!([1, 2])),
            ("[{\"a\": [1, 2}]", json!([{"a": [1, 2]}])),
        ];
        for (input, want) in cases {
            let r = repair(input).unwrap_or_else(|e| panic!("{input:?}: {e}"));
            assert_eq!(&r.value, want, "{input:?}");
            assert!(!r.notes.is_empty(), "{input:?} should note a repair");
            assert_eq!(serde_json::from_str::<Value>(&r.text).unwrap(), r.value);
        }
    }

    #[test]
    fn repair_reports_position() {
        let e = repair("[1, hello]").unwrap_err();
        assert_eq!(e.position, 4);
        let e = repair("").unwrap_err();
        assert_eq!(e.position, 0);
    }

    #[test]
    fn normalize_examples() {
        let v = json!([{"label": "x", "box": [1, 2, 3, 4]}]);
        assert_eq!(
            normalize_records(&v, dims()).payload,
            Payload::Spans(vec![GroundedSpan::new("x", b(1, 2, 3, 4))])
        );
        let v = json!([[1, 2, 3, 4], [5, 6, 7, 8]]);
        assert_eq!(
            normalize_records(&v, dims()).payload,
            Payload::Boxes(vec![b(1, 2, 3, 4), b(5, 6, 7, 8)])
        );
        let v = json!([{"text": "a", "bbox": [-3, 5, 99999, 40]}]);
        assert_eq!(
            normalize_records(&v, dims()).payload,
            Payload::Spans(vec![GroundedSpan::new("a", b(0, 5, 800, 40))])
        );
    }

    #[test]
    fn key_priorities_and_coercion() {
        let v = json!([{"Label": "lab", "line_text": "sub", "TEXT": "exact", "bounding_box": ["1", 2, 3, "4"]}]);
        let out = normalize_records(&v, dims());
        assert_eq!(
            out.payload,
            Payload::Spans(vec![GroundedSpan::new("exact", b(1, 2, 3, 4))])
        );
        assert!(out.diagnostics.iter().any(|d| d.contains("coerced")));
        let v = json!([{"label": "lab", "textual": "sub", "bbox": [1, 2, 3, 4]}]);
        assert!(matches!(&normalize_records(&v, dims()).payload, Payload::Spans(s) if s[0].text == "sub"));
        let v = json!([{"bbox": [1, 2, 3, 4]}]);
        assert_eq!(
            normalize_records(&v, dims()).payload,
            Payload::Boxes(vec![b(1, 2, 3, 4)])
        );
        let v = json!({"lines": [{"text": "q", "bbox": [1, 2, 3, 4]}]});
        assert!(matches!(normalize_records(&v, dims()).payload, Payload::Spans(_)));
        let v = json!([1, 2, 3, 4]);
        assert_eq!(
            normalize_records(&v, dims()).payload,
            Payload::Boxes(vec![b(1, 2, 3, 4)])
        );
    }

    #[test]
    fn unusable_records_are_invalid() {
        let v = json!([[5, 5, 5, 9]]);
        let out = normalize_records(&v, dims());
        assert!(out.is_invalid());
        assert!(!out.diagnostics.is_empty());
        assert!(normalize_records(&json!("text"), dims()).is_invalid());
        assert!(normalize_records(&json!([{"foo": 1}]), dims()).is_invalid());
    }

    #[test]
    fn normalized_coordinates() {
        let opts = ParseOptions {
            coords: CoordSpace::Normalized(1000.0),
        };
        let out = normalize_records_with(&json!([[100, 100, 500, 500]]), dims(), &opts);
        assert_eq!(out.payload, Payload::Boxes(vec![b(80, 60, 400, 300)]));
    }

    #[test]
    fn parse_examples() {
        let p = parse_prediction("[]", OutputFormat::Box, dims());
        assert_eq!(p.payload, Payload::Boxes(vec![]));
        let p = parse_prediction("[]", OutputFormat::Lines, dims());
        assert_eq!(p.payload, Payload::Spans(vec![]));
        assert!(parse_prediction("just prose", OutputFormat::Lines, dims()).is_invalid());
        let p = parse_prediction("```text\nHi\n```", OutputFormat::Text, dims());
        assert_eq!(p.payload, Payload::PlainText("Hi".into()));
    }

    #[test]
    fn structural_mismatch_is_invalid() {
        assert!(parse_prediction("[[1,2,3,4]]", OutputFormat::Lines, dims()).is_invalid());
        let p = parse_prediction(r#"[{"text":"a","bbox":[1,2,3,4]}]"#, OutputFormat::Box, dims());
        assert!(p.is_invalid());
        assert!(parse_prediction("{{{{", OutputFormat::Box, dims()).is_invalid());
    }

    #[test]
    fn canonical_serialization() {
        let spans = vec![GroundedSpan::new("a", b(1, 2, 3, 4))];
        assert_eq!(spans_to_json(&spans), r#"[{"text":"a","bbox":[1,2,3,4]}]"#);
        assert_eq!(boxes_to_json(&[b(1, 2, 3, 4)]), "[[1,2,3,4]]");
    }

    fn arb_json() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            (-1000i64..1000).prop_map(|n| json!(n)),
            "[a-z '\"\\\\]{0,6}".prop_map(Value::String),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
                prop::collection::btree_map("[a-z]{1,4}", inner, 0..4)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn valid_json_is_a_fixed_point(v in arb_json(), pretty in any::<bool>()) {
            let text = if pretty { serde_json::to_string_pretty(&v).unwrap() } else { v.to_string() };
            let r = repair(&text).unwrap();
            prop_assert_eq!(r.value, v);
        }

        #[test]
        fn parse_is_total(raw in ".{0,40}", fmt in prop::sample::select(OutputFormat::ALL.to_vec())) {
            let out = parse_prediction(&raw, fmt, dims());
            if out.is_invalid() {
                prop_assert!(!out.diagnostics.is_empty());
            }
            match &out.payload {
                Payload::Spans(s) => prop_assert!(s.iter().all(|x| x.bbox.within(dims()))),
                Payload::Boxes(bs) => prop_assert!(bs.iter().all(|x| x.within(dims()))),
                _ => {}
            }
        }

        #[test]
        fn truncated_arrays_still_parse(n in 1usize..5, cut in 1usize..30) {
            let boxes: Vec<Value> = (0..n).map(|i| json!([i, i, i + 10, i + 10])).collect();
            let full = Value::Array(boxes).to_string();
            let cut = cut.min(full.len() - 1);
            let r = repair(&full[..full.len() - cut]);
            if let Ok(r) = r {
                prop_assert!(serde_json::from_str::<Value>(&r.text).is_ok());
            }
        }
    }
}
