//! Line protocol between the device and the backend.
//!
//! Backend → device: one command per line,
//!
//! ```text
//! MODE <1|2|3>
//! THRESHOLD <0-2> <0-4095>
//! RELAY <0-2> <ON|OFF>
//! ```
//!
//! Device → backend: one JSON object per line with the fixed key order
//! `ts, temp, hum, rain, flow, soil, relay, mode`. The frame parser is a
//! hand-written strict reader: unknown or duplicate keys, wrong types, bad
//! arity and out-of-range values are all rejected with a 1-based column.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::domain::{
    Mode, PotId, Rain, RelayState, SensorSnapshot, ADC_MAX, POT_COUNT, SOIL_CHANNELS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Mode(Mode),
    Threshold { relay: PotId, counts: u16 },
    Relay { relay: PotId, state: RelayState },
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Command::Mode(m) => write!(f, "MODE {}", m.code()),
            Command::Threshold { relay, counts } => {
                write!(f, "THRESHOLD {} {}", relay.index(), counts)
            }
            Command::Relay { relay, state } => write!(f, "RELAY {} {}", relay.index(), state),
        }
    }
}

impl Command {
    /// Canonical line including the terminating newline.
    pub fn to_line(&self) -> String {
        format!("{self}\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommandErrorKind {
    Empty,
    UnknownKeyword,
    /// Empty token: doubled, leading or trailing space.
    Spacing,
    MissingArgument(&'static str),
    ExtraToken,
    NotANumber,
    OutOfRange(&'static str),
    BadRelayState,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("column {column}: {}", describe_command_error(&self.kind, &self.token))]
pub struct CommandError {
    /// 1-based byte column of the offending token.
    pub column: usize,
    pub token: String,
    pub kind: CommandErrorKind,
}

fn describe_command_error(kind: &CommandErrorKind, token: &str) -> String {
    match kind {
        CommandErrorKind::Empty => "empty command line".into(),
        CommandErrorKind::UnknownKeyword => format!("unknown command {token:?}"),
        CommandErrorKind::Spacing => "tokens must be separated by exactly one space".into(),
        CommandErrorKind::MissingArgument(what) => format!("missing {what}"),
        CommandErrorKind::ExtraToken => format!("unexpected trailing token {token:?}"),
        CommandErrorKind::NotANumber => format!("{token:?} is not a decimal number"),
        CommandErrorKind::OutOfRange(what) => format!("{what} out of range: {token}"),
        CommandErrorKind::BadRelayState => format!("relay state must be ON or OFF, got {token:?}"),
    }
}

struct Tokens<'a> {
    line: &'a str,
    pos: usize,
    done: bool,
}

impl<'a> Tokens<'a> {
    /// Next `(column, token)`; `Err` on an empty token.
    fn next(&mut self) -> Option<Result<(usize, &'a str), CommandError>> {
        if self.done {
            return None;
        }
        let rest = &self.line[self.pos..];
        let (tok, advance) = match rest.find(' ') {
            Some(i) => (&rest[..i], i + 1),
            None => {
                self.done = true;
                (rest, rest.len())
            }
        };
        let column = self.pos + 1;
        self.pos += advance;
        if tok.is_empty() {
            self.done = true;
            return Some(Err(CommandError {
                column,
                token: String::new(),
                kind: CommandErrorKind::Spacing,
            }));
        }
        Some(Ok((column, tok)))
    }

    fn expect(&mut self, what: &'static str) -> Result<(usize, &'a str), CommandError> {
        match self.next() {
            Some(r) => r,
            None => Err(CommandError {
                column: self.line.len() + 1,
                token: String::new(),
                kind: CommandErrorKind::MissingArgument(what),
            }),
        }
    }

    fn finish(&mut self) -> Result<(), CommandError> {
        match self.next() {
            None => Ok(()),
            Some(Err(e)) => Err(e),
            Some(Ok((column, tok))) => Err(CommandError {
                column,
                token: tok.to_string(),
                kind: CommandErrorKind::ExtraToken,
            }),
        }
    }
}

fn number(column: usize, tok: &str, max: u64, what: &'static str) -> Result<u64, CommandError> {
    let err = |kind| CommandError {
        column,
        token: tok.to_string(),
        kind,
    };
    if !tok.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err(CommandErrorKind::NotANumber));
    }
    match tok.parse::<u64>() {
        Ok(v) if v <= max => Ok(v),
        _ => Err(err(CommandErrorKind::OutOfRange(what))),
    }
}

/// Parses one command line. A single trailing `\n` or `\r\n` is tolerated.
pub fn parse_command(line: &str) -> Result<Command, CommandError> {
    let line = line
        .strip_suffix('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .unwrap_or(line);
    if line.is_empty() {
        return Err(CommandError {
            column: 1,
            token: String::new(),
            kind: CommandErrorKind::Empty,
        });
    }
    let mut tokens = Tokens {
        line,
        pos: 0,
        done: false,
    };
    let (kw_col, keyword) = tokens.expect("command keyword")?;
    let relay_index = |tokens: &mut Tokens| -> Result<PotId, CommandError> {
        let (col, tok) = tokens.expect("relay index")?;
        let idx = number(col, tok, (POT_COUNT - 1) as u64, "relay index")?;
        Ok(PotId::new(idx as usize).expect("bounded above"))
    };
    let cmd = match keyword {
        "MODE" => {
            let (col, tok) = tokens.expect("mode code")?;
            let code = number(col, tok, 3, "mode code")?;
            let mode = Mode::from_code(code as i64).map_err(|_| CommandError {
                column: col,
                token: tok.to_string(),
                kind: CommandErrorKind::OutOfRange("mode code"),
            })?;
            Command::Mode(mode)
        }
        "THRESHOLD" => {
            let relay = relay_index(&mut tokens)?;
            let (col, tok) = tokens.expect("threshold counts")?;
            let counts = number(col, tok, u64::from(ADC_MAX), "threshold")? as u16;
            Command::Threshold { relay, counts }
        }
        "RELAY" => {
            let relay = relay_index(&mut tokens)?;
            let (col, tok) = tokens.expect("relay state")?;
            let state = match tok {
                "ON" => RelayState::On,
                "OFF" => RelayState::Off,
                _ => {
                    return Err(CommandError {
                        column: col,
                        token: tok.to_string(),
                        kind: CommandErrorKind::BadRelayState,
                    })
                }
            };
            Command::Relay { relay, state }
        }
        other => {
            return Err(CommandError {
                column: kw_col,
                token: other.to_string(),
                kind: CommandErrorKind::UnknownKeyword,
            })
        }
    };
    tokens.finish()?;
    Ok(cmd)
}

/// Canonical frame keys, in encoding order.
pub const FRAME_KEYS: [&str; 8] = ["ts", "temp", "hum", "rain", "flow", "soil", "relay", "mode"];

/// Accepted DHT bands; values outside are treated as corrupt frames.
pub const TEMP_RANGE: (i64, i64) = (0, 50);
pub const HUM_RANGE: (i64, i64) = (20, 90);
pub const FLOW_MAX_LPM: f64 = 30.0;

/// Serializes a snapshot as one canonical line ending in `\n`.
pub fn encode_telemetry(s: &SensorSnapshot) -> String {
    let mut out = String::with_capacity(128);
    let opt = |v: Option<i32>| v.map_or_else(|| "null".to_string(), |x| x.to_string());
    write!(
        out,
        "{{\"ts\":{},\"temp\":{},\"hum\":{},\"rain\":{},\"flow\":{:?},\"soil\":[",
        s.timestamp,
        opt(s.temperature_c),
        opt(s.humidity_pct),
        match s.rain {
            Rain::Dry => 0,
            Rain::Wet => 1,
        },
        s.flow_lpm,
    )
    .expect("writing to a String");
    for (i, v) in s.soil_adc.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{v}").expect("writing to a String");
    }
    out.push_str("],\"relay\":[");
    for (i, r) in s.relay.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push(if r.is_on() { '1' } else { '0' });
    }
    writeln!(out, "],\"mode\":{}}}", s.mode.code()).expect("writing to a String");
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameErrorKind {
    InvalidUtf8,
    UnexpectedEnd,
    Unexpected { found: u8, expected: &'static str },
    BadKey,
    UnknownKey(String),
    DuplicateKey(&'static str),
    MissingKey(&'static str),
    WrongType { key: &'static str, expected: &'static str },
    OutOfRange(&'static str),
    Arity { key: &'static str, expected: usize, found: usize },
    /// Non-zero flow reported while every relay is OFF.
    FlowWithoutOpenValve,
    TrailingData,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("column {column}: {}", describe_frame_error(&self.kind))]
pub struct FrameError {
    /// 1-based byte column where the problem was detected.
    pub column: usize,
    pub kind: FrameErrorKind,
}

fn describe_frame_error(kind: &FrameErrorKind) -> String {
    match kind {
        FrameErrorKind::InvalidUtf8 => "invalid UTF-8".into(),
        FrameErrorKind::UnexpectedEnd => "unexpected end of line".into(),
        FrameErrorKind::Unexpected { found, expected } => {
            format!("unexpected byte {:?}, expected {expected}", char::from(*found))
        }
        FrameErrorKind::BadKey => "malformed key".into(),
        FrameErrorKind::UnknownKey(k) => format!("unknown key {k:?}"),
        FrameErrorKind::DuplicateKey(k) => format!("duplicate key {k:?}"),
        FrameErrorKind::MissingKey(k) => format!("missing key {k:?}"),
        FrameErrorKind::WrongType { key, expected } => format!("{key}: expected {expected}"),
        FrameErrorKind::OutOfRange(k) => format!("{k}: value out of range"),
        FrameErrorKind::Arity {
            key,
            expected,
            found,
        } => format!("{key} arity: expected {expected} values, found {found}"),
        FrameErrorKind::FlowWithoutOpenValve => "flow reported with all relays OFF".into(),
        FrameErrorKind::TrailingData => "trailing data after frame".into(),
    }
}

/// A JSON number lexeme, split into the parts the frame schema cares about.
struct NumberLexeme<'a> {
    text: &'a str,
    integral: bool,
}

struct FrameReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> FrameReader<'a> {
    fn err(&self, kind: FrameErrorKind) -> FrameError {
        FrameError {
            column: self.pos + 1,
            kind,
        }
    }

    fn err_at(pos: usize, kind: FrameErrorKind) -> FrameError {
        FrameError {
            column: pos + 1,
            kind,
        }
    }

    fn skip_ws(&mut self) {
        while let Some(b' ' | b'\t' | b'\r' | b'\n') = self.bytes.get(self.pos) {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Result<u8, FrameError> {
        self.bytes
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.err(FrameErrorKind::UnexpectedEnd))
    }

    fn expect(&mut self, want: u8, expected: &'static str) -> Result<(), FrameError> {
        let b = self.peek()?;
        if b != want {
            return Err(self.err(FrameErrorKind::Unexpected { found: b, expected }));
        }
        self.pos += 1;
        Ok(())
    }

    /// Reads a key string. Keys are plain lowercase ASCII; anything else is
    /// not part of the schema.
    fn key(&mut self) -> Result<&'a str, FrameError> {
        self.expect(b'"', "'\"'")?;
        let start = self.pos;
        loop {
            let b = self.peek()?;
            match b {
                b'"' => break,
                b'a'..=b'z' | b'_' | b'0'..=b'9' => self.pos += 1,
                _ => return Err(self.err(FrameErrorKind::BadKey)),
            }
        }
        let key = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii");
        self.pos += 1;
        Ok(key)
    }

    /// Scans a JSON number per RFC 8259 grammar.
    fn number(&mut self, key: &'static str) -> Result<NumberLexeme<'a>, FrameError> {
        let start = self.pos;
        let wrong = |r: &Self| {
            r.err(FrameErrorKind::WrongType {
                key,
                expected: "a number",
            })
        };
        let digits = |r: &mut Self| -> usize {
            let s = r.pos;
            while let Some(b'0'..=b'9') = r.bytes.get(r.pos) {
                r.pos += 1;
            }
            r.pos - s
        };
        if self.bytes.get(self.pos) == Some(&b'-') {
            self.pos += 1;
        }
        let int_start = self.pos;
        let n = digits(self);
        if n == 0 {
            return Err(wrong(self));
        }
        if n > 1 && self.bytes[int_start] == b'0' {
            return Err(Self::err_at(int_start, FrameErrorKind::WrongType {
                key,
                expected: "a number without leading zeros",
            }));
        }
        let mut integral = true;
        if self.bytes.get(self.pos) == Some(&b'.') {
            integral = false;
            self.pos += 1;
            if digits(self) == 0 {
                return Err(wrong(self));
            }
        }
        if let Some(b'e' | b'E') = self.bytes.get(self.pos) {
            integral = false;
            self.pos += 1;
            if let Some(b'+' | b'-') = self.bytes.get(self.pos) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                return Err(wrong(self));
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii");
        Ok(NumberLexeme { text, integral })
    }

    fn integer(&mut self, key: &'static str, lo: i64, hi: i64) -> Result<i64, FrameError> {
        let start = self.pos;
        let lex = self.number(key)?;
        if !lex.integral {
            return Err(Self::err_at(start, FrameErrorKind::WrongType {
                key,
                expected: "an integer",
            }));
        }
        match lex.text.parse::<i64>() {
            Ok(v) if (lo..=hi).contains(&v) => Ok(v),
            _ => Err(Self::err_at(start, FrameErrorKind::OutOfRange(key))),
        }
    }

    fn nullable_integer(
        &mut self,
        key: &'static str,
        lo: i64,
        hi: i64,
    ) -> Result<Option<i64>, FrameError> {
        if self.peek()? == b'n' {
            let start = self.pos;
            if self.bytes[self.pos..].starts_with(b"null") {
                self.pos += 4;
                return Ok(None);
            }
            return Err(Self::err_at(start, FrameErrorKind::WrongType {
                key,
                expected: "an integer or null",
            }));
        }
        self.integer(key, lo, hi).map(Some)
    }

    fn int_array(
        &mut self,
        key: &'static str,
        max: i64,
        out: &mut [i64],
    ) -> Result<(), FrameError> {
        let open = self.pos;
        if self.peek()? != b'[' {
            return Err(self.err(FrameErrorKind::WrongType {
                key,
                expected: "an array",
            }));
        }
        self.pos += 1;
        self.skip_ws();
        let mut n = 0usize;
        if self.peek()? == b']' {
            self.pos += 1;
        } else {
            loop {
                self.skip_ws();
                let v = self.integer(key, 0, max)?;
                if n < out.len() {
                    out[n] = v;
                }
                n += 1;
                self.skip_ws();
                match self.peek()? {
                    b',' => self.pos += 1,
                    b']' => {
                        self.pos += 1;
                        break;
                    }
                    found => {
                        return Err(self.err(FrameErrorKind::Unexpected {
                            found,
                            expected: "',' or ']'",
                        }))
                    }
                }
            }
        }
        if n != out.len() {
            return Err(Self::err_at(open, FrameErrorKind::Arity {
                key,
                expected: out.len(),
                found: n,
            }));
        }
        Ok(())
    }
}

#[derive(Default)]
struct Fields {
    ts: Option<u64>,
    temp: Option<Option<i32>>,
    hum: Option<Option<i32>>,
    rain: Option<Rain>,
    flow: Option<(f64, usize)>,
    soil: Option<[u16; SOIL_CHANNELS]>,
    relay: Option<[RelayState; POT_COUNT]>,
    mode: Option<Mode>,
}

/// Parses one telemetry line (with or without its trailing newline).
pub fn parse_telemetry(line: &str) -> Result<SensorSnapshot, FrameError> {
    parse_telemetry_bytes(line.as_bytes())
}

/// Byte-level entry point; never panics on arbitrary input.
pub fn parse_telemetry_bytes(bytes: &[u8]) -> Result<SensorSnapshot, FrameError> {
    if let Err(e) = std::str::from_utf8(bytes) {
        return Err(FrameError {
            column: e.valid_up_to() + 1,
            kind: FrameErrorKind::InvalidUtf8,
        });
    }
    let mut r = FrameReader { bytes, pos: 0 };
    let mut f = Fields::default();
    r.skip_ws();
    r.expect(b'{', "'{'")?;
    r.skip_ws();
    let close;
    if r.peek()? == b'}' {
        close = r.pos;
        r.pos += 1;
    } else {
        loop {
            r.skip_ws();
            let key_pos = r.pos;
            let raw = r.key()?;
            let key: &'static str = FRAME_KEYS
                .iter()
                .copied()
                .find(|k| *k == raw)
                .ok_or_else(|| {
                    FrameReader::err_at(key_pos, FrameErrorKind::UnknownKey(raw.to_string()))
                })?;
            let dup = || FrameReader::err_at(key_pos, FrameErrorKind::DuplicateKey(key));
            r.skip_ws();
            r.expect(b':', "':'")?;
            r.skip_ws();
            match key {
                "ts" => {
                    if f.ts.is_some() {
                        return Err(dup());
                    }
                    let start = r.pos;
                    let lex = r.number("ts")?;
                    if !lex.integral {
                        return Err(FrameReader::err_at(start, FrameErrorKind::WrongType {
                            key: "ts",
                            expected: "an integer",
                        }));
                    }
                    let v = lex.text.parse::<u64>().map_err(|_| {
                        FrameReader::err_at(start, FrameErrorKind::OutOfRange("ts"))
                    })?;
                    f.ts = Some(v);
                }
                "temp" => {
                    if f.temp.is_some() {
                        return Err(dup());
                    }
                    let v = r.nullable_integer("temp", TEMP_RANGE.0, TEMP_RANGE.1)?;
                    f.temp = Some(v.map(|x| x as i32));
                }
                "hum" => {
                    if f.hum.is_some() {
                        return Err(dup());
                    }
                    let v = r.nullable_integer("hum", HUM_RANGE.0, HUM_RANGE.1)?;
                    f.hum = Some(v.map(|x| x as i32));
                }
                "rain" => {
                    if f.rain.is_some() {
                        return Err(dup());
                    }
                    f.rain = Some(if r.integer("rain", 0, 1)? == 1 {
                        Rain::Wet
                    } else {
                        Rain::Dry
                    });
                }
                "flow" => {
                    if f.flow.is_some() {
                        return Err(dup());
                    }
                    let start = r.pos;
                    let lex = r.number("flow")?;
                    let v: f64 = lex.text.parse().map_err(|_| {
                        FrameReader::err_at(start, FrameErrorKind::OutOfRange("flow"))
                    })?;
                    if !(v.is_finite() && (0.0..=FLOW_MAX_LPM).contains(&v)) {
                        return Err(FrameReader::err_at(start, FrameErrorKind::OutOfRange("flow")));
                    }
                    f.flow = Some((v, start));
                }
                "soil" => {
                    if f.soil.is_some() {
                        return Err(dup());
                    }
                    let mut vals = [0i64; SOIL_CHANNELS];
                    r.int_array("soil", i64::from(ADC_MAX), &mut vals)?;
                    f.soil = Some(vals.map(|v| v as u16));
                }
                "relay" => {
                    if f.relay.is_some() {
                        return Err(dup());
                    }
                    let mut vals = [0i64; POT_COUNT];
                    r.int_array("relay", 1, &mut vals)?;
                    f.relay = Some(vals.map(|v| RelayState::from_bool(v == 1)));
                }
                "mode" => {
                    if f.mode.is_some() {
                        return Err(dup());
                    }
                    let v = r.integer("mode", 1, 3)?;
                    f.mode = Some(Mode::from_code(v).expect("range checked"));
                }
                _ => unreachable!("key drawn from FRAME_KEYS"),
            }
            r.skip_ws();
            match r.peek()? {
                b',' => r.pos += 1,
                b'}' => {
                    close = r.pos;
                    r.pos += 1;
                    break;
                }
                found => {
                    return Err(r.err(FrameErrorKind::Unexpected {
                        found,
                        expected: "',' or '}'",
                    }))
                }
            }
        }
    }
    r.skip_ws();
    if r.pos != bytes.len() {
        return Err(r.err(FrameErrorKind::TrailingData));
    }
    let missing = |k| FrameReader::err_at(close, FrameErrorKind::MissingKey(k));
    let (flow_lpm, flow_pos) = f.flow.ok_or_else(|| missing("flow"))?;
    let snap = SensorSnapshot {
        timestamp: f.ts.ok_or_else(|| missing("ts"))?,
        temperature_c: f.temp.ok_or_else(|| missing("temp"))?,
        humidity_pct: f.hum.ok_or_else(|| missing("hum"))?,
        rain: f.rain.ok_or_else(|| missing("rain"))?,
        flow_lpm,
        soil_adc: f.soil.ok_or_else(|| missing("soil"))?,
        relay: f.relay.ok_or_else(|| missing("relay"))?,
        mode: f.mode.ok_or_else(|| missing("mode"))?,
    };
    if flow_lpm != 0.0 && !snap.any_relay_on() {
        return Err(FrameReader::err_at(
            flow_pos,
            FrameErrorKind::FlowWithoutOpenValve,
        ));
    }
    Ok(snap)
}
