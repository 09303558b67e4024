//! Dynamically typed call values with a unique binary encoding and a
//! human-readable text form.
//!
//! The binary form is what goes into log entries, effect records and traces,
//! so it must be identical on every platform: integers are fixed width,
//! variable-length items carry a little-endian `u32` length prefix and map
//! keys are emitted in ascending [`Value`] order. Decoding rejects any byte
//! string that is not the canonical encoding of some value.
//!
//! The text form is used by scenario files and the gateway:
//!
//! ```text
//! 42                    unsigned 256-bit integer
//! @alice  0x00..00      address (short name, or 40 hex digits)
//! true false            boolean
//! x"deadbeef"           byte string
//! "hello"               UTF-8 string
//! [1, 2, 3]             list
//! {@alice: 10, @bob: 5} map
//! ```

use std::collections::BTreeMap;
use std::fmt;

pub use primitive_types::U256;
use thiserror::Error;

const TAG_U256: u8 = 0x01;
const TAG_ADDRESS: u8 = 0x02;
const TAG_BOOL: u8 = 0x03;
const TAG_BYTES: u8 = 0x04;
const TAG_STR: u8 = 0x05;
const TAG_LIST: u8 = 0x06;
const TAG_MAP: u8 = 0x07;

const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValueError {
    #[error("decode: {0}")]
    Decode(String),
    #[error("parse error at offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },
}

/// A 20-byte account or service address.
///
/// Short names (up to 20 characters from `[A-Za-z0-9_]`) map to addresses by
/// right-padding the ASCII bytes with zeros, which keeps scenario files
/// readable: `@alice` is the address whose first five bytes are `alice`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address(pub [u8; 20]);

impl Address {
    pub const ZERO: Address = Address([0; 20]);

    /// Address for a short name, or `None` if the name is empty, too long or
    /// contains characters outside `[A-Za-z0-9_]`.
    pub fn named(name: &str) -> Option<Address> {
        if !is_short_name(name) {
            return None;
        }
        let mut bytes = [0u8; 20];
        bytes[..name.len()].copy_from_slice(name.as_bytes());
        Some(Address(bytes))
    }

    /// The short name this address was built from, if any.
    pub fn short_name(&self) -> Option<&str> {
        let len = self.0.iter().position(|&b| b == 0).unwrap_or(20);
        if len == 0 || self.0[len..].iter().any(|&b| b != 0) {
            return None;
        }
        let name = std::str::from_utf8(&self.0[..len]).ok()?;
        is_short_name(name).then_some(name)
    }
}

pub(crate) fn is_short_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 20
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.short_name() {
            Some(name) => write!(f, "@{name}"),
            None => write!(f, "0x{}", hex::encode(self.0)),
        }
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    U256(U256),
    Address(Address),
    Bool(bool),
    Bytes(Vec<u8>),
    Str(String),
    List(Vec<Value>),
    Map(BTreeMap<Value, Value>),
}

impl Value {
    pub fn u64(v: u64) -> Value {
        Value::U256(U256::from(v))
    }

    pub fn str(s: impl Into<String>) -> Value {
        Value::Str(s.into())
    }

    pub fn addr(name: &str) -> Value {
        Value::Address(Address::named(name).expect("invalid short address name"))
    }

    pub fn as_u256(&self) -> Option<U256> {
        match self {
            Value::U256(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_address(&self) -> Option<Address> {
        match self {
            Value::Address(a) => Some(*a),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<Value, Value>> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    /// Canonical binary encoding.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Value::U256(v) => {
                out.push(TAG_U256);
                out.extend_from_slice(&v.to_big_endian());
            }
            Value::Address(a) => {
                out.push(TAG_ADDRESS);
                out.extend_from_slice(&a.0);
            }
            Value::Bool(b) => {
                out.push(TAG_BOOL);
                out.push(*b as u8);
            }
            Value::Bytes(b) => {
                out.push(TAG_BYTES);
                put_len(out, b.len());
                out.extend_from_slice(b);
            }
            Value::Str(s) => {
                out.push(TAG_STR);
                put_len(out, s.len());
                out.extend_from_slice(s.as_bytes());
            }
            Value::List(items) => {
                out.push(TAG_LIST);
                put_len(out, items.len());
                for item in items {
                    item.encode_into(out);
                }
            }
            Value::Map(map) => {
                out.push(TAG_MAP);
                put_len(out, map.len());
                for (k, v) in map {
                    k.encode_into(out);
                    v.encode_into(out);
                }
            }
        }
    }

    /// Decodes exactly one value occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Value, ValueError> {
        let mut reader = Reader { bytes, pos: 0 };
        let value = reader.value(0)?;
        if reader.pos != bytes.len() {
            return Err(ValueError::Decode(format!(
                "{} trailing bytes",
                bytes.len() - reader.pos
            )));
        }
        Ok(value)
    }

    /// Decodes one value from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Value, usize), ValueError> {
        let mut reader = Reader { bytes, pos: 0 };
        let value = reader.value(0)?;
        Ok((value, reader.pos))
    }

    /// Parses the text form. Surrounding whitespace is ignored.
    pub fn parse(text: &str) -> Result<Value, ValueError> {
        let mut parser = TextParser::new(text);
        let value = parser.value(0)?;
        parser.skip_ws();
        if !parser.at_end() {
            return Err(parser.error("unexpected trailing input"));
        }
        Ok(value)
    }

    /// Parses one value from the front of `text`, returning it and the byte
    /// offset just past it.
    pub fn parse_prefix(text: &str) -> Result<(Value, usize), ValueError> {
        let mut parser = TextParser::new(text);
        let value = parser.value(0)?;
        Ok((value, parser.pos))
    }
}

fn put_len(out: &mut Vec<u8>, len: usize) {
    let len = u32::try_from(len).expect("value component longer than u32::MAX");
    out.extend_from_slice(&len.to_le_bytes());
}

impl From<U256> for Value {
    fn from(v: U256) -> Self {
        Value::U256(v)
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::u64(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<Address> for Value {
    fn from(v: Address) -> Self {
        Value::Address(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

impl From<Vec<Value>> for Value {
    fn from(v: Vec<Value>) -> Self {
        Value::List(v)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::U256(v) => write!(f, "{v}"),
            Value::Address(a) => write!(f, "{a}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Bytes(b) => write!(f, "x\"{}\"", hex::encode(b)),
            Value::Str(s) => write_quoted(f, s),
            Value::List(items) => {
                f.write_str("[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
            Value::Map(map) => {
                f.write_str("{")?;
                for (i, (k, v)) in map.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k}: {v}")?;
                }
                f.write_str("}")
            }
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            '\r' => f.write_str("\\r")?,
            c if c.is_control() => write!(f, "\\u{{{:x}}}", c as u32)?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ValueError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| ValueError::Decode(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn len(&mut self) -> Result<usize, ValueError> {
        let raw = self.take(4)?;
        Ok(u32::from_le_bytes(raw.try_into().unwrap()) as usize)
    }

    fn value(&mut self, depth: usize) -> Result<Value, ValueError> {
        if depth > MAX_DEPTH {
            return Err(ValueError::Decode("nesting too deep".into()));
        }
        let tag = self.take(1)?[0];
        Ok(match tag {
            TAG_U256 => Value::U256(U256::from_big_endian(self.take(32)?)),
            TAG_ADDRESS => Value::Address(Address(self.take(20)?.try_into().unwrap())),
            TAG_BOOL => match self.take(1)?[0] {
                0 => Value::Bool(false),
                1 => Value::Bool(true),
                b => return Err(ValueError::Decode(format!("bad bool byte {b:#04x}"))),
            },
            TAG_BYTES => {
                let n = self.len()?;
                Value::Bytes(self.take(n)?.to_vec())
            }
            TAG_STR => {
                let n = self.len()?;
                let raw = self.take(n)?;
                Value::Str(
                    std::str::from_utf8(raw)
                        .map_err(|e| ValueError::Decode(e.to_string()))?
                        .to_string(),
                )
            }
            TAG_LIST => {
                let n = self.len()?;
                let mut items = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    items.push(self.value(depth + 1)?);
                }
                Value::List(items)
            }
            TAG_MAP => {
                let n = self.len()?;
                let mut map = BTreeMap::new();
                let mut last: Option<Value> = None;
                for _ in 0..n {
                    let k = self.value(depth + 1)?;
                    let v = self.value(depth + 1)?;
                    if last.as_ref().is_some_and(|prev| prev >= &k) {
                        return Err(ValueError::Decode("map keys not strictly ascending".into()));
                    }
                    last = Some(k.clone());
                    map.insert(k, v);
                }
                Value::Map(map)
            }
            t => return Err(ValueError::Decode(format!("unknown tag {t:#04x}"))),
        })
    }
}

struct TextParser<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> TextParser<'a> {
    fn new(text: &'a str) -> Self {
        TextParser { text, pos: 0 }
    }

    fn error(&self, msg: impl Into<String>) -> ValueError {
        ValueError::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn at_end(&self) -> bool {
        self.pos >= self.text.len()
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.text.len() - trimmed.len();
    }

    fn expect(&mut self, c: char) -> Result<(), ValueError> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            Err(self.error(format!("expected '{c}'")))
        }
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> &'a str {
        let start = self.pos;
        let len = self
            .rest()
            .char_indices()
            .find(|&(_, c)| !pred(c))
            .map(|(i, _)| i)
            .unwrap_or(self.rest().len());
        self.pos += len;
        &self.text[start..self.pos]
    }

    fn value(&mut self, depth: usize) -> Result<Value, ValueError> {
        if depth > MAX_DEPTH {
            return Err(self.error("nesting too deep"));
        }
        self.skip_ws();
        match self.peek() {
            None => Err(self.error("expected a value")),
            Some('[') => {
                self.pos += 1;
                let mut items = Vec::new();
                self.skip_ws();
                if self.peek() == Some(']') {
                    self.pos += 1;
                    return Ok(Value::List(items));
                }
                loop {
                    items.push(self.value(depth + 1)?);
                    self.skip_ws();
                    match self.peek() {
                        Some(',') => self.pos += 1,
                        Some(']') => {
                            self.pos += 1;
                            return Ok(Value::List(items));
                        }
                        _ => return Err(self.error("expected ',' or ']'")),
                    }
                }
            }
            Some('{') => {
                self.pos += 1;
                let mut map = BTreeMap::new();
                self.skip_ws();
                if self.peek() == Some('}') {
                    self.pos += 1;
                    return Ok(Value::Map(map));
                }
                loop {
                    let key_at = self.pos;
                    let k = self.value(depth + 1)?;
                    self.expect(':')?;
                    let v = self.value(depth + 1)?;
                    if map.insert(k, v).is_some() {
                        return Err(ValueError::Parse {
                            offset: key_at,
                            msg: "duplicate map key".into(),
                        });
                    }
                    self.skip_ws();
                    match self.peek() {
                        Some(',') => self.pos += 1,
                        Some('}') => {
                            self.pos += 1;
                            return Ok(Value::Map(map));
                        }
                        _ => return Err(self.error("expected ',' or '}'")),
                    }
                }
            }
            Some('"') => Ok(Value::Str(self.quoted()?)),
            Some('@') => {
                self.pos += 1;
                let name = self.take_while(|c| c.is_ascii_alphanumeric() || c == '_');
                Address::named(name)
                    .map(Value::Address)
                    .ok_or_else(|| self.error("invalid address name"))
            }
            Some('x') if self.rest().starts_with("x\"") => {
                self.pos += 2;
                let digits = self.take_while(|c| c.is_ascii_hexdigit());
                let bytes = hex::decode(digits).map_err(|e| self.error(e.to_string()))?;
                if self.peek() != Some('"') {
                    return Err(self.error("unterminated byte string"));
                }
                self.pos += 1;
                Ok(Value::Bytes(bytes))
            }
            Some('0') if self.rest().starts_with("0x") => {
                self.pos += 2;
                let digits = self.take_while(|c| c.is_ascii_hexdigit());
                if digits.len() != 40 {
                    return Err(self.error("address literal needs 40 hex digits"));
                }
                let bytes = hex::decode(digits).map_err(|e| self.error(e.to_string()))?;
                Ok(Value::Address(Address(bytes.try_into().unwrap())))
            }
            Some(c) if c.is_ascii_digit() => {
                let digits = self.take_while(|c| c.is_ascii_digit());
                U256::from_dec_str(digits)
                    .map(Value::U256)
                    .map_err(|_| self.error("integer out of range"))
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let word = self.take_while(|c| c.is_ascii_alphanumeric() || c == '_');
                match word {
                    "true" => Ok(Value::Bool(true)),
                    "false" => Ok(Value::Bool(false)),
                    _ => Err(self.error(format!("unknown word '{word}'"))),
                }
            }
            Some(c) => Err(self.error(format!("unexpected character '{c}'"))),
        }
    }

    fn quoted(&mut self) -> Result<String, ValueError> {
        self.pos += 1;
        let mut out = String::new();
        loop {
            let c = self
                .peek()
                .ok_or_else(|| self.error("unterminated string"))?;
            self.pos += c.len_utf8();
            match c {
                '"' => return Ok(out),
                '\\' => {
                    let e = self
                        .peek()
                        .ok_or_else(|| self.error("unterminated escape"))?;
                    self.pos += e.len_utf8();
                    match e {
                        '"' => out.push('"'),
                        '\\' => out.push('\\'),
                        'n' => out.push('\n'),
                        't' => out.push('\t'),
                        'r' => out.push('\r'),
                        'u' => {
                            self.expect('{')?;
                            let digits = self.take_while(|c| c.is_ascii_hexdigit());
                            let code = u32::from_str_radix(digits, 16)
                                .ok()
                                .and_then(char::from_u32)
                                .ok_or_else(|| self.error("bad unicode escape"))?;
                            out.push(code);
                            if self.peek() != Some('}') {
                                return Err(self.error("expected '}'"));
                            }
                            self.pos += 1;
                        }
                        other => return Err(self.error(format!("unknown escape '\\{other}'"))),
                    }
                }
                c => out.push(c),
            }
        }
    }
}

#[cfg(test)]
pub(crate) fn arb_value() -> impl proptest::strategy::Strategy<Value = Value> {
    use proptest::prelude::*;
    let leaf = prop_oneof![
        any::<[u64; 4]>().prop_map(|w| Value::U256(U256(w))),
        any::<[u8; 20]>().prop_map(|a| Value::Address(Address(a))),
        "[a-z][a-z0-9_]{0,10}".prop_map(|n| Value::Address(Address::named(&n).unwrap())),
        any::<bool>().prop_map(Value::Bool),
        proptest::collection::vec(any::<u8>(), 0..16).prop_map(Value::Bytes),
        any::<String>().prop_map(Value::Str),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..4).prop_map(Value::List),
            proptest::collection::btree_map(inner.clone(), inner, 0..4).prop_map(Value::Map),
        ]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn binary_and_text_forms_round_trip(v in arb_value()) {
            let bytes = v.encode();
            prop_assert_eq!(Value::decode(&bytes).unwrap(), v.clone());
            let text = v.to_string();
            prop_assert_eq!(Value::parse(&text).unwrap(), v);
        }

        #[test]
        fn equal_values_have_equal_encodings(entries in proptest::collection::vec((any::<u8>(), any::<u8>()), 0..8)) {
            let forward: BTreeMap<Value, Value> =
                entries.iter().map(|&(k, v)| (Value::u64(k as u64), Value::u64(v as u64))).collect();
            let backward: BTreeMap<Value, Value> =
                entries.iter().rev().map(|&(k, v)| (Value::u64(k as u64), Value::u64(v as u64))).collect();
            if forward == backward {
                prop_assert_eq!(Value::Map(forward).encode(), Value::Map(backward).encode());
            }
        }
    }

    #[test]
    fn rejects_unsorted_map_keys() {
        let mut bytes = vec![TAG_MAP, 2, 0, 0, 0];
        Value::u64(2).encode_into(&mut bytes);
        Value::Bool(true).encode_into(&mut bytes);
        Value::u64(1).encode_into(&mut bytes);
        Value::Bool(false).encode_into(&mut bytes);
        assert!(matches!(Value::decode(&bytes), Err(ValueError::Decode(_))));
    }

    #[test]
    fn rejects_trailing_bytes_and_bad_bool() {
        let mut bytes = Value::Bool(true).encode();
        bytes.push(0);
        assert!(Value::decode(&bytes).is_err());
        assert!(Value::decode(&[TAG_BOOL, 2]).is_err());
        assert!(Value::decode(&[TAG_U256, 0, 0]).is_err());
    }

    #[test]
    fn text_examples() {
        let v = Value::parse(r#"{@alice: 100, @bob: [1, x"ff", "a\"b"], true: 0x0000000000000000000000000000000000000001}"#)
            .unwrap();
        let m = v.as_map().unwrap();
        assert_eq!(m[&Value::addr("alice")], Value::u64(100));
        // keys print in Value order: addresses (by bytes) before booleans
        assert_eq!(
            v.to_string(),
            r#"{@alice: 100, @bob: [1, x"ff", "a\"b"], true: 0x0000000000000000000000000000000000000001}"#
        );
        assert!(Value::parse("[1, 2").is_err());
        assert!(Value::parse("{1: 2, 1: 3}").is_err());
        assert!(Value::parse("@").is_err());
        assert!(Value::parse("nope").is_err());
    }

    #[test]
    fn short_names() {
        let a = Address::named("alice").unwrap();
        assert_eq!(a.to_string(), "@alice");
        assert_eq!(a.short_name(), Some("alice"));
        assert!(Address::named("").is_none());
        assert!(Address::named("a-b").is_none());
        assert!(Address::named("abcdefghijklmnopqrstu").is_none());
        let mut raw = [0u8; 20];
        raw[19] = 1;
        assert_eq!(
            Address(raw).to_string(),
            format!("0x{}", "00".repeat(19) + "01")
        );
    }
}
