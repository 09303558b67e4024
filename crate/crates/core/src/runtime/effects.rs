use std::collections::BTreeMap;

use serde::Serialize;

use crate::ids::{Position, ServiceId};
use crate::value::{Address, Value};

/// Outcome of a call as recorded: the value, or the error code.
pub type CallResult = Result<Value, String>;

/// One inner cross-service call made while executing an entry.
///
/// Records of an entry are numbered in call-start (preorder) order; the
/// records `index + 1 .. end` are the calls made underneath this one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EffectRecord {
    pub position: Position,
    pub index: u32,
    pub end: u32,
    pub parent: Option<u32>,
    pub source: ServiceId,
    pub target: ServiceId,
    pub method: String,
    pub args: Vec<Value>,
    pub result: CallResult,
    /// Gas consumed by the call including everything beneath it.
    pub gas_used: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub service: ServiceId,
    pub value: Value,
}

/// Net network-region write volume of a committed entry on one service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteSummary {
    pub service: ServiceId,
    pub writes: u64,
    pub bytes: u64,
}

/// Everything an archival execution learned about one log entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryTrace {
    pub position: Position,
    pub target: ServiceId,
    pub method: String,
    pub caller: Address,
    pub outcome: CallResult,
    pub gas_used: u64,
    pub records: Vec<EffectRecord>,
    pub events: Vec<Event>,
    pub writes: Vec<WriteSummary>,
}

fn s(v: &str) -> Value {
    Value::str(v)
}

fn result_value(r: &CallResult) -> Value {
    match r {
        Ok(v) => Value::List(vec![Value::Bool(true), v.clone()]),
        Err(code) => Value::List(vec![Value::Bool(false), Value::str(code.clone())]),
    }
}

fn result_from(v: &Value) -> Result<CallResult, String> {
    match v.as_list() {
        Some([Value::Bool(true), v]) => Ok(Ok(v.clone())),
        Some([Value::Bool(false), Value::Str(code)]) => Ok(Err(code.clone())),
        _ => Err("malformed call result".into()),
    }
}

struct Fields<'a>(&'a BTreeMap<Value, Value>);

impl<'a> Fields<'a> {
    fn of(v: &'a Value) -> Result<Self, String> {
        v.as_map()
            .map(Fields)
            .ok_or_else(|| "expected a map".to_string())
    }

    fn get(&self, key: &str) -> Result<&'a Value, String> {
        self.0
            .get(&s(key))
            .ok_or_else(|| format!("missing field {key}"))
    }

    fn u64(&self, key: &str) -> Result<u64, String> {
        let n = self
            .get(key)?
            .as_u256()
            .ok_or_else(|| format!("{key} is not an integer"))?;
        if n > u64::MAX.into() {
            return Err(format!("{key} out of range"));
        }
        Ok(n.as_u64())
    }

    fn str(&self, key: &str) -> Result<&'a str, String> {
        self.get(key)?
            .as_str()
            .ok_or_else(|| format!("{key} is not a string"))
    }

    fn service(&self, key: &str) -> Result<ServiceId, String> {
        ServiceId::new(self.str(key)?)
    }

    fn list(&self, key: &str) -> Result<&'a [Value], String> {
        self.get(key)?
            .as_list()
            .ok_or_else(|| format!("{key} is not a list"))
    }
}

fn map(entries: Vec<(&str, Value)>) -> Value {
    Value::Map(entries.into_iter().map(|(k, v)| (s(k), v)).collect())
}

impl EffectRecord {
    pub fn to_value(&self) -> Value {
        map(vec![
            ("position", Value::u64(self.position)),
            ("index", Value::u64(self.index as u64)),
            ("end", Value::u64(self.end as u64)),
            (
                "parent",
                match self.parent {
                    Some(p) => Value::List(vec![Value::u64(p as u64)]),
                    None => Value::List(vec![]),
                },
            ),
            ("source", s(self.source.as_str())),
            ("target", s(self.target.as_str())),
            ("method", s(&self.method)),
            ("args", Value::List(self.args.clone())),
            ("result", result_value(&self.result)),
            ("gas", Value::u64(self.gas_used)),
        ])
    }

    pub fn from_value(v: &Value) -> Result<Self, String> {
        let f = Fields::of(v)?;
        let parent = match f.list("parent")? {
            [] => None,
            [Value::U256(p)] if *p <= u32::MAX.into() => Some(p.as_u32()),
            _ => return Err("malformed parent".into()),
        };
        Ok(EffectRecord {
            position: f.u64("position")?,
            index: f.u64("index")? as u32,
            end: f.u64("end")? as u32,
            parent,
            source: f.service("source")?,
            target: f.service("target")?,
            method: f.str("method")?.to_string(),
            args: f.list("args")?.to_vec(),
            result: result_from(f.get("result")?)?,
            gas_used: f.u64("gas")?,
        })
    }
}

impl EntryTrace {
    pub fn is_ok(&self) -> bool {
        self.outcome.is_ok()
    }

    /// Records whose target is in `targets`, in emission order.
    pub fn records_for<'a>(
        &'a self,
        targets: &'a std::collections::BTreeSet<ServiceId>,
    ) -> impl Iterator<Item = &'a EffectRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| targets.contains(&r.target))
    }

    pub fn to_value(&self) -> Value {
        map(vec![
            ("position", Value::u64(self.position)),
            ("target", s(self.target.as_str())),
            ("method", s(&self.method)),
            ("caller", Value::Address(self.caller)),
            ("outcome", result_value(&self.outcome)),
            ("gas", Value::u64(self.gas_used)),
            (
                "records",
                Value::List(self.records.iter().map(EffectRecord::to_value).collect()),
            ),
            (
                "events",
                Value::List(
                    self.events
                        .iter()
                        .map(|e| Value::List(vec![s(e.service.as_str()), e.value.clone()]))
                        .collect(),
                ),
            ),
            (
                "writes",
                Value::List(
                    self.writes
                        .iter()
                        .map(|w| {
                            Value::List(vec![
                                s(w.service.as_str()),
                                Value::u64(w.writes),
                                Value::u64(w.bytes),
                            ])
                        })
                        .collect(),
                ),
            ),
        ])
    }

    pub fn from_value(v: &Value) -> Result<Self, String> {
        let f = Fields::of(v)?;
        let records = f
            .list("records")?
            .iter()
            .map(EffectRecord::from_value)
            .collect::<Result<_, _>>()?;
        let events = f
            .list("events")?
            .iter()
            .map(|e| match e.as_list() {
                Some([Value::Str(svc), value]) => Ok(Event {
                    service: ServiceId::new(svc.clone())?,
                    value: value.clone(),
                }),
                _ => Err("malformed event".to_string()),
            })
            .collect::<Result<_, _>>()?;
        let writes = f
            .list("writes")?
            .iter()
            .map(|w| match w.as_list() {
                Some([Value::Str(svc), Value::U256(n), Value::U256(b)]) => Ok(WriteSummary {
                    service: ServiceId::new(svc.clone())?,
                    writes: n.low_u64(),
                    bytes: b.low_u64(),
                }),
                _ => Err("malformed write summary".to_string()),
            })
            .collect::<Result<_, _>>()?;
        Ok(EntryTrace {
            position: f.u64("position")?,
            target: f.service("target")?,
            method: f.str("method")?.to_string(),
            caller: f
                .get("caller")?
                .as_address()
                .ok_or_else(|| "caller is not an address".to_string())?,
            outcome: result_from(f.get("outcome")?)?,
            gas_used: f.u64("gas")?,
            records,
            events,
            writes,
        })
    }

    /// One JSON line per effect: every inner call, then every event, then
    /// every write summary. Field order is fixed.
    pub fn effect_lines(&self) -> Vec<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            position: Position,
            kind: &'a str,
            index: Option<u32>,
            source: &'a str,
            target: &'a str,
            method: &'a str,
            args: String,
            result: String,
        }
        let fmt_result = |r: &CallResult| match r {
            Ok(v) => format!("ok {v}"),
            Err(code) => format!("err {code}"),
        };
        let mut out = Vec::new();
        for r in &self.records {
            out.push(Line {
                position: self.position,
                kind: "inner-call",
                index: Some(r.index),
                source: r.source.as_str(),
                target: r.target.as_str(),
                method: &r.method,
                args: Value::List(r.args.clone()).to_string(),
                result: fmt_result(&r.result),
            });
        }
        for e in &self.events {
            out.push(Line {
                position: self.position,
                kind: "event",
                index: None,
                source: e.service.as_str(),
                target: e.service.as_str(),
                method: "",
                args: e.value.to_string(),
                result: String::new(),
            });
        }
        for w in &self.writes {
            out.push(Line {
                position: self.position,
                kind: "state-write-summary",
                index: None,
                source: self.target.as_str(),
                target: w.service.as_str(),
                method: "",
                args: format!("writes={} bytes={}", w.writes, w.bytes),
                result: String::new(),
            });
        }
        out.into_iter()
            .map(|l| serde_json::to_string(&l).expect("effect line serializes"))
            .collect()
    }
}
