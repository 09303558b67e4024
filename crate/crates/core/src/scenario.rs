//! Scenario files: deployments, nodes, a timed script and expectations.
//!
//! One directive per line; `#` starts a comment. Value literals use the
//! canonical text form (`@alice`, `[1, 2]`, `{@a: 5}`, `"text"`).
//!
//! ```text
//! name two_dex
//! seed 7
//! delay 1 3
//! step_limit 2000
//! seal_every 10
//!
//! deploy C erc20 balances={@alice: 300} allowances={[@alice, @A]: 300}
//! deploy A dex token_x=@C token_y=@D reserve_x=1000 reserve_y=1000
//!
//! node R archival
//! node X hosts A C peer R poll 2
//!
//! at 0 send tx1 @alice A.swap_x_for_y [100, 1]
//! at 1 call q1 X C.balance_of [@alice]
//! at 9 seal
//! at 4 crash R
//!
//! expect outcome X tx6 = err insufficient
//! expect applied X tx3 inline A->C
//! expect root X C.balances at 3 = {@alice: 0}
//! expect digest X C = oracle
//! ```
//!
//! Nodes get ids 1, 2, ... in declaration order; multicast fixtures refer
//! to members by those numbers.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use primitive_types::U256;
use thiserror::Error;

use crate::fco_log::CallIntent;
use crate::fixtures::{self, Params};
use crate::ids::{NodeId, Position, ServiceId};
use crate::node::DEFAULT_SEND_GAS;
use crate::node::{Applied, GatewayRequest, GatewayResponse, NodeConfig, RequestKind};
use crate::oracle::{network_roots, Replay};
use crate::runtime::LyquidBundle;
use crate::simnet::{Action, Fault, NodeStatus, Sim, SimConfig, SimOutcome, SimReport};
use crate::value::{Address, Value};

/// `line` is 0 for problems that belong to the file as a whole.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}{msg}", if *line > 0 { format!("line {line}: ") } else { String::new() })]
pub struct ScenarioError {
    pub line: usize,
    pub msg: String,
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError {
        line,
        msg: msg.into(),
    })
}

#[derive(Debug, Clone)]
pub struct Deployment {
    pub service: ServiceId,
    pub fixture: String,
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultSpec {
    Crash(String),
    Recover(String),
    Partition(Vec<String>, Vec<String>),
    Heal,
}

#[derive(Debug, Clone)]
pub enum ScriptStep {
    Send {
        label: String,
        intent: CallIntent,
    },
    Call {
        label: String,
        node: String,
        request: GatewayRequest,
    },
    Seal,
    Fault(FaultSpec),
}

/// Which entry an expectation talks about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryRef {
    Label(String),
    Position(Position),
}

impl fmt::Display for EntryRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntryRef::Label(l) => f.write_str(l),
            EntryRef::Position(p) => write!(f, "#{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expected {
    /// `ok` with no value matches any success.
    Ok(Option<Value>),
    Err(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppliedKind {
    Inline,
    External,
    Via,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Check {
    Sent {
        label: String,
        position: Position,
    },
    Outcome {
        node: String,
        entry: EntryRef,
        expected: Expected,
    },
    Applied {
        node: String,
        entry: EntryRef,
        kind: AppliedKind,
        source: ServiceId,
        target: ServiceId,
    },
    Skipped {
        node: String,
        entry: EntryRef,
    },
    Root {
        node: String,
        service: ServiceId,
        root: String,
        at: Option<Position>,
        value: Value,
    },
    DigestOracle {
        node: String,
        service: ServiceId,
    },
    DigestEq {
        node: String,
        service: ServiceId,
        other: String,
    },
    Frontier {
        node: String,
        position: Position,
    },
    Status {
        node: String,
        status: String,
    },
    Call {
        label: String,
        expected: Expected,
    },
    Conservation {
        service: ServiceId,
    },
    Quiescent,
}

#[derive(Debug, Clone)]
pub struct Expectation {
    pub line: usize,
    pub text: String,
    pub check: Check,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub delay: (u64, u64),
    pub step_limit: u64,
    pub seal_every: Option<u64>,
    pub deployments: Vec<Deployment>,
    pub nodes: Vec<NodeConfig>,
    /// In file order; the simulation runs them by step, ties in file order.
    pub script: Vec<(u64, ScriptStep)>,
    pub expectations: Vec<Expectation>,
}

fn comment_start(line: &str) -> Option<usize> {
    let bytes = line.as_bytes();
    (0..bytes.len()).find(|&i| {
        bytes[i] == b'#'
            && (i == 0 || bytes[i - 1].is_ascii_whitespace())
            && bytes.get(i + 1).is_none_or(|b| b.is_ascii_whitespace())
    })
}

/// Splits off the next whitespace-delimited word.
fn word(s: &str) -> Option<(&str, &str)> {
    let s = s.trim_start();
    if s.is_empty() {
        return None;
    }
    let end = s.find(char::is_whitespace).unwrap_or(s.len());
    Some((&s[..end], &s[end..]))
}

struct Line<'a> {
    no: usize,
    rest: &'a str,
}

impl<'a> Line<'a> {
    fn word(&mut self, what: &str) -> Result<&'a str, ScenarioError> {
        match word(self.rest) {
            Some((w, rest)) => {
                self.rest = rest;
                Ok(w)
            }
            None => err(self.no, format!("expected {what}")),
        }
    }

    fn peek(&self) -> Option<&'a str> {
        word(self.rest).map(|(w, _)| w)
    }

    fn number(&mut self, what: &str) -> Result<u64, ScenarioError> {
        let w = self.word(what)?;
        w.parse()
            .or_else(|_| err(self.no, format!("{what}: '{w}' is not a number")))
    }

    fn value(&mut self, what: &str) -> Result<Value, ScenarioError> {
        let text = self.rest.trim_start();
        match Value::parse_prefix(text) {
            Ok((v, n)) => {
                self.rest = &text[n..];
                Ok(v)
            }
            Err(e) => err(self.no, format!("{what}: {e}")),
        }
    }

    fn service(&mut self) -> Result<ServiceId, ScenarioError> {
        let w = self.word("service")?;
        ServiceId::new(w).or_else(|e| err(self.no, e))
    }

    /// `Service.member`
    fn target(&mut self) -> Result<(ServiceId, String), ScenarioError> {
        let w = self.word("Service.method")?;
        let Some((s, m)) = w.split_once('.') else {
            return err(self.no, format!("expected Service.method, got '{w}'"));
        };
        let s = ServiceId::new(s).or_else(|e| err(self.no, e))?;
        Ok((s, m.to_string()))
    }

    fn address(&mut self) -> Result<Address, ScenarioError> {
        match self.value("address")? {
            Value::Address(a) => Ok(a),
            other => err(self.no, format!("expected an address, got {other}")),
        }
    }

    fn args(&mut self) -> Result<Vec<Value>, ScenarioError> {
        match self.value("arguments")? {
            Value::List(items) => Ok(items),
            other => err(self.no, format!("arguments must be a list, got {other}")),
        }
    }

    fn entry(&mut self) -> Result<EntryRef, ScenarioError> {
        let w = self.word("entry")?;
        match w.strip_prefix('#') {
            Some(p) => p
                .parse()
                .map(EntryRef::Position)
                .or_else(|_| err(self.no, format!("bad position '{w}'"))),
            None => Ok(EntryRef::Label(w.to_string())),
        }
    }

    fn eq(&mut self) -> Result<(), ScenarioError> {
        match self.word("'='")? {
            "=" => Ok(()),
            other => err(self.no, format!("expected '=', got '{other}'")),
        }
    }

    fn expected(&mut self) -> Result<Expected, ScenarioError> {
        match self.word("ok or err")? {
            "ok" if self.rest.trim().is_empty() => Ok(Expected::Ok(None)),
            "ok" => Ok(Expected::Ok(Some(self.value("value")?))),
            "err" => Ok(Expected::Err(self.word("error code")?.to_string())),
            other => err(self.no, format!("expected ok or err, got '{other}'")),
        }
    }

    fn end(&self) -> Result<(), ScenarioError> {
        match self.peek() {
            None => Ok(()),
            Some(w) => err(self.no, format!("unexpected '{w}'")),
        }
    }
}

fn edge(no: usize, w: &str) -> Result<(ServiceId, ServiceId), ScenarioError> {
    let Some((a, b)) = w.split_once("->") else {
        return err(no, format!("expected Source->Target, got '{w}'"));
    };
    let a = ServiceId::new(a).or_else(|e| err(no, e))?;
    let b = ServiceId::new(b).or_else(|e| err(no, e))?;
    Ok((a, b))
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut scn = Scenario {
            name: String::new(),
            seed: 0,
            delay: (1, 3),
            step_limit: 10_000,
            seal_every: None,
            deployments: Vec::new(),
            nodes: Vec::new(),
            script: Vec::new(),
            expectations: Vec::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let no = i + 1;
            // a comment is a '#' that starts a word and is followed by a space
            // or ends the line; `#6` names a position
            let body = comment_start(raw).map_or(raw, |i| &raw[..i]);
            let mut line = Line { no, rest: body };
            let Some(directive) = line.peek() else {
                continue;
            };
            line.word("directive")?;
            match directive {
                "name" => scn.name = line.word("name")?.to_string(),
                "seed" => scn.seed = line.number("seed")?,
                "delay" => scn.delay = (line.number("min delay")?, line.number("max delay")?),
                "step_limit" => scn.step_limit = line.number("step limit")?,
                "seal_every" => scn.seal_every = Some(line.number("seal interval")?),
                "deploy" => scn.parse_deploy(&mut line)?,
                "node" => scn.parse_node(&mut line)?,
                "at" => scn.parse_at(&mut line)?,
                "expect" => {
                    let check = scn.parse_expect(&mut line)?;
                    scn.expectations.push(Expectation {
                        line: no,
                        text: raw.trim().to_string(),
                        check,
                    });
                }
                other => return err(no, format!("unknown directive '{other}'")),
            }
            line.end()?;
        }
        scn.validate()?;
        Ok(scn)
    }

    fn parse_deploy(&mut self, line: &mut Line) -> Result<(), ScenarioError> {
        let service = line.service()?;
        let fixture = line.word("fixture")?.to_string();
        let mut params = Params::new();
        while let Some(w) = line.peek() {
            let Some((key, _)) = w.split_once('=') else {
                return err(line.no, format!("expected key=value, got '{w}'"));
            };
            let text = line.rest.trim_start();
            line.rest = &text[key.len() + 1..];
            let v = line.value(key)?;
            params.insert(key.to_string(), v);
        }
        if self.deployments.iter().any(|d| d.service == service) {
            return err(line.no, format!("{service} deployed twice"));
        }
        self.deployments.push(Deployment {
            service,
            fixture,
            params,
        });
        Ok(())
    }

    fn parse_node(&mut self, line: &mut Line) -> Result<(), ScenarioError> {
        let name = line.word("node name")?.to_string();
        let mut cfg = NodeConfig {
            name,
            hosted: BTreeSet::new(),
            archival: false,
            archival_peer: None,
            data_dir: None,
            poll_interval: 2,
            parallel: false,
        };
        while let Some(w) = line.peek() {
            line.word("option")?;
            match w {
                "archival" => cfg.archival = true,
                "parallel" => cfg.parallel = true,
                "peer" => cfg.archival_peer = Some(line.word("peer name")?.to_string()),
                "poll" => cfg.poll_interval = line.number("poll interval")?,
                "hosts" => {
                    while let Some(s) = line.peek() {
                        if ["peer", "poll", "parallel", "archival"].contains(&s) {
                            break;
                        }
                        cfg.hosted.insert(line.service()?);
                    }
                }
                other => return err(line.no, format!("unknown node option '{other}'")),
            }
        }
        if cfg.archival && !cfg.hosted.is_empty() {
            return err(line.no, "an archival node hosts everything; drop `hosts`");
        }
        if cfg.poll_interval == 0 {
            return err(line.no, "poll interval must be positive");
        }
        if Address::named(&cfg.name).is_none() {
            return err(line.no, format!("bad node name '{}'", cfg.name));
        }
        if self.nodes.iter().any(|n| n.name == cfg.name) {
            return err(line.no, format!("node {} declared twice", cfg.name));
        }
        self.nodes.push(cfg);
        Ok(())
    }

    fn parse_at(&mut self, line: &mut Line) -> Result<(), ScenarioError> {
        let step = line.number("step")?;
        let what = line.word("action")?;
        let action = match what {
            "send" => {
                let label = line.word("label")?.to_string();
                let caller = line.address()?;
                let (service, method) = line.target()?;
                let args = line.args()?;
                let gas = if line.peek() == Some("gas") {
                    line.word("gas")?;
                    line.number("gas limit")?
                } else {
                    DEFAULT_SEND_GAS
                };
                ScriptStep::Send {
                    label,
                    intent: CallIntent::new(caller, service, method, args, gas),
                }
            }
            "call" => {
                let label = line.word("label")?.to_string();
                let node = line.word("node")?.to_string();
                let caller = line.address()?;
                let (service, method) = line.target()?;
                let args = line.args()?;
                ScriptStep::Call {
                    label,
                    node,
                    request: GatewayRequest {
                        kind: RequestKind::Call,
                        service,
                        method,
                        args,
                        caller,
                        gas: None,
                    },
                }
            }
            "seal" => ScriptStep::Seal,
            "crash" => ScriptStep::Fault(FaultSpec::Crash(line.word("node")?.to_string())),
            "recover" => ScriptStep::Fault(FaultSpec::Recover(line.word("node")?.to_string())),
            "heal" => ScriptStep::Fault(FaultSpec::Heal),
            "partition" => {
                let a = line.word("node list")?;
                if line.word("'|'")? != "|" {
                    return err(line.no, "expected 'a,b | c,d'");
                }
                let b = line.word("node list")?;
                let split = |s: &str| s.split(',').map(String::from).collect::<Vec<_>>();
                ScriptStep::Fault(FaultSpec::Partition(split(a), split(b)))
            }
            other => return err(line.no, format!("unknown action '{other}'")),
        };
        self.script.push((step, action));
        Ok(())
    }

    fn parse_expect(&mut self, line: &mut Line) -> Result<Check, ScenarioError> {
        let no = line.no;
        let what = line.word("expectation")?;
        let check = match what {
            "sent" => {
                let label = line.word("label")?.to_string();
                line.eq()?;
                Check::Sent {
                    label,
                    position: line.number("position")?,
                }
            }
            "outcome" => {
                let node = line.word("node")?.to_string();
                let entry = line.entry()?;
                line.eq()?;
                Check::Outcome {
                    node,
                    entry,
                    expected: line.expected()?,
                }
            }
            "applied" => {
                let node = line.word("node")?.to_string();
                let entry = line.entry()?;
                let kind = match line.word("inline, external, via or skipped")? {
                    "skipped" => return Ok(Check::Skipped { node, entry }),
                    "inline" => AppliedKind::Inline,
                    "external" => AppliedKind::External,
                    "via" => AppliedKind::Via,
                    other => return err(no, format!("unknown application kind '{other}'")),
                };
                let (source, target) = edge(no, line.word("Source->Target")?)?;
                Check::Applied {
                    node,
                    entry,
                    kind,
                    source,
                    target,
                }
            }
            "root" => {
                let node = line.word("node")?.to_string();
                let (service, root) = line.target()?;
                let at = if line.peek() == Some("at") {
                    line.word("at")?;
                    Some(line.number("position")?)
                } else {
                    None
                };
                line.eq()?;
                Check::Root {
                    node,
                    service,
                    root,
                    at,
                    value: line.value("value")?,
                }
            }
            "digest" => {
                let node = line.word("node")?.to_string();
                let service = line.service()?;
                line.eq()?;
                match line.word("oracle or node")? {
                    "oracle" => Check::DigestOracle { node, service },
                    other => Check::DigestEq {
                        node,
                        service,
                        other: other.to_string(),
                    },
                }
            }
            "frontier" => {
                let node = line.word("node")?.to_string();
                line.eq()?;
                Check::Frontier {
                    node,
                    position: line.number("position")?,
                }
            }
            "status" => {
                let node = line.word("node")?.to_string();
                line.eq()?;
                let status = line.rest.trim().to_string();
                line.rest = "";
                Check::Status { node, status }
            }
            "call" => {
                let label = line.word("label")?.to_string();
                line.eq()?;
                Check::Call {
                    label,
                    expected: line.expected()?,
                }
            }
            "conservation" => Check::Conservation {
                service: line.service()?,
            },
            "quiescent" => Check::Quiescent,
            other => return err(no, format!("unknown expectation '{other}'")),
        };
        Ok(check)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let deployed: BTreeSet<&ServiceId> = self.deployments.iter().map(|d| &d.service).collect();
        let nodes: BTreeSet<&str> = self.nodes.iter().map(|n| n.name.as_str()).collect();
        for n in &self.nodes {
            if let Some(s) = n.hosted.iter().find(|s| !deployed.contains(s)) {
                return err(0, format!("node {} hosts undeployed service {s}", n.name));
            }
            if let Some(p) = &n.archival_peer {
                if !nodes.contains(p.as_str()) {
                    return err(0, format!("node {} names unknown peer {p}", n.name));
                }
            }
        }
        let mut labels = BTreeSet::new();
        for (_, step) in &self.script {
            let node_ok = |n: &String| nodes.contains(n.as_str());
            if let ScriptStep::Send { label, .. } | ScriptStep::Call { label, .. } = step {
                if !labels.insert(label.clone()) {
                    return err(0, format!("label {label} used twice"));
                }
            }
            let bad_node = match step {
                ScriptStep::Call { node, .. } => (!node_ok(node)).then_some(node.clone()),
                ScriptStep::Fault(FaultSpec::Crash(n) | FaultSpec::Recover(n)) => {
                    (!node_ok(n)).then_some(n.clone())
                }
                ScriptStep::Fault(FaultSpec::Partition(a, b)) => {
                    a.iter().chain(b).find(|n| !node_ok(n)).cloned()
                }
                _ => None,
            };
            if let Some(n) = bad_node {
                return err(0, format!("unknown node {n}"));
            }
        }
        Ok(())
    }

    /// Builds the deployed bundles in declaration order.
    pub fn bundles(&self) -> Result<Vec<Arc<LyquidBundle>>, ScenarioError> {
        self.deployments
            .iter()
            .map(|d| {
                fixtures::build(&d.fixture, d.service.clone(), &d.params)
                    .map(Arc::new)
                    .or_else(|e| err(0, format!("deploy {}: {e}", d.service)))
            })
            .collect()
    }

    fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .map(|i| NodeId(i as u32 + 1))
    }

    /// Script entries ordered by step, ties kept in file order.
    fn ordered_script(&self) -> Vec<&(u64, ScriptStep)> {
        let mut steps: Vec<&(u64, ScriptStep)> = self.script.iter().collect();
        steps.sort_by_key(|(s, _)| *s);
        steps
    }

    /// Intents in the order the sequencer receives them.
    pub fn intents(&self) -> Vec<(String, CallIntent)> {
        self.ordered_script()
            .into_iter()
            .filter_map(|(_, s)| match s {
                ScriptStep::Send { label, intent } => Some((label.clone(), intent.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn sim(&self, seed: u64) -> Result<Sim, ScenarioError> {
        let resolve = |n: &String| self.node_id(n).expect("validated");
        let mut faults = Vec::new();
        for (step, s) in self.ordered_script() {
            if let ScriptStep::Fault(f) = s {
                let fault = match f {
                    FaultSpec::Crash(n) => Fault::Crash(resolve(n)),
                    FaultSpec::Recover(n) => Fault::Recover(resolve(n)),
                    FaultSpec::Partition(a, b) => Fault::Partition(
                        a.iter().map(resolve).collect(),
                        b.iter().map(resolve).collect(),
                    ),
                    FaultSpec::Heal => Fault::Heal,
                };
                faults.push((*step, fault));
            }
        }
        let config = SimConfig {
            seed,
            delay: self.delay,
            step_limit: self.step_limit,
            faults,
            seal_every: self.seal_every,
        };
        let mut sim = Sim::new(config, self.bundles()?).or_else(|e| err(0, e.to_string()))?;
        for n in &self.nodes {
            sim.spawn_node(n.clone())
                .or_else(|e| err(0, e.to_string()))?;
        }
        for (step, s) in self.ordered_script() {
            let action = match s {
                ScriptStep::Send { label, intent } => Action::Send {
                    label: label.clone(),
                    intent: intent.clone(),
                },
                ScriptStep::Call {
                    label,
                    node,
                    request,
                } => Action::Call {
                    label: label.clone(),
                    node: resolve(node),
                    request: request.clone(),
                },
                ScriptStep::Seal => Action::Seal,
                ScriptStep::Fault(_) => continue,
            };
            sim.schedule(*step, action)
                .or_else(|e| err(0, e.to_string()))?;
        }
        Ok(sim)
    }

    /// Runs the scenario and checks every expectation.
    pub fn run(&self, seed: u64) -> Result<RunResult, ScenarioError> {
        let mut sim = self.sim(seed)?;
        let report = sim.run();
        let replay = Replay::of_log(&self.bundles()?, sim.log())?;
        let checks = self
            .expectations
            .iter()
            .map(|e| {
                let got = check(&e.check, self, &mut sim, &report, &replay);
                CheckResult {
                    line: e.line,
                    text: e.text.clone(),
                    failure: got.err(),
                }
            })
            .collect();
        Ok(RunResult {
            sim,
            report,
            checks,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckResult {
    pub line: usize,
    pub text: String,
    /// `None` when the expectation held.
    pub failure: Option<String>,
}

pub struct RunResult {
    pub sim: Sim,
    pub report: SimReport,
    pub checks: Vec<CheckResult>,
}

impl RunResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.failure.is_none())
    }

    /// One line per expectation, then a summary line.
    pub fn report_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            match &c.failure {
                None => out.push_str(&format!("PASS line {}: {}\n", c.line, c.text)),
                Some(why) => out.push_str(&format!("FAIL line {}: {} -- {why}\n", c.line, c.text)),
            }
        }
        let failed = self.checks.iter().filter(|c| c.failure.is_some()).count();
        let outcome = match self.report.outcome {
            SimOutcome::Quiescent => "quiescent",
            SimOutcome::StepLimitExceeded => "step limit exceeded",
        };
        out.push_str(&format!(
            "{} passed, {failed} failed; {outcome} at step {}\n",
            self.checks.len() - failed,
            self.report.final_step
        ));
        out
    }

    /// Per node: frontier, status, and each hosted service's digest and
    /// network roots.
    pub fn state_text(&mut self) -> String {
        let mut out = String::new();
        let ids: Vec<NodeId> = self.sim.node_ids().collect();
        for id in ids {
            let status = self.sim.status(id).expect("node");
            let node = self.sim.node_mut(id).expect("node");
            out.push_str(&format!(
                "node {} id {} frontier {} {}\n",
                node.name(),
                id.0,
                node.frontier().global,
                status_text(status)
            ));
            for s in node.hosted().clone() {
                let digest = node.network_digest(&s).expect("hosted");
                out.push_str(&format!("  service {s} digest {}\n", hex::encode(digest)));
                for (root, v) in network_roots(node.world_mut(), &s) {
                    out.push_str(&format!("    {root} = {v}\n"));
                }
            }
        }
        out
    }
}

fn status_text(s: NodeStatus) -> String {
    match s {
        NodeStatus::Running => "running".into(),
        NodeStatus::Stalled(p) => format!("stalled {p}"),
        NodeStatus::Fatal(p) => format!("fatal {p}"),
    }
}

fn matches(expected: &Expected, got: &Result<Value, String>) -> bool {
    match (expected, got) {
        (Expected::Ok(None), Ok(_)) => true,
        (Expected::Ok(Some(v)), Ok(g)) => v == g,
        (Expected::Err(code), Err(g)) => code == g,
        _ => false,
    }
}

fn show(r: &Result<Value, String>) -> String {
    match r {
        Ok(v) => format!("ok {v}"),
        Err(e) => format!("err {e}"),
    }
}

fn response_result(r: &GatewayResponse) -> Result<Value, String> {
    match r {
        GatewayResponse::Value(v) => Ok(v.clone()),
        GatewayResponse::Position(p) => Ok(Value::u64(*p)),
        GatewayResponse::Error { code, .. } => Err(code.clone()),
    }
}

fn check(
    c: &Check,
    scn: &Scenario,
    sim: &mut Sim,
    report: &SimReport,
    replay: &Replay,
) -> Result<(), String> {
    let node_id = |name: &str| {
        scn.node_id(name)
            .ok_or_else(|| format!("unknown node {name}"))
    };
    let position = |sim: &Sim, e: &EntryRef| -> Result<Position, String> {
        match e {
            EntryRef::Position(p) => Ok(*p),
            EntryRef::Label(l) => match sim.send_result(l) {
                Some(GatewayResponse::Position(p)) => Ok(*p),
                Some(other) => Err(format!("{l} was not sequenced: {other}")),
                None => Err(format!("{l} has no sequencer reply")),
            },
        }
    };
    let expect_eq = |what: &str, want: String, got: String| {
        if want == got {
            Ok(())
        } else {
            Err(format!("{what}: expected {want}, got {got}"))
        }
    };
    match c {
        Check::Sent { label, position } => {
            let got = sim
                .send_result(label)
                .map_or("nothing".into(), |r| r.to_string());
            expect_eq(
                "reply",
                GatewayResponse::Position(*position).to_string(),
                got,
            )
        }
        Check::Outcome {
            node,
            entry,
            expected,
        } => {
            let p = position(sim, entry)?;
            let n = sim.node(node_id(node)?).expect("node");
            match n.applied(p) {
                Some(Applied::Executed { outcome, .. }) if matches(expected, outcome) => Ok(()),
                Some(Applied::Executed { outcome, .. }) => Err(format!("got {}", show(outcome))),
                Some(other) => Err(format!("position {p} was not executed here: {other:?}")),
                None => Err(format!(
                    "position {p} not applied (frontier {})",
                    n.frontier().global
                )),
            }
        }
        Check::Applied {
            node,
            entry,
            kind,
            source,
            target,
        } => {
            let p = position(sim, entry)?;
            let n = sim.node(node_id(node)?).expect("node");
            let pair = (source.clone(), target.clone());
            let found = match (kind, n.applied(p)) {
                (AppliedKind::Inline, Some(Applied::Executed { inline, .. })) => {
                    inline.contains(&pair)
                }
                (AppliedKind::External, Some(Applied::Executed { external, .. })) => {
                    external.contains(&pair)
                }
                (AppliedKind::Via, Some(Applied::ViaEffects { calls })) => calls.contains(&pair),
                _ => false,
            };
            if found {
                Ok(())
            } else {
                Err(format!("position {p}: {:?}", n.applied(p)))
            }
        }
        Check::Skipped { node, entry } => {
            let p = position(sim, entry)?;
            let n = sim.node(node_id(node)?).expect("node");
            match n.applied(p) {
                Some(Applied::Skipped { .. }) => Ok(()),
                other => Err(format!("position {p}: {other:?}")),
            }
        }
        Check::Root {
            node,
            service,
            root,
            at,
            value,
        } => {
            let n = sim.node_mut(node_id(node)?).expect("node");
            let got = match at {
                None => n.read_root(service, root),
                Some(p) => n.serve_state(service, root, *p),
            }
            .map_err(|e| e.to_string())?;
            expect_eq("value", value.to_string(), got.to_string())
        }
        Check::DigestOracle { node, service } => {
            let n = sim.node(node_id(node)?).expect("node");
            let p = n.frontier().global as usize;
            let got = n
                .network_digest(service)
                .ok_or(format!("{service} not hosted on {node}"))?;
            let want = replay
                .digests
                .get(p)
                .and_then(|d| d.get(service))
                .ok_or("no oracle state")?;
            expect_eq(
                &format!("digest at {p}"),
                hex::encode(want),
                hex::encode(got),
            )
        }
        Check::DigestEq {
            node,
            service,
            other,
        } => {
            let a = sim
                .node(node_id(node)?)
                .expect("node")
                .network_digest(service);
            let b = sim
                .node(node_id(other)?)
                .expect("node")
                .network_digest(service);
            match (a, b) {
                (Some(a), Some(b)) => expect_eq("digest", hex::encode(b), hex::encode(a)),
                _ => Err(format!("{service} must be hosted on both nodes")),
            }
        }
        Check::Frontier { node, position } => {
            let got = sim.node(node_id(node)?).expect("node").frontier().global;
            expect_eq("frontier", position.to_string(), got.to_string())
        }
        Check::Status { node, status } => {
            let got = status_text(sim.status(node_id(node)?).expect("node"));
            expect_eq("status", status.clone(), got)
        }
        Check::Call { label, expected } => {
            let rec = sim
                .call_result(label)
                .ok_or(format!("{label} has no reply"))?;
            let got = response_result(&rec.response);
            if matches(expected, &got) {
                Ok(())
            } else {
                Err(format!("got {}", show(&got)))
            }
        }
        Check::Conservation { service } => {
            let ids: Vec<NodeId> = sim.node_ids().collect();
            let mut checked = 0;
            for id in ids {
                let n = sim.node_mut(id).expect("node");
                if !n.hosts(service) {
                    continue;
                }
                // archival nodes can show every past position
                let positions: Vec<Position> = if n.is_archival() {
                    (0..=n.frontier().global).collect()
                } else {
                    vec![n.frontier().global]
                };
                for p in positions {
                    let supply = n
                        .serve_state(service, "total_supply", p)
                        .map_err(|e| e.to_string())?;
                    let balances = n
                        .serve_state(service, "balances", p)
                        .map_err(|e| e.to_string())?;
                    let sum = balances
                        .as_map()
                        .ok_or("balances is not a map")?
                        .values()
                        .try_fold(U256::zero(), |acc, v| {
                            v.as_u256().and_then(|x| acc.checked_add(x))
                        })
                        .ok_or("balance sum overflows")?;
                    if Value::U256(sum) != supply {
                        return Err(format!(
                            "{}: at {p} balances sum to {sum}, supply {supply}",
                            n.name()
                        ));
                    }
                    checked += 1;
                }
            }
            if checked == 0 {
                return Err(format!("no node hosts {service}"));
            }
            Ok(())
        }
        Check::Quiescent => match report.outcome {
            SimOutcome::Quiescent => Ok(()),
            SimOutcome::StepLimitExceeded => Err("step limit exceeded".into()),
        },
    }
}
