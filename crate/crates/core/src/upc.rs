//! Multicast calls into instance handlers on a selected set of nodes.
//!
//! The engine here is transport-agnostic: a [`UpcFabric`] delivers one
//! request to one node and reports when (or whether) its response arrives.
//! Everything after that, which responses count and what the aggregate is,
//! is decided here.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use primitive_types::U256;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::{NodeId, ServiceId};
use crate::value::Value;

/// Nesting limit for calls issued from inside handlers. The top-level call
/// has depth 1.
pub const MAX_UPC_DEPTH: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    /// Every node hosting the service.
    AllMembers,
    /// The `k` lowest node ids among the hosts.
    FirstK(usize),
    /// Hosts listed in a root of the calling service (a list of node numbers).
    MembersRoot(String),
    Nodes(Vec<NodeId>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Quorum {
    Fixed(usize),
    /// Read from a U256 root of the calling service.
    Root(String),
}

pub type CustomReducer = Arc<dyn Fn(&[Value]) -> Result<Value, String> + Send + Sync>;

#[derive(Clone)]
pub enum Reducer {
    /// U256 sum; overflow is an error.
    Sum,
    Min,
    Max,
    /// Lower median.
    Median,
    /// Most frequent value, ties to the smallest.
    Majority,
    Custom(String, CustomReducer),
}

impl fmt::Debug for Reducer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl PartialEq for Reducer {
    fn eq(&self, other: &Self) -> bool {
        self.name() == other.name()
    }
}

impl Reducer {
    pub fn name(&self) -> String {
        match self {
            Reducer::Sum => "sum".into(),
            Reducer::Min => "min".into(),
            Reducer::Max => "max".into(),
            Reducer::Median => "median".into(),
            Reducer::Majority => "majority".into(),
            Reducer::Custom(name, _) => format!("custom:{name}"),
        }
    }

    pub fn parse(s: &str) -> Option<Reducer> {
        Some(match s {
            "sum" => Reducer::Sum,
            "min" => Reducer::Min,
            "max" => Reducer::Max,
            "median" => Reducer::Median,
            "majority" => Reducer::Majority,
            _ => return None,
        })
    }

    pub fn reduce(&self, values: &[Value]) -> Result<Value, String> {
        if values.is_empty() {
            return Err("nothing to reduce".into());
        }
        match self {
            Reducer::Sum => {
                let mut acc = U256::zero();
                for v in values {
                    let n = v.as_u256().ok_or("sum over a non-integer")?;
                    acc = acc.checked_add(n).ok_or("sum overflow")?;
                }
                Ok(Value::U256(acc))
            }
            Reducer::Min => Ok(values.iter().min().cloned().expect("non-empty")),
            Reducer::Max => Ok(values.iter().max().cloned().expect("non-empty")),
            Reducer::Median => {
                let mut sorted = values.to_vec();
                sorted.sort();
                Ok(sorted[(sorted.len() - 1) / 2].clone())
            }
            Reducer::Majority => {
                let mut counts: BTreeMap<&Value, usize> = BTreeMap::new();
                for v in values {
                    *counts.entry(v).or_default() += 1;
                }
                let best = counts.values().copied().max().expect("non-empty");
                // BTreeMap iterates ascending, so the first hit is the smallest
                Ok(counts
                    .into_iter()
                    .find(|&(_, c)| c == best)
                    .map(|(v, _)| v.clone())
                    .expect("non-empty"))
            }
            Reducer::Custom(_, f) => f(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Aggregator {
    /// Accept the earliest valid response once `quorum` valid ones are in.
    /// Valid means the handler succeeded and, when given, the sha256 of the
    /// value's canonical encoding matches.
    FirstValid { expected_digest: Option<[u8; 32]> },
    /// Reduce the first `k` valid responses.
    ThresholdShares { k: usize, reducer: Reducer },
    /// Reduce every valid response received by the deadline.
    CollectAll { reducer: Reducer },
    /// Exactly one node (the first selected) is asked.
    SingleNode,
}

impl Aggregator {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::FirstValid { .. } => "first_valid",
            Aggregator::ThresholdShares { .. } => "threshold_shares",
            Aggregator::CollectAll { .. } => "collect_all",
            Aggregator::SingleNode => "single_node",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpcCall {
    pub service: ServiceId,
    pub handler: String,
    pub args: Vec<Value>,
    pub selector: Selection,
    pub aggregator: Aggregator,
    pub quorum: Quorum,
    /// Budget in simulation steps, counted from when the call is issued.
    pub deadline: u64,
}

impl UpcCall {
    pub fn new(service: ServiceId, handler: &str, args: Vec<Value>) -> Self {
        UpcCall {
            service,
            handler: handler.to_string(),
            args,
            selector: Selection::AllMembers,
            aggregator: Aggregator::CollectAll {
                reducer: Reducer::Sum,
            },
            quorum: Quorum::Fixed(1),
            deadline: 50,
        }
    }

    pub fn select(mut self, s: Selection) -> Self {
        self.selector = s;
        self
    }

    pub fn aggregate(mut self, a: Aggregator) -> Self {
        self.aggregator = a;
        self
    }

    pub fn quorum(mut self, q: usize) -> Self {
        self.quorum = Quorum::Fixed(q);
        self
    }

    pub fn deadline(mut self, steps: u64) -> Self {
        self.deadline = steps;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UpcError {
    #[error("quorum not met: {valid} valid of {needed} needed")]
    QuorumNotMet { valid: usize, needed: usize },
    #[error("no eligible nodes")]
    NoEligibleNodes,
    #[error("multicast nesting deeper than {MAX_UPC_DEPTH}")]
    DepthExceeded,
    #[error("invalid call: {0}")]
    InvalidCall(String),
    #[error("reducer failed: {0}")]
    Reducer(String),
}

impl UpcError {
    pub fn code(&self) -> &'static str {
        match self {
            UpcError::QuorumNotMet { .. } => "QuorumNotMet",
            UpcError::NoEligibleNodes => "NoEligibleNodes",
            UpcError::DepthExceeded => "DepthExceeded",
            UpcError::InvalidCall(_) => "InvalidCall",
            UpcError::Reducer(_) => "ReducerFailed",
        }
    }
}

/// One request as it goes over the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct UpcRequest {
    pub call_id: String,
    pub origin: NodeId,
    pub service: ServiceId,
    pub handler: String,
    pub args: Vec<Value>,
    /// Step at which the request is sent.
    pub sent: u64,
    /// Absolute step after which responses are ignored.
    pub deadline: u64,
    pub depth: u32,
}

impl UpcRequest {
    /// Canonical bytes of what a target receives. Identical for every
    /// target of one call.
    pub fn payload(&self) -> Vec<u8> {
        Value::List(vec![
            Value::str(self.call_id.clone()),
            Value::str(self.service.as_str()),
            Value::str(self.handler.clone()),
            Value::List(self.args.clone()),
            Value::u64(self.deadline),
            Value::u64(self.depth as u64),
        ])
        .encode()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Exchange {
    Response {
        /// Step at which the response reaches the origin.
        arrival: u64,
        /// Handler result, or its error code.
        payload: Result<Value, String>,
    },
    Lost,
}

pub trait UpcFabric {
    /// Nodes hosting `service`, in any order.
    fn hosts(&self, service: &ServiceId) -> Vec<NodeId>;
    fn exchange(&mut self, req: &UpcRequest, target: NodeId) -> Exchange;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseStatus {
    Valid,
    Invalid,
    /// Valid but not needed: aggregation had already completed.
    Discarded,
    Late,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResponseTrace {
    pub node: u32,
    pub status: ResponseStatus,
    pub arrival: Option<u64>,
}

/// Structured record of one multicast call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpcTrace {
    pub call_id: String,
    pub origin: u32,
    pub service: String,
    pub handler: String,
    pub depth: u32,
    pub aggregator: &'static str,
    pub selected: Vec<u32>,
    pub quorum: usize,
    pub issued: u64,
    pub deadline: u64,
    pub responses: Vec<ResponseTrace>,
    pub completed: u64,
    pub result: String,
}

#[derive(Debug, Clone)]
pub struct UpcOutcome {
    pub result: Result<Value, UpcError>,
    /// Step at which the origin has the aggregate (or gave up).
    pub completed: u64,
    pub trace: UpcTrace,
}

/// Where a call is issued from.
#[derive(Debug, Clone)]
pub struct Issue {
    pub call_id: String,
    pub origin: NodeId,
    pub now: u64,
    pub depth: u32,
    /// Absolute deadline of the enclosing call, if nested.
    pub parent_deadline: Option<u64>,
}

/// The nodes a call goes to, ascending by id.
pub fn select_targets(
    call: &UpcCall,
    hosts: &[NodeId],
    eligible: Option<&[NodeId]>,
) -> Vec<NodeId> {
    let hosts: BTreeSet<NodeId> = hosts.iter().copied().collect();
    let mut targets: Vec<NodeId> = match eligible {
        Some(list) => list
            .iter()
            .filter(|n| hosts.contains(n))
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
        None => hosts.into_iter().collect(),
    };
    if let Selection::FirstK(k) = call.selector {
        targets.truncate(k);
    }
    if call.aggregator == Aggregator::SingleNode {
        targets.truncate(1);
    }
    targets
}

fn digest(v: &Value) -> [u8; 32] {
    Sha256::digest(v.encode()).into()
}

/// Runs one multicast call over `fabric`.
pub fn invoke(
    fabric: &mut dyn UpcFabric,
    issue: &Issue,
    call: &UpcCall,
    eligible: Option<Vec<NodeId>>,
    quorum: usize,
) -> UpcOutcome {
    let deadline = issue.now.saturating_add(call.deadline);
    let deadline = issue.parent_deadline.map_or(deadline, |p| deadline.min(p));
    let mut trace = UpcTrace {
        call_id: issue.call_id.clone(),
        origin: issue.origin.0,
        service: call.service.to_string(),
        handler: call.handler.clone(),
        depth: issue.depth,
        aggregator: call.aggregator.name(),
        selected: Vec::new(),
        quorum,
        issued: issue.now,
        deadline,
        responses: Vec::new(),
        completed: issue.now,
        result: String::new(),
    };
    let finish = |mut trace: UpcTrace, result: Result<Value, UpcError>, completed: u64| {
        trace.completed = completed;
        trace.result = match &result {
            Ok(v) => format!("ok {v}"),
            Err(e) => format!("err {}", e.code()),
        };
        UpcOutcome {
            result,
            completed,
            trace,
        }
    };

    if issue.depth > MAX_UPC_DEPTH {
        return finish(trace, Err(UpcError::DepthExceeded), issue.now);
    }
    if quorum == 0 || call.deadline == 0 {
        let e = UpcError::InvalidCall("quorum and deadline must be positive".into());
        return finish(trace, Err(e), issue.now);
    }
    if let Aggregator::ThresholdShares { k: 0, .. } = call.aggregator {
        let e = UpcError::InvalidCall("threshold of zero shares".into());
        return finish(trace, Err(e), issue.now);
    }
    let targets = select_targets(call, &fabric.hosts(&call.service), eligible.as_deref());
    trace.selected = targets.iter().map(|n| n.0).collect();
    if targets.is_empty() {
        return finish(trace, Err(UpcError::NoEligibleNodes), issue.now);
    }

    let req = UpcRequest {
        call_id: issue.call_id.clone(),
        origin: issue.origin,
        service: call.service.clone(),
        handler: call.handler.clone(),
        args: call.args.clone(),
        sent: issue.now,
        deadline,
        depth: issue.depth,
    };
    // logically concurrent fan-out; collected in (arrival, node) order
    let mut arrivals = Vec::new();
    let mut lost = Vec::new();
    for &t in &targets {
        match fabric.exchange(&req, t) {
            Exchange::Response { arrival, payload } => arrivals.push((arrival, t, payload)),
            Exchange::Lost => lost.push(t),
        }
    }
    arrivals.sort_by_key(|(arrival, node, _)| (*arrival, *node));

    let needed = match &call.aggregator {
        Aggregator::ThresholdShares { k, .. } => (*k).max(quorum),
        _ => quorum,
    };
    let valid_value = |payload: &Result<Value, String>| -> Option<Value> {
        let v = payload.as_ref().ok()?;
        if let Aggregator::FirstValid {
            expected_digest: Some(d),
        } = &call.aggregator
        {
            if digest(v) != *d {
                return None;
            }
        }
        Some(v.clone())
    };
    let take = match &call.aggregator {
        Aggregator::FirstValid { .. } | Aggregator::SingleNode => Some(needed),
        Aggregator::ThresholdShares { k, .. } => Some((*k).max(quorum)),
        Aggregator::CollectAll { .. } => None,
    };

    let mut accepted: Vec<Value> = Vec::new();
    let mut done_at: Option<u64> = None;
    for (arrival, node, payload) in &arrivals {
        let status = if *arrival > deadline {
            ResponseStatus::Late
        } else if done_at.is_some() {
            ResponseStatus::Discarded
        } else if let Some(v) = valid_value(payload) {
            accepted.push(v);
            if take.is_some_and(|n| accepted.len() >= n) {
                done_at = Some(*arrival);
            }
            ResponseStatus::Valid
        } else {
            ResponseStatus::Invalid
        };
        trace.responses.push(ResponseTrace {
            node: node.0,
            status,
            arrival: Some(*arrival),
        });
    }
    for node in lost {
        trace.responses.push(ResponseTrace {
            node: node.0,
            status: ResponseStatus::Lost,
            arrival: None,
        });
    }
    trace
        .responses
        .sort_by_key(|r| (r.arrival.unwrap_or(u64::MAX), r.node));

    // collect_all finishes early only when every target answered in time
    if take.is_none() {
        let all_in_time =
            arrivals.len() == targets.len() && arrivals.iter().all(|(a, _, _)| *a <= deadline);
        if all_in_time {
            done_at = arrivals.iter().map(|(a, _, _)| *a).max();
        }
    }
    if accepted.len() < needed {
        let e = UpcError::QuorumNotMet {
            valid: accepted.len(),
            needed,
        };
        return finish(trace, Err(e), deadline);
    }
    let completed = done_at.unwrap_or(deadline);
    let result = match &call.aggregator {
        Aggregator::FirstValid { .. } | Aggregator::SingleNode => Ok(accepted[0].clone()),
        Aggregator::ThresholdShares { reducer, .. } | Aggregator::CollectAll { reducer } => {
            reducer.reduce(&accepted).map_err(UpcError::Reducer)
        }
    };
    finish(trace, result, completed)
}
