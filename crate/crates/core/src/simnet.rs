//! Deterministic discrete-event network: one sequencer, any number of nodes
//! and a scripted client, driven by a global step clock.
//!
//! Every link is FIFO, so intents reach the sequencer in the order the
//! client sent them whatever the seed. Multicast calls are simulated
//! eagerly: the whole exchange (including nested calls) is worked out when
//! the call is made, with delays and faults evaluated at the steps where
//! each message would arrive.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fco_log::{CallIntent, FcoLog, LogConfig};
use crate::ids::{NodeId, Position, ServiceId};
use crate::node::{GatewayRequest, GatewayResponse, Node, NodeConfig, NodeError};
use crate::runtime::{EntryTrace, InstanceEnv, LyquidBundle, World};
use crate::upc::{self, Exchange, Issue, UpcCall, UpcError, UpcFabric, UpcRequest, UpcTrace};
use crate::value::{Address, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    Crash(NodeId),
    Recover(NodeId),
    /// Messages between the two sides are dropped until `Heal`.
    Partition(BTreeSet<NodeId>, BTreeSet<NodeId>),
    Heal,
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = |s: &BTreeSet<NodeId>| {
            s.iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        match self {
            Fault::Crash(n) => write!(f, "crash {n}"),
            Fault::Recover(n) => write!(f, "recover {n}"),
            Fault::Partition(a, b) => write!(f, "partition {} | {}", side(a), side(b)),
            Fault::Heal => write!(f, "heal"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    pub seed: u64,
    /// Inclusive range of per-message delays, in steps.
    pub delay: (u64, u64),
    pub step_limit: u64,
    /// Sorted by step.
    pub faults: Vec<(u64, Fault)>,
    /// Seal the open batch every this many steps, if it has entries.
    pub seal_every: Option<u64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            delay: (1, 3),
            step_limit: 10_000,
            faults: Vec::new(),
            seal_every: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.delay.0 > self.delay.1 {
            return bad("minimum delay exceeds maximum");
        }
        if self.faults.windows(2).any(|w| w[0].0 > w[1].0) {
            return bad("fault schedule is not sorted by step");
        }
        if self.seal_every == Some(0) {
            return bad("seal interval must be positive");
        }
        let mut crashed = BTreeSet::new();
        for (_, f) in &self.faults {
            match f {
                Fault::Crash(n) => {
                    crashed.insert(*n);
                }
                Fault::Recover(n) if !crashed.remove(n) => {
                    return bad(&format!("recover {n} without a preceding crash"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("step {step} is before the current step {now}")]
    PastStep { step: u64, now: u64 },
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error(transparent)]
    Node(#[from] NodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Endpoint {
    Client,
    Sequencer,
    Node(NodeId),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Client => f.write_str("client"),
            Endpoint::Sequencer => f.write_str("seq"),
            Endpoint::Node(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgKind {
    Gateway,
    EffectsPull,
    UpcRequest,
    UpcResponse,
    BatchNotify,
}

impl MsgKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MsgKind::Gateway => "gateway",
            MsgKind::EffectsPull => "effects-pull",
            MsgKind::UpcRequest => "upc-request",
            MsgKind::UpcResponse => "upc-response",
            MsgKind::BatchNotify => "batch-notify",
        }
    }
}

#[derive(Debug, Clone)]
enum Payload {
    Send {
        label: String,
        intent: CallIntent,
    },
    SendReply {
        label: String,
        response: GatewayResponse,
    },
    Call {
        label: String,
        request: GatewayRequest,
    },
    CallReply {
        label: String,
        response: GatewayResponse,
    },
    Batch {
        number: u64,
    },
    Pull {
        from: Position,
        through: Position,
        hosted: BTreeSet<ServiceId>,
    },
    PullReply {
        through: Position,
        traces: Vec<EntryTrace>,
    },
}

impl Payload {
    fn bytes(&self) -> Vec<u8> {
        match self {
            Payload::Send { intent, .. } => Value::List(vec![
                Value::Address(intent.caller),
                Value::str(intent.target.as_str()),
                Value::str(intent.method.clone()),
                Value::List(intent.args.clone()),
                Value::u64(intent.gas_limit),
            ])
            .encode(),
            Payload::Call { request, .. } => request.to_string().into_bytes(),
            Payload::SendReply { response, .. } | Payload::CallReply { response, .. } => {
                response.to_string().into_bytes()
            }
            Payload::Batch { number } => number.to_le_bytes().to_vec(),
            Payload::Pull {
                from,
                through,
                hosted,
            } => Value::List(vec![
                Value::u64(*from),
                Value::u64(*through),
                Value::List(hosted.iter().map(|s| Value::str(s.as_str())).collect()),
            ])
            .encode(),
            Payload::PullReply { through, traces } => Value::List(vec![
                Value::u64(*through),
                Value::List(traces.iter().map(|t| t.to_value()).collect()),
            ])
            .encode(),
        }
    }

    fn summary(&self) -> String {
        match self {
            Payload::Send { label, intent } => {
                format!("{label}: {}.{}", intent.target, intent.method)
            }
            Payload::SendReply { label, response } | Payload::CallReply { label, response } => {
                format!("{label}: {response}")
            }
            Payload::Call { label, request } => {
                format!("{label}: {}.{}", request.service, request.method)
            }
            Payload::Batch { number } => format!("batch {number}"),
            Payload::Pull { from, through, .. } => format!("positions {from}..={through}"),
            Payload::PullReply { through, traces } => {
                format!("{} traces through {through}", traces.len())
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Message {
    id: u64,
    from: Endpoint,
    to: Endpoint,
    kind: MsgKind,
    payload: Payload,
}

/// One line of the trace file. Field order is fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub step: u64,
    pub event: String,
    pub kind: String,
    pub from: String,
    pub to: String,
    pub msg: Option<u64>,
    /// First 8 bytes of the payload's SHA-256, hex.
    pub digest: String,
    pub detail: String,
}

fn short_digest(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Something the scripted client or the sequencer does at a given step.
#[derive(Debug, Clone)]
pub enum Action {
    /// Submit an intent to the sequencer.
    Send { label: String, intent: CallIntent },
    /// Run a local call on a node.
    Call {
        label: String,
        node: NodeId,
        request: GatewayRequest,
    },
    /// Seal the open batch.
    Seal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Running,
    /// Waiting for archival records for this position.
    Stalled(Position),
    /// Cannot decide this position.
    Fatal(Position),
}

struct SimNode {
    node: Node,
    config: NodeConfig,
    rng: ChaCha8Rng,
    status: NodeStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct NetState {
    crashed: BTreeSet<NodeId>,
    partitions: Vec<(BTreeSet<NodeId>, BTreeSet<NodeId>)>,
}

impl NetState {
    fn apply(&mut self, fault: &Fault) {
        match fault {
            Fault::Crash(n) => {
                self.crashed.insert(*n);
            }
            Fault::Recover(n) => {
                self.crashed.remove(n);
            }
            Fault::Partition(a, b) => self.partitions.push((a.clone(), b.clone())),
            Fault::Heal => self.partitions.clear(),
        }
    }

    fn split(&self, a: NodeId, b: NodeId) -> bool {
        self.partitions
            .iter()
            .any(|(x, y)| (x.contains(&a) && y.contains(&b)) || (x.contains(&b) && y.contains(&a)))
    }

    /// Whether a message from `from` can be delivered to `to`.
    fn passes(&self, from: Endpoint, to: Endpoint) -> Result<(), &'static str> {
        if let Endpoint::Node(t) = to {
            if self.crashed.contains(&t) {
                return Err("crashed");
            }
            if let Endpoint::Node(f) = from {
                if self.split(f, t) {
                    return Err("partitioned");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimOutcome {
    /// Nothing left to deliver or do.
    Quiescent,
    StepLimitExceeded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimReport {
    pub outcome: SimOutcome,
    pub final_step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub node: NodeId,
    pub issued: u64,
    pub answered: u64,
    pub response: GatewayResponse,
}

pub struct Sim {
    config: SimConfig,
    rng: ChaCha8Rng,
    step: u64,
    started: bool,
    bundles: Vec<Arc<LyquidBundle>>,
    log: FcoLog,
    nodes: BTreeMap<NodeId, SimNode>,
    names: BTreeMap<String, NodeId>,
    /// Forks of nodes that are in the middle of a multicast call.
    busy: BTreeMap<NodeId, (BTreeSet<ServiceId>, World)>,
    net: NetState,
    faults: Vec<(u64, Fault)>,
    actions: BTreeMap<u64, Vec<Action>>,
    queue: BTreeMap<(u64, u64), Message>,
    next_msg: u64,
    links: BTreeMap<(Endpoint, Endpoint), u64>,
    next_upc: u64,
    trace: Vec<TraceRecord>,
    upc_traces: Vec<UpcTrace>,
    sends: BTreeMap<String, GatewayResponse>,
    calls: BTreeMap<String, CallRecord>,
    call_issued: BTreeMap<String, u64>,
}

impl Sim {
    pub fn new(config: SimConfig, bundles: Vec<Arc<LyquidBundle>>) -> Result<Sim, SimError> {
        config.validate()?;
        let mut log = FcoLog::new(LogConfig::default());
        for b in &bundles {
            log.register_service(b.name().clone());
        }
        Ok(Sim {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            faults: config.faults.clone(),
            config,
            step: 0,
            started: false,
            bundles,
            log,
            nodes: BTreeMap::new(),
            names: BTreeMap::new(),
            busy: BTreeMap::new(),
            net: NetState::default(),
            actions: BTreeMap::new(),
            queue: BTreeMap::new(),
            next_msg: 0,
            links: BTreeMap::new(),
            next_upc: 0,
            trace: Vec::new(),
            upc_traces: Vec::new(),
            sends: BTreeMap::new(),
            calls: BTreeMap::new(),
            call_issued: BTreeMap::new(),
        })
    }

    /// Adds a node with an empty frontier. Ids are assigned 1, 2, ... in
    /// spawn order.
    pub fn spawn_node(&mut self, config: NodeConfig) -> Result<NodeId, SimError> {
        if self.names.contains_key(&config.name) {
            return Err(SimError::InvalidConfig(format!(
                "duplicate node {}",
                config.name
            )));
        }
        if Address::named(&config.name).is_none() {
            return Err(SimError::InvalidConfig(format!(
                "bad node name {}",
                config.name
            )));
        }
        let id = NodeId(self.nodes.len() as u32 + 1);
        let node = Node::new(id, &config.name, config.profile(), &self.bundles)?;
        let rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (u64::from(id.0) << 32));
        self.names.insert(config.name.clone(), id);
        self.nodes.insert(
            id,
            SimNode {
                node,
                config,
                rng,
                status: NodeStatus::Running,
            },
        );
        Ok(id)
    }

    pub fn schedule(&mut self, step: u64, action: Action) -> Result<(), SimError> {
        self.check_future(step)?;
        if let Action::Call { node, .. } = &action {
            if !self.nodes.contains_key(node) {
                return Err(SimError::UnknownNode(node.to_string()));
            }
        }
        self.actions.entry(step).or_default().push(action);
        Ok(())
    }

    /// Adds a fault to the schedule, after any already set for that step.
    pub fn inject(&mut self, fault: Fault, step: u64) -> Result<(), SimError> {
        self.check_future(step)?;
        let at = self.faults.partition_point(|(s, _)| *s <= step);
        self.faults.insert(at, (step, fault));
        Ok(())
    }

    fn check_future(&self, step: u64) -> Result<(), SimError> {
        let now = if self.started { self.step + 1 } else { 0 };
        if step < now {
            return Err(SimError::PastStep { step, now });
        }
        Ok(())
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id).map(|n| &n.node)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.nodes.get_mut(&id).map(|n| &mut n.node)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn status(&self, id: NodeId) -> Option<NodeStatus> {
        self.nodes.get(&id).map(|n| n.status)
    }

    pub fn log(&self) -> &FcoLog {
        &self.log
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// The trace as JSON lines.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.trace {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn upc_traces(&self) -> &[UpcTrace] {
        &self.upc_traces
    }

    pub fn send_result(&self, label: &str) -> Option<&GatewayResponse> {
        self.sends.get(label)
    }

    pub fn call_result(&self, label: &str) -> Option<&CallRecord> {
        self.calls.get(label)
    }

    /// Runs until quiescence or the step limit. A later call resumes at the
    /// next step.
    pub fn run(&mut self) -> SimReport {
        if self.started {
            self.step += 1;
        }
        self.started = true;
        loop {
            self.process_step();
            if self.quiescent() {
                self.record(
                    self.step,
                    "quiescent",
                    "",
                    Endpoint::Sequencer,
                    Endpoint::Sequencer,
                    None,
                    b"",
                    String::new(),
                );
                return SimReport {
                    outcome: SimOutcome::Quiescent,
                    final_step: self.step,
                };
            }
            if self.step >= self.config.step_limit {
                self.record(
                    self.step,
                    "step-limit",
                    "",
                    Endpoint::Sequencer,
                    Endpoint::Sequencer,
                    None,
                    b"",
                    String::new(),
                );
                return SimReport {
                    outcome: SimOutcome::StepLimitExceeded,
                    final_step: self.step,
                };
            }
            self.step += 1;
        }
    }

    fn process_step(&mut self) {
        let now = self.step;
        while self.faults.first().is_some_and(|(s, _)| *s <= now) {
            let (_, fault) = self.faults.remove(0);
            self.apply_fault(fault);
        }
        for action in self.actions.remove(&now).unwrap_or_default() {
            self.act(action);
        }
        if let Some(k) = self.config.seal_every {
            if now > 0 && now.is_multiple_of(k) && !self.log.open_batch().is_empty() {
                self.seal();
            }
        }
        self.poll();
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > now {
                break;
            }
            let msg = entry.remove();
            self.deliver(msg);
        }
    }

    fn apply_fault(&mut self, fault: Fault) {
        self.net.apply(&fault);
        let bytes = fault.to_string().into_bytes();
        self.record(
            self.step,
            "fault",
            "",
            Endpoint::Sequencer,
            Endpoint::Sequencer,
            None,
            &bytes,
            fault.to_string(),
        );
        if let Fault::Recover(n) = fault {
            // catch up on whatever was sealed while down
            self.sync(n);
            self.advance(n);
        }
    }

    fn act(&mut self, action: Action) {
        match action {
            Action::Send { label, intent } => {
                self.send(
                    Endpoint::Client,
                    Endpoint::Sequencer,
                    MsgKind::Gateway,
                    Payload::Send { label, intent },
                );
            }
            Action::Call {
                label,
                node,
                request,
            } => {
                self.call_issued.insert(label.clone(), self.step);
                self.send(
                    Endpoint::Client,
                    Endpoint::Node(node),
                    MsgKind::Gateway,
                    Payload::Call { label, request },
                );
            }
            Action::Seal => self.seal(),
        }
    }

    fn seal(&mut self) {
        let batch = self.log.seal_batch().expect("in-memory log");
        let detail = format!("batch {} positions {:?}", batch.number, batch.range);
        self.record(
            self.step,
            "seal",
            "",
            Endpoint::Sequencer,
            Endpoint::Sequencer,
            None,
            detail.as_bytes(),
            detail.clone(),
        );
        if !batch.is_empty() {
            let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
            for n in ids {
                self.send(
                    Endpoint::Sequencer,
                    Endpoint::Node(n),
                    MsgKind::BatchNotify,
                    Payload::Batch {
                        number: batch.number,
                    },
                );
            }
        }
    }

    fn poll(&mut self) {
        let now = self.step;
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for n in ids {
            if self.net.crashed.contains(&n) {
                continue;
            }
            let sn = &self.nodes[&n];
            if !matches!(sn.status, NodeStatus::Stalled(_))
                || !now.is_multiple_of(sn.config.poll_interval)
            {
                continue;
            }
            let Some(peer) = sn
                .config
                .archival_peer
                .as_ref()
                .and_then(|p| self.names.get(p))
                .copied()
            else {
                continue;
            };
            let payload = Payload::Pull {
                from: sn.node.remote_through() + 1,
                through: sn.node.known_sealed(),
                hosted: sn.node.hosted().clone(),
            };
            self.send(
                Endpoint::Node(n),
                Endpoint::Node(peer),
                MsgKind::EffectsPull,
                payload,
            );
        }
    }

    fn delay(&mut self) -> u64 {
        let (lo, hi) = self.config.delay;
        self.rng.gen_range(lo..=hi)
    }

    fn send(&mut self, from: Endpoint, to: Endpoint, kind: MsgKind, payload: Payload) {
        self.send_from(self.step, from, to, kind, payload)
    }

    /// Sends a message that leaves at `departs` (not before the current step).
    fn send_from(
        &mut self,
        departs: u64,
        from: Endpoint,
        to: Endpoint,
        kind: MsgKind,
        payload: Payload,
    ) {
        let id = self.next_msg;
        self.next_msg += 1;
        let d = self.delay();
        let link = self.links.entry((from, to)).or_insert(0);
        let at = (departs + d).max(*link);
        *link = at;
        self.record(
            departs,
            "send",
            kind.as_str(),
            from,
            to,
            Some(id),
            &payload.bytes(),
            format!("deliver {at}; {}", payload.summary()),
        );
        self.queue.insert(
            (at, id),
            Message {
                id,
                from,
                to,
                kind,
                payload,
            },
        );
    }

    fn deliver(&mut self, msg: Message) {
        let bytes = msg.payload.bytes();
        if let Err(why) = self.net.passes(msg.from, msg.to) {
            self.record(
                self.step,
                "drop",
                msg.kind.as_str(),
                msg.from,
                msg.to,
                Some(msg.id),
                &bytes,
                why.to_string(),
            );
            return;
        }
        self.record(
            self.step,
            "deliver",
            msg.kind.as_str(),
            msg.from,
            msg.to,
            Some(msg.id),
            &bytes,
            msg.payload.summary(),
        );
        match (msg.to, msg.payload) {
            (Endpoint::Sequencer, Payload::Send { label, intent }) => {
                let response = match self.log.submit(intent) {
                    Ok(p) => GatewayResponse::Position(p),
                    Err(e) => GatewayResponse::Error {
                        code: "Rejected".into(),
                        msg: e.to_string(),
                    },
                };
                self.send(
                    Endpoint::Sequencer,
                    Endpoint::Client,
                    MsgKind::Gateway,
                    Payload::SendReply { label, response },
                );
            }
            (Endpoint::Client, Payload::SendReply { label, response }) => {
                self.sends.insert(label, response);
            }
            (Endpoint::Client, Payload::CallReply { label, response }) => {
                let Endpoint::Node(node) = msg.from else {
                    return;
                };
                let issued = self.call_issued.get(&label).copied().unwrap_or(0);
                self.calls.insert(
                    label,
                    CallRecord {
                        node,
                        issued,
                        answered: self.step,
                        response,
                    },
                );
            }
            (Endpoint::Node(n), Payload::Batch { .. }) => {
                self.sync(n);
                self.advance(n);
            }
            (Endpoint::Node(n), Payload::Call { label, request }) => {
                let (response, done) = self.local_call(n, &request);
                // the reply leaves once any multicast work has finished
                let departs = done.max(self.step);
                self.send_from(
                    departs,
                    Endpoint::Node(n),
                    Endpoint::Client,
                    MsgKind::Gateway,
                    Payload::CallReply { label, response },
                );
            }
            (
                Endpoint::Node(n),
                Payload::Pull {
                    from,
                    through,
                    hosted,
                },
            ) => {
                let node = &self.nodes[&n].node;
                let through = through.min(node.frontier().global);
                let traces = if !node.is_archival() || from > through {
                    Vec::new()
                } else {
                    node.serve_traces(&hosted, from..=through)
                        .unwrap_or_default()
                };
                let through = if node.is_archival() { through } else { 0 };
                if let Endpoint::Node(_) = msg.from {
                    self.send(
                        Endpoint::Node(n),
                        msg.from,
                        MsgKind::EffectsPull,
                        Payload::PullReply { through, traces },
                    );
                }
            }
            (Endpoint::Node(n), Payload::PullReply { through, traces }) => {
                self.nodes
                    .get_mut(&n)
                    .expect("node")
                    .node
                    .learn_traces(through, traces);
                self.advance(n);
            }
            _ => {}
        }
    }

    /// Reads sealed batches this node has not seen from the log.
    fn sync(&mut self, n: NodeId) {
        let sn = self.nodes.get_mut(&n).expect("node");
        let known = sn.node.batches().len();
        for b in &self.log.sealed_batches()[known..] {
            let entries = if b.is_empty() {
                Vec::new()
            } else {
                self.log.read(b.range.clone()).expect("sealed range")
            };
            sn.node
                .learn_batch(b.clone(), entries)
                .expect("batches arrive in order");
        }
    }

    fn advance(&mut self, n: NodeId) {
        let sn = self.nodes.get_mut(&n).expect("node");
        let before = sn.node.frontier().global;
        let target = sn.node.known_sealed();
        let result = if sn.config.parallel {
            let mut r = Ok(());
            while sn.node.frontier().global < target {
                let at = sn.node.frontier().global;
                if let Err(e) = sn.node.parallel_apply(target) {
                    r = Err(e);
                    break;
                }
                if sn.node.frontier().global == at {
                    break;
                }
            }
            r
        } else {
            sn.node.run_until(target).map(|_| ())
        };
        let after = sn.node.frontier().global;
        let old = sn.status;
        sn.status = match &result {
            Ok(()) => NodeStatus::Running,
            Err(NodeError::EffectGap { position }) => NodeStatus::Stalled(*position),
            Err(NodeError::Fatal { position, .. }) => NodeStatus::Fatal(*position),
            Err(_) => NodeStatus::Fatal(after + 1),
        };
        let status = sn.status;
        if after > before {
            let mut state = Vec::new();
            for s in sn.node.hosted() {
                state.extend_from_slice(&sn.node.network_digest(s).expect("hosted"));
            }
            self.record(
                self.step,
                "apply",
                "",
                Endpoint::Node(n),
                Endpoint::Node(n),
                None,
                &state,
                format!("frontier {before} -> {after}"),
            );
        }
        if status != old {
            match (status, &result) {
                (NodeStatus::Stalled(p), _) => {
                    self.record(
                        self.step,
                        "stall",
                        "",
                        Endpoint::Node(n),
                        Endpoint::Node(n),
                        None,
                        b"",
                        format!("waiting for records at {p}"),
                    );
                }
                (NodeStatus::Fatal(p), Err(e)) => {
                    let why = e.to_string();
                    self.record(
                        self.step,
                        "fatal",
                        "",
                        Endpoint::Node(n),
                        Endpoint::Node(n),
                        None,
                        why.as_bytes(),
                        format!("position {p}: {why}"),
                    );
                }
                _ => {}
            }
        }
    }

    /// Runs a call on node `n` with multicast access to the rest of the
    /// network. Returns the response and the step it is ready.
    fn local_call(&mut self, n: NodeId, request: &GatewayRequest) -> (GatewayResponse, u64) {
        let mut sn = self.nodes.remove(&n).expect("node");
        let fork = sn.node.world().fork().expect("memory-backed fork");
        self.busy.insert(n, (sn.node.hosted().clone(), fork));
        let mut env = SimEnv {
            sim: self,
            node: n,
            now: 0,
            depth: 0,
            parent_deadline: None,
            rng: &mut sn.rng,
        };
        env.now = env.sim.step;
        let response = sn.node.call(request, &mut env);
        let done = env.now;
        self.busy.remove(&n);
        self.nodes.insert(n, sn);
        (response, done)
    }

    /// The network as it will be at `step`, given the fault schedule.
    fn net_at(&self, step: u64) -> NetState {
        let mut net = self.net.clone();
        for (_, f) in self.faults.iter().take_while(|(s, _)| *s <= step) {
            net.apply(f);
        }
        net
    }

    /// No messages in flight, nothing scheduled, and no stalled node that a
    /// reachable archival peer could unblock.
    fn quiescent(&self) -> bool {
        if !self.queue.is_empty() || !self.faults.is_empty() || !self.actions.is_empty() {
            return false;
        }
        if self.config.seal_every.is_some() && !self.log.open_batch().is_empty() {
            return false;
        }
        !self.nodes.iter().any(|(&n, sn)| {
            let NodeStatus::Stalled(_) = sn.status else {
                return false;
            };
            let Some(peer) = sn
                .config
                .archival_peer
                .as_ref()
                .and_then(|p| self.names.get(p))
            else {
                return false;
            };
            let p = &self.nodes[peer];
            !self.net.crashed.contains(&n)
                && self
                    .net
                    .passes(Endpoint::Node(n), Endpoint::Node(*peer))
                    .is_ok()
                && self
                    .net
                    .passes(Endpoint::Node(*peer), Endpoint::Node(n))
                    .is_ok()
                && p.node.is_archival()
                && p.node.frontier().global > sn.node.remote_through()
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        step: u64,
        event: &str,
        kind: &str,
        from: Endpoint,
        to: Endpoint,
        msg: Option<u64>,
        payload: &[u8],
        detail: String,
    ) {
        self.trace.push(TraceRecord {
            step,
            event: event.to_string(),
            kind: kind.to_string(),
            from: from.to_string(),
            to: to.to_string(),
            msg,
            digest: short_digest(payload),
            detail,
        });
    }
}

/// Node environment inside the simulation.
struct SimEnv<'s> {
    sim: &'s mut Sim,
    node: NodeId,
    now: u64,
    /// Multicast nesting level of the code this environment serves.
    depth: u32,
    parent_deadline: Option<u64>,
    rng: &'s mut ChaCha8Rng,
}

impl InstanceEnv for SimEnv<'_> {
    fn node_id(&self) -> NodeId {
        self.node
    }

    fn now(&self) -> u64 {
        self.now
    }

    fn random(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn upc(
        &mut self,
        _origin: &ServiceId,
        call: &UpcCall,
        eligible: Option<Vec<NodeId>>,
        quorum: usize,
    ) -> Result<Value, UpcError> {
        let call_id = format!("u{}", self.sim.next_upc);
        self.sim.next_upc += 1;
        let issue = Issue {
            call_id,
            origin: self.node,
            now: self.now,
            depth: self.depth,
            parent_deadline: self.parent_deadline,
        };
        let outcome = upc::invoke(
            &mut Fabric { sim: self.sim },
            &issue,
            call,
            eligible,
            quorum,
        );
        self.now = self.now.max(outcome.completed);
        let detail = format!(
            "{} {}.{} -> {}",
            outcome.trace.call_id, call.service, call.handler, outcome.trace.result
        );
        self.sim.record(
            outcome.completed,
            "upc",
            "",
            Endpoint::Node(self.node),
            Endpoint::Node(self.node),
            None,
            outcome.trace.result.as_bytes(),
            detail,
        );
        self.sim.upc_traces.push(outcome.trace);
        outcome.result
    }
}

struct Fabric<'s> {
    sim: &'s mut Sim,
}

impl UpcFabric for Fabric<'_> {
    fn hosts(&self, service: &ServiceId) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .sim
            .nodes
            .iter()
            .filter(|(_, sn)| sn.node.hosts(service))
            .map(|(&n, _)| n)
            .chain(
                self.sim
                    .busy
                    .iter()
                    .filter(|(_, (hosted, _))| hosted.contains(service))
                    .map(|(&n, _)| n),
            )
            .collect();
        out.sort();
        out.dedup();
        out
    }

    fn exchange(&mut self, req: &UpcRequest, target: NodeId) -> Exchange {
        let sim = &mut *self.sim;
        let (from, to) = (Endpoint::Node(req.origin), Endpoint::Node(target));
        let id = sim.next_msg;
        sim.next_msg += 1;
        let arrive = req.sent + sim.delay();
        let payload = req.payload();
        sim.record(
            req.sent,
            "send",
            MsgKind::UpcRequest.as_str(),
            from,
            to,
            Some(id),
            &payload,
            format!(
                "deliver {arrive}; {} {}.{}",
                req.call_id, req.service, req.handler
            ),
        );
        if let Err(why) = sim.net_at(arrive).passes(from, to) {
            sim.record(
                arrive,
                "drop",
                MsgKind::UpcRequest.as_str(),
                from,
                to,
                Some(id),
                &payload,
                why.to_string(),
            );
            return Exchange::Lost;
        }
        sim.record(
            arrive,
            "deliver",
            MsgKind::UpcRequest.as_str(),
            from,
            to,
            Some(id),
            &payload,
            req.call_id.clone(),
        );

        let caller = sim
            .nodes
            .get(&req.origin)
            .map(|sn| sn.node.name().to_string())
            .or_else(|| {
                sim.busy
                    .contains_key(&req.origin)
                    .then(|| format!("n{}", req.origin.0))
            })
            .and_then(|name| Address::named(&name))
            .unwrap_or(Address::ZERO);
        let (result, done) = if let Some(mut sn) = sim.nodes.remove(&target) {
            let fork = sn.node.world().fork().expect("memory-backed fork");
            sim.busy.insert(target, (sn.node.hosted().clone(), fork));
            let mut env = SimEnv {
                sim: &mut *sim,
                node: target,
                now: arrive,
                depth: req.depth + 1,
                parent_deadline: Some(req.deadline),
                rng: &mut sn.rng,
            };
            let r = sn.node.world_mut().exec_upc_handler(
                &req.service,
                &req.handler,
                &req.args,
                caller,
                &mut env,
            );
            let done = env.now;
            sim.busy.remove(&target);
            sim.nodes.insert(target, sn);
            (r, done)
        } else {
            // the target is itself waiting on this call chain; it answers
            // from a copy of its state, dropped with any writes once the
            // chain ends
            let (hosted, mut world) = sim.busy.remove(&target).expect("target is a node");
            let mut rng = ChaCha8Rng::seed_from_u64(sim.config.seed ^ id);
            let mut env = SimEnv {
                sim: &mut *sim,
                node: target,
                now: arrive,
                depth: req.depth + 1,
                parent_deadline: Some(req.deadline),
                rng: &mut rng,
            };
            let r = world.exec_upc_handler(&req.service, &req.handler, &req.args, caller, &mut env);
            let done = env.now;
            sim.busy.insert(target, (hosted, world));
            (r, done)
        };
        let payload: Result<Value, String> = result.map_err(|e| e.code());
        let bytes = match &payload {
            Ok(v) => v.encode(),
            Err(e) => e.as_bytes().to_vec(),
        };
        let rid = sim.next_msg;
        sim.next_msg += 1;
        let back = done + sim.delay();
        sim.record(
            done,
            "send",
            MsgKind::UpcResponse.as_str(),
            to,
            from,
            Some(rid),
            &bytes,
            format!("deliver {back}; {}", req.call_id),
        );
        if let Err(why) = sim.net_at(back).passes(to, from) {
            sim.record(
                back,
                "drop",
                MsgKind::UpcResponse.as_str(),
                to,
                from,
                Some(rid),
                &bytes,
                why.to_string(),
            );
            return Exchange::Lost;
        }
        sim.record(
            back,
            "deliver",
            MsgKind::UpcResponse.as_str(),
            to,
            from,
            Some(rid),
            &bytes,
            req.call_id.clone(),
        );
        Exchange::Response {
            arrival: back,
            payload,
        }
    }
}
