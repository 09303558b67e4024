//! A node executing its slice of the sealed log.
//!
//! A node hosts a subset of the deployed services. Entries addressed to a
//! hosted service are executed locally; calls those entries make into
//! services the node does not host are answered from an archival peer's
//! recorded traces. Entries addressed elsewhere only matter if they reached a
//! hosted service, in which case the recorded calls into hosted services are
//! re-executed at that position. Either way hosted state advances strictly
//! in global log order.

mod config;
mod gateway;
mod parallel;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::dma::{read_root_value, DmaError, PersistReport, Region, RootInfo};
use crate::fco_log::{Batch, LogEntry};
use crate::ids::{NodeId, Position, ServiceId};
use crate::runtime::{
    CallError, CallResult, EffectRecord, EntryTrace, ExecOptions, LyquidBundle, RuntimeError, World,
};
use crate::value::Value;

pub use config::NodeConfig;
pub use gateway::{
    serve_lines, serve_tcp, GatewayRequest, GatewayResponse, RequestKind, DEFAULT_SEND_GAS,
};
pub use parallel::ParallelReport;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostingProfile {
    pub hosted: BTreeSet<ServiceId>,
    pub archival: bool,
}

impl HostingProfile {
    pub fn selective(hosted: impl IntoIterator<Item = ServiceId>) -> Self {
        HostingProfile {
            hosted: hosted.into_iter().collect(),
            archival: false,
        }
    }

    pub fn archival() -> Self {
        HostingProfile {
            hosted: BTreeSet::new(),
            archival: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExecutionFrontier {
    pub per_service: BTreeMap<ServiceId, Position>,
    pub global: Position,
}

/// What a node did with one log position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Applied {
    /// Target hosted: executed locally.
    Executed {
        outcome: CallResult,
        /// (source, target) of inner calls run against local state.
        inline: Vec<(ServiceId, ServiceId)>,
        /// (source, target) of inner calls answered from recorded traces.
        external: Vec<(ServiceId, ServiceId)>,
    },
    /// Target not hosted, but it called hosted services: those calls were
    /// re-executed from the archival record.
    ViaEffects { calls: Vec<(ServiceId, ServiceId)> },
    /// Nothing here concerns hosted state.
    Skipped { failed: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NodeError {
    #[error("no effect records available for position {position}")]
    EffectGap { position: Position },
    #[error("requested through {requested} but executed only through {frontier}")]
    FrontierBehind {
        requested: Position,
        frontier: Position,
    },
    #[error("unknown root {0}")]
    UnknownRoot(String),
    #[error("service {0} is not hosted here")]
    NotHosted(ServiceId),
    #[error("not an archival node")]
    NotArchival,
    #[error("cannot decide position {position}: {error}")]
    Fatal {
        position: Position,
        error: CallError,
    },
    #[error("no state kept for position {0}")]
    UnknownSnapshot(Position),
    #[error("batch starts at {got} but the node expects {expected}")]
    BatchGap { expected: Position, got: Position },
    #[error(transparent)]
    Memory(#[from] DmaError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

/// Recorded traces learned from an archival peer.
#[derive(Default)]
pub(crate) struct Remote {
    pub traces: BTreeMap<Position, EntryTrace>,
    /// Every relevant trace at or below this position is known.
    pub through: Position,
}

pub struct Node {
    id: NodeId,
    name: String,
    profile: HostingProfile,
    hosted: BTreeSet<ServiceId>,
    deployed: BTreeMap<ServiceId, Arc<LyquidBundle>>,
    pub(crate) world: World,
    entries: Vec<LogEntry>,
    batches: Vec<Batch>,
    frontier: ExecutionFrontier,
    /// Own traces (archival nodes only).
    traces: BTreeMap<Position, EntryTrace>,
    pub(crate) remote: Remote,
    applied: BTreeMap<Position, Applied>,
    parallel_reports: Vec<ParallelReport>,
}

impl Node {
    /// A node that knows every deployed bundle but hosts only its profile's
    /// share (everything, if archival). Hosted services start at genesis.
    pub fn new(
        id: NodeId,
        name: &str,
        profile: HostingProfile,
        deployed: &[Arc<LyquidBundle>],
    ) -> Result<Node, NodeError> {
        let all: BTreeSet<ServiceId> = deployed.iter().map(|b| b.name().clone()).collect();
        let hosted = if profile.archival {
            all.clone()
        } else {
            if let Some(s) = profile.hosted.iter().find(|s| !all.contains(s)) {
                return Err(RuntimeError::UnknownService(s.clone()).into());
            }
            profile.hosted.clone()
        };
        let mut world = World::new();
        for b in deployed {
            if hosted.contains(b.name()) {
                world.deploy_arc(b.clone())?;
                world
                    .service_mut(b.name())
                    .unwrap()
                    .space_mut()
                    .snapshot(0)?;
            }
        }
        let frontier = ExecutionFrontier {
            per_service: hosted.iter().map(|s| (s.clone(), 0)).collect(),
            global: 0,
        };
        Ok(Node {
            id,
            name: name.to_string(),
            profile,
            hosted,
            deployed: deployed
                .iter()
                .map(|b| (b.name().clone(), b.clone()))
                .collect(),
            world,
            entries: Vec::new(),
            batches: Vec::new(),
            frontier,
            traces: BTreeMap::new(),
            remote: Remote::default(),
            applied: BTreeMap::new(),
            parallel_reports: Vec::new(),
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn profile(&self) -> &HostingProfile {
        &self.profile
    }

    pub fn is_archival(&self) -> bool {
        self.profile.archival
    }

    pub fn hosted(&self) -> &BTreeSet<ServiceId> {
        &self.hosted
    }

    pub fn hosts(&self, s: &ServiceId) -> bool {
        self.hosted.contains(s)
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut World {
        &mut self.world
    }

    pub fn frontier(&self) -> &ExecutionFrontier {
        &self.frontier
    }

    /// Last position covered by a batch this node knows about.
    pub fn known_sealed(&self) -> Position {
        self.batches.last().map_or(0, |b| *b.range.end())
    }

    pub fn batches(&self) -> &[Batch] {
        &self.batches
    }

    pub fn applied(&self, position: Position) -> Option<&Applied> {
        self.applied.get(&position)
    }

    pub fn own_trace(&self, position: Position) -> Option<&EntryTrace> {
        self.traces.get(&position)
    }

    pub fn remote_through(&self) -> Position {
        self.remote.through
    }

    pub fn parallel_reports(&self) -> &[ParallelReport] {
        &self.parallel_reports
    }

    pub fn entry(&self, position: Position) -> Option<&LogEntry> {
        position
            .checked_sub(1)
            .and_then(|i| self.entries.get(i as usize))
    }

    /// Accepts the next sealed batch with its entries.
    pub fn learn_batch(&mut self, batch: Batch, entries: Vec<LogEntry>) -> Result<(), NodeError> {
        let expected = self.known_sealed() + 1;
        if *batch.range.start() != expected || batch.number != self.batches.len() as u64 + 1 {
            return Err(NodeError::BatchGap {
                expected,
                got: *batch.range.start(),
            });
        }
        let positions: Vec<Position> = entries.iter().map(|e| e.position).collect();
        if positions != batch.range.clone().collect::<Vec<_>>() {
            return Err(NodeError::BatchGap {
                expected,
                got: positions.first().copied().unwrap_or(expected),
            });
        }
        self.entries.extend(entries);
        self.batches.push(batch);
        Ok(())
    }

    /// Adds traces from an archival peer covering every position through
    /// `through`.
    pub fn learn_traces(&mut self, through: Position, traces: Vec<EntryTrace>) {
        for t in traces {
            if t.position <= through {
                self.remote.traces.insert(t.position, t);
            }
        }
        self.remote.through = self.remote.through.max(through);
    }

    /// True when entry `p` can be applied without more archival input.
    pub fn can_apply(&self, p: Position) -> bool {
        p <= self.remote.through
            || self.is_archival()
            || self
                .entry(p)
                .is_some_and(|e| self.hosts(&e.intent.target) && self.self_contained(e))
    }

    /// Whether an entry's declared calls stay within hosted services.
    fn self_contained(&self, e: &LogEntry) -> bool {
        reach(&self.deployed, &e.intent.target, &e.intent.method)
            .iter()
            .all(|s| self.hosts(s))
    }

    /// Executes sealed entries in order up to `position`. Stops at the first
    /// entry it cannot decide and reports why; nothing past it is applied.
    pub fn run_until(&mut self, position: Position) -> Result<&ExecutionFrontier, NodeError> {
        let limit = position.min(self.known_sealed());
        while self.frontier.global < limit {
            let p = self.frontier.global + 1;
            let entry = self.entries[(p - 1) as usize].clone();
            let step = apply_entry(
                &mut self.world,
                &self.hosted,
                &entry,
                self.remote.traces.get(&p),
                p <= self.remote.through || self.profile.archival,
                None,
            )
            .map_err(|e| e.at(p))?;
            self.commit(p, step.applied, step.trace);
        }
        Ok(&self.frontier)
    }

    fn commit(&mut self, p: Position, applied: Applied, trace: Option<EntryTrace>) {
        if self.profile.archival {
            if let Some(t) = trace {
                self.traces.insert(p, t);
            }
        }
        self.applied.insert(p, applied);
        self.frontier.global = p;
        for f in self.frontier.per_service.values_mut() {
            *f = p;
        }
        if self
            .batches
            .iter()
            .any(|b| !b.is_empty() && *b.range.end() == p)
        {
            for s in &self.hosted {
                let space = self.world.service_mut(s).expect("hosted").space_mut();
                space.snapshot(p).expect("batch ends increase");
            }
        }
    }

    /// Traces a node hosting `hosted` needs for `range`: entries that made
    /// inner calls and either target a hosted service or reached one.
    pub fn serve_traces(
        &self,
        hosted: &BTreeSet<ServiceId>,
        range: std::ops::RangeInclusive<Position>,
    ) -> Result<Vec<EntryTrace>, NodeError> {
        self.check_serving(&range)?;
        Ok(self
            .traces
            .range(range)
            .map(|(_, t)| t)
            .filter(|t| {
                !t.records.is_empty()
                    && (hosted.contains(&t.target)
                        || t.records.iter().any(|r| hosted.contains(&r.target)))
            })
            .cloned()
            .collect())
    }

    /// Committed inner calls into `targets` within `range`, ascending by
    /// (position, call index).
    pub fn serve_effects(
        &self,
        targets: &BTreeSet<ServiceId>,
        range: std::ops::RangeInclusive<Position>,
    ) -> Result<Vec<EffectRecord>, NodeError> {
        self.check_serving(&range)?;
        Ok(self
            .traces
            .range(range)
            .filter(|(_, t)| t.is_ok())
            .flat_map(|(_, t)| t.records_for(targets).cloned())
            .collect())
    }

    fn check_serving(&self, range: &std::ops::RangeInclusive<Position>) -> Result<(), NodeError> {
        if !self.profile.archival {
            return Err(NodeError::NotArchival);
        }
        if !range.is_empty() && *range.end() > self.frontier.global {
            return Err(NodeError::FrontierBehind {
                requested: *range.end(),
                frontier: self.frontier.global,
            });
        }
        Ok(())
    }

    /// Value of a root as of `position`: read directly when the node is
    /// there or kept a snapshot, otherwise replayed from the latest earlier
    /// snapshot. Instance roots only have a current value.
    pub fn serve_state(
        &mut self,
        service: &ServiceId,
        root: &str,
        position: Position,
    ) -> Result<Value, NodeError> {
        if !self.hosts(service) {
            return Err(NodeError::NotHosted(service.clone()));
        }
        if position > self.frontier.global {
            return Err(NodeError::FrontierBehind {
                requested: position,
                frontier: self.frontier.global,
            });
        }
        let svc = self.world.service_mut(service).expect("hosted");
        let info = root_info(svc, root)?;
        if position == self.frontier.global || Region::of(info.addr) == Region::Instance {
            return Ok(self.world.read_root(service, root)?);
        }
        let space = svc.space_mut();
        if let Some(snap) = space.snapshot_at(position) {
            return Ok(read_root_value(&mut space.view_at(snap)?, &info)?);
        }
        let base = space
            .snapshot_before(position)
            .ok_or(NodeError::UnknownSnapshot(position))?;
        let mut past = World::new();
        for s in &self.hosted {
            let svc = self.world.service_mut(s).expect("hosted");
            let fork = svc.space_mut().fork_network_at(base)?;
            past.attach(svc.bundle().clone(), fork)?;
        }
        for p in base.position + 1..=position {
            let entry = &self.entries[(p - 1) as usize];
            apply_entry(
                &mut past,
                &self.hosted,
                entry,
                self.remote.traces.get(&p),
                true,
                None,
            )
            .map_err(|e| e.at(p))?;
        }
        Ok(past.read_root(service, root)?)
    }

    pub fn read_root(&mut self, service: &ServiceId, root: &str) -> Result<Value, NodeError> {
        if !self.hosts(service) {
            return Err(NodeError::NotHosted(service.clone()));
        }
        self.world.read_root(service, root).map_err(|e| match e {
            RuntimeError::UnknownRoot(r) => NodeError::UnknownRoot(r),
            other => other.into(),
        })
    }

    pub fn network_digest(&self, service: &ServiceId) -> Option<[u8; 32]> {
        self.world.network_digest(service)
    }

    /// Writes every hosted service's image under `dir/<service>`.
    pub fn save_to(&mut self, dir: &Path) -> Result<Vec<(ServiceId, PersistReport)>, NodeError> {
        let mut out = Vec::new();
        for s in self.hosted.clone() {
            let space = self.world.service_mut(&s).expect("hosted").space_mut();
            out.push((s.clone(), space.save_to(&dir.join(s.as_str()))?));
        }
        Ok(out)
    }

    pub(crate) fn deployed(&self) -> &BTreeMap<ServiceId, Arc<LyquidBundle>> {
        &self.deployed
    }
}

fn root_info(svc: &mut crate::runtime::Service, root: &str) -> Result<RootInfo, NodeError> {
    for region in [Region::Network, Region::Instance] {
        if let Some(info) = svc
            .space_mut()
            .roots(region)?
            .into_iter()
            .find(|r| r.name == root)
        {
            return Ok(info);
        }
    }
    Err(NodeError::UnknownRoot(root.to_string()))
}

/// Services an entry may touch according to declared callees, including
/// the target and everything reachable through callee bundles.
pub(crate) fn reach(
    deployed: &BTreeMap<ServiceId, Arc<LyquidBundle>>,
    target: &ServiceId,
    method: &str,
) -> BTreeSet<ServiceId> {
    let mut out = BTreeSet::from([target.clone()]);
    let mut todo: Vec<ServiceId> = deployed
        .get(target)
        .and_then(|b| b.network_method(method))
        .map(|m| m.callees.iter().cloned().collect())
        .unwrap_or_default();
    while let Some(s) = todo.pop() {
        if out.insert(s.clone()) {
            if let Some(b) = deployed.get(&s) {
                todo.extend(b.all_callees());
            }
        }
    }
    out
}

pub(crate) struct Step {
    pub applied: Applied,
    pub trace: Option<EntryTrace>,
    pub undo: Vec<crate::runtime::Undo>,
}

/// Why one entry could not be applied, before the position is attached.
pub(crate) enum StepError {
    Gap,
    Call(CallError),
}

impl StepError {
    pub(crate) fn at(self, position: Position) -> NodeError {
        match self {
            StepError::Gap => NodeError::EffectGap { position },
            StepError::Call(error) => NodeError::Fatal { position, error },
        }
    }
}

/// Applies one entry to `world`, which holds the hosted services (or, in a
/// parallel lane, the lane's share of them).
pub(crate) fn apply_entry(
    world: &mut World,
    hosted: &BTreeSet<ServiceId>,
    entry: &LogEntry,
    remote: Option<&EntryTrace>,
    covered: bool,
    foreign: Option<&BTreeSet<ServiceId>>,
) -> Result<Step, StepError> {
    let target = &entry.intent.target;
    if hosted.contains(target) {
        let opts = ExecOptions {
            recorded: remote,
            foreign,
        };
        return match world.exec_network(entry, opts) {
            Ok(ex) => {
                if let Some(r) = remote {
                    if r.outcome != ex.trace.outcome {
                        world.rollback(&ex.undo);
                        return Err(StepError::Call(CallError::Divergence(format!(
                            "local outcome {:?} but the archival record says {:?}",
                            ex.trace.outcome, r.outcome
                        ))));
                    }
                }
                let (inline, external) = ex
                    .trace
                    .records
                    .iter()
                    .map(|r| (r.source.clone(), r.target.clone()))
                    .partition(|(_, t)| world.contains(t));
                Ok(Step {
                    applied: Applied::Executed {
                        outcome: ex.trace.outcome.clone(),
                        inline,
                        external,
                    },
                    trace: Some(ex.trace),
                    undo: ex.undo,
                })
            }
            Err(CallError::UnresolvedEffect { .. }) => Err(StepError::Gap),
            Err(e) => Err(StepError::Call(e)),
        };
    }
    if !covered {
        return Err(StepError::Gap);
    }
    let Some(trace) = remote else {
        return Ok(Step {
            applied: Applied::Skipped { failed: false },
            trace: None,
            undo: Vec::new(),
        });
    };
    match world.replay_entry(entry, trace, foreign) {
        Ok(r) if r.skipped_failed => Ok(Step {
            applied: Applied::Skipped { failed: true },
            trace: None,
            undo: Vec::new(),
        }),
        Ok(r) => Ok(Step {
            applied: if r.applied.is_empty() {
                Applied::Skipped { failed: false }
            } else {
                Applied::ViaEffects {
                    calls: r
                        .applied
                        .iter()
                        .map(|c| (c.source.clone(), c.target.clone()))
                        .collect(),
                }
            },
            trace: None,
            undo: r.undo,
        }),
        Err(CallError::UnresolvedEffect { .. }) => Err(StepError::Gap),
        Err(e) => Err(StepError::Call(e)),
    }
}

#[cfg(test)]
mod tests;
