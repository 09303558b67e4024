use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::ctx::{Ctx, CtxKind, InstanceEnv};
use super::{
    CallError, CallResult, EffectRecord, EntryTrace, Event, Gas, LyquidBundle, RuntimeError,
    WriteSummary, CALL_GAS, INSTANCE_GAS, MAX_CALL_DEPTH,
};
use crate::dma::{
    define_root, read_root_value, AccessMode, ByteMemory, DmaError, MemorySpace, RawAccess, Region,
    TypeTag,
};
use crate::fco_log::LogEntry;
use crate::ids::{Position, ServiceId};
use crate::value::{Address, Value};

/// A hosted service: its bundle, its memory space and its resolved roots.
pub struct Service {
    pub(crate) bundle: Arc<LyquidBundle>,
    pub(crate) space: MemorySpace,
    pub(crate) roots: BTreeMap<String, (TypeTag, u32)>,
}

impl Service {
    pub fn bundle(&self) -> &Arc<LyquidBundle> {
        &self.bundle
    }

    pub fn space(&self) -> &MemorySpace {
        &self.space
    }

    pub fn space_mut(&mut self) -> &mut MemorySpace {
        &mut self.space
    }

    pub fn root_names(&self) -> impl Iterator<Item = &str> {
        self.roots.keys().map(String::as_str)
    }
}

/// Bytes overwritten by one write, kept until the entry commits.
#[derive(Debug, Clone)]
pub struct Undo {
    pub service: ServiceId,
    pub addr: u32,
    pub old: Vec<u8>,
}

/// Where recorded effects come from when a call targets a service that is
/// not in the world.
#[derive(Clone, Copy, Default)]
pub struct ExecOptions<'t> {
    /// Archival trace for this entry.
    pub recorded: Option<&'t EntryTrace>,
    /// Services hosted by this node but deliberately absent from this world
    /// (another parallel lane owns them). Calling one is an undeclared call.
    pub foreign: Option<&'t BTreeSet<ServiceId>>,
}

pub struct Executed {
    pub trace: EntryTrace,
    pub(crate) undo: Vec<Undo>,
}

pub struct Replayed {
    /// Recorded calls that were re-executed against local services.
    pub applied: Vec<EffectRecord>,
    /// The archival execution failed, so there was nothing to apply.
    pub skipped_failed: bool,
    pub(crate) undo: Vec<Undo>,
}

#[derive(Default)]
pub struct World {
    pub(crate) services: BTreeMap<ServiceId, Service>,
}

impl World {
    pub fn new() -> Self {
        World::default()
    }

    pub fn deploy(&mut self, bundle: LyquidBundle) -> Result<ServiceId, RuntimeError> {
        self.deploy_arc(Arc::new(bundle))
    }

    /// Creates the service's memory space and initializes every root from
    /// its initializer.
    pub fn deploy_arc(&mut self, bundle: Arc<LyquidBundle>) -> Result<ServiceId, RuntimeError> {
        bundle.validate()?;
        let name = bundle.name().clone();
        if self.services.contains_key(&name) {
            return Err(RuntimeError::DuplicateName(name.to_string()));
        }
        let mut space = MemorySpace::new(name.clone());
        let mut roots = BTreeMap::new();
        for decl in bundle.roots() {
            space.set_mode(match decl.region {
                Region::Network => AccessMode::Sequenced,
                Region::Instance => AccessMode::Instance,
            });
            let info = define_root(&mut space, decl.region, &decl.name, decl.tag, &decl.init)
                .map_err(|e| match e {
                    DmaError::DuplicateRoot(n) => RuntimeError::DuplicateName(n),
                    other => RuntimeError::Memory(other),
                })?;
            roots.insert(info.name, (info.tag, info.addr));
        }
        space.set_mode(AccessMode::Instance);
        space.reset_stats();
        self.services.insert(
            name.clone(),
            Service {
                bundle,
                space,
                roots,
            },
        );
        Ok(name)
    }

    /// Hosts a service on an existing space (for example one reopened from
    /// disk), taking its roots from the space's root tables.
    pub fn attach(
        &mut self,
        bundle: Arc<LyquidBundle>,
        mut space: MemorySpace,
    ) -> Result<ServiceId, RuntimeError> {
        let name = bundle.name().clone();
        if self.services.contains_key(&name) {
            return Err(RuntimeError::DuplicateName(name.to_string()));
        }
        let mut roots = BTreeMap::new();
        for region in [Region::Network, Region::Instance] {
            for info in space.roots(region)? {
                roots.insert(info.name, (info.tag, info.addr));
            }
        }
        self.services.insert(
            name.clone(),
            Service {
                bundle,
                space,
                roots,
            },
        );
        Ok(name)
    }

    pub fn contains(&self, service: &ServiceId) -> bool {
        self.services.contains_key(service)
    }

    pub fn service(&self, service: &ServiceId) -> Option<&Service> {
        self.services.get(service)
    }

    pub fn service_mut(&mut self, service: &ServiceId) -> Option<&mut Service> {
        self.services.get_mut(service)
    }

    pub fn service_ids(&self) -> impl Iterator<Item = &ServiceId> {
        self.services.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.services.is_empty()
    }

    /// A detached copy of every service's current state. Writes to the copy
    /// never reach this world.
    pub fn fork(&self) -> Result<World, RuntimeError> {
        let mut out = World::new();
        for s in self.services.values() {
            out.attach(s.bundle.clone(), s.space.fork_current()?)?;
        }
        Ok(out)
    }

    /// Moves the named services into a new world.
    pub(crate) fn take(&mut self, ids: &BTreeSet<ServiceId>) -> World {
        let mut out = World::new();
        for id in ids {
            if let Some(s) = self.services.remove(id) {
                out.services.insert(id.clone(), s);
            }
        }
        out
    }

    pub(crate) fn merge(&mut self, other: World) {
        self.services.extend(other.services);
    }

    /// Current value of a root in either region, bypassing access rules.
    pub fn read_root(&mut self, service: &ServiceId, root: &str) -> Result<Value, RuntimeError> {
        let svc = self
            .services
            .get_mut(service)
            .ok_or_else(|| RuntimeError::UnknownService(service.clone()))?;
        let &(tag, addr) = svc
            .roots
            .get(root)
            .ok_or_else(|| RuntimeError::UnknownRoot(root.to_string()))?;
        let info = crate::dma::RootInfo {
            name: root.to_string(),
            tag,
            addr,
        };
        Ok(read_root_value(&mut RawAccess(&mut svc.space), &info)?)
    }

    pub fn network_digest(&self, service: &ServiceId) -> Option<[u8; 32]> {
        self.services.get(service).map(|s| s.space.network_digest())
    }

    pub fn network_image(&self, service: &ServiceId) -> Option<Vec<u8>> {
        self.services.get(service).map(|s| s.space.network_image())
    }

    pub(crate) fn rollback(&mut self, undo: &[Undo]) {
        for u in undo.iter().rev() {
            if let Some(svc) = self.services.get_mut(&u.service) {
                RawAccess(&mut svc.space)
                    .write(u.addr, &u.old)
                    .expect("undo target was writable when recorded");
            }
        }
    }

    /// Executes one sequenced entry. `Err` means the node could not decide
    /// the entry (missing or contradicting records); every write has been
    /// rolled back in that case. A deterministic failure of the entry is an
    /// `Ok` whose trace carries the error outcome.
    pub fn exec_network(
        &mut self,
        entry: &LogEntry,
        opts: ExecOptions<'_>,
    ) -> Result<Executed, CallError> {
        let intent = &entry.intent;
        if !self.contains(&intent.target) {
            return Err(CallError::UnknownService(intent.target.clone()));
        }
        let mut exec = Exec::new(
            self,
            Some(entry.position),
            Gas::new(intent.gas_limit),
            opts.recorded,
            opts.foreign,
            None,
        );
        let mut result = exec.gas.charge(CALL_GAS).and_then(|_| {
            exec.run_method(
                &intent.target,
                intent.caller,
                &intent.method,
                &intent.args,
                CtxKind::Network,
                0,
                None,
            )
        });
        result = exec.settle(result);
        let gas_used = exec.gas.used();
        let Exec {
            undo,
            records,
            events,
            ..
        } = exec;
        if let Err(e) = &result {
            if e.is_fatal() {
                self.rollback(&undo);
                return Err(e.clone());
            }
        }
        let (events, writes, undo) = match &result {
            Ok(_) => {
                let writes = summarize(&undo);
                (events, writes, undo)
            }
            Err(_) => {
                self.rollback(&undo);
                (Vec::new(), Vec::new(), Vec::new())
            }
        };
        Ok(Executed {
            trace: EntryTrace {
                position: entry.position,
                target: intent.target.clone(),
                method: intent.method.clone(),
                caller: intent.caller,
                outcome: result.map_err(|e| e.code()),
                gas_used,
                records,
                events,
                writes,
            },
            undo,
        })
    }

    /// Applies the recorded effects of an entry whose target is not hosted:
    /// every recorded call into a local service is re-executed at this
    /// position with its recorded caller, and must reproduce its recorded
    /// result.
    pub fn replay_entry(
        &mut self,
        entry: &LogEntry,
        trace: &EntryTrace,
        foreign: Option<&BTreeSet<ServiceId>>,
    ) -> Result<Replayed, CallError> {
        if trace.position != entry.position
            || trace.target != entry.intent.target
            || trace.method != entry.intent.method
        {
            return Err(CallError::Divergence(format!(
                "trace for position {} does not describe the logged entry",
                entry.position
            )));
        }
        if trace.outcome.is_err() {
            return Ok(Replayed {
                applied: Vec::new(),
                skipped_failed: true,
                undo: Vec::new(),
            });
        }
        let mut exec = Exec::new(
            self,
            Some(entry.position),
            Gas::new(u64::MAX),
            Some(trace),
            foreign,
            None,
        );
        let mut result = Ok(());
        let mut i = 0u32;
        while (i as usize) < trace.records.len() {
            let rec = &trace.records[i as usize];
            if rec.parent.is_some() || rec.end <= i {
                result = Err(CallError::Divergence("malformed record tree".into()));
                break;
            }
            result = exec.replay_subtree(i, 1);
            if result.is_err() {
                break;
            }
            i = rec.end;
        }
        let result = exec.settle(result.map(|_| Value::Bool(true)));
        let Exec { undo, records, .. } = exec;
        if let Err(e) = result {
            self.rollback(&undo);
            return Err(if e.is_fatal() {
                e
            } else {
                CallError::Divergence(format!("replay failed with {}", e.code()))
            });
        }
        let applied = records
            .into_iter()
            .filter(|r| self.contains(&r.target))
            .collect();
        Ok(Replayed {
            applied,
            skipped_failed: false,
            undo,
        })
    }

    pub fn exec_instance(
        &mut self,
        service: &ServiceId,
        method: &str,
        args: &[Value],
        caller: Address,
        env: &mut dyn InstanceEnv,
    ) -> Result<Value, CallError> {
        self.exec_local(
            CtxKind::Instance,
            service,
            method,
            args,
            caller,
            Some(env),
            false,
        )
    }

    pub fn exec_upc_handler(
        &mut self,
        service: &ServiceId,
        handler: &str,
        args: &[Value],
        caller: Address,
        env: &mut dyn InstanceEnv,
    ) -> Result<Value, CallError> {
        self.exec_local(
            CtxKind::Upc,
            service,
            handler,
            args,
            caller,
            Some(env),
            false,
        )
    }

    /// Runs a network method against current state and discards its writes.
    pub fn dry_run(
        &mut self,
        service: &ServiceId,
        method: &str,
        args: &[Value],
        caller: Address,
    ) -> Result<Value, CallError> {
        self.exec_local(CtxKind::Network, service, method, args, caller, None, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn exec_local(
        &mut self,
        kind: CtxKind,
        service: &ServiceId,
        method: &str,
        args: &[Value],
        caller: Address,
        env: Option<&mut dyn InstanceEnv>,
        discard: bool,
    ) -> Result<Value, CallError> {
        if !self.contains(service) {
            return Err(CallError::UnknownService(service.clone()));
        }
        // coerce here: the trait object lifetime cannot shrink inside the Option
        #[allow(clippy::needless_match)]
        let env: Option<&mut dyn InstanceEnv> = match env {
            Some(e) => Some(e),
            None => None,
        };
        let mut exec = Exec::new(self, None, Gas::new(INSTANCE_GAS), None, None, env);
        let result = exec.run_method(service, caller, method, args, kind, 0, None);
        let result = exec.settle(result);
        let undo = std::mem::take(&mut exec.undo);
        drop(exec);
        if discard || result.is_err() {
            self.rollback(&undo);
        }
        result
    }
}

fn summarize(undo: &[Undo]) -> Vec<WriteSummary> {
    let mut by: BTreeMap<&ServiceId, (u64, u64)> = BTreeMap::new();
    for u in undo {
        if Region::of(u.addr) == Region::Network {
            let e = by.entry(&u.service).or_default();
            e.0 += 1;
            e.1 += u.old.len() as u64;
        }
    }
    by.into_iter()
        .map(|(service, (writes, bytes))| WriteSummary {
            service: service.clone(),
            writes,
            bytes,
        })
        .collect()
}

/// State of one execution: shared by every frame of an entry (or of an
/// instance call).
pub(crate) struct Exec<'w> {
    pub(crate) world: &'w mut World,
    pub(crate) position: Option<Position>,
    pub(crate) gas: Gas,
    pub(crate) undo: Vec<Undo>,
    pub(crate) records: Vec<EffectRecord>,
    pub(crate) events: Vec<Event>,
    recorded: Option<&'w EntryTrace>,
    foreign: Option<&'w BTreeSet<ServiceId>>,
    fatal: Option<CallError>,
    failed: Option<CallError>,
    pub(crate) env: Option<&'w mut dyn InstanceEnv>,
}

impl<'w> Exec<'w> {
    fn new(
        world: &'w mut World,
        position: Option<Position>,
        gas: Gas,
        recorded: Option<&'w EntryTrace>,
        foreign: Option<&'w BTreeSet<ServiceId>>,
        env: Option<&'w mut dyn InstanceEnv>,
    ) -> Self {
        Exec {
            world,
            position,
            gas,
            undo: Vec::new(),
            records: Vec::new(),
            events: Vec::new(),
            recorded,
            foreign,
            fatal: None,
            failed: None,
            env,
        }
    }

    /// Final outcome of the execution. A failed inner call, exhausted gas or
    /// a fatal resolution problem overrides whatever the method returned, so
    /// a method cannot commit after swallowing one of those.
    fn settle(&mut self, result: Result<Value, CallError>) -> Result<Value, CallError> {
        if let Some(f) = self.fatal.take() {
            return Err(f);
        }
        if let Err(e) = &result {
            if e.is_fatal() {
                return result;
            }
        }
        if self.gas.exhausted() {
            return Err(CallError::GasExhausted);
        }
        if let Some(e) = self.failed.take() {
            return Err(e);
        }
        result
    }

    fn note_failure(&mut self, e: &CallError) {
        if e.is_fatal() {
            self.fatal.get_or_insert_with(|| e.clone());
        } else {
            self.failed.get_or_insert_with(|| e.clone());
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn run_method(
        &mut self,
        target: &ServiceId,
        caller: Address,
        method: &str,
        args: &[Value],
        kind: CtxKind,
        depth: u32,
        record: Option<u32>,
    ) -> Result<Value, CallError> {
        let svc = self
            .world
            .services
            .get(target)
            .ok_or_else(|| CallError::UnknownService(target.clone()))?;
        let handler = match kind {
            CtxKind::Network => svc.bundle.network_method(method).map(|m| m.handler.clone()),
            CtxKind::Instance => svc.bundle.instance_method(method).cloned(),
            CtxKind::Upc => svc.bundle.upc_handler(method).cloned(),
        }
        .ok_or_else(|| CallError::MethodNotFound {
            service: target.clone(),
            method: method.to_string(),
        })?;
        let mut ctx = Ctx {
            exec: self,
            service: target.clone(),
            caller,
            kind,
            depth,
            record,
        };
        handler(&mut ctx, args)
    }

    /// An inner call from `source` (running under record `parent`).
    pub(crate) fn invoke(
        &mut self,
        source: &ServiceId,
        parent: Option<u32>,
        target: &ServiceId,
        method: &str,
        args: Vec<Value>,
        depth: u32,
    ) -> Result<Value, CallError> {
        if depth > MAX_CALL_DEPTH {
            let e = CallError::CallDepth;
            self.note_failure(&e);
            return Err(e);
        }
        let index = self.records.len() as u32;
        self.records.push(EffectRecord {
            position: self.position.unwrap_or(0),
            index,
            end: index + 1,
            parent,
            source: source.clone(),
            target: target.clone(),
            method: method.to_string(),
            args: args.clone(),
            result: Err("pending".into()),
            gas_used: 0,
        });
        let before = self.gas.used();
        let result = if self.world.contains(target) {
            self.gas.charge(CALL_GAS).and_then(|_| {
                self.run_method(
                    target,
                    source.address(),
                    method,
                    &args,
                    CtxKind::Network,
                    depth,
                    Some(index),
                )
            })
        } else if self.foreign.is_some_and(|f| f.contains(target)) {
            Err(CallError::UndeclaredCall(target.clone()))
        } else {
            self.resolve_external(index, depth)
        };
        let end = self.records.len() as u32;
        let rec = &mut self.records[index as usize];
        rec.result = result.clone().map_err(|e| e.code());
        rec.gas_used = self.gas.used() - before;
        rec.end = end;
        if let Err(e) = &result {
            self.note_failure(e);
        }
        result
    }

    /// Result of a call into a service this world does not host, taken from
    /// the archival record at the same call index.
    fn resolve_external(&mut self, index: u32, depth: u32) -> Result<Value, CallError> {
        let position = self.position.unwrap_or(0);
        let unresolved = CallError::UnresolvedEffect { position, index };
        let Some(trace) = self.recorded else {
            return Err(unresolved);
        };
        let Some(rec) = trace.records.get(index as usize) else {
            return Err(unresolved);
        };
        let mine = &self.records[index as usize];
        if rec.target != mine.target || rec.method != mine.method || rec.args != mine.args {
            return Err(CallError::Divergence(format!(
                "call {index} at position {position} is {}.{} locally but {}.{} in the record",
                mine.target, mine.method, rec.target, rec.method
            )));
        }
        // the record's gas already includes the call overhead
        self.gas.charge(rec.gas_used)?;
        if rec.result.is_ok() {
            let mut j = index + 1;
            while j < rec.end {
                self.replay_subtree(j, depth + 1)?;
                j = trace.records[j as usize].end;
            }
        }
        result_to_call(&rec.result)
    }

    /// Re-establishes recorded call `j` and its descendants: calls into
    /// local services are executed, calls elsewhere are taken as recorded.
    fn replay_subtree(&mut self, j: u32, depth: u32) -> Result<(), CallError> {
        let trace = self.recorded.expect("replay needs a trace");
        let rec = &trace.records[j as usize];
        if self.records.len() as u32 != j || rec.end <= j {
            return Err(CallError::Divergence(format!(
                "record tree at position {} is out of step at call {j}",
                rec.position
            )));
        }
        if self.world.contains(&rec.target) {
            let saved = std::mem::replace(&mut self.gas, Gas::new(rec.gas_used));
            let result = self.invoke(
                &rec.source,
                rec.parent,
                &rec.target,
                &rec.method,
                rec.args.clone(),
                depth,
            );
            self.gas = saved;
            let mine = &self.records[j as usize];
            if result.map_err(|e| e.code()) != rec.result || mine.gas_used != rec.gas_used {
                return Err(CallError::Divergence(format!(
                    "re-executing {}.{} at position {} did not reproduce the record",
                    rec.target, rec.method, rec.position
                )));
            }
            Ok(())
        } else if self.foreign.is_some_and(|f| f.contains(&rec.target)) {
            Err(CallError::UndeclaredCall(rec.target.clone()))
        } else {
            self.records.push(rec.clone());
            if rec.result.is_ok() {
                let mut k = j + 1;
                while k < rec.end {
                    self.replay_subtree(k, depth + 1)?;
                    k = trace.records[k as usize].end;
                }
            }
            Ok(())
        }
    }
}

fn result_to_call(r: &CallResult) -> Result<Value, CallError> {
    r.clone().map_err(|code| CallError::from_code(&code))
}
