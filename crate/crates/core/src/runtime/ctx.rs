use primitive_types::U256;

use super::world::{Exec, Undo};
use super::{mem_gas, CallError, Gas, ARITH_GAS};
use crate::dma::{
    read_root_value, write_root_value, AccessMode, BlobRef, ByteMemory, Cell, DmaError, FixedMap,
    LogVec, MemorySpace, Region, RootInfo, TypeTag,
};
use crate::ids::{NodeId, Position, ServiceId};
use crate::upc::{Quorum, Selection, UpcCall, UpcError};
use crate::value::{Address, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtxKind {
    /// Sequenced execution of a log entry.
    Network,
    /// Local, unsequenced execution on one node.
    Instance,
    /// A multicast handler invoked by another node.
    Upc,
}

impl CtxKind {
    fn access_mode(self) -> AccessMode {
        match self {
            CtxKind::Network => AccessMode::Sequenced,
            CtxKind::Instance | CtxKind::Upc => AccessMode::Instance,
        }
    }
}

/// Node-local facts only instance code may observe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvQuery {
    Clock,
    Random,
    NodeId,
}

/// What a node offers to instance methods and handlers.
pub trait InstanceEnv {
    fn node_id(&self) -> NodeId;
    fn now(&self) -> u64;
    fn random(&mut self) -> u64;
    /// Performs a multicast call on behalf of `origin`. `eligible` is the
    /// resolved member list when the selection names one.
    fn upc(
        &mut self,
        origin: &ServiceId,
        call: &UpcCall,
        eligible: Option<Vec<NodeId>>,
        quorum: usize,
    ) -> Result<Value, UpcError>;
}

/// Environment with no network: multicast always finds nobody.
#[derive(Debug, Clone, Copy)]
pub struct NoEnv {
    pub node: NodeId,
}

impl InstanceEnv for NoEnv {
    fn node_id(&self) -> NodeId {
        self.node
    }

    fn now(&self) -> u64 {
        0
    }

    fn random(&mut self) -> u64 {
        0
    }

    fn upc(
        &mut self,
        _origin: &ServiceId,
        _call: &UpcCall,
        _eligible: Option<Vec<NodeId>>,
        _quorum: usize,
    ) -> Result<Value, UpcError> {
        Err(UpcError::NoEligibleNodes)
    }
}

/// Gas-metered, journaled access to one service's space.
struct Metered<'m> {
    space: &'m mut MemorySpace,
    gas: &'m mut Gas,
    undo: &'m mut Vec<Undo>,
    service: &'m ServiceId,
}

fn out_of_gas() -> DmaError {
    DmaError::StoreUnavailable("gas exhausted".into())
}

impl ByteMemory for Metered<'_> {
    fn read(&mut self, addr: u32, buf: &mut [u8]) -> Result<(), DmaError> {
        self.gas
            .charge(mem_gas(buf.len()))
            .map_err(|_| out_of_gas())?;
        ByteMemory::read(self.space, addr, buf)
    }

    fn write(&mut self, addr: u32, bytes: &[u8]) -> Result<(), DmaError> {
        self.gas
            .charge(mem_gas(bytes.len()))
            .map_err(|_| out_of_gas())?;
        let old = self.space.write_returning_old(addr, bytes)?;
        self.undo.push(Undo {
            service: self.service.clone(),
            addr,
            old,
        });
        Ok(())
    }
}

fn dma_to_call(e: DmaError) -> CallError {
    match e {
        DmaError::RegionViolation { .. } => CallError::MethodError("RegionViolation".into()),
        DmaError::TypeMismatch(_) => CallError::MethodError("TypeMismatch".into()),
        other => CallError::MethodError(format!("memory: {other}")),
    }
}

/// Handle passed to every method and handler.
pub struct Ctx<'a, 'w> {
    pub(crate) exec: &'a mut Exec<'w>,
    pub(crate) service: ServiceId,
    pub(crate) caller: Address,
    pub(crate) kind: CtxKind,
    pub(crate) depth: u32,
    pub(crate) record: Option<u32>,
}

impl Ctx<'_, '_> {
    pub fn caller(&self) -> Address {
        self.caller
    }

    pub fn service(&self) -> &ServiceId {
        &self.service
    }

    pub fn kind(&self) -> CtxKind {
        self.kind
    }

    /// Log position of the entry being executed.
    pub fn position(&self) -> Option<Position> {
        match self.kind {
            CtxKind::Network => self.exec.position,
            _ => None,
        }
    }

    pub fn gas_remaining(&self) -> u64 {
        self.exec.gas.remaining()
    }

    /// Charges `n` arithmetic steps.
    pub fn step(&mut self, n: u64) -> Result<(), CallError> {
        self.exec.gas.charge(n.saturating_mul(ARITH_GAS))
    }

    fn root(&self, name: &str) -> Result<RootInfo, CallError> {
        let svc = self
            .exec
            .world
            .services
            .get(&self.service)
            .ok_or_else(|| CallError::UnknownService(self.service.clone()))?;
        let &(tag, addr) = svc
            .roots
            .get(name)
            .ok_or_else(|| CallError::MethodError("UnknownRoot".into()))?;
        if self.kind == CtxKind::Network && Region::of(addr) == Region::Instance {
            return Err(CallError::CapabilityDenied("instance state"));
        }
        Ok(RootInfo {
            name: name.to_string(),
            tag,
            addr,
        })
    }

    fn with_mem<R>(
        &mut self,
        f: impl FnOnce(&mut Metered<'_>) -> Result<R, DmaError>,
    ) -> Result<R, CallError> {
        let exec = &mut *self.exec;
        let svc = exec
            .world
            .services
            .get_mut(&self.service)
            .ok_or_else(|| CallError::UnknownService(self.service.clone()))?;
        svc.space.set_mode(self.kind.access_mode());
        let mut m = Metered {
            space: &mut svc.space,
            gas: &mut exec.gas,
            undo: &mut exec.undo,
            service: &self.service,
        };
        let r = f(&mut m);
        r.map_err(|e| {
            if exec.gas.exhausted() {
                CallError::GasExhausted
            } else {
                dma_to_call(e)
            }
        })
    }

    fn map_of(&self, root: &str) -> Result<FixedMap, CallError> {
        let info = self.root(root)?;
        match info.tag {
            TypeTag::Map(k, v) => Ok(FixedMap::new(info.addr, k, v)),
            _ => Err(CallError::MethodError("TypeMismatch".into())),
        }
    }

    fn log_of(&self, root: &str) -> Result<LogVec, CallError> {
        let info = self.root(root)?;
        match info.tag {
            TypeTag::Log => Ok(LogVec::new(info.addr)),
            _ => Err(CallError::MethodError("TypeMismatch".into())),
        }
    }

    /// Whole value of a root.
    pub fn get(&mut self, root: &str) -> Result<Value, CallError> {
        let info = self.root(root)?;
        self.with_mem(|m| read_root_value(m, &info))
    }

    /// Replaces the whole value of a root.
    pub fn set(&mut self, root: &str, value: &Value) -> Result<(), CallError> {
        let info = self.root(root)?;
        self.with_mem(|m| match info.tag {
            TypeTag::Cell(kind) => Cell::new(info.addr, kind).set(m, value),
            TypeTag::Blob => BlobRef::new(info.addr).set(m, value),
            _ => write_root_value(m, &info, value),
        })
    }

    pub fn get_u256(&mut self, root: &str) -> Result<U256, CallError> {
        self.get(root)?
            .as_u256()
            .ok_or_else(|| CallError::MethodError("TypeMismatch".into()))
    }

    pub fn map_get(&mut self, root: &str, key: &Value) -> Result<Option<Value>, CallError> {
        let map = self.map_of(root)?;
        self.with_mem(|m| map.get(m, key))
    }

    /// Map lookup where a missing key reads as zero.
    pub fn map_get_u256(&mut self, root: &str, key: &Value) -> Result<U256, CallError> {
        match self.map_get(root, key)? {
            None => Ok(U256::zero()),
            Some(v) => v
                .as_u256()
                .ok_or_else(|| CallError::MethodError("TypeMismatch".into())),
        }
    }

    pub fn map_set(&mut self, root: &str, key: &Value, value: &Value) -> Result<(), CallError> {
        let map = self.map_of(root)?;
        self.with_mem(|m| map.insert(m, key, value))
    }

    pub fn map_remove(&mut self, root: &str, key: &Value) -> Result<bool, CallError> {
        let map = self.map_of(root)?;
        self.with_mem(|m| map.remove(m, key))
    }

    pub fn map_len(&mut self, root: &str) -> Result<u32, CallError> {
        let map = self.map_of(root)?;
        self.with_mem(|m| map.len(m))
    }

    pub fn map_entries(&mut self, root: &str) -> Result<Vec<(Value, Value)>, CallError> {
        let map = self.map_of(root)?;
        self.with_mem(|m| map.entries(m))
    }

    pub fn log_push(&mut self, root: &str, value: &Value) -> Result<(), CallError> {
        let log = self.log_of(root)?;
        self.with_mem(|m| log.push(m, value))
    }

    pub fn log_len(&mut self, root: &str) -> Result<u32, CallError> {
        let log = self.log_of(root)?;
        self.with_mem(|m| log.len(m))
    }

    pub fn log_get(&mut self, root: &str, i: u32) -> Result<Option<Value>, CallError> {
        let log = self.log_of(root)?;
        self.with_mem(|m| log.get(m, i))
    }

    /// Synchronous call into another service's network method. Any failure
    /// of the callee fails the whole entry, even if this method goes on.
    pub fn call(
        &mut self,
        target: &ServiceId,
        method: &str,
        args: Vec<Value>,
    ) -> Result<Value, CallError> {
        if self.kind != CtxKind::Network {
            return Err(CallError::CapabilityDenied("sequenced call"));
        }
        let source = self.service.clone();
        self.exec
            .invoke(&source, self.record, target, method, args, self.depth + 1)
    }

    pub fn emit(&mut self, value: Value) -> Result<(), CallError> {
        if self.kind != CtxKind::Network {
            return Err(CallError::CapabilityDenied("event"));
        }
        self.exec.gas.charge(mem_gas(value.encode().len()))?;
        self.exec.events.push(super::Event {
            service: self.service.clone(),
            value,
        });
        Ok(())
    }

    pub fn env(&mut self, query: EnvQuery) -> Result<Value, CallError> {
        if self.kind == CtxKind::Network {
            return Err(CallError::CapabilityDenied("node environment"));
        }
        let env = self
            .exec
            .env
            .as_deref_mut()
            .ok_or(CallError::CapabilityDenied("node environment"))?;
        Ok(match query {
            EnvQuery::Clock => Value::u64(env.now()),
            EnvQuery::Random => Value::u64(env.random()),
            EnvQuery::NodeId => Value::u64(env.node_id().0 as u64),
        })
    }

    /// Multicast call. Member lists and quorums named by root are read from
    /// this service's state first.
    pub fn upc(&mut self, call: &UpcCall) -> Result<Value, CallError> {
        if self.kind == CtxKind::Network {
            return Err(CallError::CapabilityDenied("multicast"));
        }
        let eligible = match &call.selector {
            Selection::MembersRoot(root) => Some(node_list(&self.get(root)?)?),
            Selection::Nodes(ids) => Some(ids.clone()),
            Selection::AllMembers | Selection::FirstK(_) => None,
        };
        let quorum = match &call.quorum {
            Quorum::Fixed(q) => *q,
            Quorum::Root(root) => {
                let q = self.get_u256(root)?;
                if q > U256::from(u32::MAX) {
                    return Err(CallError::MethodError("InvalidCall".into()));
                }
                q.as_usize()
            }
        };
        let origin = self.service.clone();
        let env = self
            .exec
            .env
            .as_deref_mut()
            .ok_or(CallError::CapabilityDenied("multicast"))?;
        env.upc(&origin, call, eligible, quorum)
            .map_err(|e| CallError::MethodError(e.code().to_string()))
    }
}

/// A member list stored as a list of node numbers.
fn node_list(v: &Value) -> Result<Vec<NodeId>, CallError> {
    let bad = || CallError::MethodError("TypeMismatch".into());
    let items = v.as_list().ok_or_else(bad)?;
    items
        .iter()
        .map(|i| match i.as_u256() {
            Some(n) if n <= U256::from(u32::MAX) => Ok(NodeId(n.as_u32())),
            _ => Err(bad()),
        })
        .collect()
}

/// Argument accessors that fail with `bad_args`.
pub fn arg(args: &[Value], i: usize) -> Result<&Value, CallError> {
    args.get(i)
        .ok_or_else(|| CallError::MethodError("bad_args".into()))
}

pub fn arg_u256(args: &[Value], i: usize) -> Result<U256, CallError> {
    arg(args, i)?
        .as_u256()
        .ok_or_else(|| CallError::MethodError("bad_args".into()))
}

pub fn arg_addr(args: &[Value], i: usize) -> Result<Address, CallError> {
    arg(args, i)?
        .as_address()
        .ok_or_else(|| CallError::MethodError("bad_args".into()))
}

pub fn arg_str(args: &[Value], i: usize) -> Result<&str, CallError> {
    arg(args, i)?
        .as_str()
        .ok_or_else(|| CallError::MethodError("bad_args".into()))
}
