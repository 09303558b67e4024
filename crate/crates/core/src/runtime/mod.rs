//! Deployable service bundles and their deterministic execution.
//!
//! A [`World`] holds the services a node hosts, each with its own
//! [`MemorySpace`](crate::dma::MemorySpace). Network methods run against the
//! network region under a gas bound and an entry-wide undo journal; instance
//! methods and multicast handlers run against the instance region with a
//! read-only view of network state.

mod bundle;
mod ctx;
mod effects;
mod world;

use thiserror::Error;

use crate::dma::DmaError;
use crate::ids::{Position, ServiceId};

pub use bundle::{Handler, LyquidBundle, NetworkMethod, RootDecl};
pub use ctx::{arg, arg_addr, arg_str, arg_u256, Ctx, CtxKind, EnvQuery, InstanceEnv, NoEnv};
pub use effects::{CallResult, EffectRecord, EntryTrace, Event, WriteSummary};
pub(crate) use world::Undo;
pub use world::{ExecOptions, Executed, Replayed, Service, World};

/// Gas charged for entering any method, top-level or inner.
pub const CALL_GAS: u64 = 100;
/// Memory operations cost one unit per started 32-byte chunk.
pub const MEM_GAS_CHUNK: u64 = 32;
pub const ARITH_GAS: u64 = 1;
/// Budget for instance methods and handlers, which are not sequenced and
/// carry no caller-supplied limit.
pub const INSTANCE_GAS: u64 = 10_000_000;
pub const MAX_CALL_DEPTH: u32 = 64;

/// Why a call did not produce a value.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CallError {
    #[error("{service} has no method {method}")]
    MethodNotFound { service: ServiceId, method: String },
    #[error("gas exhausted")]
    GasExhausted,
    #[error("method error: {0}")]
    MethodError(String),
    #[error("no effect record for call {index} at position {position}")]
    UnresolvedEffect { position: Position, index: u32 },
    #[error("local execution diverged from the recorded effects: {0}")]
    Divergence(String),
    #[error("capability not available in this context: {0}")]
    CapabilityDenied(&'static str),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error("call into {0}, which is outside the declared touch-set")]
    UndeclaredCall(ServiceId),
    #[error("call depth limit exceeded")]
    CallDepth,
}

impl CallError {
    /// Stable short code, used in effect records, traces and gateway
    /// responses. Method errors use their application code.
    pub fn code(&self) -> String {
        match self {
            CallError::MethodNotFound { .. } => "MethodNotFound".into(),
            CallError::GasExhausted => "GasExhausted".into(),
            CallError::MethodError(code) => code.clone(),
            CallError::UnresolvedEffect { .. } => "UnresolvedEffect".into(),
            CallError::Divergence(_) => "Divergence".into(),
            CallError::CapabilityDenied(_) => "CapabilityDenied".into(),
            CallError::UnknownService(_) => "UnknownService".into(),
            CallError::UndeclaredCall(_) => "UndeclaredCall".into(),
            CallError::CallDepth => "CallDepth".into(),
        }
    }

    /// Inverse of [`CallError::code`] for recorded results. Codes that only
    /// carry a message come back as method errors.
    pub fn from_code(code: &str) -> CallError {
        match code {
            "GasExhausted" => CallError::GasExhausted,
            "CallDepth" => CallError::CallDepth,
            other => CallError::MethodError(other.to_string()),
        }
    }

    /// Errors that mean the node could not decide the entry, as opposed to
    /// the entry deterministically failing.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            CallError::UnresolvedEffect { .. }
                | CallError::Divergence(_)
                | CallError::UndeclaredCall(_)
        )
    }
}

/// Shorthand for application-level failures.
pub fn fail<T>(code: &str) -> Result<T, CallError> {
    Err(CallError::MethodError(code.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("duplicate name {0}")]
    DuplicateName(String),
    #[error("unknown service {0}")]
    UnknownService(ServiceId),
    #[error("unknown root {0}")]
    UnknownRoot(String),
    #[error(transparent)]
    Memory(#[from] DmaError),
}

pub(crate) struct Gas {
    limit: u64,
    used: u64,
    exhausted: bool,
}

impl Gas {
    pub(crate) fn new(limit: u64) -> Self {
        Gas {
            limit,
            used: 0,
            exhausted: false,
        }
    }

    pub(crate) fn charge(&mut self, n: u64) -> Result<(), CallError> {
        if self.exhausted {
            return Err(CallError::GasExhausted);
        }
        match self.used.checked_add(n) {
            Some(total) if total <= self.limit => {
                self.used = total;
                Ok(())
            }
            _ => {
                self.used = self.limit;
                self.exhausted = true;
                Err(CallError::GasExhausted)
            }
        }
    }

    pub(crate) fn used(&self) -> u64 {
        self.used
    }

    pub(crate) fn remaining(&self) -> u64 {
        self.limit - self.used
    }

    pub(crate) fn exhausted(&self) -> bool {
        self.exhausted
    }
}

pub(crate) fn mem_gas(len: usize) -> u64 {
    (len as u64).div_ceil(MEM_GAS_CHUNK).max(1)
}
