use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{CallError, Ctx, RuntimeError};
use crate::dma::{Region, TypeTag};
use crate::ids::ServiceId;
use crate::value::Value;

pub type Handler =
    Arc<dyn Fn(&mut Ctx<'_, '_>, &[Value]) -> Result<Value, CallError> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootDecl {
    pub region: Region,
    pub name: String,
    pub tag: TypeTag,
    pub init: Value,
}

#[derive(Clone)]
pub struct NetworkMethod {
    pub handler: Handler,
    /// Services this method may call. Used as the parallel scheduler's
    /// touch-set hint; a call outside it forces serial execution.
    pub callees: BTreeSet<ServiceId>,
}

/// A deployable service: named roots with initializers plus its methods.
///
/// Behavior is registered in-process; `code_tag` identifies the registered
/// behavior version so two nodes can tell whether they run the same code.
#[derive(Clone)]
pub struct LyquidBundle {
    name: ServiceId,
    version: String,
    roots: Vec<RootDecl>,
    network: BTreeMap<String, NetworkMethod>,
    instance: BTreeMap<String, Handler>,
    upc: BTreeMap<String, Handler>,
    duplicates: Vec<String>,
}

impl fmt::Debug for LyquidBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LyquidBundle")
            .field("name", &self.name)
            .field("version", &self.version)
            .field("roots", &self.roots)
            .field("network", &self.network.keys().collect::<Vec<_>>())
            .field("instance", &self.instance.keys().collect::<Vec<_>>())
            .field("upc", &self.upc.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl LyquidBundle {
    pub fn new(name: ServiceId, version: &str) -> Self {
        LyquidBundle {
            name,
            version: version.to_string(),
            roots: Vec::new(),
            network: BTreeMap::new(),
            instance: BTreeMap::new(),
            upc: BTreeMap::new(),
            duplicates: Vec::new(),
        }
    }

    pub fn root(mut self, region: Region, name: &str, tag: TypeTag, init: Value) -> Self {
        if self.roots.iter().any(|r| r.name == name) {
            self.duplicates.push(name.to_string());
        }
        self.roots.push(RootDecl {
            region,
            name: name.to_string(),
            tag,
            init,
        });
        self
    }

    pub fn network<F>(mut self, name: &str, callees: &[ServiceId], f: F) -> Self
    where
        F: Fn(&mut Ctx<'_, '_>, &[Value]) -> Result<Value, CallError> + Send + Sync + 'static,
    {
        let method = NetworkMethod {
            handler: Arc::new(f),
            callees: callees.iter().cloned().collect(),
        };
        if self.network.insert(name.to_string(), method).is_some() {
            self.duplicates.push(name.to_string());
        }
        self
    }

    pub fn instance<F>(mut self, name: &str, f: F) -> Self
    where
        F: Fn(&mut Ctx<'_, '_>, &[Value]) -> Result<Value, CallError> + Send + Sync + 'static,
    {
        if self
            .instance
            .insert(name.to_string(), Arc::new(f))
            .is_some()
        {
            self.duplicates.push(name.to_string());
        }
        self
    }

    /// Adds a multicast handler.
    pub fn register_handler<F>(mut self, name: &str, f: F) -> Result<Self, RuntimeError>
    where
        F: Fn(&mut Ctx<'_, '_>, &[Value]) -> Result<Value, CallError> + Send + Sync + 'static,
    {
        if self.upc.contains_key(name) {
            return Err(RuntimeError::DuplicateName(name.to_string()));
        }
        self.upc.insert(name.to_string(), Arc::new(f));
        Ok(self)
    }

    pub fn name(&self) -> &ServiceId {
        &self.name
    }

    pub fn roots(&self) -> &[RootDecl] {
        &self.roots
    }

    pub fn network_method(&self, name: &str) -> Option<&NetworkMethod> {
        self.network.get(name)
    }

    pub fn instance_method(&self, name: &str) -> Option<&Handler> {
        self.instance.get(name)
    }

    pub fn upc_handler(&self, name: &str) -> Option<&Handler> {
        self.upc.get(name)
    }

    /// Union of every network method's declared callees.
    pub fn all_callees(&self) -> BTreeSet<ServiceId> {
        self.network
            .values()
            .flat_map(|m| m.callees.iter().cloned())
            .collect()
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        match self.duplicates.first() {
            Some(name) => Err(RuntimeError::DuplicateName(name.clone())),
            None => Ok(()),
        }
    }

    /// Digest of the bundle's name, behavior version, root declarations and
    /// method signatures.
    pub fn code_tag(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut put = |b: &[u8]| {
            h.update((b.len() as u32).to_le_bytes());
            h.update(b);
        };
        put(self.name.as_str().as_bytes());
        put(self.version.as_bytes());
        for r in &self.roots {
            put(&[matches!(r.region, Region::Instance) as u8, r.tag.code()]);
            put(r.name.as_bytes());
            put(&r.init.encode());
        }
        for (kind, names) in [
            ("network", self.network.keys().collect::<Vec<_>>()),
            ("instance", self.instance.keys().collect()),
            ("upc", self.upc.keys().collect()),
        ] {
            put(kind.as_bytes());
            for n in names {
                put(n.as_bytes());
            }
        }
        for (name, m) in &self.network {
            put(name.as_bytes());
            for c in &m.callees {
                put(c.as_str().as_bytes());
            }
        }
        h.finalize().into()
    }
}
