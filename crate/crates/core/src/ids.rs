use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::value::{is_short_name, Address};

/// 1-based position in the global log. Position 0 denotes genesis.
pub type Position = u64;

/// Name of a deployed service. Doubles as the service's account address, so
/// the same `[A-Za-z0-9_]{1,20}` rule applies.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ServiceId(String);

impl ServiceId {
    pub fn new(name: impl Into<String>) -> Result<Self, String> {
        let name = name.into();
        if is_short_name(&name) {
            Ok(ServiceId(name))
        } else {
            Err(format!("invalid service name '{name}'"))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The address a service uses when it acts as a caller.
    pub fn address(&self) -> Address {
        Address::named(&self.0).expect("service names are valid short names")
    }
}

impl TryFrom<String> for ServiceId {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        ServiceId::new(s)
    }
}

impl From<ServiceId> for String {
    fn from(id: ServiceId) -> String {
        id.0
    }
}

impl FromStr for ServiceId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        ServiceId::new(s)
    }
}

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Shorthand used heavily by tests and fixtures.
pub fn sid(name: &str) -> ServiceId {
    ServiceId::new(name).expect("invalid service name")
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}
