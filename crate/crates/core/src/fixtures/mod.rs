//! Example services used by the scenarios and tests.

mod dex;
mod erc20;
mod looper;
mod relay;
mod upc_demo;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ids::ServiceId;
use crate::runtime::LyquidBundle;
use crate::value::{Address, Value};

pub use dex::{dex, swap_output};
pub use erc20::erc20;
pub use looper::looper;
pub use relay::relay;
pub use upc_demo::upc_demo;

/// Names accepted by [`build`].
pub const FIXTURES: &[&str] = &["erc20", "dex", "looper", "relay", "upc_demo"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FixtureError {
    #[error("unknown fixture {0}")]
    UnknownFixture(String),
    #[error("fixture {fixture} has no parameter {param}")]
    UnknownParam { fixture: String, param: String },
    #[error("bad value for {param}: {msg}")]
    BadParam { param: String, msg: String },
}

pub type Params = BTreeMap<String, Value>;

/// Builds a named fixture deployed as `name` with initial state `params`.
pub fn build(
    fixture: &str,
    name: ServiceId,
    params: &Params,
) -> Result<LyquidBundle, FixtureError> {
    match fixture {
        "erc20" => erc20(name, params),
        "dex" => dex(name, params),
        "looper" => {
            ParamReader::new("looper", params).finish()?;
            Ok(looper(name))
        }
        "relay" => {
            ParamReader::new("relay", params).finish()?;
            Ok(relay(name))
        }
        "upc_demo" => upc_demo(name, params),
        other => Err(FixtureError::UnknownFixture(other.to_string())),
    }
}

/// Typed access to fixture parameters that rejects leftovers.
pub(crate) struct ParamReader<'p> {
    fixture: &'static str,
    params: &'p Params,
    used: Vec<&'static str>,
}

impl<'p> ParamReader<'p> {
    pub(crate) fn new(fixture: &'static str, params: &'p Params) -> Self {
        ParamReader {
            fixture,
            params,
            used: Vec::new(),
        }
    }

    pub(crate) fn value(&mut self, name: &'static str) -> Option<&'p Value> {
        self.used.push(name);
        self.params.get(name)
    }

    pub(crate) fn bad(name: &str, msg: &str) -> FixtureError {
        FixtureError::BadParam {
            param: name.to_string(),
            msg: msg.to_string(),
        }
    }

    pub(crate) fn u256(
        &mut self,
        name: &'static str,
        default: u64,
    ) -> Result<primitive_types::U256, FixtureError> {
        match self.value(name) {
            None => Ok(default.into()),
            Some(v) => v
                .as_u256()
                .ok_or_else(|| Self::bad(name, "expected an integer")),
        }
    }

    pub(crate) fn service(&mut self, name: &'static str) -> Result<ServiceId, FixtureError> {
        let v = self
            .value(name)
            .ok_or_else(|| Self::bad(name, "required"))?;
        let a = v
            .as_address()
            .ok_or_else(|| Self::bad(name, "expected a service address like @C"))?;
        service_of(a).ok_or_else(|| Self::bad(name, "not a service address"))
    }

    pub(crate) fn map(
        &mut self,
        name: &'static str,
    ) -> Result<BTreeMap<Value, Value>, FixtureError> {
        match self.value(name) {
            None => Ok(BTreeMap::new()),
            Some(Value::Map(m)) => Ok(m.clone()),
            Some(_) => Err(Self::bad(name, "expected a map")),
        }
    }

    pub(crate) fn finish(self) -> Result<(), FixtureError> {
        match self
            .params
            .keys()
            .find(|k| !self.used.contains(&k.as_str()))
        {
            Some(k) => Err(FixtureError::UnknownParam {
                fixture: self.fixture.to_string(),
                param: k.clone(),
            }),
            None => Ok(()),
        }
    }
}

/// The service whose account address is `a`.
pub fn service_of(a: Address) -> Option<ServiceId> {
    ServiceId::new(a.short_name()?).ok()
}

#[cfg(test)]
mod tests;
