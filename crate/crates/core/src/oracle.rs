//! Full-replication oracle: every entry executed in order on one world,
//! with no network, no selective hosting and no parallelism.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::dma::Region;
use crate::fco_log::{FcoLog, LogConfig, LogEntry};
use crate::ids::ServiceId;
use crate::runtime::{ExecOptions, LyquidBundle, World};
use crate::scenario::{Scenario, ScenarioError};
use crate::value::Value;

fn err<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError {
        line: 0,
        msg: msg.into(),
    })
}

/// Full replication of a log on one world, keeping every position's
/// network digests.
pub struct Replay {
    pub world: World,
    /// `digests[p]` is the state after position `p`; `digests[0]` is genesis.
    pub digests: Vec<BTreeMap<ServiceId, [u8; 32]>>,
    pub outcomes: Vec<(LogEntry, Result<Value, String>)>,
}

impl Replay {
    pub fn new(bundles: &[Arc<LyquidBundle>]) -> Result<Replay, ScenarioError> {
        let mut world = World::new();
        for b in bundles {
            world
                .deploy_arc(b.clone())
                .or_else(|e| err(e.to_string()))?;
        }
        let mut r = Replay {
            world,
            digests: Vec::new(),
            outcomes: Vec::new(),
        };
        r.snap();
        Ok(r)
    }

    fn snap(&mut self) {
        let ids: Vec<ServiceId> = self.world.service_ids().cloned().collect();
        let d = ids
            .into_iter()
            .map(|s| {
                let d = self.world.network_digest(&s).expect("deployed");
                (s, d)
            })
            .collect();
        self.digests.push(d);
    }

    pub fn apply(&mut self, entry: LogEntry) -> Result<(), ScenarioError> {
        let ex = self
            .world
            .exec_network(&entry, ExecOptions::default())
            .or_else(|e| err(format!("position {}: {e}", entry.position)))?;
        self.outcomes.push((entry, ex.trace.outcome));
        self.snap();
        Ok(())
    }

    /// Executes every sealed entry of `log`.
    pub fn of_log(bundles: &[Arc<LyquidBundle>], log: &FcoLog) -> Result<Replay, ScenarioError> {
        let mut r = Replay::new(bundles)?;
        let end = log.sealed_frontier();
        if end > 0 {
            for e in log.read(1..=end).or_else(|e| err(e.to_string()))? {
                r.apply(e)?;
            }
        }
        Ok(r)
    }
}

/// Network roots of a service with their values, by name.
pub fn network_roots(world: &mut World, service: &ServiceId) -> Vec<(String, Value)> {
    let names = {
        let svc = world.service_mut(service).expect("deployed");
        let roots = svc
            .space_mut()
            .roots(Region::Network)
            .expect("root table readable");
        roots.into_iter().map(|r| r.name).collect::<BTreeSet<_>>()
    };
    names
        .into_iter()
        .map(|n| {
            let v = world.read_root(service, &n).expect("listed root");
            (n, v)
        })
        .collect()
}

impl Replay {
    /// Submits the scenario's intents in script order, seals once and
    /// replays. Intents the sequencer rejects are left out, as in a run.
    pub fn of_scenario(scn: &Scenario) -> Result<Replay, ScenarioError> {
        let bundles = scn.bundles()?;
        let mut log = FcoLog::new(LogConfig::default());
        for b in &bundles {
            log.register_service(b.name().clone());
        }
        for (_, intent) in scn.intents() {
            let _ = log.submit(intent);
        }
        log.seal_batch().or_else(|e| err(e.to_string()))?;
        Replay::of_log(&bundles, &log)
    }

    /// Stable text: each service's final digest and network roots, then
    /// each entry's outcome.
    pub fn dump(&mut self) -> String {
        let mut out = String::new();
        let last = self.digests.last().cloned().unwrap_or_default();
        for (s, digest) in &last {
            out.push_str(&format!("service {s} digest {}\n", hex::encode(digest)));
            for (root, v) in network_roots(&mut self.world, s) {
                out.push_str(&format!("  {root} = {v}\n"));
            }
        }
        for (e, outcome) in &self.outcomes {
            let result = match outcome {
                Ok(v) => format!("ok {v}"),
                Err(code) => format!("err {code}"),
            };
            out.push_str(&format!(
                "entry {} {}.{} {result}\n",
                e.position, e.intent.target, e.intent.method
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::sid;

    const TWO_DEX: &str = include_str!("../../../scenarios/two_dex.scn");

    #[test]
    fn empty_scenario_dumps_nothing() {
        let scn = Scenario::parse("").unwrap();
        assert_eq!(Replay::of_scenario(&scn).unwrap().dump(), "");
    }

    #[test]
    fn two_dex_oracle_agrees_with_selective_node() {
        let scn = Scenario::parse(TWO_DEX).unwrap();
        let mut oracle = Replay::of_scenario(&scn).unwrap();
        let dump = oracle.dump();
        assert!(dump.contains("entry 3 A.swap_x_for_y ok 140\n"), "{dump}");
        assert!(
            dump.contains("entry 6 A.swap_x_for_y err insufficient\n"),
            "{dump}"
        );
        assert!(dump.contains("  total_supply = 2600\n"), "{dump}");

        let mut sim = scn.sim(scn.seed).unwrap();
        sim.run();
        let x = sim.node(sim.node_id("X").unwrap()).unwrap();
        let c = sid("C");
        assert_eq!(oracle.digests[7][&c], x.network_digest(&c).unwrap());
    }

    #[test]
    fn dump_is_stable() {
        let scn = Scenario::parse(TWO_DEX).unwrap();
        let a = Replay::of_scenario(&scn).unwrap().dump();
        let b = Replay::of_scenario(&scn).unwrap().dump();
        assert_eq!(a, b);
    }
}
