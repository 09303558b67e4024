use std::collections::BTreeSet;

use primitive_types::U256;
use proptest::prelude::*;

use super::*;
use crate::dma::{Region, ScalarKind, TypeTag};
use crate::fco_log::{CallIntent, LogEntry};
use crate::ids::{sid, NodeId};
use crate::runtime::{
    CallError, EnvQuery, ExecOptions, LyquidBundle, NoEnv, RuntimeError, World, CALL_GAS,
};
use crate::upc::UpcCall;
use crate::value::{Address, Value};

fn a(name: &str) -> Address {
    Address::named(name).unwrap()
}

fn params(text: &str) -> Params {
    // "k=v; k=v" where v is a value literal
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|kv| {
            let (k, v) = kv.split_once('=').unwrap();
            (k.trim().to_string(), Value::parse(v.trim()).unwrap())
        })
        .collect()
}

fn token(name: &str, text: &str) -> LyquidBundle {
    build("erc20", sid(name), &params(text)).unwrap()
}

fn entry(
    position: u64,
    caller: &str,
    target: &str,
    method: &str,
    args: &str,
    gas: u64,
) -> LogEntry {
    let args = Value::parse(args).unwrap().as_list().unwrap().to_vec();
    LogEntry {
        position,
        intent: CallIntent::new(a(caller), sid(target), method, args, gas),
        batch: 1,
    }
}

fn balance(w: &mut World, svc: &str, who: &str) -> Value {
    let m = w.read_root(&sid(svc), "balances").unwrap();
    m.as_map()
        .unwrap()
        .get(&Value::addr(who))
        .cloned()
        .unwrap_or(Value::u64(0))
}

fn run(w: &mut World, e: &LogEntry) -> Result<Value, String> {
    w.exec_network(e, ExecOptions::default())
        .unwrap()
        .trace
        .outcome
}

/// Largest dy with (rx + dx)(ry - dy) >= rx * ry, by exhaustive search.
fn brute_swap(rx: u64, ry: u64, dx: u64) -> u64 {
    let k = rx as u128 * ry as u128;
    (0..=ry)
        .rev()
        .find(|dy| (rx + dx) as u128 * (ry - dy) as u128 >= k)
        .unwrap()
}

/// Tokens C, D and pool A over (C, D) with 1000/1000 reserves.
fn pool_world() -> World {
    let mut w = World::new();
    w.deploy(token(
        "C",
        "balances={@alice: 500, @A: 1000}; allowances={[@alice, @A]: 1000}",
    ))
    .unwrap();
    w.deploy(token("D", "balances={@A: 1000}")).unwrap();
    w.deploy(
        build(
            "dex",
            sid("A"),
            &params("token_x=@C; token_y=@D; reserve_x=1000; reserve_y=1000"),
        )
        .unwrap(),
    )
    .unwrap();
    w
}

#[test]
fn deploy_initializes_roots() {
    let mut w = World::new();
    w.deploy(token("T", "")).unwrap();
    assert_eq!(
        w.read_root(&sid("T"), "total_supply").unwrap(),
        Value::u64(0)
    );
    assert_eq!(
        w.deploy(token("T", "")).unwrap_err(),
        RuntimeError::DuplicateName("T".into())
    );
    let twice = LyquidBundle::new(sid("X"), "x")
        .root(Region::Network, "balances", TypeTag::Blob, Value::u64(1))
        .root(Region::Network, "balances", TypeTag::Blob, Value::u64(2));
    assert_eq!(
        w.deploy(twice).unwrap_err(),
        RuntimeError::DuplicateName("balances".into())
    );
    let mut other = World::new();
    other.deploy(token("T", "")).unwrap();
    assert_eq!(w.network_digest(&sid("T")), other.network_digest(&sid("T")));
}

#[test]
fn fixture_params_are_checked() {
    assert_eq!(
        build("nope", sid("X"), &Params::new()).unwrap_err(),
        FixtureError::UnknownFixture("nope".into())
    );
    assert!(matches!(
        build("erc20", sid("X"), &params("colour=1")),
        Err(FixtureError::UnknownParam { .. })
    ));
    assert!(matches!(
        build(
            "erc20",
            sid("X"),
            &params("balances={@a: 5}; total_supply=6")
        ),
        Err(FixtureError::BadParam { .. })
    ));
    let t = build("erc20", sid("X"), &params("balances={@a: 5, @b: 7}")).unwrap();
    let mut w = World::new();
    w.deploy(t).unwrap();
    assert_eq!(
        w.read_root(&sid("X"), "total_supply").unwrap(),
        Value::u64(12)
    );
}

#[test]
fn transfer_moves_funds_from_caller() {
    let mut w = World::new();
    w.deploy(token("T", "balances={@alice: 100}")).unwrap();
    assert_eq!(
        run(
            &mut w,
            &entry(1, "alice", "T", "transfer", "[@bob, 10]", 100_000)
        ),
        Ok(Value::Bool(true))
    );
    assert_eq!(balance(&mut w, "T", "alice"), Value::u64(90));
    assert_eq!(balance(&mut w, "T", "bob"), Value::u64(10));
    // self-transfer nets out
    run(
        &mut w,
        &entry(2, "bob", "T", "transfer", "[@bob, 10]", 100_000),
    )
    .unwrap();
    assert_eq!(balance(&mut w, "T", "bob"), Value::u64(10));
}

#[test]
fn failed_transfer_reverts_everything() {
    let mut w = World::new();
    w.deploy(token("T", "balances={@alice: 5}")).unwrap();
    let before = w.network_digest(&sid("T"));
    let ex = w
        .exec_network(
            &entry(1, "alice", "T", "transfer", "[@bob, 10]", 100_000),
            ExecOptions::default(),
        )
        .unwrap();
    assert_eq!(ex.trace.outcome, Err("insufficient".into()));
    assert!(ex.trace.events.is_empty() && ex.trace.writes.is_empty());
    assert_eq!(w.network_digest(&sid("T")), before);
}

#[test]
fn allowance_is_checked_and_spent() {
    let mut w = World::new();
    w.deploy(token("T", "balances={@alice: 50}")).unwrap();
    let e = entry(1, "bob", "T", "transfer_from", "[@alice, @bob, 5]", 100_000);
    assert_eq!(run(&mut w, &e), Err("allowance".into()));
    run(
        &mut w,
        &entry(2, "alice", "T", "approve", "[@bob, 8]", 100_000),
    )
    .unwrap();
    assert_eq!(
        run(
            &mut w,
            &entry(
                3,
                "bob",
                "T",
                "transfer_from",
                "[@alice, @carol, 5]",
                100_000
            )
        ),
        Ok(Value::Bool(true))
    );
    assert_eq!(
        run(
            &mut w,
            &entry(
                4,
                "bob",
                "T",
                "transfer_from",
                "[@alice, @carol, 5]",
                100_000
            )
        ),
        Err("allowance".into())
    );
    assert_eq!(balance(&mut w, "T", "carol"), Value::u64(5));
    let allowances = w.read_root(&sid("T"), "allowances").unwrap();
    let key = Value::List(vec![Value::addr("alice"), Value::addr("bob")]);
    assert_eq!(allowances.as_map().unwrap()[&key], Value::u64(3));
}

#[test]
fn swap_output_matches_exhaustive_search() {
    assert_eq!(
        swap_output(1000.into(), 1000.into(), 100.into()),
        Some(U256::from(90))
    );
    assert_eq!(brute_swap(1000, 1000, 100), 90);
    assert_eq!(swap_output(0.into(), 0.into(), 0.into()), None);
    assert_eq!(swap_output(U256::MAX, 1.into(), 1.into()), None);
}

proptest! {
    #[test]
    fn swap_output_is_the_largest_valid_output(rx in 1u64..2000, ry in 1u64..2000, dx in 1u64..5000) {
        let dy = swap_output(rx.into(), ry.into(), dx.into()).unwrap().as_u64();
        prop_assert_eq!(dy, brute_swap(rx, ry, dx));
    }

    #[test]
    fn swaps_never_decrease_the_product(steps in proptest::collection::vec((any::<bool>(), 1u64..200), 1..8)) {
        let mut w = pool_world();
        for (pos, (x_for_y, dx)) in (1..).zip(steps) {
            let reserves = |w: &mut World| {
                let rx = w.read_root(&sid("A"), "reserve_x").unwrap().as_u256().unwrap();
                let ry = w.read_root(&sid("A"), "reserve_y").unwrap().as_u256().unwrap();
                rx * ry
            };
            let k = reserves(&mut w);
            let method = if x_for_y { "swap_x_for_y" } else { "swap_y_for_x" };
            let _ = run(&mut w, &entry(pos, "alice", "A", method, &format!("[{dx}, 0]"), 1_000_000));
            prop_assert!(reserves(&mut w) >= k);
        }
    }
}

#[test]
fn swap_executes_inline_calls_atomically() {
    let mut w = pool_world();
    let ex = w
        .exec_network(
            &entry(1, "alice", "A", "swap_x_for_y", "[100, 0]", 1_000_000),
            ExecOptions::default(),
        )
        .unwrap();
    assert_eq!(ex.trace.outcome, Ok(Value::u64(90)));
    let calls: Vec<_> = ex
        .trace
        .records
        .iter()
        .map(|r| (r.target.to_string(), r.method.clone()))
        .collect();
    assert_eq!(
        calls,
        [
            ("C".into(), "transfer_from".into()),
            ("D".into(), "transfer".into())
        ]
    );
    assert_eq!(balance(&mut w, "C", "alice"), Value::u64(400));
    assert_eq!(balance(&mut w, "D", "alice"), Value::u64(90));
    assert_eq!(
        w.read_root(&sid("A"), "reserve_y").unwrap(),
        Value::u64(910)
    );

    // second leg fails: the pool's D balance is gone, so C must revert too
    let mut w = pool_world();
    run(
        &mut w,
        &entry(1, "A", "D", "transfer", "[@zed, 1000]", 100_000),
    )
    .unwrap();
    let digests: Vec<_> = ["A", "C", "D"]
        .iter()
        .map(|s| w.network_digest(&sid(s)))
        .collect();
    let out = run(
        &mut w,
        &entry(2, "alice", "A", "swap_x_for_y", "[100, 0]", 1_000_000),
    );
    assert_eq!(out, Err("insufficient".into()));
    let after: Vec<_> = ["A", "C", "D"]
        .iter()
        .map(|s| w.network_digest(&sid(s)))
        .collect();
    assert_eq!(digests, after);
}

#[test]
fn slippage_and_zero_input() {
    let mut w = pool_world();
    assert_eq!(
        run(
            &mut w,
            &entry(1, "alice", "A", "swap_x_for_y", "[100, 91]", 1_000_000)
        ),
        Err("slippage".into())
    );
    assert_eq!(
        run(
            &mut w,
            &entry(2, "alice", "A", "swap_x_for_y", "[0, 0]", 1_000_000)
        ),
        Err("zero_input".into())
    );
}

#[test]
fn missing_effects_are_unresolved_and_records_resolve_them() {
    let e = entry(1, "alice", "A", "swap_x_for_y", "[100, 0]", 1_000_000);
    let mut full = pool_world();
    let archival = full.exec_network(&e, ExecOptions::default()).unwrap().trace;

    // hosts A and C, not D
    let mut partial = pool_world();
    let d = partial.take(&BTreeSet::from([sid("D")]));
    drop(d);
    let before = partial.network_digest(&sid("C"));
    let err = partial
        .exec_network(&e, ExecOptions::default())
        .err()
        .unwrap();
    assert_eq!(
        err,
        CallError::UnresolvedEffect {
            position: 1,
            index: 1
        }
    );
    assert_eq!(partial.network_digest(&sid("C")), before, "rolled back");

    let opts = ExecOptions {
        recorded: Some(&archival),
        foreign: None,
    };
    let local = partial.exec_network(&e, opts).unwrap().trace;
    assert_eq!(local.outcome, archival.outcome);
    assert_eq!(local.records, archival.records);
    for s in ["A", "C"] {
        assert_eq!(
            partial.network_digest(&sid(s)),
            full.network_digest(&sid(s))
        );
    }
}

#[test]
fn replay_applies_effects_of_non_hosted_entries() {
    let e = entry(1, "alice", "A", "swap_x_for_y", "[100, 0]", 1_000_000);
    let mut full = pool_world();
    let archival = full.exec_network(&e, ExecOptions::default()).unwrap().trace;

    // hosts C only
    let mut only_c = pool_world();
    drop(only_c.take(&BTreeSet::from([sid("A"), sid("D")])));
    let replayed = only_c.replay_entry(&e, &archival, None).unwrap();
    assert_eq!(replayed.applied.len(), 1);
    assert_eq!(replayed.applied[0].method, "transfer_from");
    assert_eq!(
        only_c.network_digest(&sid("C")),
        full.network_digest(&sid("C"))
    );

    // a record that does not reproduce is a divergence, not a silent skip
    let mut forged = archival.clone();
    forged.records[0].result = Ok(Value::Bool(false));
    let mut only_c = pool_world();
    drop(only_c.take(&BTreeSet::from([sid("A"), sid("D")])));
    let before = only_c.network_digest(&sid("C"));
    assert!(matches!(
        only_c.replay_entry(&e, &forged, None),
        Err(CallError::Divergence(_))
    ));
    assert_eq!(only_c.network_digest(&sid("C")), before);

    // failed entries contribute nothing
    let mut failed = archival;
    failed.outcome = Err("insufficient".into());
    assert!(
        only_c
            .replay_entry(&e, &failed, None)
            .unwrap()
            .skipped_failed
    );
}

#[test]
fn gas_bound_stops_unbounded_loop() {
    let mut w = World::new();
    w.deploy(looper(sid("L"))).unwrap();
    let before = w.network_image(&sid("L"));
    let ex = w
        .exec_network(
            &entry(1, "alice", "L", "spin", "[]", 50_000),
            ExecOptions::default(),
        )
        .unwrap();
    assert_eq!(ex.trace.outcome, Err("GasExhausted".into()));
    assert_eq!(ex.trace.gas_used, 50_000);
    assert_eq!(w.network_image(&sid("L")), before);
    // a bounded method still commits
    assert_eq!(
        run(&mut w, &entry(2, "alice", "L", "bump", "[]", 50_000)),
        Ok(Value::u64(1))
    );
    assert_eq!(
        run(&mut w, &entry(3, "alice", "L", "bump", "[]", CALL_GAS)),
        Err("GasExhausted".into())
    );
}

#[test]
fn network_methods_lack_node_capabilities() {
    let probe = LyquidBundle::new(sid("P"), "probe")
        .root(
            Region::Instance,
            "local",
            TypeTag::Cell(ScalarKind::U256),
            Value::u64(3),
        )
        .network("clock", &[], |ctx, _| ctx.env(EnvQuery::Clock))
        .network("random", &[], |ctx, _| ctx.env(EnvQuery::Random))
        .network("node", &[], |ctx, _| ctx.env(EnvQuery::NodeId))
        .network("local", &[], |ctx, _| ctx.get("local"))
        .network("multicast", &[], |ctx, _| {
            ctx.upc(&UpcCall::new(sid("P"), "h", vec![]))
        })
        .instance("call", |ctx, _| ctx.call(&sid("P"), "clock", vec![]));
    let mut w = World::new();
    w.deploy(probe).unwrap();
    for m in ["clock", "random", "node", "local", "multicast"] {
        assert_eq!(
            run(&mut w, &entry(1, "x", "P", m, "[]", 100_000)),
            Err("CapabilityDenied".into()),
            "{m}"
        );
    }
    let err = w.exec_instance(
        &sid("P"),
        "call",
        &[],
        a("x"),
        &mut NoEnv { node: NodeId(1) },
    );
    assert!(matches!(err, Err(CallError::CapabilityDenied(_))));
}

#[test]
fn instance_methods_use_local_state_only() {
    let mut w = World::new();
    w.deploy(token("T", "balances={@alice: 7}")).unwrap();
    let before = w.network_image(&sid("T"));
    let mut env = NoEnv { node: NodeId(4) };
    let caller = a("alice");
    assert_eq!(
        w.exec_instance(&sid("T"), "journal_len", &[], caller, &mut env),
        Ok(Value::u64(0))
    );
    assert_eq!(
        w.exec_instance(&sid("T"), "record_tx", &[Value::str("x")], caller, &mut env),
        Ok(Value::u64(1))
    );
    assert_eq!(
        w.exec_instance(&sid("T"), "journal_len", &[], caller, &mut env),
        Ok(Value::u64(1))
    );
    assert_eq!(
        w.exec_instance(&sid("T"), "supply_view", &[], caller, &mut env),
        Ok(Value::u64(7))
    );
    assert_eq!(
        w.exec_instance(&sid("T"), "try_network_write", &[], caller, &mut env),
        Err(CallError::MethodError("RegionViolation".into()))
    );
    assert!(matches!(
        w.exec_instance(&sid("T"), "transfer", &[], caller, &mut env),
        Err(CallError::MethodNotFound { .. })
    ));
    assert_eq!(w.network_image(&sid("T")), before);
}

#[test]
fn swallowed_inner_failure_still_fails_the_entry() {
    let sloppy = LyquidBundle::new(sid("S"), "s").network("try", &[sid("T")], |ctx, _| {
        let _ = ctx.call(
            &sid("T"),
            "transfer",
            vec![Value::addr("bob"), Value::u64(1000)],
        );
        Ok(Value::Bool(true))
    });
    let mut w = World::new();
    w.deploy(token("T", "balances={@S: 5}")).unwrap();
    w.deploy(sloppy).unwrap();
    assert_eq!(
        run(&mut w, &entry(1, "x", "S", "try", "[]", 100_000)),
        Err("insufficient".into())
    );
}

#[test]
fn execution_is_deterministic() {
    let entries = [
        entry(1, "alice", "A", "swap_x_for_y", "[100, 0]", 1_000_000),
        entry(2, "alice", "C", "transfer", "[@bob, 7]", 100_000),
        entry(3, "alice", "A", "swap_x_for_y", "[30, 0]", 1_000_000),
        entry(4, "alice", "A", "swap_x_for_y", "[10000, 0]", 1_000_000),
    ];
    let go = || {
        let mut w = pool_world();
        let traces: Vec<_> = entries
            .iter()
            .map(|e| w.exec_network(e, ExecOptions::default()).unwrap().trace)
            .collect();
        let digests: Vec<_> = ["A", "C", "D"]
            .iter()
            .map(|s| w.network_digest(&sid(s)))
            .collect();
        (traces, digests)
    };
    let (t1, d1) = go();
    let (t2, d2) = go();
    assert_eq!(t1, t2);
    assert_eq!(d1, d2);
    assert_eq!(t1[3].outcome, Err("allowance".into()));
}

#[test]
fn conservation_holds_after_every_transfer() {
    let mut w = World::new();
    w.deploy(token("T", "balances={@a: 300, @b: 200, @c: 0}"))
        .unwrap();
    let names = ["a", "b", "c", "d"];
    for i in 0..60u64 {
        let from = names[(i * 7 % 4) as usize];
        let to = names[(i * 3 % 4) as usize];
        let _ = run(
            &mut w,
            &entry(
                i + 1,
                from,
                "T",
                "transfer",
                &format!("[@{to}, {}]", i * 13 % 150),
                100_000,
            ),
        );
        let m = w.read_root(&sid("T"), "balances").unwrap();
        let sum = m
            .as_map()
            .unwrap()
            .values()
            .fold(U256::zero(), |s, v| s + v.as_u256().unwrap());
        assert_eq!(
            Value::U256(sum),
            w.read_root(&sid("T"), "total_supply").unwrap()
        );
    }
}
