use std::collections::BTreeSet;
use std::io::Cursor;
use std::sync::{Arc, Mutex};

use super::*;
use crate::fco_log::{CallIntent, FcoLog, LogConfig, Sequencer};
use crate::fixtures::{build, Params};
use crate::ids::sid;
use crate::runtime::{InstanceEnv, LyquidBundle, NoEnv};
use crate::value::Address;

fn a(name: &str) -> Address {
    Address::named(name).unwrap()
}

fn params(text: &str) -> Params {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|kv| {
            let (k, v) = kv.split_once('=').unwrap();
            (k.trim().to_string(), Value::parse(v.trim()).unwrap())
        })
        .collect()
}

/// Tokens C and D, pools A and B over (C, D).
fn bundles() -> Vec<Arc<LyquidBundle>> {
    let token = |name: &str| {
        build(
            "erc20",
            sid(name),
            &params(
                "balances={@alice: 300, @bob: 300, @A: 1000, @B: 1000}; \
                 allowances={[@alice, @A]: 1000, [@alice, @B]: 1000, [@bob, @A]: 1000, [@bob, @B]: 1000}",
            ),
        )
        .unwrap()
    };
    let pool = |name: &str| {
        build(
            "dex",
            sid(name),
            &params("token_x=@C; token_y=@D; reserve_x=1000; reserve_y=1000"),
        )
        .unwrap()
    };
    vec![token("C"), token("D"), pool("A"), pool("B")]
        .into_iter()
        .map(Arc::new)
        .collect()
}

fn submit(log: &mut FcoLog, caller: &str, target: &str, method: &str, args: &str) -> Position {
    let args = Value::parse(args).unwrap().as_list().unwrap().to_vec();
    log.submit(CallIntent::new(
        a(caller),
        sid(target),
        method,
        args,
        1_000_000,
    ))
    .unwrap()
}

/// Seven entries in two batches (1..=3, 4..=7), targets A B A B B A B.
/// Entry 3 spends alice's last C through pool A, so her swap at 6 fails;
/// entry 7 reaches C through pool B.
fn two_dex_log() -> FcoLog {
    let mut log = FcoLog::new(LogConfig::default());
    for b in bundles() {
        log.register_service(b.name().clone());
    }
    submit(&mut log, "alice", "A", "swap_x_for_y", "[100, 1]");
    submit(&mut log, "bob", "B", "swap_x_for_y", "[50, 1]");
    submit(&mut log, "alice", "A", "swap_x_for_y", "[200, 1]");
    log.seal_batch().unwrap();
    submit(&mut log, "bob", "B", "swap_y_for_x", "[10, 1]");
    submit(&mut log, "bob", "B", "reserves", "[]");
    submit(&mut log, "alice", "A", "swap_x_for_y", "[50, 1]");
    submit(&mut log, "bob", "B", "swap_x_for_y", "[100, 1]");
    log.seal_batch().unwrap();
    log
}

fn feed(node: &mut Node, log: &FcoLog) {
    for b in log.sealed_batches() {
        let entries = log.read(b.range.clone()).unwrap();
        node.learn_batch(b.clone(), entries).unwrap();
    }
}

fn archival(log: &FcoLog) -> Node {
    let mut r = Node::new(NodeId(0), "R", HostingProfile::archival(), &bundles()).unwrap();
    feed(&mut r, log);
    r.run_until(log.sealed_frontier()).unwrap();
    r
}

fn selective(log: &FcoLog, hosted: &[&str]) -> Node {
    let profile = HostingProfile::selective(hosted.iter().map(|s| sid(s)));
    let mut x = Node::new(NodeId(1), "X", profile, &bundles()).unwrap();
    feed(&mut x, log);
    x
}

#[test]
fn selective_node_matches_archival() {
    let log = two_dex_log();
    let r = archival(&log);
    let mut x = selective(&log, &["A", "C", "D"]);

    // entry 2 belongs to B; without records the node must stop there
    assert_eq!(
        x.run_until(7).unwrap_err(),
        NodeError::EffectGap { position: 2 }
    );
    assert_eq!(x.frontier().global, 1);

    let traces = r.serve_traces(x.hosted(), 1..=7).unwrap();
    x.learn_traces(7, traces);
    x.run_until(7).unwrap();
    for s in ["A", "C", "D"] {
        assert_eq!(x.network_digest(&sid(s)), r.network_digest(&sid(s)), "{s}");
    }
    assert!(x.network_digest(&sid("B")).is_none());

    match x.applied(3).unwrap() {
        Applied::Executed {
            outcome,
            inline,
            external,
        } => {
            assert!(outcome.is_ok());
            assert!(inline.contains(&(sid("A"), sid("C"))));
            assert!(external.is_empty());
        }
        other => panic!("entry 3: {other:?}"),
    }
    match x.applied(6).unwrap() {
        Applied::Executed { outcome, .. } => assert_eq!(outcome, &Err("insufficient".to_string())),
        other => panic!("entry 6: {other:?}"),
    }
    match x.applied(7).unwrap() {
        Applied::ViaEffects { calls } => assert!(calls.contains(&(sid("B"), sid("C")))),
        other => panic!("entry 7: {other:?}"),
    }
    let alice = x.read_root(&sid("C"), "balances").unwrap();
    assert_eq!(
        alice.as_map().unwrap().get(&Value::addr("alice")),
        Some(&Value::u64(0))
    );
    assert_eq!(
        x.read_root(&sid("B"), "reserve_x").unwrap_err(),
        NodeError::NotHosted(sid("B"))
    );
}

#[test]
fn pool_calls_into_unhosted_token_use_records() {
    let log = two_dex_log();
    let r = archival(&log);
    let mut x = selective(&log, &["A", "C"]);
    assert!(!x.can_apply(1));
    assert_eq!(
        x.run_until(7).unwrap_err(),
        NodeError::EffectGap { position: 1 }
    );
    x.learn_traces(7, r.serve_traces(x.hosted(), 1..=7).unwrap());
    x.run_until(7).unwrap();
    for s in ["A", "C"] {
        assert_eq!(x.network_digest(&sid(s)), r.network_digest(&sid(s)), "{s}");
    }
    match x.applied(3).unwrap() {
        Applied::Executed {
            inline, external, ..
        } => {
            assert_eq!(inline, &vec![(sid("A"), sid("C"))]);
            assert_eq!(external, &vec![(sid("A"), sid("D"))]);
        }
        other => panic!("entry 3: {other:?}"),
    }
}

#[test]
fn self_contained_entries_need_no_records() {
    let log = two_dex_log();
    let mut x = selective(&log, &["A", "C", "D"]);
    assert!(x.can_apply(1));
    assert!(!x.can_apply(2));
    x.run_until(1).unwrap();
    assert_eq!(x.frontier().global, 1);
    // a node hosting only C cannot run pool entries on its own
    let c_only = selective(&log, &["C"]);
    assert!(!c_only.can_apply(1));
}

#[test]
fn host_nothing_but_c() {
    let log = two_dex_log();
    let mut r = archival(&log);
    let mut x = selective(&log, &["C"]);
    x.learn_traces(7, r.serve_traces(x.hosted(), 1..=7).unwrap());
    x.run_until(7).unwrap();
    assert_eq!(x.network_digest(&sid("C")), r.network_digest(&sid("C")));
    assert!(matches!(
        x.applied(5),
        Some(Applied::Skipped { failed: false })
    ));
    assert_eq!(
        r.read_root(&sid("C"), "total_supply").unwrap(),
        Value::u64(2600)
    );
}

#[test]
fn effects_are_served_by_archival_nodes_only() {
    let log = two_dex_log();
    let r = archival(&log);
    let c = BTreeSet::from([sid("C")]);
    let effects = r.serve_effects(&c, 1..=7).unwrap();
    let positions: Vec<Position> = effects.iter().map(|e| e.position).collect();
    // every swap touches C; the reserves query and the failed swap do not
    assert_eq!(positions, vec![1, 2, 3, 4, 7]);
    assert!(effects.iter().all(|e| e.target == sid("C")));
    assert!(positions.windows(2).all(|w| w[0] <= w[1]));

    assert_eq!(
        r.serve_effects(&c, 1..=8).unwrap_err(),
        NodeError::FrontierBehind {
            requested: 8,
            frontier: 7
        }
    );
    let x = selective(&log, &["C"]);
    assert_eq!(
        x.serve_effects(&c, 1..=1).unwrap_err(),
        NodeError::NotArchival
    );
}

#[test]
fn historical_state() {
    let log = two_dex_log();
    let mut r = archival(&log);
    let c = sid("C");
    let genesis = r.serve_state(&c, "balances", 0).unwrap();
    assert_eq!(
        genesis.as_map().unwrap().get(&Value::addr("alice")),
        Some(&Value::u64(300))
    );
    // oracle: a fresh node stopped at each position
    for p in 0..=7 {
        let mut o = Node::new(NodeId(9), "O", HostingProfile::archival(), &bundles()).unwrap();
        feed(&mut o, &log);
        o.run_until(p).unwrap();
        for root in ["balances", "total_supply"] {
            assert_eq!(
                r.serve_state(&c, root, p).unwrap(),
                o.read_root(&c, root).unwrap(),
                "{root} at {p}"
            );
        }
        assert_eq!(
            r.serve_state(&sid("A"), "reserve_x", p).unwrap(),
            o.read_root(&sid("A"), "reserve_x").unwrap()
        );
    }
    assert_eq!(
        r.serve_state(&c, "nope", 3).unwrap_err(),
        NodeError::UnknownRoot("nope".into())
    );
    assert_eq!(
        r.serve_state(&c, "balances", 8).unwrap_err(),
        NodeError::FrontierBehind {
            requested: 8,
            frontier: 7
        }
    );
}

#[test]
fn batches_must_arrive_in_order() {
    let log = two_dex_log();
    let mut x = Node::new(NodeId(1), "X", HostingProfile::archival(), &bundles()).unwrap();
    let second = log.sealed_batches()[1].clone();
    let entries = log.read(second.range.clone()).unwrap();
    assert_eq!(
        x.learn_batch(second, entries).unwrap_err(),
        NodeError::BatchGap {
            expected: 1,
            got: 4
        }
    );
    // unsealed positions are never executed
    x.run_until(7).unwrap();
    assert_eq!(x.frontier().global, 0);
}

#[test]
fn parallel_matches_serial() {
    let log = two_dex_log();
    let serial = archival(&log);
    let mut par = Node::new(NodeId(2), "P", HostingProfile::archival(), &bundles()).unwrap();
    feed(&mut par, &log);
    while par.frontier().global < 7 {
        par.parallel_apply(7).unwrap();
    }
    for b in bundles() {
        assert_eq!(
            par.network_digest(b.name()),
            serial.network_digest(b.name())
        );
    }
    for p in 1..=7 {
        assert_eq!(par.applied(p), serial.applied(p), "{p}");
        assert_eq!(par.own_trace(p), serial.own_trace(p), "{p}");
    }
    assert_eq!(par.parallel_reports().len(), 2);
}

#[test]
fn disjoint_entries_share_a_batch_in_separate_lanes() {
    let mut log = FcoLog::new(LogConfig::default());
    let tokens: Vec<Arc<LyquidBundle>> = ["T1", "T2", "T3"]
        .iter()
        .map(|n| Arc::new(build("erc20", sid(n), &params("balances={@alice: 100}")).unwrap()))
        .collect();
    for b in &tokens {
        log.register_service(b.name().clone());
    }
    for n in ["T1", "T2", "T3", "T1"] {
        submit(&mut log, "alice", n, "transfer", "[@bob, 10]");
    }
    log.seal_batch().unwrap();
    let mut node = Node::new(NodeId(0), "P", HostingProfile::archival(), &tokens).unwrap();
    feed(&mut node, &log);
    let report = node.parallel_apply(4).unwrap();
    assert_eq!(report.lanes, vec![vec![1, 4], vec![2], vec![3]]);
    assert_eq!(report.fallback_at, None);
    let mut serial = Node::new(NodeId(0), "S", HostingProfile::archival(), &tokens).unwrap();
    feed(&mut serial, &log);
    serial.run_until(4).unwrap();
    for b in &tokens {
        assert_eq!(
            node.network_digest(b.name()),
            serial.network_digest(b.name())
        );
    }
}

#[test]
fn undeclared_call_falls_back_to_serial() {
    // a relay reaches a token it never declared, so the lane prediction is wrong
    let mut log = FcoLog::new(LogConfig::default());
    let deployed: Vec<Arc<LyquidBundle>> = vec![
        Arc::new(build("erc20", sid("T"), &params("balances={@R: 100}")).unwrap()),
        Arc::new(build("relay", sid("R"), &Params::new()).unwrap()),
    ];
    for b in &deployed {
        log.register_service(b.name().clone());
    }
    submit(&mut log, "alice", "T", "transfer", "[@bob, 1]");
    submit(
        &mut log,
        "alice",
        "R",
        "forward",
        "[\"T\", \"transfer\", [@bob, 5]]",
    );
    log.seal_batch().unwrap();

    let mut serial = Node::new(NodeId(0), "S", HostingProfile::archival(), &deployed).unwrap();
    feed(&mut serial, &log);
    serial.run_until(2).unwrap();
    let mut par = Node::new(NodeId(0), "P", HostingProfile::archival(), &deployed).unwrap();
    feed(&mut par, &log);
    let report = par.parallel_apply(2).unwrap();
    assert_eq!(report.fallback_at, Some(2));
    for b in &deployed {
        assert_eq!(
            par.network_digest(b.name()),
            serial.network_digest(b.name())
        );
    }
    assert_eq!(par.frontier(), serial.frontier());
}

#[test]
fn gateway_requests() {
    let mut log = two_dex_log();
    let mut x = selective(&log, &["A", "C", "D"]);
    x.run_until(1).unwrap();
    let mut env = NoEnv { node: NodeId(1) };
    let mut ask = |x: &mut Node, log: &mut FcoLog, line: &str| {
        let req = GatewayRequest::parse(line).unwrap();
        x.gateway(&req, log, &mut env).to_string()
    };
    assert_eq!(
        ask(
            &mut x,
            &mut log,
            "kind=call service=C method=balance_of args=[@alice] caller=@alice"
        ),
        "ok value=200"
    );
    assert_eq!(
        ask(
            &mut x,
            &mut log,
            "kind=send service=B method=reserves args=[] caller=@bob gas=5000"
        ),
        "ok position=8"
    );
    assert!(ask(
        &mut x,
        &mut log,
        "kind=call service=B method=reserves args=[] caller=@bob"
    )
    .starts_with("err code=NotHosted"));
    assert!(ask(
        &mut x,
        &mut log,
        "kind=call service=C method=nope args=[] caller=@bob"
    )
    .starts_with("err code=MethodNotFound"));
    assert!(ask(
        &mut x,
        &mut log,
        "kind=send service=Q method=m args=[] caller=@bob"
    )
    .starts_with("err code=UnknownService"));
    // a read-only call does not move network state
    let before = x.network_digest(&sid("C"));
    ask(
        &mut x,
        &mut log,
        "kind=call service=C method=transfer args=[@bob, 5] caller=@alice",
    );
    assert_eq!(x.network_digest(&sid("C")), before);
}

#[test]
fn request_lines_round_trip() {
    let line = "kind=send service=C method=transfer args=[@bob, 10] caller=@alice gas=77";
    let req = GatewayRequest::parse(line).unwrap();
    assert_eq!(req.kind, RequestKind::Send);
    assert_eq!(req.args, vec![Value::addr("bob"), Value::u64(10)]);
    assert_eq!(req.gas, Some(77));
    assert_eq!(GatewayRequest::parse(&req.to_string()).unwrap(), req);
    for bad in [
        "kind=send service=C method=m caller=@a colour=1",
        "kind=shout service=C method=m caller=@a",
        "service=C method=m caller=@a",
        "kind=call service=C method=m args=[1 caller=@a",
        "kind=call service=C method=m caller=7",
    ] {
        assert!(GatewayRequest::parse(bad).is_err(), "{bad}");
    }
    let err = GatewayResponse::Error {
        code: "X".into(),
        msg: "say \"hi\"".into(),
    };
    assert_eq!(err.to_string(), r#"err code=X msg="say \"hi\"""#);
}

#[test]
fn line_server() {
    let log = two_dex_log();
    let mut node = selective(&log, &["C"]);
    node.learn_traces(0, Vec::new());
    let node = Mutex::new(node);
    let seq: Mutex<FcoLog> = Mutex::new(log);
    let env: Mutex<NoEnv> = Mutex::new(NoEnv { node: NodeId(1) });
    let input = "kind=call service=C method=total_supply args=[] caller=@a\n\nbogus\n\
                 kind=send service=C method=approve args=[@b, 1] caller=@a\n";
    let mut out = Vec::new();
    let seq_dyn: &Mutex<dyn Sequencer + Send> = &seq;
    let env_dyn: &Mutex<dyn InstanceEnv + Send> = &env;
    serve_lines(Cursor::new(input), &mut out, &node, seq_dyn, env_dyn).unwrap();
    let out = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "ok value=2600");
    assert!(lines[1].starts_with("err code=BadRequest"));
    assert_eq!(lines[2], "ok position=8");
}

#[test]
fn saved_images_reload() {
    let log = two_dex_log();
    let mut r = archival(&log);
    let dir = tempfile::tempdir().unwrap();
    let saved = r.save_to(dir.path()).unwrap();
    assert_eq!(saved.len(), 4);
    for (s, _) in saved {
        let space = crate::dma::MemorySpace::open(s.clone(), &dir.path().join(s.as_str())).unwrap();
        let mut w = World::new();
        w.attach(r.deployed()[&s].clone(), space).unwrap();
        assert_eq!(w.network_digest(&s), r.network_digest(&s));
    }
}
