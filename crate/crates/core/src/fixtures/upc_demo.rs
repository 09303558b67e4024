use std::collections::BTreeMap;

use primitive_types::U256;
use sha2::{Digest, Sha256};

use super::{FixtureError, ParamReader, Params};
use crate::dma::{Region, ScalarKind, TypeTag};
use crate::ids::{NodeId, ServiceId};
use crate::runtime::{arg, arg_u256, CallError, Ctx, EnvQuery, LyquidBundle};
use crate::upc::{Aggregator, Quorum, Reducer, Selection, UpcCall};
use crate::value::Value;

/// Budget for calls issued by this service, in simulation steps.
pub const DEMO_DEADLINE: u64 = 60;
/// Nested calls get a smaller budget so they finish inside the parent's.
pub const NESTED_DEADLINE: u64 = 30;

/// Multicast demo: every node holds a local `share`; handlers expose it,
/// serve a replicated document, and sum shares over a two-level tree.
///
/// Params: `members` (list of node numbers) and `quorum`.
pub fn upc_demo(name: ServiceId, params: &Params) -> Result<LyquidBundle, FixtureError> {
    let mut p = ParamReader::new("upc_demo", params);
    let members = match p.value("members") {
        None => Value::List(vec![]),
        Some(v @ Value::List(items)) if items.iter().all(|i| i.as_u256().is_some()) => v.clone(),
        Some(_) => {
            return Err(ParamReader::bad(
                "members",
                "expected a list of node numbers",
            ))
        }
    };
    let quorum = p.u256("quorum", 1)?;
    p.finish()?;

    let me = name.clone();
    let me2 = name.clone();
    let me3 = name.clone();
    let me4 = name.clone();
    let me5 = name.clone();
    let me7 = name.clone();
    let me8 = name.clone();
    let u256 = TypeTag::Cell(ScalarKind::U256);
    let bundle = LyquidBundle::new(name, "upc_demo/1")
        .root(Region::Network, "members", TypeTag::Blob, members)
        .root(Region::Network, "quorum", u256, Value::U256(quorum))
        .root(Region::Instance, "share", u256, Value::u64(0))
        .network("set_members", &[], |ctx, args| {
            ctx.set("members", arg(args, 0)?)?;
            Ok(Value::Bool(true))
        })
        .network("set_quorum", &[], |ctx, args| {
            ctx.set("quorum", &Value::U256(arg_u256(args, 0)?))?;
            Ok(Value::Bool(true))
        })
        .instance("set_share", |ctx, args| {
            ctx.set("share", &Value::U256(arg_u256(args, 0)?))?;
            Ok(Value::Bool(true))
        })
        .instance("get_share", |ctx, _| ctx.get("share"))
        .instance("flat_sum", move |ctx, _| {
            let call = UpcCall::new(me.clone(), "share", vec![])
                .aggregate(Aggregator::CollectAll {
                    reducer: Reducer::Sum,
                })
                .deadline(DEMO_DEADLINE);
            let call = UpcCall {
                quorum: Quorum::Root("quorum".into()),
                ..call
            };
            ctx.upc(&call)
        })
        .instance("members_sum", move |ctx, _| {
            let call = UpcCall::new(me2.clone(), "share", vec![])
                .select(Selection::MembersRoot("members".into()))
                .aggregate(Aggregator::CollectAll {
                    reducer: Reducer::Sum,
                })
                .deadline(DEMO_DEADLINE);
            let call = UpcCall {
                quorum: Quorum::Root("quorum".into()),
                ..call
            };
            ctx.upc(&call)
        })
        .instance("fetch_any", move |ctx, args| {
            let key = arg(args, 0)?.clone();
            let expected: [u8; 32] = Sha256::digest(document(&key).encode()).into();
            let call = UpcCall::new(me3.clone(), "fetch", vec![key])
                .aggregate(Aggregator::FirstValid {
                    expected_digest: Some(expected),
                })
                .deadline(DEMO_DEADLINE);
            ctx.upc(&call)
        })
        .instance("fetch_members", move |ctx, args| {
            let key = arg(args, 0)?.clone();
            let expected: [u8; 32] = Sha256::digest(document(&key).encode()).into();
            let call = UpcCall::new(me7.clone(), "fetch", vec![key])
                .select(Selection::MembersRoot("members".into()))
                .aggregate(Aggregator::FirstValid {
                    expected_digest: Some(expected),
                })
                .deadline(DEMO_DEADLINE);
            ctx.upc(&call)
        })
        .instance("threshold_sum", move |ctx, args| {
            let k = arg_u256(args, 0)?;
            if k.is_zero() || k > U256::from(u32::MAX) {
                return Err(bad_args());
            }
            let k = k.as_usize();
            let call = UpcCall::new(me8.clone(), "share", vec![])
                .aggregate(Aggregator::ThresholdShares {
                    k,
                    reducer: Reducer::Sum,
                })
                .quorum(k)
                .deadline(DEMO_DEADLINE);
            ctx.upc(&call)
        })
        .instance("distributed_sum", move |ctx, args| {
            let groups = arg(args, 0)?.clone();
            let leaders = group_leaders(&groups)?;
            let n = leaders.len();
            let call = UpcCall::new(me4.clone(), "tree_sum", vec![groups])
                .select(Selection::Nodes(leaders))
                .aggregate(Aggregator::CollectAll {
                    reducer: Reducer::Sum,
                })
                .quorum(n.max(1))
                .deadline(DEMO_DEADLINE);
            ctx.upc(&call)
        });

    let me6 = me5.clone();
    let bundle = bundle
        .register_handler("share", |ctx, _| ctx.get("share"))
        .and_then(|b| b.register_handler("fetch", |_, args| Ok(document(arg(args, 0)?))))
        .and_then(|b| {
            b.register_handler("tree_sum", move |ctx, args| {
                let groups = arg(args, 0)?;
                let mine = my_children(ctx, groups)?;
                let own = ctx.get_u256("share")?;
                if mine.is_empty() {
                    return Ok(Value::U256(own));
                }
                let n = mine.len();
                let call = UpcCall::new(me5.clone(), "share", vec![])
                    .select(Selection::Nodes(mine))
                    .aggregate(Aggregator::CollectAll {
                        reducer: Reducer::Sum,
                    })
                    .quorum(n)
                    .deadline(NESTED_DEADLINE);
                let below = ctx.upc(&call)?.as_u256().unwrap_or_default();
                ctx.step(1)?;
                Ok(Value::U256(own + below))
            })
        })
        .and_then(|b| {
            b.register_handler("chain", move |ctx, args| {
                let n = arg_u256(args, 0)?;
                if n.is_zero() {
                    return Ok(Value::u64(0));
                }
                let next = NodeId(node_id(ctx)?.0 + 1);
                let call = UpcCall::new(me6.clone(), "chain", vec![Value::U256(n - 1)])
                    .select(Selection::Nodes(vec![next]))
                    .aggregate(Aggregator::SingleNode)
                    .deadline(NESTED_DEADLINE);
                let below = ctx.upc(&call)?.as_u256().unwrap_or_default();
                Ok(Value::U256(below + 1))
            })
        })
        .expect("handler names are distinct");
    Ok(bundle)
}

/// The replicated document every honest node serves for `key`.
pub fn document(key: &Value) -> Value {
    Value::List(vec![Value::str("doc"), key.clone()])
}

fn bad_args() -> CallError {
    CallError::MethodError("bad_args".into())
}

fn node_of(v: &Value) -> Result<NodeId, CallError> {
    match v.as_u256() {
        Some(n) if n <= u32::MAX.into() => Ok(NodeId(n.as_u32())),
        _ => Err(bad_args()),
    }
}

fn node_id(ctx: &mut Ctx<'_, '_>) -> Result<NodeId, CallError> {
    node_of(&ctx.env(EnvQuery::NodeId)?)
}

/// Keys of a `{leader: [children]}` map.
fn group_leaders(groups: &Value) -> Result<Vec<NodeId>, CallError> {
    let map: &BTreeMap<Value, Value> = groups.as_map().ok_or_else(bad_args)?;
    map.keys().map(node_of).collect()
}

fn my_children(ctx: &mut Ctx<'_, '_>, groups: &Value) -> Result<Vec<NodeId>, CallError> {
    let me = Value::u64(node_id(ctx)?.0 as u64);
    match groups.as_map().ok_or_else(bad_args)?.get(&me) {
        None => Ok(Vec::new()),
        Some(children) => children
            .as_list()
            .ok_or_else(bad_args)?
            .iter()
            .map(node_of)
            .collect(),
    }
}
