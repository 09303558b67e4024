use primitive_types::U256;

use super::{FixtureError, ParamReader, Params};
use crate::dma::{Region, ScalarKind, TypeTag};
use crate::ids::ServiceId;
use crate::runtime::{arg, arg_addr, arg_u256, fail, CallError, Ctx, EnvQuery, LyquidBundle};
use crate::value::{Address, Value};

const BALANCES: &str = "balances";
const ALLOWANCES: &str = "allowances";
const SUPPLY: &str = "total_supply";
const JOURNAL: &str = "local_transactions";

/// Fungible token with the usual transfer/approve surface.
///
/// Params: `balances` (address → amount), `allowances` ([owner, spender] →
/// amount, where the maximum U256 means unlimited) and optionally
/// `total_supply`, which must equal the sum of balances.
pub fn erc20(name: ServiceId, params: &Params) -> Result<LyquidBundle, FixtureError> {
    let mut p = ParamReader::new("erc20", params);
    let balances = p.map(BALANCES)?;
    let allowances = p.map(ALLOWANCES)?;
    let mut sum = U256::zero();
    for (k, v) in &balances {
        let (Some(_), Some(n)) = (k.as_address(), v.as_u256()) else {
            return Err(ParamReader::bad(BALANCES, "expected address: amount"));
        };
        sum = sum
            .checked_add(n)
            .ok_or_else(|| ParamReader::bad(BALANCES, "sum overflows"))?;
    }
    for (k, v) in &allowances {
        let pair_ok = matches!(k.as_list(), Some([Value::Address(_), Value::Address(_)]));
        if !pair_ok || v.as_u256().is_none() {
            return Err(ParamReader::bad(
                ALLOWANCES,
                "expected [owner, spender]: amount",
            ));
        }
    }
    let supply = p.u256(SUPPLY, 0)?;
    if params.contains_key(SUPPLY) && supply != sum {
        return Err(ParamReader::bad(SUPPLY, "must equal the sum of balances"));
    }
    p.finish()?;

    let addr_u256 = TypeTag::Map(ScalarKind::Address, ScalarKind::U256);
    let pair_u256 = TypeTag::Map(ScalarKind::AddressPair, ScalarKind::U256);
    Ok(LyquidBundle::new(name, "erc20/1")
        .root(
            Region::Network,
            SUPPLY,
            TypeTag::Cell(ScalarKind::U256),
            Value::U256(sum),
        )
        .root(Region::Network, BALANCES, addr_u256, Value::Map(balances))
        .root(
            Region::Network,
            ALLOWANCES,
            pair_u256,
            Value::Map(allowances),
        )
        .root(Region::Instance, JOURNAL, TypeTag::Log, Value::List(vec![]))
        .network("transfer", &[], |ctx, args| {
            let from = ctx.caller();
            move_funds(ctx, from, arg_addr(args, 0)?, arg_u256(args, 1)?)?;
            Ok(Value::Bool(true))
        })
        .network("transfer_from", &[], |ctx, args| {
            let (from, to, amount) = (arg_addr(args, 0)?, arg_addr(args, 1)?, arg_u256(args, 2)?);
            let key = pair(from, ctx.caller());
            let allowed = ctx.map_get_u256(ALLOWANCES, &key)?;
            if allowed < amount {
                return fail("allowance");
            }
            if allowed != U256::MAX {
                ctx.step(1)?;
                ctx.map_set(ALLOWANCES, &key, &Value::U256(allowed - amount))?;
            }
            move_funds(ctx, from, to, amount)?;
            Ok(Value::Bool(true))
        })
        .network("approve", &[], |ctx, args| {
            let key = pair(ctx.caller(), arg_addr(args, 0)?);
            ctx.map_set(ALLOWANCES, &key, &Value::U256(arg_u256(args, 1)?))?;
            Ok(Value::Bool(true))
        })
        .network("balance_of", &[], |ctx, args| {
            let who = Value::Address(arg_addr(args, 0)?);
            Ok(Value::U256(ctx.map_get_u256(BALANCES, &who)?))
        })
        .network("total_supply", &[], |ctx, _| ctx.get(SUPPLY))
        .instance("record_tx", |ctx, args| {
            let at = ctx.env(EnvQuery::Clock)?;
            ctx.log_push(JOURNAL, &Value::List(vec![arg(args, 0)?.clone(), at]))?;
            Ok(Value::u64(ctx.log_len(JOURNAL)? as u64))
        })
        .instance("journal_len", |ctx, _| {
            Ok(Value::u64(ctx.log_len(JOURNAL)? as u64))
        })
        .instance("supply_view", |ctx, _| ctx.get(SUPPLY))
        .instance("balance_view", |ctx, args| {
            let who = Value::Address(arg_addr(args, 0)?);
            Ok(Value::U256(ctx.map_get_u256(BALANCES, &who)?))
        })
        .instance("try_network_write", |ctx, _| {
            ctx.set(SUPPLY, &Value::u64(0))?;
            Ok(Value::Bool(true))
        }))
}

fn pair(a: Address, b: Address) -> Value {
    Value::List(vec![Value::Address(a), Value::Address(b)])
}

/// Debit then credit, so a self-transfer nets to zero.
fn move_funds(
    ctx: &mut Ctx<'_, '_>,
    from: Address,
    to: Address,
    amount: U256,
) -> Result<(), CallError> {
    let from_key = Value::Address(from);
    let have = ctx.map_get_u256(BALANCES, &from_key)?;
    if have < amount {
        return fail("insufficient");
    }
    ctx.step(1)?;
    ctx.map_set(BALANCES, &from_key, &Value::U256(have - amount))?;
    let to_key = Value::Address(to);
    let prior = ctx.map_get_u256(BALANCES, &to_key)?;
    ctx.step(1)?;
    let credited = prior
        .checked_add(amount)
        .ok_or_else(|| CallError::MethodError("overflow".into()))?;
    ctx.map_set(BALANCES, &to_key, &Value::U256(credited))?;
    ctx.emit(Value::List(vec![
        Value::str("transfer"),
        Value::Address(from),
        Value::Address(to),
        Value::U256(amount),
    ]))
}
