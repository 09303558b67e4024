use primitive_types::U256;

use super::{FixtureError, ParamReader, Params};
use crate::dma::{Region, ScalarKind, TypeTag};
use crate::ids::ServiceId;
use crate::runtime::{arg_u256, fail, CallError, Ctx, LyquidBundle};
use crate::value::Value;

const RX: &str = "reserve_x";
const RY: &str = "reserve_y";

/// Output of a constant-product swap of `dx` into a pool holding
/// (`rx`, `ry`): `floor(ry * dx / (rx + dx))`. Rounding down keeps
/// `(rx + dx) * (ry - dy) >= rx * ry`. `None` on overflow or an empty pool.
pub fn swap_output(rx: U256, ry: U256, dx: U256) -> Option<U256> {
    let denom = rx.checked_add(dx)?;
    if denom.is_zero() {
        return None;
    }
    Some(ry.checked_mul(dx)? / denom)
}

/// Constant-product pool over two token services.
///
/// Params: `token_x`, `token_y` (service addresses like `@C`), `reserve_x`,
/// `reserve_y`. The pool must already own its reserves on both tokens and
/// traders must have approved it on the input token.
pub fn dex(name: ServiceId, params: &Params) -> Result<LyquidBundle, FixtureError> {
    let mut p = ParamReader::new("dex", params);
    let tx = p.service("token_x")?;
    let ty = p.service("token_y")?;
    let rx = p.u256(RX, 0)?;
    let ry = p.u256(RY, 0)?;
    p.finish()?;
    if tx == ty {
        return Err(ParamReader::bad("token_y", "must differ from token_x"));
    }

    let tokens = [tx.clone(), ty.clone()];
    let cell = TypeTag::Cell(ScalarKind::U256);
    let addr = TypeTag::Cell(ScalarKind::Address);
    let (x_in, y_in) = ((tx.clone(), ty.clone()), (ty.clone(), tx.clone()));
    Ok(LyquidBundle::new(name, "dex/1")
        .root(
            Region::Network,
            "token_x",
            addr,
            Value::Address(tx.address()),
        )
        .root(
            Region::Network,
            "token_y",
            addr,
            Value::Address(ty.address()),
        )
        .root(Region::Network, RX, cell, Value::U256(rx))
        .root(Region::Network, RY, cell, Value::U256(ry))
        .network("swap_x_for_y", &tokens, move |ctx, args| {
            swap(
                ctx,
                &x_in.0,
                &x_in.1,
                (RX, RY),
                arg_u256(args, 0)?,
                arg_u256(args, 1)?,
            )
        })
        .network("swap_y_for_x", &tokens, move |ctx, args| {
            swap(
                ctx,
                &y_in.0,
                &y_in.1,
                (RY, RX),
                arg_u256(args, 0)?,
                arg_u256(args, 1)?,
            )
        })
        .network("reserves", &[], |ctx, _| {
            Ok(Value::List(vec![ctx.get(RX)?, ctx.get(RY)?]))
        }))
}

fn swap(
    ctx: &mut Ctx<'_, '_>,
    token_in: &ServiceId,
    token_out: &ServiceId,
    (r_in, r_out): (&str, &str),
    dx: U256,
    min_out: U256,
) -> Result<Value, CallError> {
    if dx.is_zero() {
        return fail("zero_input");
    }
    let reserve_in = ctx.get_u256(r_in)?;
    let reserve_out = ctx.get_u256(r_out)?;
    ctx.step(3)?;
    let Some(dy) = swap_output(reserve_in, reserve_out, dx) else {
        return fail("overflow");
    };
    if dy < min_out || dy.is_zero() {
        return fail("slippage");
    }
    let trader = Value::Address(ctx.caller());
    let me = Value::Address(ctx.service().address());
    ctx.call(
        token_in,
        "transfer_from",
        vec![trader.clone(), me, Value::U256(dx)],
    )?;
    ctx.call(token_out, "transfer", vec![trader, Value::U256(dy)])?;
    ctx.step(2)?;
    ctx.set(r_in, &Value::U256(reserve_in + dx))?;
    ctx.set(r_out, &Value::U256(reserve_out - dy))?;
    ctx.emit(Value::List(vec![
        Value::str("swap"),
        Value::str(token_in.as_str()),
        Value::U256(dx),
        Value::U256(dy),
    ]))?;
    Ok(Value::U256(dy))
}
