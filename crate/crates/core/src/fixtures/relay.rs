use crate::dma::{Region, ScalarKind, TypeTag};
use crate::ids::ServiceId;
use crate::runtime::{arg, arg_str, CallError, LyquidBundle};
use crate::value::Value;

/// Forwards a call to a service chosen at run time. It declares no callees,
/// so a parallel scheduler cannot predict what it touches.
pub fn relay(name: ServiceId) -> LyquidBundle {
    LyquidBundle::new(name, "relay/1")
        .root(
            Region::Network,
            "forwarded",
            TypeTag::Cell(ScalarKind::U256),
            Value::u64(0),
        )
        .network("forward", &[], |ctx, args| {
            let target = ServiceId::new(arg_str(args, 0)?)
                .map_err(|_| CallError::MethodError("bad_args".into()))?;
            let method = arg_str(args, 1)?.to_string();
            let inner = arg(args, 2)?
                .as_list()
                .ok_or_else(|| CallError::MethodError("bad_args".into()))?
                .to_vec();
            let n = ctx.get_u256("forwarded")?;
            ctx.set("forwarded", &Value::U256(n + 1))?;
            ctx.call(&target, &method, inner)
        })
}
