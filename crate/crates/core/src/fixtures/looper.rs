use crate::dma::{Region, ScalarKind, TypeTag};
use crate::ids::ServiceId;
use crate::runtime::LyquidBundle;
use crate::value::Value;

/// `spin` never returns on its own: only the gas bound stops it.
pub fn looper(name: ServiceId) -> LyquidBundle {
    LyquidBundle::new(name, "looper/1")
        .root(
            Region::Network,
            "counter",
            TypeTag::Cell(ScalarKind::U256),
            Value::u64(0),
        )
        .network("spin", &[], |ctx, _| loop {
            let n = ctx.get_u256("counter")?;
            ctx.step(1)?;
            ctx.set("counter", &Value::U256(n + 1))?;
        })
        .network("bump", &[], |ctx, _| {
            let n = ctx.get_u256("counter")?;
            ctx.set("counter", &Value::U256(n + 1))?;
            Ok(Value::U256(n + 1))
        })
}
