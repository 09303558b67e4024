//! Line-oriented request/response access to a node.
//!
//! Requests are `key=value` fields separated by spaces:
//!
//! ```text
//! kind=send service=C method=transfer args=[@bob, 10] caller=@alice gas=100000
//! kind=call service=C method=balance_of args=[@bob] caller=@alice
//! ```
//!
//! `args` takes a value literal and may contain spaces. Responses are
//! `ok position=N`, `ok value=V` or `err code=CODE msg="..."`.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use super::Node;
use crate::fco_log::{CallIntent, LogError, Sequencer};
use crate::ids::{Position, ServiceId};
use crate::runtime::{CallError, InstanceEnv};
use crate::value::{Address, Value};

/// Gas for `send` requests that do not name a limit.
pub const DEFAULT_SEND_GAS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestKind {
    /// Submit a network intent for ordering.
    Send,
    /// Run an instance method, a read-only network method or a multicast
    /// handler locally.
    Call,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayRequest {
    pub kind: RequestKind,
    pub service: ServiceId,
    pub method: String,
    pub args: Vec<Value>,
    pub caller: Address,
    pub gas: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GatewayResponse {
    Position(Position),
    Value(Value),
    Error { code: String, msg: String },
}

impl GatewayResponse {
    fn err(code: &str, msg: impl fmt::Display) -> Self {
        GatewayResponse::Error {
            code: code.to_string(),
            msg: msg.to_string(),
        }
    }
}

impl fmt::Display for GatewayResponse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GatewayResponse::Position(p) => write!(f, "ok position={p}"),
            GatewayResponse::Value(v) => write!(f, "ok value={v}"),
            GatewayResponse::Error { code, msg } => {
                write!(f, "err code={code} msg={}", Value::str(msg.clone()))
            }
        }
    }
}

impl GatewayRequest {
    pub fn parse(line: &str) -> Result<GatewayRequest, String> {
        let mut kind = None;
        let mut service = None;
        let mut method = None;
        let mut args = Vec::new();
        let mut caller = None;
        let mut gas = None;
        let mut rest = line.trim();
        while !rest.is_empty() {
            let (key, after) = rest
                .split_once('=')
                .ok_or_else(|| format!("expected key=value at '{rest}'"))?;
            let key = key.trim();
            let consumed = if key == "args" {
                let (v, n) = Value::parse_prefix(after).map_err(|e| format!("args: {e}"))?;
                args = v.as_list().ok_or("args must be a list")?.to_vec();
                n
            } else {
                let n = after.find(char::is_whitespace).unwrap_or(after.len());
                let val = &after[..n];
                match key {
                    "kind" => {
                        kind = Some(match val {
                            "send" => RequestKind::Send,
                            "call" => RequestKind::Call,
                            other => return Err(format!("unknown kind {other}")),
                        })
                    }
                    "service" => service = Some(ServiceId::new(val)?),
                    "method" => method = Some(val.to_string()),
                    "caller" => {
                        let v = Value::parse(val).map_err(|e| format!("caller: {e}"))?;
                        caller = Some(v.as_address().ok_or("caller must be an address")?);
                    }
                    "gas" => gas = Some(val.parse::<u64>().map_err(|e| format!("gas: {e}"))?),
                    other => return Err(format!("unknown field {other}")),
                }
                n
            };
            rest = after[consumed..].trim_start();
        }
        Ok(GatewayRequest {
            kind: kind.ok_or("missing kind")?,
            service: service.ok_or("missing service")?,
            method: method.ok_or("missing method")?,
            args,
            caller: caller.ok_or("missing caller")?,
            gas,
        })
    }
}

impl fmt::Display for GatewayRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            RequestKind::Send => "send",
            RequestKind::Call => "call",
        };
        write!(
            f,
            "kind={kind} service={} method={} args={} caller={}",
            self.service,
            self.method,
            Value::List(self.args.clone()),
            self.caller
        )?;
        if let Some(g) = self.gas {
            write!(f, " gas={g}")?;
        }
        Ok(())
    }
}

fn call_error(e: CallError) -> GatewayResponse {
    GatewayResponse::err(&e.code(), e)
}

fn log_error(e: LogError) -> GatewayResponse {
    let code = match &e {
        LogError::UnknownService(_) => "UnknownService",
        LogError::GasLimitExceeded { .. } => "GasLimitExceeded",
        LogError::InvalidIntent(_) => "InvalidIntent",
        _ => "SequencerError",
    };
    GatewayResponse::err(code, e)
}

impl Node {
    /// Serves one request. `send` goes to the sequencer and needs no local
    /// hosting; `call` runs against this node's current state.
    pub fn gateway(
        &mut self,
        req: &GatewayRequest,
        sequencer: &mut dyn Sequencer,
        env: &mut dyn InstanceEnv,
    ) -> GatewayResponse {
        match req.kind {
            RequestKind::Send => {
                let intent = CallIntent::new(
                    req.caller,
                    req.service.clone(),
                    req.method.clone(),
                    req.args.clone(),
                    req.gas.unwrap_or(DEFAULT_SEND_GAS),
                );
                match sequencer.submit(intent) {
                    Ok(p) => GatewayResponse::Position(p),
                    Err(e) => log_error(e),
                }
            }
            RequestKind::Call => self.call(req, env),
        }
    }

    /// Runs a request locally: an instance method, else a read-only run of a
    /// network method, else a multicast handler. The request kind is ignored.
    pub fn call(&mut self, req: &GatewayRequest, env: &mut dyn InstanceEnv) -> GatewayResponse {
        if !self.hosts(&req.service) {
            return GatewayResponse::err(
                "NotHosted",
                format!("{} is not hosted on {}", req.service, self.name),
            );
        }
        let bundle = self
            .world
            .service(&req.service)
            .expect("hosted")
            .bundle()
            .clone();
        let (svc, m, args, caller) = (&req.service, req.method.as_str(), &req.args, req.caller);
        let result = if bundle.instance_method(m).is_some() {
            self.world.exec_instance(svc, m, args, caller, env)
        } else if bundle.network_method(m).is_some() {
            self.world.dry_run(svc, m, args, caller)
        } else if bundle.upc_handler(m).is_some() {
            self.world.exec_upc_handler(svc, m, args, caller, env)
        } else {
            Err(CallError::MethodNotFound {
                service: svc.clone(),
                method: m.to_string(),
            })
        };
        match result {
            Ok(v) => GatewayResponse::Value(v),
            Err(e) => call_error(e),
        }
    }
}

/// Answers one request per line until the input ends.
pub fn serve_lines<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    node: &Mutex<Node>,
    sequencer: &Mutex<dyn Sequencer + Send>,
    env: &Mutex<dyn InstanceEnv + Send>,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match GatewayRequest::parse(&line) {
            Err(msg) => GatewayResponse::err("BadRequest", msg),
            Ok(req) => {
                let mut node = node.lock().expect("node lock");
                let mut seq = sequencer.lock().expect("sequencer lock");
                let mut env = env.lock().expect("env lock");
                node.gateway(&req, &mut *seq, &mut *env)
            }
        };
        writeln!(output, "{resp}")?;
        output.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(
    listener: TcpListener,
    node: Arc<Mutex<Node>>,
    sequencer: Arc<Mutex<dyn Sequencer + Send>>,
    env: Arc<Mutex<dyn InstanceEnv + Send>>,
) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let (node, sequencer, env) = (node.clone(), sequencer.clone(), env.clone());
        std::thread::spawn(move || {
            let reader = BufReader::new(stream.try_clone()?);
            serve_lines(reader, stream, &node, &*sequencer, &*env)
        });
    }
    Ok(())
}
