//! The `qdb` command line. Every command becomes one protocol request,
//! sent either to an in-process session over `--data DIR` or to a broker
//! over `--connect ADDR`, so both paths run the same code on the engine
//! side.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::sync::atomic::AtomicBool;

use clap::{Args, Parser, Subcommand};
use serde_json::{Value, json};

use crate::broker::{
    Broker, BrokerConfig, Client, PoolAction, PoolSpec, Request, Response, Service, Session, WireMessage, WirePollEntry,
};
use crate::engine::EngineConfig;
use crate::error::{Error, ErrorCode, Result};
use crate::types::{Durability, IsolationMode, Ordering};

#[derive(Debug, Parser)]
#[command(name = "qdb", version, about = "Transactional queue manager")]
pub struct Cli {
    /// Run against an embedded engine in this data directory.
    #[arg(long, global = true, conflicts_with = "connect")]
    pub data: Option<PathBuf>,
    /// Run against the broker at this address.
    #[arg(long, global = true)]
    pub connect: Option<String>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    #[command(subcommand)]
    Queue(QueueCmd),
    Enqueue(EnqueueArgs),
    Dequeue(DequeueArgs),
    #[command(subcommand)]
    Pool(PoolCmd),
    /// Interactive session: reads `begin`, `enqueue`, `dequeue`, `commit`
    /// and `abort` lines from standard input.
    Txn,
    /// Statistics for one queue, or the whole engine.
    Stats {
        queue: Option<String>,
        /// Also print the lock table.
        #[arg(long)]
        locks: bool,
    },
    Checkpoint,
    /// Run a broker until interrupted.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum QueueCmd {
    Create {
        name: String,
        /// Contents do not survive a restart.
        #[arg(long, conflicts_with = "durable")]
        volatile: bool,
        #[arg(long)]
        durable: bool,
        /// Dequeue by priority, then arrival.
        #[arg(long)]
        priority: bool,
    },
    Destroy {
        name: String,
    },
    List,
    Stats {
        name: Option<String>,
        /// Also print the lock table.
        #[arg(long)]
        locks: bool,
    },
    Poll {
        name: String,
        /// Include uncommitted entries.
        #[arg(long)]
        dirty: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct EnqueueArgs {
    pub queue: String,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pub priority: i64,
    #[arg(long, conflicts_with = "data_str")]
    pub data_hex: Option<String>,
    #[arg(long = "text")]
    pub data_str: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct DequeueArgs {
    pub queue: String,
    #[arg(long)]
    pub serializable: bool,
    #[arg(long, default_value_t = 0)]
    pub wait_ms: u32,
}

#[derive(Debug, Subcommand)]
pub enum PoolCmd {
    Attach {
        queue: String,
        #[command(flatten)]
        spec: PoolArgs,
    },
    Start {
        queue: String,
    },
    Stop {
        queue: String,
    },
    Status {
        queue: String,
    },
    Redefine {
        queue: String,
        #[command(flatten)]
        spec: PoolArgs,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct PoolArgs {
    #[arg(long)]
    pub min: Option<u32>,
    #[arg(long)]
    pub max: Option<u32>,
    /// event, batch or periodic.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub threshold: Option<u64>,
    #[arg(long)]
    pub interval_ms: Option<u64>,
    #[arg(long)]
    pub failure_limit: Option<u32>,
    #[arg(long)]
    pub failure_window_ms: Option<u64>,
    #[arg(long)]
    pub idle_shrink_ms: Option<u64>,
    /// read_past or serializable.
    #[arg(long)]
    pub isolation: Option<String>,
    /// echo, copy-to-queue:NAME, sleep-ms:N or fail-percent:P.
    #[arg(long)]
    pub handler: Option<String>,
}

impl PoolArgs {
    fn spec(&self) -> PoolSpec {
        PoolSpec {
            min_servers: self.min,
            max_servers: self.max,
            policy: self.policy.clone(),
            batch_threshold: self.threshold,
            interval_ms: self.interval_ms,
            failure_limit: self.failure_limit,
            failure_window_ms: self.failure_window_ms,
            idle_shrink_after_ms: self.idle_shrink_ms,
            isolation: self.isolation.clone(),
            handler: self.handler.clone(),
        }
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug, Parser)]
#[command(no_binary_name = true, name = "txn")]
struct TxnLine {
    #[command(subcommand)]
    cmd: TxnCmd,
}

#[derive(Debug, Subcommand)]
enum TxnCmd {
    Begin,
    Commit,
    Abort,
    Enqueue(EnqueueArgs),
    Dequeue(DequeueArgs),
}

pub enum Backend {
    Embedded { service: Arc<Service>, session: Option<Session> },
    Remote(Client),
}

impl Backend {
    pub fn open(cli: &Cli) -> Result<Backend> {
        match (&cli.data, &cli.connect) {
            (Some(dir), None) => {
                let service = Service::open_dir(dir, EngineConfig::default())?;
                let session = Some(service.session());
                Ok(Backend::Embedded { service, session })
            }
            (None, Some(addr)) => Ok(Backend::Remote(Client::connect(addr.as_str())?)),
            _ => Err(Error::usage("one of --data DIR or --connect ADDR is required")),
        }
    }

    /// Sends a request; error replies come back as `Err`.
    pub fn call(&mut self, req: Request) -> Result<Response> {
        match self {
            Backend::Embedded { session, .. } => session.as_mut().expect("session open").handle(req).into_result(),
            Backend::Remote(c) => c.call(&req)?.into_result(),
        }
    }

    pub fn close(self) -> Result<()> {
        if let Backend::Embedded { service, mut session } = self {
            drop(session.take());
            service.shutdown()?;
        }
        Ok(())
    }
}

fn payload(a: &EnqueueArgs) -> Result<Vec<u8>> {
    match (&a.data_hex, &a.data_str) {
        (Some(h), _) => hex::decode(h).map_err(|e| Error::usage(format!("--data-hex: {e}"))),
        (None, Some(s)) => Ok(s.as_bytes().to_vec()),
        (None, None) => Ok(Vec::new()),
    }
}

fn isolation(a: &DequeueArgs) -> IsolationMode {
    if a.serializable { IsolationMode::Serializable } else { IsolationMode::ReadPastDequeue }
}

fn exit_code(e: &Error) -> i32 {
    match e.code() {
        ErrorCode::Usage => 2,
        _ => 1,
    }
}

/// Runs the CLI and returns the process exit status: 0 on success, 1 on a
/// domain error, 2 on a usage error.
pub fn run<I, S>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match execute(&cli, input, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    if let Command::Serve(args) = &cli.command {
        return serve(cli, args, out);
    }
    let mut backend = Backend::open(cli)?;
    let res = dispatch(cli, &mut backend, input, out);
    let closed = backend.close();
    res.and(closed)
}

fn dispatch(cli: &Cli, b: &mut Backend, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let p = Printer { json: cli.json };
    match &cli.command {
        Command::Queue(q) => match q {
            QueueCmd::Create { name, volatile, durable: _, priority } => {
                let req = Request::CreateQueue {
                    name: name.clone(),
                    durability: if *volatile { Durability::Volatile } else { Durability::Durable },
                    ordering: if *priority { Ordering::Priority } else { Ordering::Fifo },
                };
                let v = json_reply(b.call(req)?)?;
                p.emit(out, &v, |v| {
                    format!(
                        "created queue {} ({}, {})",
                        v["name"].as_str().unwrap_or(""),
                        v["durability"].as_str().unwrap_or(""),
                        v["ordering"].as_str().unwrap_or("")
                    )
                })
            }
            QueueCmd::Destroy { name } => {
                b.call(Request::DestroyQueue { name: name.clone() })?;
                p.emit(out, &json!({ "destroyed": name }), |_| format!("destroyed queue {name}"))
            }
            QueueCmd::List => {
                let v = json_reply(b.call(Request::ListQueues)?)?;
                p.emit(out, &v, render_queue_list)
            }
            QueueCmd::Stats { name, locks } => stats(b, &p, name.as_deref(), *locks, out),
            QueueCmd::Poll { name, dirty } => {
                let Response::Polled(entries) = b.call(Request::Poll { queue: name.clone(), include_dirty: *dirty })?
                else {
                    return Err(unexpected());
                };
                let v = Value::Array(entries.iter().map(poll_json).collect());
                p.emit(out, &v, |_| render_poll(&entries))
            }
        },
        Command::Stats { queue, locks } => stats(b, &p, queue.as_deref(), *locks, out),
        Command::Enqueue(a) => enqueue(b, &p, 0, a, out),
        Command::Dequeue(a) => dequeue(b, &p, 0, a, out),
        Command::Pool(cmd) => {
            let req = match cmd {
                PoolCmd::Attach { queue, spec } => Request::PoolAttach { queue: queue.clone(), spec: spec.spec() },
                PoolCmd::Start { queue } => pool_req(queue, PoolAction::Start, PoolSpec::default()),
                PoolCmd::Stop { queue } => pool_req(queue, PoolAction::Stop, PoolSpec::default()),
                PoolCmd::Status { queue } => pool_req(queue, PoolAction::Status, PoolSpec::default()),
                PoolCmd::Redefine { queue, spec } => pool_req(queue, PoolAction::Redefine, spec.spec()),
            };
            let v = json_reply(b.call(req)?)?;
            p.emit(out, &v, render_pool)
        }
        Command::Txn => txn_session(b, &p, input, out),
        Command::Checkpoint => {
            let Response::Checkpointed(lsn) = b.call(Request::Checkpoint)? else { return Err(unexpected()) };
            p.emit(out, &json!({ "lsn": lsn }), |_| format!("checkpoint at lsn:{lsn}"))
        }
        Command::Serve(_) => unreachable!("handled before a backend is opened"),
    }
}

fn pool_req(queue: &str, action: PoolAction, spec: PoolSpec) -> Request {
    Request::PoolControl { queue: queue.to_string(), action, spec }
}

fn unexpected() -> Error {
    Error::Corrupt("unexpected reply".into())
}

fn json_reply(r: Response) -> Result<Value> {
    match r {
        Response::Json(s) => serde_json::from_str(&s).map_err(|e| Error::Corrupt(format!("bad json reply: {e}"))),
        _ => Err(unexpected()),
    }
}

fn stats(b: &mut Backend, p: &Printer, queue: Option<&str>, locks: bool, out: &mut dyn Write) -> Result<()> {
    let v = json_reply(b.call(Request::Stats { queue: queue.unwrap_or("").to_string() })?)?;
    if queue.is_some() {
        p.emit(out, &v, render_queue_report)?;
    } else {
        p.emit(out, &v, render_report)?;
    }
    if locks && !p.json {
        let table = if queue.is_some() {
            json_reply(b.call(Request::Stats { queue: String::new() })?)?["lock_table"].clone()
        } else {
            v["lock_table"].clone()
        };
        writeln!(out, "lock table:")?;
        for line in table.as_array().into_iter().flatten() {
            writeln!(out, "  {}", s(line))?;
        }
    }
    Ok(())
}

fn enqueue(b: &mut Backend, p: &Printer, txn: u64, a: &EnqueueArgs, out: &mut dyn Write) -> Result<()> {
    let req = Request::Enqueue { txn, queue: a.queue.clone(), priority: a.priority, payload: payload(a)? };
    let Response::Enqueued(id) = b.call(req)? else { return Err(unexpected()) };
    p.emit(out, &json!({ "message": id.0 }), |_| format!("{id}"))
}

fn dequeue(b: &mut Backend, p: &Printer, txn: u64, a: &DequeueArgs, out: &mut dyn Write) -> Result<()> {
    let req = Request::Dequeue { txn, queue: a.queue.clone(), isolation: isolation(a), wait_ms: a.wait_ms };
    let Response::Dequeued(m) = b.call(req)? else { return Err(unexpected()) };
    let v = match &m {
        Some(m) => message_json(m),
        None => json!({ "message": null }),
    };
    p.emit(out, &v, |_| match &m {
        Some(m) => format!("{} priority={} payload={}", m.id, m.priority, hex::encode(&m.payload)),
        None => "(empty)".to_string(),
    })
}

fn txn_session(b: &mut Backend, p: &Printer, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let mut current = 0u64;
    for line in input.lines() {
        let line = line?;
        let words = shlex::split(&line).ok_or_else(|| Error::usage(format!("unbalanced quotes in {line:?}")))?;
        if words.is_empty() || words[0].starts_with('#') {
            continue;
        }
        let cmd = TxnLine::try_parse_from(&words).map_err(|e| Error::usage(e.render().to_string()))?.cmd;
        match cmd {
            TxnCmd::Begin => {
                if current != 0 {
                    return Err(Error::usage("a transaction is already open"));
                }
                let Response::Txn(t) = b.call(Request::Begin)? else { return Err(unexpected()) };
                current = t;
                p.emit(out, &json!({ "txn": t }), |_| format!("begin t{t}"))?;
            }
            TxnCmd::Commit | TxnCmd::Abort => {
                if current == 0 {
                    return Err(Error::usage("no open transaction"));
                }
                let (req, word) = match cmd {
                    TxnCmd::Commit => (Request::Commit { txn: current }, "commit"),
                    _ => (Request::Abort { txn: current }, "abort"),
                };
                let t = current;
                current = 0;
                b.call(req)?;
                p.emit(out, &json!({ word: t }), |_| format!("{word} t{t}"))?;
            }
            TxnCmd::Enqueue(a) => enqueue(b, p, current, &a, out)?,
            TxnCmd::Dequeue(a) => dequeue(b, p, current, &a, out)?,
        }
    }
    if current != 0 {
        b.call(Request::Abort { txn: current })?;
        p.emit(out, &json!({ "abort": current }), |_| format!("abort t{current} (end of input)"))?;
    }
    Ok(())
}

fn serve(cli: &Cli, args: &ServeArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = match (&args.config, &cli.data) {
        (Some(path), _) => BrokerConfig::load(path)?,
        (None, Some(dir)) => BrokerConfig::parse(&format!("data_dir = {}", toml_string(&dir.to_string_lossy())))?,
        (None, None) => return Err(Error::usage("serve needs --config FILE or --data DIR")),
    };
    if let Some(dir) = &cli.data {
        config.data_dir = dir.clone();
    }
    if let Some(l) = &args.listen {
        config.listen = l.clone();
    }
    let broker = Broker::start(&config)?;
    install_signal_handlers(broker.stop_flag())?;
    writeln!(out, "listening on {}", broker.local_addr())?;
    out.flush()?;
    broker.wait()
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn install_signal_handlers(flag: Arc<AtomicBool>) -> Result<()> {
    for sig in [libc::SIGINT, libc::SIGTERM] {
        let flag = flag.clone();
        // SAFETY: the handler only stores to an atomic, which is
        // async-signal-safe.
        unsafe { signal_hook_registry::register(sig, move || flag.store(true, std::sync::atomic::Ordering::SeqCst)) }
            .map_err(Error::Io)?;
    }
    Ok(())
}

struct Printer {
    json: bool,
}

impl Printer {
    fn emit(&self, out: &mut dyn Write, v: &Value, text: impl FnOnce(&Value) -> String) -> Result<()> {
        if self.json {
            writeln!(out, "{}", serde_json::to_string(v).expect("value serializes"))?;
        } else {
            writeln!(out, "{}", text(v))?;
        }
        Ok(())
    }
}

fn message_json(m: &WireMessage) -> Value {
    json!({
        "message": m.id.0,
        "priority": m.priority,
        "seq": m.seq,
        "redeliveries": m.redeliveries,
        "payload_hex": hex::encode(&m.payload),
    })
}

fn poll_json(e: &WirePollEntry) -> Value {
    json!({
        "message": e.id.0,
        "priority": e.priority,
        "visibility": e.visibility.to_string(),
        "writer": e.writer.map(|t| t.0),
        "payload_hex": e.payload.as_ref().map(hex::encode),
    })
}

fn render_poll(entries: &[WirePollEntry]) -> String {
    if entries.is_empty() {
        return "(empty)".into();
    }
    let lines: Vec<String> = entries
        .iter()
        .map(|e| {
            let writer = e.writer.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
            let payload = e.payload.as_ref().map(hex::encode).unwrap_or_else(|| "-".into());
            format!("{} priority={} {} writer={writer} payload={payload}", e.id, e.priority, e.visibility)
        })
        .collect();
    lines.join("\n")
}

fn s(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        v => v.to_string(),
    }
}

fn render_queue_list(v: &Value) -> String {
    let rows = v.as_array().cloned().unwrap_or_default();
    if rows.is_empty() {
        return "(no queues)".into();
    }
    let mut lines = vec![format!("{:<24} {:<8} {:<9} {:<8}", "NAME", "STATE", "DURABLE", "ORDERING")];
    for r in rows {
        lines.push(format!(
            "{:<24} {:<8} {:<9} {:<8}",
            s(&r["name"]),
            s(&r["state"]),
            s(&r["durability"]),
            s(&r["ordering"])
        ));
    }
    lines.join("\n")
}

fn render_queue_stats(q: &Value) -> String {
    format!(
        "queue {}: state={} visible={} dirty={} enqueued={} dequeued={} lock_waits={}",
        s(&q["name"]),
        s(&q["state"]),
        s(&q["depth_visible"]),
        s(&q["depth_dirty"]),
        s(&q["enqueue_count"]),
        s(&q["dequeue_count"]),
        s(&q["lock_waits"])
    )
}

fn render_pool(p: &Value) -> String {
    format!(
        "pool on {}: state={} servers={} busy={} min={} max={} dispatched={} failed={} replaced={}",
        s(&p["queue"]),
        s(&p["state"]),
        s(&p["current_servers"]),
        s(&p["busy_servers"]),
        s(&p["min_servers"]),
        s(&p["max_servers"]),
        s(&p["dispatched_count"]),
        s(&p["failed_count"]),
        s(&p["replaced_count"])
    )
}

fn render_queue_report(v: &Value) -> String {
    let mut out = render_queue_stats(&v["queue"]);
    if !v["pool"].is_null() {
        out.push('\n');
        out.push_str(&render_pool(&v["pool"]));
    }
    out
}

/// Text form of the engine report.
pub fn render_report(v: &Value) -> String {
    let mut lines = Vec::new();
    let queues = v["queues"].as_array().cloned().unwrap_or_default();
    lines.push(format!("queues: {}", queues.len()));
    lines.extend(queues.iter().map(|q| format!("  {}", render_queue_stats(q))));
    let pools = v["pools"].as_array().cloned().unwrap_or_default();
    lines.push(format!("pools: {}", pools.len()));
    lines.extend(pools.iter().map(|p| format!("  {}", render_pool(p))));
    let triggers = v["triggers"].as_array().map(|t| t.len()).unwrap_or(0);
    lines.push(format!("triggers: {triggers}"));
    let l = &v["locks"];
    lines.push(format!(
        "locks: granted={} waits={} read_past_skips={} read_through_reads={} timeouts={}",
        s(&l["granted"]),
        s(&l["waits"]),
        s(&l["read_past_skips"]),
        s(&l["read_through_reads"]),
        s(&l["timeouts"])
    ));
    lines.push(format!("log_bytes: {}", s(&v["log_bytes"])));
    lines.push(format!("durable_lsn: {}", s(&v["durable_lsn"])));
    lines.push(format!("last_checkpoint_lsn: {}", s(&v["last_checkpoint_lsn"])));
    lines.push(format!("physical_flushes: {}", s(&v["physical_flushes"])));
    lines.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_cli(args: &[&str], stdin: &str) -> (i32, String, String) {
        let mut input = stdin.as_bytes();
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let mut argv = vec!["qdb"];
        argv.extend_from_slice(args);
        let code = run(argv, &mut input, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_cli(&["queue", "list"], "").0, 2);
        assert_eq!(run_cli(&["--data", "x", "--connect", "y", "queue", "list"], "").0, 2);
        assert_eq!(run_cli(&["frobnicate"], "").0, 2);
        assert_eq!(run_cli(&["--help"], "").0, 0);
    }

    #[test]
    fn create_enqueue_dequeue_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        let (code, out, _) = run_cli(&["--data", d, "queue", "create", "q", "--durable", "--priority"], "");
        assert_eq!(code, 0, "{out}");
        let (_, out, _) = run_cli(&["--data", d, "queue", "list"], "");
        assert!(out.lines().any(|l| l.starts_with("q ") && l.contains("ACTIVE")), "{out}");
        assert_eq!(run_cli(&["--data", d, "enqueue", "q", "--priority", "5", "--data-hex", "6869"], "").0, 0);
        let (code, out, _) = run_cli(&["--data", d, "dequeue", "q"], "");
        assert_eq!(code, 0);
        assert!(out.contains("payload=6869"), "{out}");
        let (code, _, err) = run_cli(&["--data", d, "dequeue", "missing"], "");
        assert_eq!(code, 1, "{err}");
    }

    #[test]
    fn txn_session_commits_and_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        run_cli(&["--data", d, "queue", "create", "q"], "");
        let script = "begin\nenqueue q --text a\ncommit\nbegin\nenqueue q --text b\nabort\nbegin\nenqueue q --text c\n";
        let (code, out, err) = run_cli(&["--data", d, "txn"], script);
        assert_eq!(code, 0, "{err}");
        assert!(out.contains("end of input"));
        let (_, out, _) = run_cli(&["--data", d, "--json", "queue", "poll", "q"], "");
        let v: Value = serde_json::from_str(out.trim()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 1);
        assert_eq!(v[0]["payload_hex"], "61");
    }
}
