//! Request/response over queues as three separate transactions: the client
//! submits a request, a server dequeues it, does the work and enqueues the
//! response, and the client dequeues the response.
//!
//! Responses are matched to requests by `request_id`. On a shared reply
//! queue `await_response` claims only the matching response; per-client
//! reply queues avoid scanning other clients' responses.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::panic::{AssertUnwindSafe, catch_unwind};
use std::time::Duration;

use serde::Serialize;

use crate::codec::{DecodeError, DecodeResult, Put, Reader};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::lockmgr::NotifyReason;
use crate::queue::{Message, PollFilter, PollOptions, Visibility};
use crate::txn::Txn;
use crate::types::{Durability, IsolationMode, MessageId, Ordering, QueueState};
use crate::wal::LogBody;

pub const REQUEST_MAGIC: &[u8; 4] = b"QREQ";
pub const RESPONSE_MAGIC: &[u8; 4] = b"QRSP";
pub const WIRE_VERSION: u8 = 1;
/// Rolled-back deliveries after which a request is dead-lettered.
pub const MAX_REDELIVERY: u32 = 10;
pub const DLQ_SUFFIX: &str = ".DLQ";

/// Maps a request body to a response body. An `Err` is a business failure:
/// it is answered with a `HandlerError` response, which commits.
pub type Handler = dyn Fn(&[u8]) -> std::result::Result<Vec<u8>, String> + Send + Sync;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub request_id: u64,
    pub reply_to: String,
    pub body: Vec<u8>,
    /// Enqueue sequence of the carrying message; zero before it is dequeued.
    pub submitted_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ResponseStatus {
    Ok,
    HandlerError,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub request_id: u64,
    pub status: ResponseStatus,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestStatus {
    Queued,
    InProcess,
    Done,
    Unknown,
}

impl fmt::Display for RequestStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RequestStatus::Queued => "QUEUED",
            RequestStatus::InProcess => "IN_PROCESS",
            RequestStatus::Done => "DONE",
            RequestStatus::Unknown => "UNKNOWN",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProcessedOutcome {
    Served {
        request_id: u64,
        status: ResponseStatus,
    },
    /// Moved to the dead-letter queue: redelivered too often, or not a
    /// request at all.
    DeadLettered {
        message: MessageId,
    },
    /// No request was available.
    Empty,
}

pub fn encode_request(request_id: u64, reply_to: &str, body: &[u8]) -> Vec<u8> {
    let mut b = Vec::with_capacity(19 + reply_to.len() + body.len());
    b.extend_from_slice(REQUEST_MAGIC);
    b.put_u8(WIRE_VERSION);
    b.put_u64(request_id);
    b.put_bytes16(reply_to.as_bytes());
    b.put_bytes32(body);
    b
}

pub fn decode_request(buf: &[u8]) -> DecodeResult<Request> {
    let mut r = Reader::new(buf);
    header(&mut r, REQUEST_MAGIC)?;
    let request_id = r.u64()?;
    let reply_to = r.str16()?.to_string();
    let body = r.bytes32()?.to_vec();
    r.finish()?;
    Ok(Request { request_id, reply_to, body, submitted_seq: 0 })
}

pub fn encode_response(resp: &Response) -> Vec<u8> {
    let mut b = Vec::with_capacity(18 + resp.body.len());
    b.extend_from_slice(RESPONSE_MAGIC);
    b.put_u8(WIRE_VERSION);
    b.put_u64(resp.request_id);
    b.put_u8(match resp.status {
        ResponseStatus::Ok => 0,
        ResponseStatus::HandlerError => 1,
    });
    b.put_bytes32(&resp.body);
    b
}

pub fn decode_response(buf: &[u8]) -> DecodeResult<Response> {
    let mut r = Reader::new(buf);
    header(&mut r, RESPONSE_MAGIC)?;
    let request_id = r.u64()?;
    let status = match r.u8()? {
        0 => ResponseStatus::Ok,
        1 => ResponseStatus::HandlerError,
        s => return Err(DecodeError(format!("unknown response status {s}"))),
    };
    let body = r.bytes32()?.to_vec();
    r.finish()?;
    Ok(Response { request_id, status, body })
}

fn header(r: &mut Reader<'_>, magic: &[u8; 4]) -> DecodeResult<()> {
    if r.take(4)? != magic {
        return Err(DecodeError("bad magic".into()));
    }
    let v = r.u8()?;
    if v != WIRE_VERSION {
        return Err(DecodeError(format!("unsupported version {v}")));
    }
    Ok(())
}

fn require_active(engine: &Engine, queue: &str) -> Result<()> {
    let d = engine.queue(queue)?;
    if d.state != QueueState::Active {
        return Err(Error::Unavailable(format!("queue {queue} is {}", d.state)));
    }
    Ok(())
}

/// First unit: places a request in its own transaction and returns once
/// the commit is durable.
pub fn submit(engine: &Engine, request_queue: &str, reply_to: &str, body: &[u8]) -> Result<u64> {
    require_active(engine, request_queue)?;
    require_active(engine, reply_to)?;
    let request_id = engine.allocate_id();
    let payload = encode_request(request_id, reply_to, body);
    engine.with_txn(|t| t.enqueue(request_queue, 0, &payload))?;
    Ok(request_id)
}

/// Second unit, for a request already dequeued by `txn`: runs the handler
/// and enqueues the response in the same transaction. The caller commits.
pub fn process(txn: &mut Txn, msg: &Message, handler: &Handler) -> Result<ProcessedOutcome> {
    let req = match decode_request(&msg.payload) {
        Ok(r) if msg.redeliveries < MAX_REDELIVERY => r,
        Ok(_) | Err(_) => {
            dead_letter(txn, msg)?;
            return Ok(ProcessedOutcome::DeadLettered { message: msg.id });
        }
    };
    let (status, body) = match handler(&req.body) {
        Ok(body) => (ResponseStatus::Ok, body),
        Err(e) => (ResponseStatus::HandlerError, e.into_bytes()),
    };
    let resp = Response { request_id: req.request_id, status, body };
    txn.enqueue(&req.reply_to, 0, &encode_response(&resp))?;
    Ok(ProcessedOutcome::Served { request_id: req.request_id, status })
}

fn dead_letter(txn: &mut Txn, msg: &Message) -> Result<()> {
    let dlq = format!("{}{DLQ_SUFFIX}", msg.queue);
    match txn.engine().create_queue(&dlq, Durability::Durable, Ordering::Fifo) {
        Ok(_) | Err(Error::AlreadyExists(_)) => {}
        Err(e) => return Err(e),
    }
    log::warn!("dead-lettering {} from {} after {} redeliveries", msg.id, msg.queue, msg.redeliveries);
    txn.enqueue(&dlq, msg.priority, &msg.payload)?;
    Ok(())
}

/// Adapts a request handler into a pool worker body.
pub fn pool_handler(
    handler: impl Fn(&[u8]) -> std::result::Result<Vec<u8>, String> + Send + Sync + 'static,
) -> impl Fn(&mut Txn, &Message) -> std::result::Result<(), String> + Send + Sync + 'static {
    move |txn, msg| process(txn, msg, &handler).map(|_| ()).map_err(|e| e.to_string())
}

/// Second unit as one call: dequeue (skipping requests other servers hold),
/// handle, respond, commit. A panic in the handler aborts, leaving the
/// request to be redelivered.
pub fn serve_one(engine: &Engine, request_queue: &str, handler: &Handler) -> Result<ProcessedOutcome> {
    let mut txn = engine.begin()?;
    let Some(msg) = txn.dequeue(request_queue, IsolationMode::ReadPastDequeue, Duration::ZERO)? else {
        txn.abort()?;
        return Ok(ProcessedOutcome::Empty);
    };
    match catch_unwind(AssertUnwindSafe(|| process(&mut txn, &msg, handler))) {
        Ok(Ok(outcome)) => {
            txn.commit()?;
            Ok(outcome)
        }
        Ok(Err(e)) => {
            let _ = txn.abort();
            Err(e)
        }
        Err(_) => {
            let _ = txn.abort();
            Err(Error::Failed(format!("server crashed on request message {}", msg.id)))
        }
    }
}

fn find_response(engine: &Engine, reply_to: &str, request_id: u64) -> Result<Option<MessageId>> {
    let opts = PollOptions { include_payload: true, ..PollOptions::default() };
    Ok(engine.poll_with(reply_to, opts)?.into_iter().find_map(|e| {
        let p = e.payload.as_deref()?;
        (decode_response(p).ok()?.request_id == request_id).then_some(e.message)
    }))
}

/// Non-blocking status probe. An in-flight request is recognized through a
/// dirty read of the request queue.
pub fn status(engine: &Engine, request_id: u64, request_queue: &str, reply_to: &str) -> RequestStatus {
    if let Ok(Some(_)) = find_response(engine, reply_to, request_id) {
        return RequestStatus::Done;
    }
    let opts =
        PollOptions { filter: PollFilter::All, include_dirty: true, include_payload: true, unsafe_dirty_payload: true };
    let Ok(entries) = engine.poll_with(request_queue, opts) else { return RequestStatus::Unknown };
    for e in entries {
        let Some(req) = e.payload.as_deref().and_then(|p| decode_request(p).ok()) else { continue };
        if req.request_id != request_id {
            continue;
        }
        match e.visibility {
            Visibility::UncommittedDelete => return RequestStatus::InProcess,
            Visibility::Visible => return RequestStatus::Queued,
            Visibility::UncommittedInsert => {}
        }
    }
    RequestStatus::Unknown
}

/// Third unit: dequeues the response for `request_id` and commits. Returns
/// `Error::Timeout` if none arrives in time, leaving every response in place.
pub fn await_response(engine: &Engine, request_id: u64, reply_to: &str, timeout: Duration) -> Result<Response> {
    let clock = engine.clock().clone();
    let deadline = clock.now() + timeout;
    let sub = engine.subscribe(request_id, reply_to)?;
    loop {
        if let Some(mid) = find_response(engine, reply_to, request_id)? {
            let mut txn = engine.begin()?;
            if let Some(msg) = txn.dequeue_message(reply_to, mid)? {
                let resp = decode_response(&msg.payload).map_err(|e| Error::Corrupt(e.0))?;
                txn.commit()?;
                return Ok(resp);
            }
            // claimed by someone else in the meantime; look again
            txn.abort()?;
            continue;
        }
        let now = clock.now();
        if now >= deadline {
            return Err(Error::Timeout(format!("no response for request {request_id} on {reply_to}")));
        }
        if let Some(NotifyReason::Destroyed) = sub.wait((deadline - now).min(Duration::from_millis(50))) {
            return Err(Error::NotFound(format!("queue {reply_to}")));
        }
    }
}

/// Counts, per request id, the committed transactions that inserted or
/// removed a message carrying that request or its response. Only the log
/// written since the last checkpoint is visible to this count.
pub fn committed_txns_per_request(engine: &Engine) -> Result<BTreeMap<u64, usize>> {
    let mut owner: HashMap<MessageId, u64> = HashMap::new();
    let mut touched: HashMap<crate::TxnId, BTreeSet<u64>> = HashMap::new();
    let mut counts = BTreeMap::new();
    for rec in engine.log_records()? {
        match &rec.body {
            LogBody::Insert { message, payload, .. } => {
                let id = decode_request(payload)
                    .map(|r| r.request_id)
                    .or_else(|_| decode_response(payload).map(|r| r.request_id));
                if let Ok(id) = id {
                    owner.insert(*message, id);
                    touched.entry(rec.txn).or_default().insert(id);
                }
            }
            LogBody::Delete { message, .. } => {
                if let Some(id) = owner.get(message) {
                    touched.entry(rec.txn).or_default().insert(*id);
                }
            }
            LogBody::Commit => {
                for id in touched.remove(&rec.txn).unwrap_or_default() {
                    *counts.entry(id).or_insert(0) += 1;
                }
            }
            LogBody::Abort => {
                touched.remove(&rec.txn);
            }
            _ => {}
        }
    }
    Ok(counts)
}
