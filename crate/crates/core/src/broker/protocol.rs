//! Framed binary protocol. Every frame is `u32 body_len` followed by the
//! body, whose first byte is the opcode. All integers are little-endian.
//!
//! A success reply carries the request's opcode; a failure carries
//! `ERROR` with `u16 code, u16 len + message`. Results with nested
//! structure (stats, queue lists, pool status) travel as UTF-8 JSON behind
//! a u32 length.

use std::io::{self, Read, Write};

use crate::codec::{DecodeError, DecodeResult, Put, Reader};
use crate::error::{Error, ErrorCode};
use crate::queue::Visibility;
use crate::types::{Durability, IsolationMode, MessageId, Ordering, TxnId};

use super::config::PoolSpec;

pub const OP_BEGIN: u8 = 0x01;
pub const OP_COMMIT: u8 = 0x02;
pub const OP_ABORT: u8 = 0x03;
pub const OP_ENQUEUE: u8 = 0x10;
pub const OP_DEQUEUE: u8 = 0x11;
pub const OP_POLL: u8 = 0x12;
pub const OP_STATS: u8 = 0x20;
pub const OP_CREATE_QUEUE: u8 = 0x30;
pub const OP_DESTROY_QUEUE: u8 = 0x31;
pub const OP_LIST_QUEUES: u8 = 0x32;
pub const OP_POOL_CONTROL: u8 = 0x40;
pub const OP_POOL_ATTACH: u8 = 0x41;
pub const OP_CHECKPOINT: u8 = 0x50;
pub const OP_ERROR: u8 = 0x7F;

/// Frames larger than this are refused and the connection is closed,
/// since the stream can no longer be trusted.
pub const MAX_FRAME: u32 = 2 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAction {
    Start,
    Stop,
    Status,
    Redefine,
}

impl PoolAction {
    fn to_byte(self) -> u8 {
        match self {
            PoolAction::Start => 0,
            PoolAction::Stop => 1,
            PoolAction::Status => 2,
            PoolAction::Redefine => 3,
        }
    }

    fn from_byte(b: u8) -> DecodeResult<Self> {
        Ok(match b {
            0 => PoolAction::Start,
            1 => PoolAction::Stop,
            2 => PoolAction::Status,
            3 => PoolAction::Redefine,
            _ => return Err(DecodeError(format!("unknown pool action {b}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Begin,
    Commit {
        txn: u64,
    },
    Abort {
        txn: u64,
    },
    /// `txn == 0` runs in a transaction of its own.
    Enqueue {
        txn: u64,
        queue: String,
        priority: i64,
        payload: Vec<u8>,
    },
    Dequeue {
        txn: u64,
        queue: String,
        isolation: IsolationMode,
        wait_ms: u32,
    },
    Poll {
        queue: String,
        include_dirty: bool,
    },
    /// Empty `queue` asks for the whole report.
    Stats {
        queue: String,
    },
    CreateQueue {
        name: String,
        durability: Durability,
        ordering: Ordering,
    },
    DestroyQueue {
        name: String,
    },
    ListQueues,
    /// `spec` is only meaningful for `Redefine`, where unset fields keep
    /// their current values.
    PoolControl {
        queue: String,
        action: PoolAction,
        spec: PoolSpec,
    },
    PoolAttach {
        queue: String,
        spec: PoolSpec,
    },
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub id: MessageId,
    pub priority: i64,
    pub seq: u64,
    pub redeliveries: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WirePollEntry {
    pub id: MessageId,
    pub priority: i64,
    pub visibility: Visibility,
    pub writer: Option<TxnId>,
    pub payload: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Txn(u64),
    Done,
    Enqueued(MessageId),
    Dequeued(Option<WireMessage>),
    Polled(Vec<WirePollEntry>),
    Json(String),
    Checkpointed(u64),
    Error { code: ErrorCode, message: String },
}

impl Response {
    pub fn from_error(e: &Error) -> Response {
        Response::Error { code: e.code(), message: e.to_string() }
    }

    /// Converts an error reply back into an engine error.
    pub fn into_result(self) -> crate::error::Result<Response> {
        match self {
            Response::Error { code, message } => Err(Error::Remote { code, message }),
            r => Ok(r),
        }
    }
}

fn name(s: &str) -> &[u8] {
    s.as_bytes()
}

impl Request {
    pub fn opcode(&self) -> u8 {
        match self {
            Request::Begin => OP_BEGIN,
            Request::Commit { .. } => OP_COMMIT,
            Request::Abort { .. } => OP_ABORT,
            Request::Enqueue { .. } => OP_ENQUEUE,
            Request::Dequeue { .. } => OP_DEQUEUE,
            Request::Poll { .. } => OP_POLL,
            Request::Stats { .. } => OP_STATS,
            Request::CreateQueue { .. } => OP_CREATE_QUEUE,
            Request::DestroyQueue { .. } => OP_DESTROY_QUEUE,
            Request::ListQueues => OP_LIST_QUEUES,
            Request::PoolControl { .. } => OP_POOL_CONTROL,
            Request::PoolAttach { .. } => OP_POOL_ATTACH,
            Request::Checkpoint => OP_CHECKPOINT,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = vec![self.opcode()];
        match self {
            Request::Begin | Request::ListQueues | Request::Checkpoint => {}
            Request::Commit { txn } | Request::Abort { txn } => b.put_u64(*txn),
            Request::Enqueue { txn, queue, priority, payload } => {
                b.put_u64(*txn);
                b.put_bytes16(name(queue));
                b.put_i64(*priority);
                b.put_bytes32(payload);
            }
            Request::Dequeue { txn, queue, isolation, wait_ms } => {
                b.put_u64(*txn);
                b.put_bytes16(name(queue));
                b.put_u8(isolation.to_byte());
                b.put_u32(*wait_ms);
            }
            Request::Poll { queue, include_dirty } => {
                b.put_bytes16(name(queue));
                b.put_u8(*include_dirty as u8);
            }
            Request::Stats { queue } => b.put_bytes16(name(queue)),
            Request::CreateQueue { name: n, durability, ordering } => {
                b.put_bytes16(name(n));
                b.put_u8(durability.to_byte());
                b.put_u8(ordering.to_byte());
            }
            Request::DestroyQueue { name: n } => b.put_bytes16(name(n)),
            Request::PoolControl { queue, action, spec } => {
                b.put_bytes16(name(queue));
                b.put_u8(action.to_byte());
                b.put_bytes32(&spec_json(spec));
            }
            Request::PoolAttach { queue, spec } => {
                b.put_bytes16(name(queue));
                b.put_bytes32(&spec_json(spec));
            }
        }
        b
    }

    pub fn decode(body: &[u8]) -> DecodeResult<Request> {
        let mut r = Reader::new(body);
        let op = r.u8()?;
        let req = match op {
            OP_BEGIN => Request::Begin,
            OP_COMMIT => Request::Commit { txn: r.u64()? },
            OP_ABORT => Request::Abort { txn: r.u64()? },
            OP_ENQUEUE => Request::Enqueue {
                txn: r.u64()?,
                queue: r.str16()?.to_string(),
                priority: r.i64()?,
                payload: r.bytes32()?.to_vec(),
            },
            OP_DEQUEUE => Request::Dequeue {
                txn: r.u64()?,
                queue: r.str16()?.to_string(),
                isolation: IsolationMode::from_byte(r.u8()?)
                    .ok_or_else(|| DecodeError("unknown isolation mode".into()))?,
                wait_ms: r.u32()?,
            },
            OP_POLL => Request::Poll { queue: r.str16()?.to_string(), include_dirty: flag(r.u8()?)? },
            OP_STATS => Request::Stats { queue: r.str16()?.to_string() },
            OP_CREATE_QUEUE => Request::CreateQueue {
                name: r.str16()?.to_string(),
                durability: Durability::from_byte(r.u8()?).ok_or_else(|| DecodeError("unknown durability".into()))?,
                ordering: Ordering::from_byte(r.u8()?).ok_or_else(|| DecodeError("unknown ordering".into()))?,
            },
            OP_DESTROY_QUEUE => Request::DestroyQueue { name: r.str16()?.to_string() },
            OP_LIST_QUEUES => Request::ListQueues,
            OP_POOL_CONTROL => Request::PoolControl {
                queue: r.str16()?.to_string(),
                action: PoolAction::from_byte(r.u8()?)?,
                spec: parse_spec(r.bytes32()?)?,
            },
            OP_POOL_ATTACH => Request::PoolAttach { queue: r.str16()?.to_string(), spec: parse_spec(r.bytes32()?)? },
            OP_CHECKPOINT => Request::Checkpoint,
            op => return Err(DecodeError(format!("unknown opcode 0x{op:02x}"))),
        };
        r.finish()?;
        Ok(req)
    }
}

fn flag(b: u8) -> DecodeResult<bool> {
    match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(DecodeError(format!("bad flag {b}"))),
    }
}

fn spec_json(spec: &PoolSpec) -> Vec<u8> {
    serde_json::to_vec(spec).expect("pool spec serializes")
}

fn parse_spec(b: &[u8]) -> DecodeResult<PoolSpec> {
    serde_json::from_slice(b).map_err(|e| DecodeError(format!("bad pool spec: {e}")))
}

fn visibility_byte(v: Visibility) -> u8 {
    match v {
        Visibility::Visible => 0,
        Visibility::UncommittedInsert => 1,
        Visibility::UncommittedDelete => 2,
    }
}

fn visibility_from(b: u8) -> DecodeResult<Visibility> {
    Ok(match b {
        0 => Visibility::Visible,
        1 => Visibility::UncommittedInsert,
        2 => Visibility::UncommittedDelete,
        _ => return Err(DecodeError(format!("bad visibility {b}"))),
    })
}

impl Response {
    /// Encodes the reply to a request with opcode `op`.
    pub fn encode(&self, op: u8) -> Vec<u8> {
        let mut b = Vec::new();
        if let Response::Error { code, message } = self {
            b.put_u8(OP_ERROR);
            b.put_u16(*code as u16);
            let mut m = message.as_bytes();
            if m.len() > u16::MAX as usize {
                m = &m[..u16::MAX as usize];
            }
            b.put_bytes16(m);
            return b;
        }
        b.put_u8(op);
        match self {
            Response::Txn(t) => b.put_u64(*t),
            Response::Done => {}
            Response::Enqueued(id) => b.put_u64(id.0),
            Response::Dequeued(m) => match m {
                None => b.put_u8(0),
                Some(m) => {
                    b.put_u8(1);
                    b.put_u64(m.id.0);
                    b.put_i64(m.priority);
                    b.put_u64(m.seq);
                    b.put_u32(m.redeliveries);
                    b.put_bytes32(&m.payload);
                }
            },
            Response::Polled(entries) => {
                b.put_u32(entries.len() as u32);
                for e in entries {
                    b.put_u64(e.id.0);
                    b.put_i64(e.priority);
                    b.put_u8(visibility_byte(e.visibility));
                    b.put_u64(e.writer.map(|t| t.0).unwrap_or(0));
                    match &e.payload {
                        None => b.put_u8(0),
                        Some(p) => {
                            b.put_u8(1);
                            b.put_bytes32(p);
                        }
                    }
                }
            }
            Response::Json(s) => b.put_bytes32(s.as_bytes()),
            Response::Checkpointed(lsn) => b.put_u64(*lsn),
            Response::Error { .. } => unreachable!(),
        }
        b
    }

    /// Decodes the reply to a request with opcode `op`.
    pub fn decode(op: u8, body: &[u8]) -> DecodeResult<Response> {
        let mut r = Reader::new(body);
        let got = r.u8()?;
        if got == OP_ERROR {
            let code = r.u16()?;
            let code = ErrorCode::from_u16(code).ok_or_else(|| DecodeError(format!("bad error code {code}")))?;
            let message = String::from_utf8_lossy(r.bytes16()?).into_owned();
            r.finish()?;
            return Ok(Response::Error { code, message });
        }
        if got != op {
            return Err(DecodeError(format!("reply opcode 0x{got:02x} to request 0x{op:02x}")));
        }
        let resp = match op {
            OP_BEGIN => Response::Txn(r.u64()?),
            OP_COMMIT | OP_ABORT | OP_DESTROY_QUEUE => Response::Done,
            OP_ENQUEUE => Response::Enqueued(MessageId(r.u64()?)),
            OP_DEQUEUE => Response::Dequeued(match r.u8()? {
                0 => None,
                1 => Some(WireMessage {
                    id: MessageId(r.u64()?),
                    priority: r.i64()?,
                    seq: r.u64()?,
                    redeliveries: r.u32()?,
                    payload: r.bytes32()?.to_vec(),
                }),
                b => return Err(DecodeError(format!("bad found flag {b}"))),
            }),
            OP_POLL => {
                let n = r.u32()?;
                let mut v = Vec::new();
                for _ in 0..n {
                    let id = MessageId(r.u64()?);
                    let priority = r.i64()?;
                    let visibility = visibility_from(r.u8()?)?;
                    let writer = match r.u64()? {
                        0 => None,
                        t => Some(TxnId(t)),
                    };
                    let payload = if flag(r.u8()?)? { Some(r.bytes32()?.to_vec()) } else { None };
                    v.push(WirePollEntry { id, priority, visibility, writer, payload });
                }
                Response::Polled(v)
            }
            OP_STATS | OP_CREATE_QUEUE | OP_LIST_QUEUES | OP_POOL_CONTROL | OP_POOL_ATTACH => {
                Response::Json(r.str32()?.to_string())
            }
            OP_CHECKPOINT => Response::Checkpointed(r.u64()?),
            op => return Err(DecodeError(format!("unknown opcode 0x{op:02x}"))),
        };
        r.finish()?;
        Ok(resp)
    }
}

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_le_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on a clean end of stream before a header.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_requests() -> Vec<Request> {
        vec![
            Request::Begin,
            Request::Commit { txn: 3 },
            Request::Abort { txn: 4 },
            Request::Enqueue { txn: 0, queue: "q".into(), priority: -2, payload: b"hi".to_vec() },
            Request::Dequeue { txn: 9, queue: "q".into(), isolation: IsolationMode::Serializable, wait_ms: 50 },
            Request::Poll { queue: "q".into(), include_dirty: true },
            Request::Stats { queue: String::new() },
            Request::CreateQueue { name: "v".into(), durability: Durability::Volatile, ordering: Ordering::Priority },
            Request::DestroyQueue { name: "v".into() },
            Request::ListQueues,
            Request::PoolControl { queue: "q".into(), action: PoolAction::Redefine, spec: PoolSpec::default() },
            Request::PoolAttach { queue: "q".into(), spec: PoolSpec { max_servers: Some(3), ..Default::default() } },
            Request::Checkpoint,
        ]
    }

    #[test]
    fn requests_round_trip() {
        for req in all_requests() {
            assert_eq!(Request::decode(&req.encode()).unwrap(), req);
        }
    }

    #[test]
    fn responses_round_trip() {
        let cases = [
            (OP_BEGIN, Response::Txn(5)),
            (OP_COMMIT, Response::Done),
            (OP_ENQUEUE, Response::Enqueued(MessageId(8))),
            (OP_DEQUEUE, Response::Dequeued(None)),
            (
                OP_DEQUEUE,
                Response::Dequeued(Some(WireMessage {
                    id: MessageId(1),
                    priority: 3,
                    seq: 7,
                    redeliveries: 2,
                    payload: vec![1, 2],
                })),
            ),
            (
                OP_POLL,
                Response::Polled(vec![WirePollEntry {
                    id: MessageId(2),
                    priority: 0,
                    visibility: Visibility::UncommittedDelete,
                    writer: Some(TxnId(4)),
                    payload: None,
                }]),
            ),
            (OP_STATS, Response::Json("{}".into())),
            (OP_CHECKPOINT, Response::Checkpointed(12)),
            (OP_POLL, Response::Error { code: ErrorCode::NotFound, message: "queue x".into() }),
        ];
        for (op, resp) in cases {
            assert_eq!(Response::decode(op, &resp.encode(op)).unwrap(), resp);
        }
    }

    #[test]
    fn truncated_and_unknown_bodies_are_rejected() {
        for req in all_requests() {
            let b = req.encode();
            for cut in 1..b.len() {
                assert!(Request::decode(&b[..cut]).is_err(), "{req:?} cut at {cut}");
            }
        }
        assert!(Request::decode(&[0x66]).is_err());
        assert!(Request::decode(&[]).is_err());
    }

    #[test]
    fn oversized_frame_header_is_refused_without_allocating() {
        let mut src: &[u8] = &u32::MAX.to_le_bytes();
        assert!(read_frame(&mut src).is_err());
        let mut empty: &[u8] = &[];
        assert!(read_frame(&mut empty).unwrap().is_none());
    }
}
