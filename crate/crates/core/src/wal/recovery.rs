//! Redo-only recovery: replays the log (optionally on top of a checkpoint
//! image) and keeps exactly the effects of transactions whose COMMIT record
//! made it to disk.

use std::collections::{BTreeMap, HashMap};

use crate::codec::{DecodeError, DecodeResult, Put, Reader};
use crate::error::{Error, Result};
use crate::types::{Durability, Lsn, MessageId, Ordering, QueueId, TxnId};

use super::record::{
    CHECKPOINT_MAGIC, FrameRead, HEADER_LEN, LOG_MAGIC, LogBody, LogRecord, check_header, read_frame, write_frame,
    write_header,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageImage {
    pub priority: i64,
    pub seq: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueImage {
    pub name: String,
    pub durability: Durability,
    pub ordering: Ordering,
    pub created_lsn: Lsn,
    pub next_seq: u64,
    pub messages: BTreeMap<MessageId, MessageImage>,
}

/// Committed catalog and durable queue contents, plus id allocators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurableState {
    pub lsn: Lsn,
    pub next_txn: u64,
    pub next_message: u64,
    pub next_queue: u64,
    pub queues: BTreeMap<QueueId, QueueImage>,
}

impl Default for DurableState {
    fn default() -> Self {
        DurableState { lsn: Lsn(0), next_txn: 1, next_message: 1, next_queue: 1, queues: BTreeMap::new() }
    }
}

impl DurableState {
    fn note_ids(&mut self, rec: &LogRecord) {
        self.next_txn = self.next_txn.max(rec.txn.0 + 1);
        match &rec.body {
            LogBody::Insert { message, .. } => self.next_message = self.next_message.max(message.0 + 1),
            LogBody::CreateQueue { queue, .. } => self.next_queue = self.next_queue.max(queue.0 + 1),
            _ => {}
        }
    }

    fn apply(&mut self, lsn: Lsn, body: &LogBody) {
        match body {
            LogBody::CreateQueue { queue, name, durability, ordering } => {
                self.queues.insert(
                    *queue,
                    QueueImage {
                        name: name.clone(),
                        durability: *durability,
                        ordering: *ordering,
                        created_lsn: lsn,
                        next_seq: 1,
                        messages: BTreeMap::new(),
                    },
                );
            }
            LogBody::DestroyQueue { queue } => {
                self.queues.remove(queue);
            }
            LogBody::Insert { queue, message, priority, payload } => {
                if let Some(q) = self.queues.get_mut(queue) {
                    let seq = q.next_seq;
                    q.next_seq += 1;
                    q.messages.insert(*message, MessageImage { priority: *priority, seq, payload: payload.clone() });
                }
            }
            LogBody::Delete { queue, message } => {
                if let Some(q) = self.queues.get_mut(queue) {
                    q.messages.remove(message);
                }
            }
            LogBody::Begin | LogBody::Commit | LogBody::Abort | LogBody::Checkpoint => {}
        }
    }

    /// Committed messages of one queue in dequeue order.
    pub fn ordered_messages(&self, queue: QueueId) -> Vec<(MessageId, &MessageImage)> {
        let Some(q) = self.queues.get(&queue) else { return Vec::new() };
        let mut v: Vec<_> = q.messages.iter().map(|(id, m)| (*id, m)).collect();
        v.sort_by_key(|(_, m)| (std::cmp::Reverse(m.priority), m.seq));
        v
    }

    pub fn queue_by_name(&self, name: &str) -> Option<(QueueId, &QueueImage)> {
        self.queues.iter().find(|(_, q)| q.name == name).map(|(id, q)| (*id, q))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovery {
    pub state: DurableState,
    /// Bytes of the log file that hold valid records; everything after is a
    /// torn tail and must be cut off before appending again. Zero means the
    /// log has to be (re)created.
    pub valid_len: usize,
    pub torn_tail: bool,
    pub replayed: usize,
}

/// Parses every valid record of a log file. Stops at the first frame that
/// does not check out. Returns the records with the byte offset at which
/// each one ends, plus the offset where parsing stopped.
pub fn scan_log(log: &[u8]) -> Result<(Vec<(LogRecord, usize)>, usize)> {
    if log.len() < HEADER_LEN {
        return Ok((Vec::new(), 0));
    }
    check_header(log, LOG_MAGIC).map_err(|e| Error::Corrupt(e.0))?;
    let mut out = Vec::new();
    let mut pos = HEADER_LEN;
    while pos < log.len() {
        match read_frame(log, pos) {
            FrameRead::Ok { body, next } => match LogRecord::decode_body(body) {
                Ok(rec) => {
                    out.push((rec, next));
                    pos = next;
                }
                Err(_) => break,
            },
            _ => break,
        }
    }
    Ok((out, pos))
}

/// True when a valid COMMIT frame appears anywhere at or after `pos`.
fn commit_follows(log: &[u8], mut pos: usize) -> bool {
    while pos < log.len() {
        match read_frame(log, pos) {
            FrameRead::Ok { body, next } => {
                if let Ok(rec) = LogRecord::decode_body(body)
                    && rec.body == LogBody::Commit
                {
                    return true;
                }
                pos = next;
            }
            FrameRead::BadChecksum { next } => pos = next,
            FrameRead::Incomplete | FrameRead::BadLength => return false,
        }
    }
    false
}

pub fn recover(log: Option<&[u8]>, image: Option<&[u8]>) -> Result<Recovery> {
    let mut state = match image {
        Some(bytes) => decode_image(bytes).map_err(|e| Error::Corrupt(format!("checkpoint: {e}")))?,
        None => DurableState::default(),
    };
    let image_lsn = state.lsn;
    let Some(log) = log else {
        return Ok(Recovery { state, valid_len: 0, torn_tail: false, replayed: 0 });
    };
    if log.len() < HEADER_LEN {
        return Ok(Recovery { state, valid_len: 0, torn_tail: !log.is_empty(), replayed: 0 });
    }
    check_header(log, LOG_MAGIC).map_err(|e| Error::Corrupt(e.0))?;

    let mut pending: HashMap<TxnId, Vec<(Lsn, LogBody)>> = HashMap::new();
    let mut last_lsn = Lsn(0);
    let mut pos = HEADER_LEN;
    let mut torn = false;
    let mut replayed = 0;
    while pos < log.len() {
        let (body, next) = match read_frame(log, pos) {
            FrameRead::Ok { body, next } => (body, next),
            FrameRead::Incomplete | FrameRead::BadLength => {
                torn = true;
                break;
            }
            FrameRead::BadChecksum { next } => {
                if commit_follows(log, next) {
                    return Err(Error::Corrupt(format!("checksum failure at offset {pos} precedes committed records")));
                }
                torn = true;
                break;
            }
        };
        let rec = match LogRecord::decode_body(body) {
            Ok(r) => r,
            Err(e) => {
                if commit_follows(log, next) {
                    return Err(Error::Corrupt(format!("undecodable record at offset {pos}: {e}")));
                }
                torn = true;
                break;
            }
        };
        if rec.lsn <= last_lsn {
            return Err(Error::Corrupt(format!("lsn {} at offset {pos} does not follow {}", rec.lsn.0, last_lsn.0)));
        }
        last_lsn = rec.lsn;
        pos = next;
        if rec.lsn <= image_lsn {
            continue;
        }
        replayed += 1;
        state.note_ids(&rec);
        match rec.body {
            LogBody::Begin => {
                pending.insert(rec.txn, Vec::new());
            }
            LogBody::Commit => {
                let effects = pending
                    .remove(&rec.txn)
                    .ok_or_else(|| Error::Corrupt(format!("COMMIT for {} without BEGIN", rec.txn)))?;
                for (lsn, body) in &effects {
                    state.apply(*lsn, body);
                }
            }
            LogBody::Abort => {
                pending.remove(&rec.txn);
            }
            LogBody::Checkpoint => {}
            body => {
                let effects = pending
                    .get_mut(&rec.txn)
                    .ok_or_else(|| Error::Corrupt(format!("{:?} record for {} without BEGIN", body.kind(), rec.txn)))?;
                effects.push((rec.lsn, body));
            }
        }
    }
    state.lsn = state.lsn.max(last_lsn);
    Ok(Recovery { state, valid_len: pos, torn_tail: torn, replayed })
}

const IMG_META: u8 = 1;
const IMG_QUEUE: u8 = 2;
const IMG_MESSAGE: u8 = 3;

pub fn encode_image(state: &DurableState) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out, CHECKPOINT_MAGIC);
    let total: u64 = state.queues.values().map(|q| q.messages.len() as u64).sum();
    let mut b = Vec::new();
    b.put_u8(IMG_META);
    b.put_u64(state.lsn.0);
    b.put_u64(state.next_txn);
    b.put_u64(state.next_message);
    b.put_u64(state.next_queue);
    b.put_u32(state.queues.len() as u32);
    b.put_u64(total);
    write_frame(&mut out, &b);
    for (id, q) in &state.queues {
        let mut b = Vec::new();
        b.put_u8(IMG_QUEUE);
        b.put_u64(id.0);
        b.put_bytes32(q.name.as_bytes());
        b.put_u8(q.durability.to_byte());
        b.put_u8(q.ordering.to_byte());
        b.put_u64(q.created_lsn.0);
        b.put_u64(q.next_seq);
        write_frame(&mut out, &b);
        for (mid, m) in &q.messages {
            let mut b = Vec::new();
            b.put_u8(IMG_MESSAGE);
            b.put_u64(id.0);
            b.put_u64(mid.0);
            b.put_i64(m.priority);
            b.put_u64(m.seq);
            b.put_bytes32(&m.payload);
            write_frame(&mut out, &b);
        }
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> DecodeResult<DurableState> {
    check_header(bytes, CHECKPOINT_MAGIC)?;
    let mut pos = HEADER_LEN;
    let mut frames = Vec::new();
    while pos < bytes.len() {
        match read_frame(bytes, pos) {
            FrameRead::Ok { body, next } => {
                frames.push(body);
                pos = next;
            }
            other => return Err(DecodeError(format!("bad image frame at {pos}: {other:?}"))),
        }
    }
    let mut it = frames.into_iter();
    let meta = it.next().ok_or_else(|| DecodeError("empty image".into()))?;
    let mut r = Reader::new(meta);
    if r.u8()? != IMG_META {
        return Err(DecodeError("image does not start with metadata".into()));
    }
    let mut state = DurableState {
        lsn: Lsn(r.u64()?),
        next_txn: r.u64()?,
        next_message: r.u64()?,
        next_queue: r.u64()?,
        queues: BTreeMap::new(),
    };
    let queue_count = r.u32()? as usize;
    let message_count = r.u64()?;
    r.finish()?;
    let mut seen_messages = 0u64;
    for body in it {
        let mut r = Reader::new(body);
        match r.u8()? {
            IMG_QUEUE => {
                let id = QueueId(r.u64()?);
                let name = r.str32()?.to_string();
                let d = r.u8()?;
                let o = r.u8()?;
                let q = QueueImage {
                    name,
                    durability: Durability::from_byte(d).ok_or_else(|| DecodeError(format!("bad durability {d}")))?,
                    ordering: Ordering::from_byte(o).ok_or_else(|| DecodeError(format!("bad ordering {o}")))?,
                    created_lsn: Lsn(r.u64()?),
                    next_seq: r.u64()?,
                    messages: BTreeMap::new(),
                };
                state.queues.insert(id, q);
            }
            IMG_MESSAGE => {
                let qid = QueueId(r.u64()?);
                let mid = MessageId(r.u64()?);
                let m = MessageImage { priority: r.i64()?, seq: r.u64()?, payload: r.bytes32()?.to_vec() };
                state
                    .queues
                    .get_mut(&qid)
                    .ok_or_else(|| DecodeError(format!("message for unknown queue {qid}")))?
                    .messages
                    .insert(mid, m);
                seen_messages += 1;
            }
            other => return Err(DecodeError(format!("unknown image entry {other}"))),
        }
        r.finish()?;
    }
    if state.queues.len() != queue_count || seen_messages != message_count {
        return Err(DecodeError("image entry counts do not match metadata".into()));
    }
    Ok(state)
}
