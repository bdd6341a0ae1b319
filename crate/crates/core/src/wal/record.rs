//! Log record codec.
//!
//! File layout: `"QDBL"` magic, u32 format version, then frames of
//! `u32 body_len | body | u32 crc32(body)`. A body is `u64 lsn | u64 txn_id |
//! u8 kind` followed by kind-specific fields. Everything is little-endian.

use crate::codec::{DecodeError, DecodeResult, Put, Reader};
use crate::types::{Durability, Lsn, MessageId, Ordering, QueueId, TxnId};

pub const LOG_MAGIC: &[u8; 4] = b"QDBL";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QDBC";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8;
/// Upper bound on a single frame body; anything larger is treated as garbage.
pub const MAX_BODY_LEN: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RecordKind {
    Begin = 1,
    Insert = 2,
    Delete = 3,
    Commit = 4,
    Abort = 5,
    Checkpoint = 6,
    CreateQueue = 7,
    DestroyQueue = 8,
}

impl RecordKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => RecordKind::Begin,
            2 => RecordKind::Insert,
            3 => RecordKind::Delete,
            4 => RecordKind::Commit,
            5 => RecordKind::Abort,
            6 => RecordKind::Checkpoint,
            7 => RecordKind::CreateQueue,
            8 => RecordKind::DestroyQueue,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogBody {
    Begin,
    Insert { queue: QueueId, message: MessageId, priority: i64, payload: Vec<u8> },
    Delete { queue: QueueId, message: MessageId },
    Commit,
    Abort,
    Checkpoint,
    CreateQueue { queue: QueueId, name: String, durability: Durability, ordering: Ordering },
    DestroyQueue { queue: QueueId },
}

impl LogBody {
    pub fn kind(&self) -> RecordKind {
        match self {
            LogBody::Begin => RecordKind::Begin,
            LogBody::Insert { .. } => RecordKind::Insert,
            LogBody::Delete { .. } => RecordKind::Delete,
            LogBody::Commit => RecordKind::Commit,
            LogBody::Abort => RecordKind::Abort,
            LogBody::Checkpoint => RecordKind::Checkpoint,
            LogBody::CreateQueue { .. } => RecordKind::CreateQueue,
            LogBody::DestroyQueue { .. } => RecordKind::DestroyQueue,
        }
    }

    pub fn queue(&self) -> Option<QueueId> {
        match self {
            LogBody::Insert { queue, .. }
            | LogBody::Delete { queue, .. }
            | LogBody::CreateQueue { queue, .. }
            | LogBody::DestroyQueue { queue } => Some(*queue),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub lsn: Lsn,
    pub txn: TxnId,
    pub body: LogBody,
}

impl LogRecord {
    pub fn encode_body(&self, out: &mut Vec<u8>) {
        out.put_u64(self.lsn.0);
        out.put_u64(self.txn.0);
        out.put_u8(self.body.kind() as u8);
        match &self.body {
            LogBody::Begin | LogBody::Commit | LogBody::Abort | LogBody::Checkpoint => {}
            LogBody::Insert { queue, message, priority, payload } => {
                out.put_u64(queue.0);
                out.put_u64(message.0);
                out.put_i64(*priority);
                out.put_bytes32(payload);
            }
            LogBody::Delete { queue, message } => {
                out.put_u64(queue.0);
                out.put_u64(message.0);
            }
            LogBody::CreateQueue { queue, name, durability, ordering } => {
                out.put_u64(queue.0);
                out.put_bytes32(name.as_bytes());
                out.put_u8(durability.to_byte());
                out.put_u8(ordering.to_byte());
            }
            LogBody::DestroyQueue { queue } => out.put_u64(queue.0),
        }
    }

    pub fn decode_body(body: &[u8]) -> DecodeResult<Self> {
        let mut r = Reader::new(body);
        let lsn = Lsn(r.u64()?);
        let txn = TxnId(r.u64()?);
        let kind = r.u8()?;
        let kind = RecordKind::from_byte(kind).ok_or_else(|| DecodeError(format!("unknown kind {kind}")))?;
        let body = match kind {
            RecordKind::Begin => LogBody::Begin,
            RecordKind::Commit => LogBody::Commit,
            RecordKind::Abort => LogBody::Abort,
            RecordKind::Checkpoint => LogBody::Checkpoint,
            RecordKind::Insert => LogBody::Insert {
                queue: QueueId(r.u64()?),
                message: MessageId(r.u64()?),
                priority: r.i64()?,
                payload: r.bytes32()?.to_vec(),
            },
            RecordKind::Delete => LogBody::Delete { queue: QueueId(r.u64()?), message: MessageId(r.u64()?) },
            RecordKind::CreateQueue => {
                let queue = QueueId(r.u64()?);
                let name = r.str32()?.to_string();
                let d = r.u8()?;
                let o = r.u8()?;
                LogBody::CreateQueue {
                    queue,
                    name,
                    durability: Durability::from_byte(d).ok_or_else(|| DecodeError(format!("bad durability {d}")))?,
                    ordering: Ordering::from_byte(o).ok_or_else(|| DecodeError(format!("bad ordering {o}")))?,
                }
            }
            RecordKind::DestroyQueue => LogBody::DestroyQueue { queue: QueueId(r.u64()?) },
        };
        r.finish()?;
        Ok(LogRecord { lsn, txn, body })
    }

    /// Appends the full frame (length, body, checksum) to `out`.
    pub fn encode_frame(&self, out: &mut Vec<u8>) {
        let mut body = Vec::with_capacity(64);
        self.encode_body(&mut body);
        write_frame(out, &body);
    }
}

pub fn write_header(out: &mut Vec<u8>, magic: &[u8; 4]) {
    out.extend_from_slice(magic);
    out.put_u32(FORMAT_VERSION);
}

pub fn check_header(bytes: &[u8], magic: &[u8; 4]) -> DecodeResult<()> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError("file shorter than header".into()));
    }
    if &bytes[..4] != magic {
        return Err(DecodeError(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(DecodeError(format!("unsupported format version {version}")));
    }
    Ok(())
}

pub fn write_frame(out: &mut Vec<u8>, body: &[u8]) {
    out.put_u32(body.len() as u32);
    out.extend_from_slice(body);
    out.put_u32(crc32fast::hash(body));
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameRead<'a> {
    /// A complete frame whose checksum matches; `next` is the offset after it.
    Ok { body: &'a [u8], next: usize },
    /// Not enough bytes left for the frame the length field announces.
    Incomplete,
    /// The checksum does not match; `next` is where the following frame
    /// would start if the length field is trustworthy.
    BadChecksum { next: usize },
    /// The length field itself is implausible.
    BadLength,
}

pub fn read_frame(bytes: &[u8], pos: usize) -> FrameRead<'_> {
    let rest = &bytes[pos..];
    if rest.len() < 4 {
        return FrameRead::Incomplete;
    }
    let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    if len > MAX_BODY_LEN {
        return FrameRead::BadLength;
    }
    if rest.len() < 4 + len + 4 {
        return FrameRead::Incomplete;
    }
    let body = &rest[4..4 + len];
    let crc = u32::from_le_bytes(rest[4 + len..8 + len].try_into().unwrap());
    let next = pos + 8 + len;
    if crc32fast::hash(body) == crc { FrameRead::Ok { body, next } } else { FrameRead::BadChecksum { next } }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn body_strategy() -> impl Strategy<Value = LogBody> {
        prop_oneof![
            Just(LogBody::Begin),
            Just(LogBody::Commit),
            Just(LogBody::Abort),
            Just(LogBody::Checkpoint),
            (any::<u64>(), any::<u64>(), any::<i64>(), proptest::collection::vec(any::<u8>(), 0..64)).prop_map(
                |(q, m, p, payload)| LogBody::Insert { queue: QueueId(q), message: MessageId(m), priority: p, payload }
            ),
            (any::<u64>(), any::<u64>())
                .prop_map(|(q, m)| LogBody::Delete { queue: QueueId(q), message: MessageId(m) }),
            (any::<u64>(), "[a-z.]{0,12}", any::<bool>(), any::<bool>()).prop_map(|(q, n, d, o)| {
                LogBody::CreateQueue {
                    queue: QueueId(q),
                    name: n,
                    durability: if d { Durability::Durable } else { Durability::Volatile },
                    ordering: if o { Ordering::Priority } else { Ordering::Fifo },
                }
            }),
            any::<u64>().prop_map(|q| LogBody::DestroyQueue { queue: QueueId(q) }),
        ]
    }

    proptest! {
        #[test]
        fn frame_round_trip(lsn in any::<u64>(), txn in any::<u64>(), body in body_strategy()) {
            let rec = LogRecord { lsn: Lsn(lsn), txn: TxnId(txn), body };
            let mut buf = Vec::new();
            rec.encode_frame(&mut buf);
            match read_frame(&buf, 0) {
                FrameRead::Ok { body, next } => {
                    prop_assert_eq!(next, buf.len());
                    prop_assert_eq!(LogRecord::decode_body(body).unwrap(), rec);
                }
                other => prop_assert!(false, "unexpected {:?}", other),
            }
        }

        #[test]
        fn any_single_bit_flip_is_detected(flip in 0usize..200, bit in 0u8..8) {
            let rec = LogRecord {
                lsn: Lsn(9),
                txn: TxnId(4),
                body: LogBody::Insert { queue: QueueId(1), message: MessageId(2), priority: 3, payload: b"payload".to_vec() },
            };
            let mut buf = Vec::new();
            rec.encode_frame(&mut buf);
            let idx = flip % buf.len();
            buf[idx] ^= 1 << bit;
            let ok = matches!(read_frame(&buf, 0), FrameRead::Ok { .. });
            prop_assert!(!ok);
        }
    }

    #[test]
    fn body_layout_is_little_endian() {
        let rec = LogRecord { lsn: Lsn(1), txn: TxnId(2), body: LogBody::Commit };
        let mut body = Vec::new();
        rec.encode_body(&mut body);
        assert_eq!(body, [1, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0, 4]);
    }

    #[test]
    fn header_checks_magic_and_version() {
        let mut h = Vec::new();
        write_header(&mut h, LOG_MAGIC);
        assert_eq!(&h, b"QDBL\x01\x00\x00\x00");
        check_header(&h, LOG_MAGIC).unwrap();
        assert!(check_header(&h, CHECKPOINT_MAGIC).is_err());
        assert!(check_header(&h[..5], LOG_MAGIC).is_err());
    }

    #[test]
    fn truncated_frame_is_incomplete() {
        let rec = LogRecord { lsn: Lsn(1), txn: TxnId(1), body: LogBody::Begin };
        let mut buf = Vec::new();
        rec.encode_frame(&mut buf);
        for cut in 0..buf.len() {
            assert_eq!(read_frame(&buf[..cut], 0), FrameRead::Incomplete);
        }
    }
}
