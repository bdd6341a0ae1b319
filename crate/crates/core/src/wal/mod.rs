//! Write-ahead log: record codec, group-commit writer, redo recovery and
//! checkpoint images.

mod log;
mod record;
mod recovery;

pub use log::{GroupCommit, Wal};
pub use record::{
    CHECKPOINT_MAGIC, FORMAT_VERSION, FrameRead, HEADER_LEN, LOG_MAGIC, LogBody, LogRecord, RecordKind, read_frame,
    write_frame, write_header,
};
pub use recovery::{DurableState, MessageImage, QueueImage, Recovery, decode_image, encode_image, recover, scan_log};

pub const LOG_FILE: &str = "wal.qdbl";
pub const CHECKPOINT_FILE: &str = "checkpoint.qdbc";
