use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::error::{Error, Result};
use crate::storage::{LogFile, Storage};
use crate::types::{Lsn, TxnId};

use super::record::{LOG_MAGIC, LogBody, LogRecord, write_header};

#[derive(Debug, Clone, Copy)]
pub struct GroupCommit {
    /// Longest a flush leader waits for other in-flight committers.
    pub max_wait: Duration,
    /// Flush as soon as this many committers are waiting.
    pub max_batch: usize,
}

impl Default for GroupCommit {
    fn default() -> Self {
        GroupCommit { max_wait: Duration::from_millis(1), max_batch: 64 }
    }
}

struct WalState {
    file: Box<dyn LogFile>,
    next_lsn: u64,
    buffer: Vec<u8>,
    buffered_lsn: u64,
    durable_lsn: u64,
    flushing: bool,
    failed: Option<String>,
    size: u64,
    in_flight: usize,
    waiting: usize,
    physical_flushes: u64,
}

/// Append-only log with group commit.
///
/// Appended records sit in memory until some caller asks for them to be
/// durable; one caller then writes and syncs everything buffered while the
/// others wait for that single physical flush.
pub struct Wal {
    state: Mutex<WalState>,
    cond: Condvar,
    storage: Arc<dyn Storage>,
    name: String,
    group: GroupCommit,
}

impl std::fmt::Debug for Wal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.state.lock();
        f.debug_struct("Wal")
            .field("name", &self.name)
            .field("next_lsn", &s.next_lsn)
            .field("durable_lsn", &s.durable_lsn)
            .field("size", &s.size)
            .finish()
    }
}

impl Wal {
    /// Opens the log for appending after recovery. `valid_len` bytes of the
    /// existing file are kept; a zero length (re)creates it with a header.
    pub fn open(
        storage: Arc<dyn Storage>,
        name: &str,
        valid_len: usize,
        last_lsn: Lsn,
        group: GroupCommit,
    ) -> Result<Self> {
        let existing = storage.read(name)?.map(|b| b.len()).unwrap_or(0);
        let size = if valid_len == 0 {
            let mut header = Vec::new();
            write_header(&mut header, LOG_MAGIC);
            storage.write_atomic(name, &header)?;
            header.len()
        } else {
            if existing > valid_len {
                storage.truncate(name, valid_len as u64)?;
            }
            valid_len
        };
        let file = storage.open_append(name)?;
        Ok(Wal {
            state: Mutex::new(WalState {
                file,
                next_lsn: last_lsn.0 + 1,
                buffer: Vec::new(),
                buffered_lsn: last_lsn.0,
                durable_lsn: last_lsn.0,
                flushing: false,
                failed: None,
                size: size as u64,
                in_flight: 0,
                waiting: 0,
                physical_flushes: 0,
            }),
            cond: Condvar::new(),
            storage,
            name: name.to_string(),
            group,
        })
    }

    pub fn append(&self, txn: TxnId, body: LogBody) -> Result<Lsn> {
        let mut s = self.state.lock();
        if let Some(msg) = &s.failed {
            return Err(Error::Failed(msg.clone()));
        }
        let lsn = Lsn(s.next_lsn);
        s.next_lsn += 1;
        let before = s.buffer.len();
        LogRecord { lsn, txn, body }.encode_frame(&mut s.buffer);
        s.size += (s.buffer.len() - before) as u64;
        s.buffered_lsn = lsn.0;
        Ok(lsn)
    }

    /// Announces a committer that is about to append its COMMIT record so a
    /// flush leader can wait briefly for it. Pair with [`Wal::commit_done`].
    pub fn commit_started(&self) {
        self.state.lock().in_flight += 1;
    }

    pub fn commit_done(&self) {
        let mut s = self.state.lock();
        s.in_flight = s.in_flight.saturating_sub(1);
        self.cond.notify_all();
    }

    pub fn flush_through(&self, lsn: Lsn) -> Result<()> {
        let mut s = self.state.lock();
        loop {
            if s.durable_lsn >= lsn.0 {
                return Ok(());
            }
            if let Some(msg) = &s.failed {
                return Err(Error::Failed(msg.clone()));
            }
            if s.flushing {
                s.waiting += 1;
                self.cond.notify_all();
                self.cond.wait(&mut s);
                s.waiting -= 1;
                continue;
            }
            s.flushing = true;
            let deadline = Instant::now() + self.group.max_wait;
            while s.waiting + 1 < s.in_flight && s.waiting + 1 < self.group.max_batch {
                if self.cond.wait_until(&mut s, deadline).timed_out() {
                    break;
                }
            }
            let buf = std::mem::take(&mut s.buffer);
            let target = s.buffered_lsn;
            let mut file = std::mem::replace(&mut s.file, Box::new(NullLog));
            drop(s);
            let res = file.append(&buf).and_then(|_| file.sync());
            s = self.state.lock();
            s.file = file;
            s.flushing = false;
            match res {
                Ok(()) => {
                    s.durable_lsn = s.durable_lsn.max(target);
                    s.physical_flushes += 1;
                }
                Err(e) => {
                    ::log::error!("log flush failed: {e}");
                    s.failed = Some(e.to_string());
                }
            }
            self.cond.notify_all();
        }
    }

    /// Flushes everything appended so far.
    pub fn flush_all(&self) -> Result<()> {
        let lsn = self.last_lsn();
        self.flush_through(lsn)
    }

    /// Replaces the whole log file, used to drop the prefix covered by a
    /// checkpoint. Everything appended must already be durable.
    pub fn replace_contents(&self, bytes: &[u8]) -> Result<()> {
        let mut s = self.state.lock();
        while s.flushing {
            self.cond.wait(&mut s);
        }
        if !s.buffer.is_empty() {
            return Err(Error::usage("log has unflushed records"));
        }
        self.storage.write_atomic(&self.name, bytes)?;
        s.file = self.storage.open_append(&self.name)?;
        s.size = bytes.len() as u64;
        Ok(())
    }

    pub fn last_lsn(&self) -> Lsn {
        Lsn(self.state.lock().next_lsn - 1)
    }

    pub fn durable_lsn(&self) -> Lsn {
        Lsn(self.state.lock().durable_lsn)
    }

    pub fn size(&self) -> u64 {
        self.state.lock().size
    }

    pub fn physical_flushes(&self) -> u64 {
        self.state.lock().physical_flushes
    }

    pub fn failure(&self) -> Option<String> {
        self.state.lock().failed.clone()
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

struct NullLog;

impl LogFile for NullLog {
    fn append(&mut self, _: &[u8]) -> std::io::Result<()> {
        Err(std::io::Error::other("log file is being flushed"))
    }

    fn sync(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}
