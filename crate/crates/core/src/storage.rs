//! Named-file storage under the log and checkpoint writers.
//!
//! [`FileStorage`] maps names onto a directory. [`MemStorage`] keeps files in
//! memory and journals every mutation so that tests can reconstruct the
//! state a crash would have left behind at any byte of the write stream, and
//! can make writes fail after a byte budget.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

pub trait Storage: Send + Sync + fmt::Debug {
    /// Whole contents of `name`, or `None` when it does not exist.
    fn read(&self, name: &str) -> io::Result<Option<Vec<u8>>>;
    /// Opens `name` for appending, creating it when absent.
    fn open_append(&self, name: &str) -> io::Result<Box<dyn LogFile>>;
    /// Replaces `name` with `bytes` all-or-nothing (write-new-then-rename).
    fn write_atomic(&self, name: &str, bytes: &[u8]) -> io::Result<()>;
    fn truncate(&self, name: &str, len: u64) -> io::Result<()>;
}

pub trait LogFile: Send {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn sync(&mut self) -> io::Result<()>;
}

#[derive(Debug, Clone)]
pub struct FileStorage {
    dir: PathBuf,
}

impl FileStorage {
    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(FileStorage { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn sync_dir(&self) -> io::Result<()> {
        // Not every platform allows fsync on a directory handle.
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        Ok(())
    }
}

struct FileLog(File);

impl LogFile for FileLog {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.write_all(bytes)
    }

    fn sync(&mut self) -> io::Result<()> {
        self.0.sync_data()
    }
}

impl Storage for FileStorage {
    fn read(&self, name: &str) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.path(name)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn open_append(&self, name: &str) -> io::Result<Box<dyn LogFile>> {
        let f = OpenOptions::new().create(true).append(true).open(self.path(name))?;
        Ok(Box::new(FileLog(f)))
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let tmp = self.path(&format!("{name}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.path(name))?;
        self.sync_dir()
    }

    fn truncate(&self, name: &str, len: u64) -> io::Result<()> {
        let f = OpenOptions::new().write(true).open(self.path(name))?;
        f.set_len(len)?;
        f.sync_all()
    }
}

/// Exclusive advisory lock on a data directory. Released when dropped or when
/// the holding process dies.
#[derive(Debug)]
pub struct DirLock {
    _file: File,
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: impl AsRef<Path>) -> io::Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        let path = dir.as_ref().join("LOCK");
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path)?;
        match file.try_lock() {
            Ok(()) => Ok(DirLock { _file: file, path }),
            Err(TryLockError::WouldBlock) => Err(io::Error::new(
                io::ErrorKind::WouldBlock,
                format!("data directory {} is locked by another process", dir.as_ref().display()),
            )),
            Err(TryLockError::Error(e)) => Err(e),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[derive(Debug, Clone)]
enum JournalOp {
    Append { name: String, bytes: Vec<u8> },
    Replace { name: String, bytes: Vec<u8> },
    Truncate { name: String, len: u64 },
    Sync,
}

impl JournalOp {
    fn cost(&self) -> u64 {
        match self {
            JournalOp::Append { bytes, .. } => bytes.len() as u64,
            // tmp file bytes plus the rename
            JournalOp::Replace { bytes, .. } => bytes.len() as u64 + 1,
            JournalOp::Truncate { .. } => 1,
            JournalOp::Sync => 0,
        }
    }
}

#[derive(Debug, Default)]
struct MemFs {
    base: BTreeMap<String, Vec<u8>>,
    files: BTreeMap<String, Vec<u8>>,
    journal: Vec<JournalOp>,
    cost: u64,
    fail_after: Option<u64>,
    syncs: u64,
    sync_latency: Duration,
}

impl MemFs {
    fn check_budget(&self, want: u64) -> Option<u64> {
        self.fail_after.map(|limit| limit.saturating_sub(self.cost).min(want))
    }
}

/// In-memory storage with a replayable write journal and fault injection.
#[derive(Clone, Default)]
pub struct MemStorage {
    fs: Arc<Mutex<MemFs>>,
}

impl fmt::Debug for MemStorage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fs = self.fs.lock();
        f.debug_struct("MemStorage")
            .field("files", &fs.files.keys().collect::<Vec<_>>())
            .field("journal_cost", &fs.cost)
            .finish()
    }
}

impl MemStorage {
    pub fn new() -> Self {
        Self::default()
    }

    fn from_files(files: BTreeMap<String, Vec<u8>>) -> Self {
        let fs = MemFs { base: files.clone(), files, ..Default::default() };
        MemStorage { fs: Arc::new(Mutex::new(fs)) }
    }

    /// Total journal cost so far: one unit per data byte plus one per
    /// rename or truncate. Crash points are expressed in this unit.
    pub fn journal_cost(&self) -> u64 {
        self.fs.lock().cost
    }

    pub fn sync_count(&self) -> u64 {
        self.fs.lock().syncs
    }

    /// Makes every write fail once the journal reaches `cost` units. The
    /// write that crosses the limit is applied partially.
    pub fn fail_writes_after(&self, cost: u64) {
        self.fs.lock().fail_after = Some(cost);
    }

    /// Makes every log sync take this long, like a real device would.
    pub fn set_sync_latency(&self, latency: Duration) {
        self.fs.lock().sync_latency = latency;
    }

    pub fn clear_faults(&self) {
        self.fs.lock().fail_after = None;
    }

    /// File contents as they would be after a crash at journal position
    /// `cost`: appends are cut at byte granularity, atomic replaces either
    /// happened or did not.
    pub fn crash_image(&self, cost: u64) -> MemStorage {
        let fs = self.fs.lock();
        let mut files = fs.base.clone();
        let mut left = cost;
        for op in &fs.journal {
            if left == 0 {
                break;
            }
            match op {
                JournalOp::Append { name, bytes } => {
                    let take = (bytes.len() as u64).min(left) as usize;
                    files.entry(name.clone()).or_default().extend_from_slice(&bytes[..take]);
                    left -= take as u64;
                }
                JournalOp::Replace { name, bytes } => {
                    if left >= op.cost() {
                        files.insert(name.clone(), bytes.clone());
                        left -= op.cost();
                    } else {
                        left = 0;
                    }
                }
                JournalOp::Truncate { name, len } => {
                    if let Some(f) = files.get_mut(name) {
                        f.truncate(*len as usize);
                    }
                    left -= 1;
                }
                JournalOp::Sync => {}
            }
        }
        MemStorage::from_files(files)
    }

    /// Current file contents, as if the process crashed right now.
    pub fn snapshot(&self) -> MemStorage {
        MemStorage::from_files(self.fs.lock().files.clone())
    }

    pub fn file(&self, name: &str) -> Option<Vec<u8>> {
        self.fs.lock().files.get(name).cloned()
    }

    pub fn set_file(&self, name: &str, bytes: Vec<u8>) {
        self.fs.lock().files.insert(name.to_string(), bytes);
    }
}

fn injected() -> io::Error {
    io::Error::other("injected write failure")
}

struct MemLog {
    fs: Arc<Mutex<MemFs>>,
    name: String,
}

impl LogFile for MemLog {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        let mut fs = self.fs.lock();
        let allowed = fs.check_budget(bytes.len() as u64).map(|n| n as usize);
        let take = allowed.unwrap_or(bytes.len());
        let chunk = bytes[..take].to_vec();
        fs.files.entry(self.name.clone()).or_default().extend_from_slice(&chunk);
        fs.cost += take as u64;
        fs.journal.push(JournalOp::Append { name: self.name.clone(), bytes: chunk });
        if take < bytes.len() { Err(injected()) } else { Ok(()) }
    }

    fn sync(&mut self) -> io::Result<()> {
        let latency = self.fs.lock().sync_latency;
        if !latency.is_zero() {
            std::thread::sleep(latency);
        }
        let mut fs = self.fs.lock();
        if fs.check_budget(1) == Some(0) {
            return Err(injected());
        }
        fs.syncs += 1;
        fs.journal.push(JournalOp::Sync);
        Ok(())
    }
}

impl Storage for MemStorage {
    fn read(&self, name: &str) -> io::Result<Option<Vec<u8>>> {
        Ok(self.fs.lock().files.get(name).cloned())
    }

    fn open_append(&self, name: &str) -> io::Result<Box<dyn LogFile>> {
        self.fs.lock().files.entry(name.to_string()).or_default();
        Ok(Box::new(MemLog { fs: self.fs.clone(), name: name.to_string() }))
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let mut fs = self.fs.lock();
        let op = JournalOp::Replace { name: name.to_string(), bytes: bytes.to_vec() };
        if let Some(allowed) = fs.check_budget(op.cost())
            && allowed < op.cost()
        {
            // the partial tmp file is never renamed into place
            fs.cost += allowed;
            return Err(injected());
        }
        fs.cost += op.cost();
        fs.files.insert(name.to_string(), bytes.to_vec());
        fs.journal.push(op);
        Ok(())
    }

    fn truncate(&self, name: &str, len: u64) -> io::Result<()> {
        let mut fs = self.fs.lock();
        if fs.check_budget(1) == Some(0) {
            return Err(injected());
        }
        if let Some(f) = fs.files.get_mut(name) {
            f.truncate(len as usize);
        }
        fs.cost += 1;
        fs.journal.push(JournalOp::Truncate { name: name.to_string(), len });
        Ok(())
    }
}
