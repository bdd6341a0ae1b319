//! The engine: recovery at open, the queue catalog, non-transactional reads
//! (poll, stats), checkpoints and the background housekeeping thread.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering as AtomicOrdering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::clock::{SharedClock, SystemClock};
use crate::error::{Error, Result};
use crate::lockmgr::{LockManager, LockStats, NotifyReason, ResourceId, Subscription};
use crate::pool::{PoolConfig, PoolControl, PoolId, PoolManager, PoolStatus, WorkQueue};
use crate::queue::{
    PollEntry, PollFilter, PollOptions, QueueData, QueueDescriptor, QueueStats, RecState, Store, Visibility,
};
use crate::storage::{DirLock, FileStorage, MemStorage, Storage};
use crate::triggers::{TriggerId, TriggerRegistry, TriggerSpec, TriggerStats};
use crate::txn::Txn;
use crate::types::{Durability, Lsn, MessageId, Ordering, QueueId, QueueState, TxnId};
use crate::wal::{
    CHECKPOINT_FILE, DurableState, GroupCommit, LOG_FILE, LOG_MAGIC, LogBody, LogRecord, MessageImage, QueueImage, Wal,
    encode_image, recover, scan_log, write_header,
};

pub const DEFAULT_MAX_PAYLOAD: usize = 1024 * 1024;
pub const MAX_QUEUE_NAME: usize = 255;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Deadline for WAIT lock requests; a waiter that passes it becomes a
    /// deadlock victim.
    pub lock_timeout: Duration,
    pub group_commit: GroupCommit,
    pub max_payload: usize,
    /// Log size that triggers an automatic checkpoint.
    pub checkpoint_bytes: u64,
    /// How long a checkpoint waits for in-flight transactions to finish.
    pub checkpoint_quiesce: Duration,
    pub clock: SharedClock,
    /// Period of the background pool scaling tick; `None` disables the
    /// thread so tests can drive ticks themselves.
    pub pool_tick: Option<Duration>,
    pub trigger_threads: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            lock_timeout: Duration::from_secs(5),
            group_commit: GroupCommit::default(),
            max_payload: DEFAULT_MAX_PAYLOAD,
            checkpoint_bytes: 64 * 1024 * 1024,
            checkpoint_quiesce: Duration::from_secs(10),
            clock: SystemClock::shared(),
            pool_tick: Some(Duration::from_millis(100)),
            trigger_threads: 2,
        }
    }
}

/// Counts transactions that have written to the log and are not finished.
/// A sharp checkpoint closes the gate and waits for the count to drop to 0.
#[derive(Debug, Default)]
pub(crate) struct Gate {
    state: Mutex<(usize, bool)>,
    cv: Condvar,
}

impl Gate {
    pub fn enter(&self) {
        let mut s = self.state.lock();
        while s.1 {
            self.cv.wait(&mut s);
        }
        s.0 += 1;
    }

    pub fn try_enter(&self) -> bool {
        let mut s = self.state.lock();
        if s.1 {
            return false;
        }
        s.0 += 1;
        true
    }

    pub fn wait_open(&self) {
        let mut s = self.state.lock();
        while s.1 {
            self.cv.wait(&mut s);
        }
    }

    pub fn exit(&self) {
        let mut s = self.state.lock();
        s.0 -= 1;
        self.cv.notify_all();
    }

    fn close(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut s = self.state.lock();
        while s.1 {
            self.cv.wait(&mut s);
        }
        s.1 = true;
        while s.0 > 0 {
            if self.cv.wait_until(&mut s, deadline).timed_out() && s.0 > 0 {
                s.1 = false;
                self.cv.notify_all();
                return false;
            }
        }
        true
    }

    fn open(&self) {
        self.state.lock().1 = false;
        self.cv.notify_all();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryInfo {
    pub replayed_records: usize,
    pub torn_tail: bool,
}

pub(crate) struct EngineInner {
    pub config: EngineConfig,
    pub storage: Arc<dyn Storage>,
    pub wal: Wal,
    pub store: Mutex<Store>,
    pub locks: LockManager,
    pub gate: Gate,
    pub triggers: TriggerRegistry,
    pub pools: PoolManager,
    pub work: WorkQueue,
    pub next_txn: AtomicU64,
    pub next_message: AtomicU64,
    pub next_queue: AtomicU64,
    checkpoint_lock: Mutex<()>,
    checkpoint_running: AtomicBool,
    last_checkpoint: AtomicU64,
    pub shutdown: AtomicBool,
    recovery: RecoveryInfo,
    _dir_lock: Option<DirLock>,
}

impl Drop for EngineInner {
    fn drop(&mut self) {
        self.shutdown.store(true, AtomicOrdering::SeqCst);
    }
}

/// Handle to an open engine. Cheap to clone; all clones share one engine.
#[derive(Clone)]
pub struct Engine {
    pub(crate) inner: Arc<EngineInner>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("wal", &self.inner.wal).finish()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub queues: Vec<QueueStats>,
    pub pools: Vec<PoolStatus>,
    pub triggers: Vec<TriggerStats>,
    pub locks: LockStats,
    pub log_bytes: u64,
    pub durable_lsn: Lsn,
    pub last_checkpoint_lsn: Lsn,
    pub physical_flushes: u64,
    /// One line per locked resource: holders with modes, waiters in order.
    pub lock_table: Vec<String>,
}

impl Engine {
    pub fn open(storage: Arc<dyn Storage>, config: EngineConfig) -> Result<Engine> {
        Self::open_inner(storage, config, None)
    }

    /// Opens (or creates) an engine in a directory, holding the directory's
    /// lock file for the engine's lifetime.
    pub fn open_dir(dir: impl AsRef<Path>, config: EngineConfig) -> Result<Engine> {
        let lock = DirLock::acquire(dir.as_ref()).map_err(|e| {
            if e.kind() == std::io::ErrorKind::WouldBlock { Error::Unavailable(e.to_string()) } else { Error::Io(e) }
        })?;
        let storage = Arc::new(FileStorage::open(dir.as_ref())?);
        Self::open_inner(storage, config, Some(lock))
    }

    pub fn open_memory(config: EngineConfig) -> Result<Engine> {
        Self::open(Arc::new(MemStorage::new()), config)
    }

    fn open_inner(storage: Arc<dyn Storage>, config: EngineConfig, dir_lock: Option<DirLock>) -> Result<Engine> {
        let log = storage.read(LOG_FILE)?;
        let image = storage.read(CHECKPOINT_FILE)?;
        let rec = recover(log.as_deref(), image.as_deref())?;
        if rec.torn_tail {
            log::warn!("truncating torn log tail at offset {}", rec.valid_len);
        }
        let wal = Wal::open(storage.clone(), LOG_FILE, rec.valid_len, rec.state.lsn, config.group_commit)?;
        let mut store = Store::default();
        for (id, qi) in &rec.state.queues {
            let mut q = QueueData::new(*id, qi.name.clone(), qi.durability, qi.ordering, qi.created_lsn);
            q.next_seq = qi.next_seq;
            if qi.durability == Durability::Durable {
                for (mid, m) in rec.state.ordered_messages(*id) {
                    q.load(mid, m.priority, m.seq, m.payload.clone());
                }
            }
            store.add(q);
        }
        let clock = config.clock.clone();
        let image_lsn = image.as_deref().and_then(|b| crate::wal::decode_image(b).ok()).map(|s| s.lsn.0).unwrap_or(0);
        let inner = Arc::new(EngineInner {
            wal,
            store: Mutex::new(store),
            locks: LockManager::new(clock),
            gate: Gate::default(),
            triggers: TriggerRegistry::default(),
            pools: PoolManager::default(),
            work: WorkQueue::new("qdb-trigger", config.trigger_threads.max(1)),
            next_txn: AtomicU64::new(rec.state.next_txn),
            next_message: AtomicU64::new(rec.state.next_message),
            next_queue: AtomicU64::new(rec.state.next_queue),
            checkpoint_lock: Mutex::new(()),
            checkpoint_running: AtomicBool::new(false),
            last_checkpoint: AtomicU64::new(image_lsn),
            shutdown: AtomicBool::new(false),
            recovery: RecoveryInfo { replayed_records: rec.replayed, torn_tail: rec.torn_tail },
            _dir_lock: dir_lock,
            storage,
            config,
        });
        if let Some(period) = inner.config.pool_tick {
            let weak = Arc::downgrade(&inner);
            thread::Builder::new()
                .name("qdb-tick".into())
                .spawn(move || housekeeping(weak, period))
                .map_err(Error::Io)?;
        }
        Ok(Engine { inner })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.config
    }

    pub fn clock(&self) -> &SharedClock {
        &self.inner.config.clock
    }

    pub fn recovery_info(&self) -> RecoveryInfo {
        self.inner.recovery
    }

    pub fn lock_manager(&self) -> &LockManager {
        &self.inner.locks
    }

    pub fn wal(&self) -> &Wal {
        &self.inner.wal
    }

    pub(crate) fn check_running(&self) -> Result<()> {
        if let Some(msg) = self.inner.wal.failure() {
            return Err(Error::Unavailable(format!("engine failed: {msg}")));
        }
        if self.inner.shutdown.load(AtomicOrdering::SeqCst) {
            return Err(Error::Unavailable("engine is shut down".into()));
        }
        Ok(())
    }

    /// Draws a fresh identifier from the message-id sequence. Message ids
    /// never repeat across restarts, so neither do these.
    pub(crate) fn allocate_id(&self) -> u64 {
        self.inner.next_message.fetch_add(1, AtomicOrdering::SeqCst)
    }

    pub fn begin(&self) -> Result<Txn> {
        self.check_running()?;
        let id = TxnId(self.inner.next_txn.fetch_add(1, AtomicOrdering::SeqCst));
        self.inner.locks.begin(id);
        Ok(Txn::new(self.clone(), id))
    }

    /// Runs `f` in a fresh transaction, committing on `Ok` and aborting on
    /// `Err`.
    pub fn with_txn<T>(&self, f: impl FnOnce(&mut Txn) -> Result<T>) -> Result<T> {
        let mut txn = self.begin()?;
        match f(&mut txn) {
            Ok(v) => {
                txn.commit()?;
                Ok(v)
            }
            Err(e) => {
                let _ = txn.abort();
                Err(e)
            }
        }
    }

    pub fn enqueue(&self, queue: &str, priority: i64, payload: &[u8]) -> Result<MessageId> {
        self.with_txn(|t| t.enqueue(queue, priority, payload))
    }

    pub fn dequeue(
        &self,
        queue: &str,
        isolation: crate::types::IsolationMode,
        wait: Duration,
    ) -> Result<Option<crate::queue::Message>> {
        self.with_txn(|t| t.dequeue(queue, isolation, wait))
    }

    pub fn create_queue(&self, name: &str, durability: Durability, ordering: Ordering) -> Result<QueueDescriptor> {
        self.check_running()?;
        if name.is_empty() || name.len() > MAX_QUEUE_NAME {
            return Err(Error::usage(format!("queue name must be 1..={MAX_QUEUE_NAME} bytes")));
        }
        let inner = &self.inner;
        let txn = TxnId(inner.next_txn.fetch_add(1, AtomicOrdering::SeqCst));
        inner.gate.enter();
        let res = (|| {
            let mut store = inner.store.lock();
            if store.names.contains_key(name) {
                return Err(Error::AlreadyExists(format!("queue {name}")));
            }
            let id = QueueId(inner.next_queue.fetch_add(1, AtomicOrdering::SeqCst));
            inner.wal.commit_started();
            let appended = (|| {
                inner.wal.append(txn, LogBody::Begin)?;
                let created = inner
                    .wal
                    .append(txn, LogBody::CreateQueue { queue: id, name: name.to_string(), durability, ordering })?;
                let commit = inner.wal.append(txn, LogBody::Commit)?;
                Ok::<_, Error>((created, commit))
            })();
            let (created, commit) = match appended {
                Ok(v) => v,
                Err(e) => {
                    inner.wal.commit_done();
                    return Err(e);
                }
            };
            let q = QueueData::new(id, name.to_string(), durability, ordering, created);
            let desc = q.descriptor();
            store.add(q);
            Ok((desc, commit))
        })();
        let out = match res {
            Ok((desc, commit)) => {
                let flushed = inner.wal.flush_through(commit);
                inner.wal.commit_done();
                flushed.map(|_| desc)
            }
            Err(e) => Err(e),
        };
        inner.gate.exit();
        out
    }

    pub fn destroy_queue(&self, name: &str) -> Result<()> {
        self.with_txn(|t| t.destroy_queue(name))
    }

    pub fn queue(&self, name: &str) -> Result<QueueDescriptor> {
        let store = self.inner.store.lock();
        store.by_name(name).map(|q| q.descriptor()).ok_or_else(|| Error::NotFound(format!("queue {name}")))
    }

    pub fn queue_id(&self, name: &str) -> Result<QueueId> {
        self.queue(name).map(|d| d.id)
    }

    pub fn queue_name(&self, id: QueueId) -> Option<String> {
        self.inner.store.lock().queues.get(&id).map(|q| q.name.clone())
    }

    pub fn list_queues(&self) -> Vec<QueueDescriptor> {
        let store = self.inner.store.lock();
        let mut v: Vec<_> = store.queues.values().map(|q| q.descriptor()).collect();
        v.sort_by(|a, b| a.name.cmp(&b.name));
        v
    }

    /// Operator control of a queue's state. Leaving ACTIVE wakes waiting
    /// consumers so they observe the change.
    pub fn set_queue_state(&self, name: &str, state: QueueState) -> Result<()> {
        let id = {
            let mut store = self.inner.store.lock();
            let q = store.by_name_mut(name).ok_or_else(|| Error::NotFound(format!("queue {name}")))?;
            q.state = state;
            q.id
        };
        if state != QueueState::Active {
            self.inner.locks.notify(id, NotifyReason::Stopped);
        }
        Ok(())
    }

    pub(crate) fn set_queue_state_by_id(&self, id: QueueId, state: QueueState) {
        let changed = {
            let mut store = self.inner.store.lock();
            match store.queues.get_mut(&id) {
                Some(q) if q.state != state => {
                    q.state = state;
                    true
                }
                _ => false,
            }
        };
        if changed && state != QueueState::Active {
            self.inner.locks.notify(id, NotifyReason::Stopped);
        }
    }

    /// Signals on every 0 to non-empty transition of the queue's committed
    /// contents, and when the queue is destroyed or stopped.
    pub fn subscribe(&self, session: u64, queue: &str) -> Result<Subscription> {
        let id = self.queue_id(queue)?;
        Ok(self.inner.locks.subscribe(session, id))
    }

    pub fn poll(&self, queue: &str, filter: PollFilter, include_dirty: bool) -> Result<Vec<PollEntry>> {
        self.poll_with(queue, PollOptions { filter, include_dirty, ..PollOptions::default() })
    }

    /// Non-blocking scan. Dirty entries are reported through a read-through
    /// access that takes no lock and names the writing transaction.
    pub fn poll_with(&self, queue: &str, opts: PollOptions) -> Result<Vec<PollEntry>> {
        let store = self.inner.store.lock();
        let q = store.by_name(queue).ok_or_else(|| Error::NotFound(format!("queue {queue}")))?;
        let ids: Vec<MessageId> = match opts.filter {
            PollFilter::All => q.order.values().copied().collect(),
            PollFilter::ById(id) => q.recs.contains_key(&id).then_some(id).into_iter().collect(),
        };
        let mut out = Vec::new();
        for id in ids {
            let rec = &q.recs[&id];
            let visibility = match rec.state {
                RecState::Committed => Visibility::Visible,
                RecState::PendingInsert(_) => Visibility::UncommittedInsert,
                RecState::PendingDelete(_) => Visibility::UncommittedDelete,
            };
            let dirty = visibility != Visibility::Visible;
            if dirty && !opts.include_dirty {
                continue;
            }
            let writer = if dirty { self.inner.locks.read_through(ResourceId::record(q.id, id)) } else { None };
            let payload = match (dirty, opts.include_payload, opts.unsafe_dirty_payload) {
                (false, true, _) | (true, _, true) => Some(rec.payload.clone()),
                _ => None,
            };
            out.push(PollEntry { message: id, priority: rec.priority, visibility, writer, payload });
        }
        Ok(out)
    }

    pub fn stats(&self, queue: &str) -> Result<QueueStats> {
        let store = self.inner.store.lock();
        let q = store.by_name(queue).ok_or_else(|| Error::NotFound(format!("queue {queue}")))?;
        Ok(q.stats(self.inner.locks.waits_for_queue(q.id)))
    }

    pub fn report(&self) -> StatsReport {
        let queues = {
            let store = self.inner.store.lock();
            let mut v: Vec<_> =
                store.queues.values().map(|q| q.stats(self.inner.locks.waits_for_queue(q.id))).collect();
            v.sort_by(|a, b| a.name.cmp(&b.name));
            v
        };
        StatsReport {
            queues,
            pools: self.pool_statuses(),
            triggers: self.inner.triggers.stats(),
            locks: self.inner.locks.stats(),
            log_bytes: self.inner.wal.size(),
            durable_lsn: self.inner.wal.durable_lsn(),
            last_checkpoint_lsn: Lsn(self.inner.last_checkpoint.load(AtomicOrdering::SeqCst)),
            physical_flushes: self.inner.wal.physical_flushes(),
            lock_table: self.inner.locks.dump().lines().map(str::to_string).collect(),
        }
    }

    /// Digest of the committed catalog and contents, for comparing engines.
    pub fn state_hash(&self) -> String {
        let store = self.inner.store.lock();
        let mut h = Sha256::new();
        let mut queues: Vec<&QueueData> = store.queues.values().collect();
        queues.sort_by(|a, b| a.name.cmp(&b.name));
        for q in queues {
            h.update((q.name.len() as u32).to_le_bytes());
            h.update(q.name.as_bytes());
            h.update([q.durability.to_byte(), q.ordering.to_byte(), q.state as u8]);
            for (id, rec) in q.committed() {
                h.update(id.0.to_le_bytes());
                h.update(rec.priority.to_le_bytes());
                h.update((rec.payload.len() as u32).to_le_bytes());
                h.update(&rec.payload);
            }
            h.update([0xff]);
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Committed contents as a recovery-comparable image: catalog plus the
    /// messages of durable queues.
    pub fn durable_snapshot(&self) -> DurableState {
        let store = self.inner.store.lock();
        snapshot_store(&store, self.inner.wal.last_lsn(), &self.inner)
    }

    /// Structural self-check: lock table invariants and per-queue counters.
    pub fn audit(&self) -> std::result::Result<(), String> {
        self.inner.locks.audit()?;
        let store = self.inner.store.lock();
        for q in store.queues.values() {
            let (mut visible, mut ins, mut del) = (0u64, 0u64, 0u64);
            for rec in q.recs.values() {
                match rec.state {
                    RecState::Committed => visible += 1,
                    RecState::PendingInsert(_) => ins += 1,
                    RecState::PendingDelete(_) => del += 1,
                }
            }
            if q.order.len() != q.recs.len() {
                return Err(format!("{}: order index out of sync", q.name));
            }
            if (visible, ins, del) != (q.visible, q.pending_inserts, q.pending_deletes) {
                return Err(format!("{}: depth counters out of sync", q.name));
            }
            if q.enqueue_count < q.dequeue_count || q.enqueue_count - q.dequeue_count != q.visible + q.pending_deletes {
                return Err(format!(
                    "{}: conservation violated: {} enqueued, {} dequeued, depth {}+{}",
                    q.name, q.enqueue_count, q.dequeue_count, q.visible, q.pending_deletes
                ));
            }
        }
        Ok(())
    }

    /// Flushes and returns every record currently in the log file.
    pub fn log_records(&self) -> Result<Vec<LogRecord>> {
        self.inner.wal.flush_all()?;
        let bytes = self.inner.storage.read(LOG_FILE)?.unwrap_or_default();
        Ok(scan_log(&bytes)?.0.into_iter().map(|(r, _)| r).collect())
    }

    /// Takes a sharp checkpoint: waits until no transaction has unfinished
    /// log records, writes the image atomically and cuts the log.
    pub fn checkpoint(&self) -> Result<Lsn> {
        self.check_running()?;
        let inner = &self.inner;
        let _one = inner.checkpoint_lock.lock();
        if !inner.gate.close(inner.config.checkpoint_quiesce) {
            return Err(Error::Unavailable("checkpoint could not quiesce active transactions".into()));
        }
        let res = (|| {
            let (lsn, image) = {
                let store = inner.store.lock();
                let lsn = inner.wal.append(TxnId(0), LogBody::Checkpoint)?;
                inner.wal.flush_through(lsn)?;
                (lsn, encode_image(&snapshot_store(&store, lsn, inner)))
            };
            inner.storage.write_atomic(CHECKPOINT_FILE, &image)?;
            let mut log = Vec::new();
            write_header(&mut log, LOG_MAGIC);
            LogRecord { lsn, txn: TxnId(0), body: LogBody::Checkpoint }.encode_frame(&mut log);
            inner.wal.replace_contents(&log)?;
            Ok(lsn)
        })();
        inner.gate.open();
        match &res {
            Ok(lsn) => inner.last_checkpoint.store(lsn.0, AtomicOrdering::SeqCst),
            Err(e) => log::warn!("checkpoint discarded: {e}"),
        }
        res
    }

    pub(crate) fn maybe_checkpoint(&self) {
        let inner = &self.inner;
        if inner.wal.size() < inner.config.checkpoint_bytes
            || inner.checkpoint_running.swap(true, AtomicOrdering::SeqCst)
        {
            return;
        }
        let engine = self.clone();
        let spawned = thread::Builder::new().name("qdb-checkpoint".into()).spawn(move || {
            if let Err(e) = engine.checkpoint() {
                log::warn!("automatic checkpoint failed: {e}");
            }
            engine.inner.checkpoint_running.store(false, AtomicOrdering::SeqCst);
        });
        if spawned.is_err() {
            inner.checkpoint_running.store(false, AtomicOrdering::SeqCst);
        }
    }

    pub fn register_trigger(&self, spec: TriggerSpec) -> Result<TriggerId> {
        let id = self.queue_id(&spec.queue)?;
        self.inner.triggers.register(id, spec)
    }

    pub fn unregister_trigger(&self, id: TriggerId) -> Result<()> {
        self.inner.triggers.unregister(id)
    }

    /// Clears the suspension of a top-level trigger after repeated failures.
    pub fn resume_trigger(&self, id: TriggerId) -> Result<()> {
        self.inner.triggers.resume(id)
    }

    pub fn trigger_stats(&self) -> Vec<TriggerStats> {
        self.inner.triggers.stats()
    }

    /// Waits until queued asynchronous trigger work has run.
    pub fn wait_triggers_idle(&self, timeout: Duration) -> bool {
        self.inner.work.wait_idle(timeout)
    }

    pub fn attach_pool(&self, config: PoolConfig) -> Result<PoolId> {
        self.inner.pools.attach(self, config)
    }

    pub fn pool_control(&self, queue: &str, action: PoolControl) -> Result<PoolStatus> {
        self.inner.pools.control(self, queue, action)
    }

    pub fn pool_status(&self, queue: &str) -> Result<PoolStatus> {
        self.inner.pools.status(queue)
    }

    pub fn pool_statuses(&self) -> Vec<PoolStatus> {
        self.inner.pools.statuses()
    }

    /// Runs one scaling evaluation of every pool.
    pub fn pool_tick(&self) {
        self.inner.pools.tick_all(self);
    }

    /// Records a worker failure at `at` against the queue's pool.
    pub fn report_worker_failure(&self, queue: &str, at: Duration) -> Result<crate::pool::FailureOutcome> {
        self.inner.pools.report_failure(self, queue, at)
    }

    /// Stops pools, drains trigger work and takes a final checkpoint.
    pub fn shutdown(&self) -> Result<()> {
        self.inner.pools.stop_all(self);
        self.inner.work.wait_idle(Duration::from_secs(10));
        let res = self.checkpoint().map(|_| ());
        self.inner.shutdown.store(true, AtomicOrdering::SeqCst);
        res
    }

    pub(crate) fn downgrade(&self) -> Weak<EngineInner> {
        Arc::downgrade(&self.inner)
    }

    pub(crate) fn upgrade(weak: &Weak<EngineInner>) -> Option<Engine> {
        let inner = weak.upgrade()?;
        if inner.shutdown.load(AtomicOrdering::SeqCst) {
            return None;
        }
        Some(Engine { inner })
    }

    pub(crate) fn notify_destroyed(&self, queue: QueueId) {
        self.inner.locks.notify(queue, NotifyReason::Destroyed);
        self.inner.triggers.remove_queue(queue);
        self.inner.pools.queue_destroyed(queue);
    }
}

fn snapshot_store(store: &Store, lsn: Lsn, inner: &EngineInner) -> DurableState {
    let mut state = DurableState {
        lsn,
        next_txn: inner.next_txn.load(AtomicOrdering::SeqCst),
        next_message: inner.next_message.load(AtomicOrdering::SeqCst),
        next_queue: inner.next_queue.load(AtomicOrdering::SeqCst),
        queues: Default::default(),
    };
    for (id, q) in &store.queues {
        let mut qi = QueueImage {
            name: q.name.clone(),
            durability: q.durability,
            ordering: q.ordering,
            created_lsn: q.created_lsn,
            next_seq: q.next_seq,
            messages: Default::default(),
        };
        if q.durability == Durability::Durable {
            for (mid, rec) in q.committed() {
                qi.messages
                    .insert(mid, MessageImage { priority: rec.priority, seq: rec.seq, payload: rec.payload.clone() });
            }
        }
        state.queues.insert(*id, qi);
    }
    state
}

fn housekeeping(weak: Weak<EngineInner>, period: Duration) {
    loop {
        thread::sleep(period);
        let Some(engine) = Engine::upgrade(&weak) else { return };
        engine.inner.locks.detect_timeout_victims();
        engine.pool_tick();
    }
}
