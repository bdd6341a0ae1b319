//! Transactions: strict two-phase locking over the lock manager, redo
//! records in the log, and provisional queue effects that become visible
//! only after the COMMIT record is durable.

use std::collections::BTreeSet;
use std::thread;
use std::time::Duration;

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::lockmgr::{AccessVariant, AcquireOutcome, LockMode, NotifyReason, ResourceId};
use crate::queue::{Message, QueueData, RecState};
use crate::triggers::{Firing, TriggerEvent};
use crate::types::{Durability, IsolationMode, Lsn, MessageId, Ordering, QueueId, QueueState, TxnId};
use crate::wal::LogBody;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnState {
    Active,
    Committing,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Effect {
    Insert { queue: QueueId, message: MessageId },
    Delete { queue: QueueId, message: MessageId },
    Destroy { queue: QueueId },
}

/// Longest single sleep of a waiting dequeue before it re-reads the clock.
const WAIT_SLICE: Duration = Duration::from_millis(20);
/// Nesting limit for triggers that fire triggers.
pub const MAX_TRIGGER_DEPTH: u32 = 16;

enum Scan {
    Found(Message),
    /// Nothing claimable; `busy` is true when committed records exist but
    /// are locked by someone else.
    Empty {
        busy: bool,
    },
    /// Must wait for this record's lock (serializable mode), then rescan.
    WaitFor(ResourceId),
    /// The checkpoint gate is closed; wait for it and rescan.
    Gate,
}

/// A transaction handle. Must be driven by one thread at a time; it can be
/// moved between threads between operations. Dropping an active transaction
/// aborts it.
pub struct Txn {
    engine: Engine,
    id: TxnId,
    state: TxnState,
    begin_logged: bool,
    in_gate: bool,
    effects: Vec<Effect>,
    deferred: Vec<Firing>,
    destroyed: BTreeSet<QueueId>,
    pub(crate) trigger_depth: u32,
}

impl std::fmt::Debug for Txn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Txn")
            .field("id", &self.id)
            .field("state", &self.state)
            .field("effects", &self.effects.len())
            .finish()
    }
}

impl Txn {
    pub(crate) fn new(engine: Engine, id: TxnId) -> Self {
        Txn {
            engine,
            id,
            state: TxnState::Active,
            begin_logged: false,
            in_gate: false,
            effects: Vec::new(),
            deferred: Vec::new(),
            destroyed: BTreeSet::new(),
            trigger_depth: 0,
        }
    }

    pub fn id(&self) -> TxnId {
        self.id
    }

    pub fn state(&self) -> TxnState {
        self.state
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// True once the transaction has written anything to the log.
    pub fn logged(&self) -> bool {
        self.begin_logged
    }

    fn check_active(&self) -> Result<()> {
        match self.state {
            TxnState::Active => {}
            s => return Err(Error::usage(format!("transaction {} is {s:?}", self.id))),
        }
        if self.engine.inner.locks.abort_required(self.id) {
            return Err(Error::DeadlockTimeout(self.id));
        }
        Ok(())
    }

    fn resolve(&self, queue: &str) -> Result<QueueId> {
        let id = self.engine.queue_id(queue)?;
        if self.destroyed.contains(&id) {
            return Err(Error::NotFound(format!("queue {queue}")));
        }
        Ok(id)
    }

    fn lock(&self, res: ResourceId, mode: LockMode) -> Result<()> {
        let timeout = self.engine.inner.config.lock_timeout;
        match self.engine.inner.locks.acquire(self.id, res, mode, AccessVariant::Wait, timeout)? {
            AcquireOutcome::Granted => Ok(()),
            _ => Err(Error::DeadlockTimeout(self.id)),
        }
    }

    /// Called with the store locked, before the first log write of an
    /// operation on a durable queue. False means the checkpoint gate is
    /// closed and the caller must back off.
    fn gate(&mut self, durable: bool) -> bool {
        if !durable || self.in_gate {
            return true;
        }
        if self.engine.inner.gate.try_enter() {
            self.in_gate = true;
            true
        } else {
            false
        }
    }

    fn log(&mut self, body: LogBody) -> Result<Lsn> {
        let wal = &self.engine.inner.wal;
        if !self.begin_logged {
            wal.append(self.id, LogBody::Begin)?;
            self.begin_logged = true;
        }
        wal.append(self.id, body)
    }

    fn live<'a>(store: &'a mut crate::queue::Store, id: QueueId, name: &str) -> Result<&'a mut QueueData> {
        let q = store.queues.get_mut(&id).ok_or_else(|| Error::NotFound(format!("queue {name}")))?;
        if q.state != QueueState::Active {
            return Err(Error::Unavailable(format!("queue {name} is {}", q.state)));
        }
        Ok(q)
    }

    pub fn enqueue(&mut self, queue: &str, priority: i64, payload: &[u8]) -> Result<MessageId> {
        self.check_active()?;
        let max = self.engine.inner.config.max_payload;
        if payload.len() > max {
            return Err(Error::usage(format!("payload of {} bytes exceeds limit {max}", payload.len())));
        }
        let qid = self.resolve(queue)?;
        {
            let store = self.engine.inner.store.lock();
            if let Some(q) = store.queues.get(&qid)
                && q.state != QueueState::Active
            {
                return Err(Error::Unavailable(format!("queue {queue} is {}", q.state)));
            }
        }
        self.lock(ResourceId::catalog(qid), LockMode::S)?;
        let inner = self.engine.inner.clone();
        let mid = loop {
            let mut store = inner.store.lock();
            let q = Self::live(&mut store, qid, queue)?;
            if !self.gate(q.durability == Durability::Durable) {
                drop(store);
                inner.gate.wait_open();
                continue;
            }
            let priority = if q.ordering == Ordering::Fifo { 0 } else { priority };
            let mid = MessageId(inner.next_message.fetch_add(1, std::sync::atomic::Ordering::SeqCst));
            if q.durability == Durability::Durable {
                self.log(LogBody::Insert { queue: qid, message: mid, priority, payload: payload.to_vec() })?;
            }
            let q = store.queues.get_mut(&qid).expect("queue checked above");
            q.insert_pending(self.id, mid, priority, payload.to_vec());
            inner.locks.acquire(
                self.id,
                ResourceId::record(qid, mid),
                LockMode::X,
                AccessVariant::Wait,
                Duration::ZERO,
            )?;
            break mid;
        };
        self.effects.push(Effect::Insert { queue: qid, message: mid });
        self.fire(qid, queue, mid, TriggerEvent::OnEnqueue)?;
        Ok(mid)
    }

    /// Removes the first committed message in dequeue order, provisionally
    /// until commit. A zero `wait` returns immediately when nothing is
    /// available; otherwise the call sleeps on the queue's notify signal
    /// until a message arrives or `wait` passes.
    pub fn dequeue(&mut self, queue: &str, isolation: IsolationMode, wait: Duration) -> Result<Option<Message>> {
        self.check_active()?;
        let qid = self.resolve(queue)?;
        {
            let store = self.engine.inner.store.lock();
            if let Some(q) = store.queues.get(&qid)
                && q.state != QueueState::Active
            {
                return Err(Error::Unavailable(format!("queue {queue} is {}", q.state)));
            }
        }
        self.lock(ResourceId::catalog(qid), LockMode::S)?;
        if isolation == IsolationMode::Serializable {
            self.lock(ResourceId::queue_head(qid), LockMode::X)?;
        }
        let clock = self.engine.inner.config.clock.clone();
        let deadline = clock.now() + wait;
        let mut sub = None;
        loop {
            match self.scan(qid, queue, isolation, None)? {
                Scan::Found(m) => {
                    self.effects.push(Effect::Delete { queue: qid, message: m.id });
                    self.fire(qid, queue, m.id, TriggerEvent::OnDequeue)?;
                    return Ok(Some(m));
                }
                Scan::Gate => self.engine.inner.gate.wait_open(),
                Scan::WaitFor(res) => self.lock(res, LockMode::S)?,
                Scan::Empty { busy } => {
                    if wait.is_zero() {
                        return Ok(None);
                    }
                    if sub.is_none() {
                        // subscribe before the next scan so a commit in
                        // between cannot be missed
                        sub = Some(self.engine.inner.locks.subscribe(self.id.0, qid));
                        continue;
                    }
                    let now = clock.now();
                    if now >= deadline {
                        return Ok(None);
                    }
                    if busy {
                        thread::sleep(Duration::from_millis(1));
                    } else if let Some(s) = &sub {
                        // any signal, or none, leads to a rescan
                        let _ = s.wait((deadline - now).min(WAIT_SLICE));
                    }
                }
            }
        }
    }

    /// Claims one specific committed message, if it is available right now.
    pub fn dequeue_message(&mut self, queue: &str, id: MessageId) -> Result<Option<Message>> {
        self.check_active()?;
        let qid = self.resolve(queue)?;
        self.lock(ResourceId::catalog(qid), LockMode::S)?;
        loop {
            match self.scan(qid, queue, IsolationMode::ReadPastDequeue, Some(id))? {
                Scan::Found(m) => {
                    self.effects.push(Effect::Delete { queue: qid, message: m.id });
                    self.fire(qid, queue, m.id, TriggerEvent::OnDequeue)?;
                    return Ok(Some(m));
                }
                Scan::Gate => self.engine.inner.gate.wait_open(),
                _ => return Ok(None),
            }
        }
    }

    fn scan(&mut self, qid: QueueId, name: &str, isolation: IsolationMode, only: Option<MessageId>) -> Result<Scan> {
        let inner = self.engine.inner.clone();
        let mut store = inner.store.lock();
        let q = Self::live(&mut store, qid, name)?;
        let durable = q.durability == Durability::Durable;
        if !self.gate(durable) {
            return Ok(Scan::Gate);
        }
        let candidates: Vec<MessageId> = match only {
            Some(id) => q.recs.contains_key(&id).then_some(id).into_iter().collect(),
            None => q.order.values().copied().collect(),
        };
        let locks = &inner.locks;
        let mut found = None;
        for mid in candidates {
            let state = q.recs[&mid].state;
            let res = ResourceId::record(qid, mid);
            match isolation {
                IsolationMode::ReadPastDequeue => {
                    if locks.acquire(self.id, res, LockMode::S, AccessVariant::ReadPast, Duration::ZERO)?
                        != AcquireOutcome::Granted
                    {
                        continue;
                    }
                    if state != RecState::Committed {
                        continue;
                    }
                    if locks.acquire(self.id, res, LockMode::X, AccessVariant::Wait, Duration::ZERO)?
                        == AcquireOutcome::Granted
                    {
                        found = Some(mid);
                        break;
                    }
                }
                IsolationMode::Serializable => match state {
                    RecState::PendingInsert(_) => continue,
                    RecState::PendingDelete(t) if t == self.id => continue,
                    RecState::PendingDelete(_) => return Ok(Scan::WaitFor(res)),
                    RecState::Committed => {
                        if locks.acquire(self.id, res, LockMode::X, AccessVariant::Wait, Duration::ZERO)?
                            == AcquireOutcome::Granted
                        {
                            found = Some(mid);
                            break;
                        }
                        return Ok(Scan::WaitFor(res));
                    }
                },
            }
        }
        let Some(mid) = found else {
            return Ok(Scan::Empty { busy: q.visible > 0 });
        };
        if durable {
            self.log(LogBody::Delete { queue: qid, message: mid })?;
        }
        let q = store.queues.get_mut(&qid).expect("queue checked above");
        q.mark_deleted(self.id, mid);
        let rec = &q.recs[&mid];
        Ok(Scan::Found(Message {
            id: mid,
            queue: q.name.clone(),
            priority: rec.priority,
            seq: rec.seq,
            payload: rec.payload.clone(),
            redeliveries: rec.redeliveries,
        }))
    }

    /// Destroys a queue when this transaction commits. Waits for every
    /// transaction that is using the queue to finish first.
    pub fn destroy_queue(&mut self, queue: &str) -> Result<()> {
        self.check_active()?;
        let qid = self.resolve(queue)?;
        self.lock(ResourceId::catalog(qid), LockMode::X)?;
        let inner = self.engine.inner.clone();
        loop {
            let store = inner.store.lock();
            if !store.queues.contains_key(&qid) {
                return Err(Error::NotFound(format!("queue {queue}")));
            }
            if !self.gate(true) {
                drop(store);
                inner.gate.wait_open();
                continue;
            }
            self.log(LogBody::DestroyQueue { queue: qid })?;
            break;
        }
        self.effects.push(Effect::Destroy { queue: qid });
        self.destroyed.insert(qid);
        Ok(())
    }

    pub(crate) fn defer(&mut self, firing: Firing) {
        self.deferred.push(firing);
    }

    fn fire(&mut self, qid: QueueId, queue: &str, mid: MessageId, event: TriggerEvent) -> Result<()> {
        let engine = self.engine.clone();
        if let Err(e) = engine.inner.triggers.fire(&engine, self, qid, queue, mid, event) {
            let _ = self.abort();
            return Err(e);
        }
        Ok(())
    }

    pub fn commit(&mut self) -> Result<()> {
        match self.state {
            TxnState::Active => {}
            s => return Err(Error::usage(format!("cannot commit transaction {} in state {s:?}", self.id))),
        }
        let inner = self.engine.inner.clone();
        if inner.locks.abort_required(self.id) {
            self.abort()?;
            return Err(Error::DeadlockTimeout(self.id));
        }
        self.state = TxnState::Committing;
        let seqs = if self.begin_logged {
            inner.wal.commit_started();
            let appended = {
                let mut store = inner.store.lock();
                match inner.wal.append(self.id, LogBody::Commit) {
                    Ok(lsn) => Ok((lsn, self.assign_seqs(&mut store))),
                    Err(e) => Err(e),
                }
            };
            let flushed = appended.and_then(|(lsn, seqs)| inner.wal.flush_through(lsn).map(|_| seqs));
            inner.wal.commit_done();
            match flushed {
                Ok(seqs) => seqs,
                Err(e) => {
                    // The outcome is unknown and the engine is now failed;
                    // nothing more can be made visible.
                    self.finish(Vec::new());
                    self.state = TxnState::Aborted;
                    return Err(e);
                }
            }
        } else {
            let mut store = inner.store.lock();
            self.assign_seqs(&mut store)
        };

        let mut signals = Vec::new();
        let mut destroyed = Vec::new();
        let mut inserted = BTreeSet::new();
        {
            let mut store = inner.store.lock();
            let mut seqs = seqs.into_iter();
            for eff in &self.effects {
                match *eff {
                    Effect::Insert { queue, message } => {
                        let seq = seqs.next().expect("one sequence number per insert");
                        if let Some(q) = store.queues.get_mut(&queue) {
                            inserted.insert(queue);
                            if q.commit_insert(message, seq) {
                                signals.push(queue);
                            }
                        }
                    }
                    Effect::Delete { queue, message } => {
                        if let Some(q) = store.queues.get_mut(&queue) {
                            q.commit_delete(message);
                        }
                    }
                    Effect::Destroy { queue } => {
                        if store.remove(queue).is_some() {
                            destroyed.push(queue);
                        }
                    }
                }
            }
        }
        self.finish(signals);
        self.state = TxnState::Committed;
        for q in destroyed {
            self.engine.notify_destroyed(q);
        }
        let deferred = std::mem::take(&mut self.deferred);
        if !deferred.is_empty() {
            inner.triggers.dispatch(&self.engine, deferred);
        }
        if !inserted.is_empty() {
            let queues: Vec<QueueId> = inserted.into_iter().collect();
            inner.pools.on_commit(&self.engine, &queues);
        }
        self.engine.maybe_checkpoint();
        Ok(())
    }

    /// Sequence numbers for this transaction's inserts, in effect order.
    /// Assigned under the store lock right after the COMMIT record is
    /// appended, so they follow log order exactly as replay does.
    fn assign_seqs(&self, store: &mut crate::queue::Store) -> Vec<u64> {
        let mut out = Vec::new();
        for eff in &self.effects {
            if let Effect::Insert { queue, .. } = eff {
                match store.queues.get_mut(queue) {
                    Some(q) => {
                        out.push(q.next_seq);
                        q.next_seq += 1;
                    }
                    None => out.push(0),
                }
            }
        }
        out
    }

    /// Leaves the checkpoint gate, releases all locks and raises the
    /// collected notify signals.
    fn finish(&mut self, signals: Vec<QueueId>) {
        let inner = &self.engine.inner;
        if self.in_gate {
            inner.gate.exit();
            self.in_gate = false;
        }
        inner.locks.release_all(self.id);
        for q in signals {
            inner.locks.notify(q, NotifyReason::NonEmpty);
        }
    }

    pub fn abort(&mut self) -> Result<()> {
        match self.state {
            TxnState::Aborted => return Ok(()),
            TxnState::Committed => {
                return Err(Error::usage(format!("transaction {} already committed", self.id)));
            }
            TxnState::Active | TxnState::Committing => {}
        }
        let inner = self.engine.inner.clone();
        let mut signals = Vec::new();
        {
            let mut store = inner.store.lock();
            for eff in self.effects.iter().rev() {
                match *eff {
                    Effect::Insert { queue, message } => {
                        if let Some(q) = store.queues.get_mut(&queue) {
                            q.rollback_insert(message);
                        }
                    }
                    Effect::Delete { queue, message } => {
                        if let Some(q) = store.queues.get_mut(&queue)
                            && q.rollback_delete(message)
                        {
                            signals.push(queue);
                        }
                    }
                    Effect::Destroy { .. } => {}
                }
            }
            if self.begin_logged
                && let Err(e) = inner.wal.append(self.id, LogBody::Abort)
            {
                log::debug!("abort record for {} not written: {e}", self.id);
            }
        }
        self.effects.clear();
        self.deferred.clear();
        self.finish(signals);
        self.state = TxnState::Aborted;
        Ok(())
    }
}

impl Drop for Txn {
    fn drop(&mut self) {
        if matches!(self.state, TxnState::Active | TxnState::Committing) {
            let _ = self.abort();
        }
    }
}
