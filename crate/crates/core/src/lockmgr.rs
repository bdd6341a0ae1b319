//! Record- and queue-granularity lock manager.
//!
//! Plain S/X locking with strict two-phase release, plus the three access
//! variants queues need:
//!
//! * `ReadPast` - take the lock if it is free right now, otherwise report
//!   [`AcquireOutcome::Skipped`] without ever joining the wait list.
//! * `ReadThrough` - take nothing, block no one, and report who (if anyone)
//!   holds the record exclusively.
//! * `Notify` - handled by [`LockManager::subscribe`]: a subscription is
//!   signalled when a queue goes from empty to non-empty, or is destroyed or
//!   stopped.
//!
//! Deadlocks are resolved by timeouts: a waiter whose deadline passes is
//! removed from the wait list and its transaction is marked abort-required.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt::{self, Write as _};
use std::sync::{Arc, Weak};
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::Serialize;

use crate::clock::SharedClock;
use crate::error::{Error, Result};
use crate::types::{MessageId, QueueId, TxnId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ResourceKind {
    QueueHead,
    Record,
    Catalog,
}

/// Ordered by (kind, queue, message) so dumps are deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ResourceId {
    pub kind: ResourceKind,
    pub queue: QueueId,
    pub message: MessageId,
}

impl ResourceId {
    pub fn queue_head(queue: QueueId) -> Self {
        ResourceId { kind: ResourceKind::QueueHead, queue, message: MessageId(0) }
    }

    pub fn record(queue: QueueId, message: MessageId) -> Self {
        ResourceId { kind: ResourceKind::Record, queue, message }
    }

    pub fn catalog(queue: QueueId) -> Self {
        ResourceId { kind: ResourceKind::Catalog, queue, message: MessageId(0) }
    }
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ResourceKind::QueueHead => write!(f, "head({})", self.queue),
            ResourceKind::Record => write!(f, "record({},{})", self.queue, self.message),
            ResourceKind::Catalog => write!(f, "catalog({})", self.queue),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum LockMode {
    S,
    X,
}

impl LockMode {
    pub fn compatible(self, other: LockMode) -> bool {
        matches!((self, other), (LockMode::S, LockMode::S))
    }

    fn covers(self, wanted: LockMode) -> bool {
        self == LockMode::X || wanted == LockMode::S
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessVariant {
    Wait,
    ReadPast,
    ReadThrough,
    Notify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcquireOutcome {
    Granted,
    Skipped,
    /// No lock taken; `writer` is the transaction holding X, if any.
    DirtyGranted {
        writer: Option<TxnId>,
    },
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NotifyReason {
    NonEmpty,
    Destroyed,
    Stopped,
}

/// One entry of the optional acquire trace used by auditors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub txn: TxnId,
    pub resource: ResourceId,
    pub mode: LockMode,
    pub variant: AccessVariant,
    pub outcome: AcquireOutcome,
    pub enqueued: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotState {
    Waiting,
    Granted,
    TimedOut,
}

#[derive(Debug)]
struct WaitSlot {
    state: Mutex<SlotState>,
    cv: Condvar,
}

impl WaitSlot {
    fn set(&self, s: SlotState) {
        *self.state.lock() = s;
        self.cv.notify_all();
    }
}

#[derive(Debug)]
struct Waiter {
    txn: TxnId,
    mode: LockMode,
    deadline: Duration,
    slot: Arc<WaitSlot>,
}

#[derive(Debug, Default)]
struct Entry {
    holders: Vec<(TxnId, LockMode)>,
    waiters: VecDeque<Waiter>,
}

impl Entry {
    fn grantable(&self, txn: TxnId, mode: LockMode) -> bool {
        self.holders.iter().all(|(t, m)| *t == txn || m.compatible(mode))
    }

    fn held_by(&self, txn: TxnId) -> Option<LockMode> {
        self.holders.iter().find(|(t, _)| *t == txn).map(|(_, m)| *m)
    }

    fn grant(&mut self, txn: TxnId, mode: LockMode) {
        match self.holders.iter_mut().find(|(t, _)| *t == txn) {
            Some(h) => h.1 = if h.1 == LockMode::X { LockMode::X } else { mode },
            None => self.holders.push((txn, mode)),
        }
    }

    /// Grants, in FIFO order, every waiter compatible with the holders
    /// (including the ones granted earlier in the same pass).
    fn grant_waiters(&mut self) -> Vec<TxnId> {
        let mut granted = Vec::new();
        let mut i = 0;
        while i < self.waiters.len() {
            let (txn, mode) = (self.waiters[i].txn, self.waiters[i].mode);
            if self.grantable(txn, mode) {
                let w = self.waiters.remove(i).unwrap();
                self.grant(txn, mode);
                w.slot.set(SlotState::Granted);
                granted.push(txn);
            } else {
                i += 1;
            }
        }
        granted
    }
}

#[derive(Debug, Default)]
struct Table {
    entries: HashMap<ResourceId, Entry>,
    held: HashMap<TxnId, Vec<ResourceId>>,
    active: HashSet<TxnId>,
    abort_required: HashSet<TxnId>,
    waits_by_queue: HashMap<QueueId, u64>,
    stats: LockStats,
    trace: Option<Vec<TraceEvent>>,
}

impl Table {
    /// Grants eligible waiters on `res` and records the new holdings.
    fn wake(&mut self, res: ResourceId) {
        let granted = match self.entries.get_mut(&res) {
            Some(e) => e.grant_waiters(),
            None => return,
        };
        for txn in granted {
            let held = self.held.entry(txn).or_default();
            if !held.contains(&res) {
                held.push(res);
            }
        }
    }

    fn record(&mut self, ev: TraceEvent) {
        if let Some(t) = self.trace.as_mut() {
            t.push(ev);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LockStats {
    pub granted: u64,
    pub waits: u64,
    pub read_past_skips: u64,
    pub read_through_reads: u64,
    pub timeouts: u64,
}

#[derive(Debug)]
struct SubInner {
    queue: QueueId,
    session: u64,
    pending: Mutex<VecDeque<NotifyReason>>,
    cv: Condvar,
}

/// Handle returned by [`LockManager::subscribe`]. Signals latch until
/// consumed, so a signal raised between a consumer's check and its wait is
/// not lost. Dropping the handle ends the subscription.
#[derive(Debug)]
pub struct Subscription {
    inner: Arc<SubInner>,
}

impl Subscription {
    pub fn queue(&self) -> QueueId {
        self.inner.queue
    }

    pub fn session(&self) -> u64 {
        self.inner.session
    }

    pub fn try_recv(&self) -> Option<NotifyReason> {
        self.inner.pending.lock().pop_front()
    }

    /// Waits up to `timeout` (real time) for the next signal.
    pub fn wait(&self, timeout: Duration) -> Option<NotifyReason> {
        let mut p = self.inner.pending.lock();
        if p.is_empty() {
            self.inner.cv.wait_for(&mut p, timeout);
        }
        p.pop_front()
    }

    pub fn pending(&self) -> usize {
        self.inner.pending.lock().len()
    }
}

pub struct LockManager {
    table: Mutex<Table>,
    subs: Mutex<HashMap<QueueId, Vec<Weak<SubInner>>>>,
    clock: SharedClock,
}

impl fmt::Debug for LockManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LockManager").field("stats", &self.stats()).finish()
    }
}

const WAIT_SLICE: Duration = Duration::from_millis(5);

impl LockManager {
    pub fn new(clock: SharedClock) -> Self {
        LockManager { table: Mutex::new(Table::default()), subs: Mutex::default(), clock }
    }

    /// Registers a transaction as active; only active transactions may lock.
    pub fn begin(&self, txn: TxnId) {
        self.table.lock().active.insert(txn);
    }

    pub fn is_active(&self, txn: TxnId) -> bool {
        self.table.lock().active.contains(&txn)
    }

    pub fn abort_required(&self, txn: TxnId) -> bool {
        self.table.lock().abort_required.contains(&txn)
    }

    pub fn acquire(
        &self,
        txn: TxnId,
        resource: ResourceId,
        mode: LockMode,
        variant: AccessVariant,
        timeout: Duration,
    ) -> Result<AcquireOutcome> {
        match variant {
            AccessVariant::ReadPast | AccessVariant::ReadThrough if mode != LockMode::S => {
                return Err(Error::usage(format!("{variant:?} applies only to S requests")));
            }
            AccessVariant::Notify if resource.kind != ResourceKind::QueueHead => {
                return Err(Error::usage("notify applies only to queue heads"));
            }
            AccessVariant::Notify => {
                return Err(Error::usage("notify is requested through subscribe"));
            }
            _ => {}
        }
        let mut t = self.table.lock();
        if !t.active.contains(&txn) {
            return Err(Error::StaleTransaction(txn));
        }
        if variant == AccessVariant::ReadThrough {
            let writer = t
                .entries
                .get(&resource)
                .and_then(|e| e.holders.iter().find(|(_, m)| *m == LockMode::X).map(|(h, _)| *h));
            let outcome = AcquireOutcome::DirtyGranted { writer };
            t.stats.read_through_reads += 1;
            t.record(TraceEvent { txn, resource, mode, variant, outcome, enqueued: false });
            return Ok(outcome);
        }

        let entry = t.entries.entry(resource).or_default();
        if entry.held_by(txn).is_some_and(|m| m.covers(mode)) {
            return Ok(AcquireOutcome::Granted);
        }
        if entry.grantable(txn, mode) {
            entry.grant(txn, mode);
            let held = t.held.entry(txn).or_default();
            if !held.contains(&resource) {
                held.push(resource);
            }
            t.stats.granted += 1;
            let outcome = AcquireOutcome::Granted;
            t.record(TraceEvent { txn, resource, mode, variant, outcome, enqueued: false });
            return Ok(outcome);
        }
        if variant == AccessVariant::ReadPast {
            t.stats.read_past_skips += 1;
            let outcome = AcquireOutcome::Skipped;
            t.record(TraceEvent { txn, resource, mode, variant, outcome, enqueued: false });
            return Ok(outcome);
        }
        if timeout.is_zero() {
            let outcome = AcquireOutcome::TimedOut;
            t.record(TraceEvent { txn, resource, mode, variant, outcome, enqueued: false });
            return Ok(outcome);
        }

        let slot = Arc::new(WaitSlot { state: Mutex::new(SlotState::Waiting), cv: Condvar::new() });
        let deadline = self.clock.now() + timeout;
        let upgrade = entry.held_by(txn).is_some();
        let w = Waiter { txn, mode, deadline, slot: slot.clone() };
        if upgrade {
            entry.waiters.push_front(w);
        } else {
            entry.waiters.push_back(w);
        }
        t.stats.waits += 1;
        *t.waits_by_queue.entry(resource.queue).or_default() += 1;
        t.record(TraceEvent { txn, resource, mode, variant, outcome: AcquireOutcome::Granted, enqueued: true });
        drop(t);

        loop {
            {
                let mut st = slot.state.lock();
                match *st {
                    SlotState::Granted => break,
                    SlotState::TimedOut => return Ok(AcquireOutcome::TimedOut),
                    SlotState::Waiting => {}
                }
                if self.clock.now() < deadline {
                    slot.cv.wait_for(&mut st, WAIT_SLICE);
                    continue;
                }
            }
            // Deadline passed: give up unless a grant raced in.
            let mut t = self.table.lock();
            if *slot.state.lock() == SlotState::Granted {
                break;
            }
            if let Some(e) = t.entries.get_mut(&resource) {
                e.waiters.retain(|w| !Arc::ptr_eq(&w.slot, &slot));
            }
            t.wake(resource);
            t.abort_required.insert(txn);
            t.stats.timeouts += 1;
            slot.set(SlotState::TimedOut);
            return Ok(AcquireOutcome::TimedOut);
        }
        self.table.lock().stats.granted += 1;
        Ok(AcquireOutcome::Granted)
    }

    /// Lock-free dirty read of a resource: reports the X holder, if any.
    pub fn read_through(&self, resource: ResourceId) -> Option<TxnId> {
        let mut t = self.table.lock();
        t.stats.read_through_reads += 1;
        t.entries.get(&resource).and_then(|e| e.holders.iter().find(|(_, m)| *m == LockMode::X).map(|(h, _)| *h))
    }

    /// Releases every lock of `txn`, grants eligible waiters and ends the
    /// transaction's lock session. Idempotent.
    pub fn release_all(&self, txn: TxnId) {
        let mut t = self.table.lock();
        let held = t.held.remove(&txn).unwrap_or_default();
        for res in held {
            if let Some(e) = t.entries.get_mut(&res) {
                e.holders.retain(|(h, _)| *h != txn);
            }
            t.wake(res);
            if t.entries.get(&res).is_some_and(|e| e.holders.is_empty() && e.waiters.is_empty()) {
                t.entries.remove(&res);
            }
        }
        t.active.remove(&txn);
        t.abort_required.remove(&txn);
    }

    /// Removes waiters whose deadline has passed and marks their
    /// transactions abort-required.
    pub fn detect_timeout_victims(&self) -> Vec<TxnId> {
        let now = self.clock.now();
        let mut t = self.table.lock();
        let mut victims = Vec::new();
        let mut touched = Vec::new();
        for (res, e) in t.entries.iter_mut() {
            let before = e.waiters.len();
            e.waiters.retain(|w| {
                if w.deadline <= now {
                    w.slot.set(SlotState::TimedOut);
                    victims.push(w.txn);
                    false
                } else {
                    true
                }
            });
            if e.waiters.len() != before {
                touched.push(*res);
            }
        }
        for res in touched {
            t.wake(res);
        }
        for v in &victims {
            t.abort_required.insert(*v);
        }
        t.stats.timeouts += victims.len() as u64;
        victims.sort();
        victims.dedup();
        victims
    }

    pub fn subscribe(&self, session: u64, queue: QueueId) -> Subscription {
        let inner = Arc::new(SubInner { queue, session, pending: Mutex::new(VecDeque::new()), cv: Condvar::new() });
        let mut subs = self.subs.lock();
        let list = subs.entry(queue).or_default();
        list.retain(|w| w.strong_count() > 0);
        list.push(Arc::downgrade(&inner));
        Subscription { inner }
    }

    pub fn notify(&self, queue: QueueId, reason: NotifyReason) {
        let mut subs = self.subs.lock();
        let Some(list) = subs.get_mut(&queue) else { return };
        list.retain(|w| match w.upgrade() {
            Some(s) => {
                s.pending.lock().push_back(reason);
                s.cv.notify_all();
                true
            }
            None => false,
        });
    }

    pub fn subscriber_count(&self, queue: QueueId) -> usize {
        self.subs.lock().get(&queue).map(|l| l.iter().filter(|w| w.strong_count() > 0).count()).unwrap_or(0)
    }

    pub fn stats(&self) -> LockStats {
        self.table.lock().stats
    }

    pub fn waits_for_queue(&self, queue: QueueId) -> u64 {
        self.table.lock().waits_by_queue.get(&queue).copied().unwrap_or(0)
    }

    pub fn holders(&self, resource: ResourceId) -> Vec<(TxnId, LockMode)> {
        self.table.lock().entries.get(&resource).map(|e| e.holders.clone()).unwrap_or_default()
    }

    pub fn waiters(&self, resource: ResourceId) -> Vec<(TxnId, LockMode)> {
        self.table
            .lock()
            .entries
            .get(&resource)
            .map(|e| e.waiters.iter().map(|w| (w.txn, w.mode)).collect())
            .unwrap_or_default()
    }

    pub fn start_trace(&self) {
        self.table.lock().trace = Some(Vec::new());
    }

    pub fn take_trace(&self) -> Vec<TraceEvent> {
        self.table.lock().trace.take().unwrap_or_default()
    }

    /// Checks the table's structural invariants.
    pub fn audit(&self) -> std::result::Result<(), String> {
        let t = self.table.lock();
        for (res, e) in &t.entries {
            for (i, (a, ma)) in e.holders.iter().enumerate() {
                for (b, mb) in &e.holders[i + 1..] {
                    if a == b {
                        return Err(format!("{res}: {a} listed twice"));
                    }
                    if !ma.compatible(*mb) {
                        return Err(format!("{res}: {a}:{ma:?} and {b}:{mb:?} both granted"));
                    }
                }
                if !t.held.get(a).is_some_and(|h| h.contains(res)) {
                    return Err(format!("{res}: holder {a} does not track the lock"));
                }
            }
            for w in &e.waiters {
                if e.grantable(w.txn, w.mode) {
                    return Err(format!("{res}: waiter {} is grantable but waiting", w.txn));
                }
            }
        }
        Ok(())
    }

    /// Stable text rendering, one line per resource in resource order.
    pub fn dump(&self) -> String {
        let t = self.table.lock();
        let sorted: BTreeMap<_, _> = t.entries.iter().collect();
        let mut out = String::new();
        for (res, e) in sorted {
            let holders: Vec<String> = e.holders.iter().map(|(t, m)| format!("{t}:{m:?}")).collect();
            let waiters: Vec<String> = e.waiters.iter().map(|w| format!("{}:{:?}", w.txn, w.mode)).collect();
            let _ = writeln!(out, "{res} holders=[{}] waiters=[{}]", holders.join(","), waiters.join(","));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{ManualClock, SystemClock};
    use std::thread;

    const LONG: Duration = Duration::from_secs(5);

    fn mgr() -> Arc<LockManager> {
        Arc::new(LockManager::new(SystemClock::shared()))
    }

    fn r(m: u64) -> ResourceId {
        ResourceId::record(QueueId(1), MessageId(m))
    }

    fn begin(lm: &LockManager, ids: &[u64]) {
        for i in ids {
            lm.begin(TxnId(*i));
        }
    }

    #[test]
    fn shared_locks_are_compatible() {
        let lm = mgr();
        begin(&lm, &[1, 2]);
        let t1 = TxnId(1);
        let t2 = TxnId(2);
        assert_eq!(lm.acquire(t1, r(1), LockMode::S, AccessVariant::Wait, LONG).unwrap(), AcquireOutcome::Granted);
        assert_eq!(lm.acquire(t2, r(1), LockMode::S, AccessVariant::Wait, LONG).unwrap(), AcquireOutcome::Granted);
        lm.audit().unwrap();
    }

    #[test]
    fn read_past_skips_dirty_record_without_waiting() {
        let lm = mgr();
        begin(&lm, &[1, 2]);
        lm.acquire(TxnId(1), r(1), LockMode::X, AccessVariant::Wait, LONG).unwrap();
        lm.start_trace();
        let out = lm.acquire(TxnId(2), r(1), LockMode::S, AccessVariant::ReadPast, LONG).unwrap();
        assert_eq!(out, AcquireOutcome::Skipped);
        assert!(lm.waiters(r(1)).is_empty());
        assert!(lm.take_trace().iter().all(|e| !e.enqueued));
    }

    #[test]
    fn read_through_reports_writer_and_takes_nothing() {
        let lm = mgr();
        begin(&lm, &[1, 2]);
        lm.acquire(TxnId(1), r(1), LockMode::X, AccessVariant::Wait, LONG).unwrap();
        let out = lm.acquire(TxnId(2), r(1), LockMode::S, AccessVariant::ReadThrough, LONG).unwrap();
        assert_eq!(out, AcquireOutcome::DirtyGranted { writer: Some(TxnId(1)) });
        assert_eq!(lm.holders(r(1)), vec![(TxnId(1), LockMode::X)]);
        assert!(lm.waiters(r(1)).is_empty());
    }

    #[test]
    fn variant_validation() {
        let lm = mgr();
        begin(&lm, &[1]);
        for v in [AccessVariant::ReadPast, AccessVariant::ReadThrough] {
            assert!(matches!(lm.acquire(TxnId(1), r(1), LockMode::X, v, LONG), Err(Error::Usage(_))));
        }
        assert!(matches!(lm.acquire(TxnId(1), r(1), LockMode::S, AccessVariant::Notify, LONG), Err(Error::Usage(_))));
        assert!(matches!(
            lm.acquire(TxnId(9), r(1), LockMode::S, AccessVariant::Wait, LONG),
            Err(Error::StaleTransaction(_))
        ));
    }

    /// Hand-written truth table: (holder, request, variant) -> outcome when
    /// the request cannot wait (zero timeout for WAIT).
    #[test]
    fn grant_matrix_matches_truth_table() {
        use AccessVariant::*;
        use LockMode::*;
        let table: &[(LockMode, LockMode, AccessVariant, Option<AcquireOutcome>)] = &[
            (S, S, Wait, Some(AcquireOutcome::Granted)),
            (S, X, Wait, Some(AcquireOutcome::TimedOut)),
            (X, S, Wait, Some(AcquireOutcome::TimedOut)),
            (X, X, Wait, Some(AcquireOutcome::TimedOut)),
            (S, S, ReadPast, Some(AcquireOutcome::Granted)),
            (S, X, ReadPast, None),
            (X, S, ReadPast, Some(AcquireOutcome::Skipped)),
            (X, X, ReadPast, None),
            (S, S, ReadThrough, Some(AcquireOutcome::DirtyGranted { writer: None })),
            (S, X, ReadThrough, None),
            (X, S, ReadThrough, Some(AcquireOutcome::DirtyGranted { writer: Some(TxnId(1)) })),
            (X, X, ReadThrough, None),
        ];
        for (held, req, variant, expected) in table {
            let lm = mgr();
            begin(&lm, &[1, 2]);
            lm.acquire(TxnId(1), r(1), *held, Wait, LONG).unwrap();
            let got = lm.acquire(TxnId(2), r(1), *req, *variant, Duration::ZERO);
            match expected {
                Some(o) => assert_eq!(got.unwrap(), *o, "{held:?} {req:?} {variant:?}"),
                None => assert!(matches!(got, Err(Error::Usage(_))), "{held:?} {req:?} {variant:?}"),
            }
            assert!(lm.waiters(r(1)).is_empty());
            lm.audit().unwrap();
        }
    }

    #[test]
    fn release_grants_waiter() {
        let lm = mgr();
        begin(&lm, &[1, 2]);
        lm.acquire(TxnId(1), r(1), LockMode::X, AccessVariant::Wait, LONG).unwrap();
        let lm2 = lm.clone();
        let h = thread::spawn(move || lm2.acquire(TxnId(2), r(1), LockMode::S, AccessVariant::Wait, LONG).unwrap());
        while lm.waiters(r(1)).is_empty() {
            thread::yield_now();
        }
        lm.release_all(TxnId(1));
        assert_eq!(h.join().unwrap(), AcquireOutcome::Granted);
        assert_eq!(lm.holders(r(1)), vec![(TxnId(2), LockMode::S)]);
    }

    #[test]
    fn release_of_nothing_is_a_no_op() {
        let lm = mgr();
        lm.release_all(TxnId(42));
        lm.release_all(TxnId(42));
        assert_eq!(lm.dump(), "");
    }

    #[test]
    fn fifo_batch_grants_compatible_prefix() {
        let lm = mgr();
        begin(&lm, &[1, 2, 3, 4]);
        lm.acquire(TxnId(1), r(1), LockMode::X, AccessVariant::Wait, LONG).unwrap();
        let mut handles = Vec::new();
        for (id, mode) in [(2, LockMode::S), (3, LockMode::S), (4, LockMode::X)] {
            let lm2 = lm.clone();
            handles.push(thread::spawn(move || lm2.acquire(TxnId(id), r(1), mode, AccessVariant::Wait, LONG).unwrap()));
            let want = handles.len();
            while lm.waiters(r(1)).len() < want {
                thread::yield_now();
            }
        }
        lm.release_all(TxnId(1));
        let mut holders = lm.holders(r(1));
        holders.sort();
        assert_eq!(holders, vec![(TxnId(2), LockMode::S), (TxnId(3), LockMode::S)]);
        assert_eq!(lm.waiters(r(1)), vec![(TxnId(4), LockMode::X)]);
        lm.audit().unwrap();
        lm.release_all(TxnId(2));
        lm.release_all(TxnId(3));
        for h in handles {
            assert_eq!(h.join().unwrap(), AcquireOutcome::Granted);
        }
        assert_eq!(lm.holders(r(1)), vec![(TxnId(4), LockMode::X)]);
    }

    #[test]
    fn upgrade_when_sole_holder() {
        let lm = mgr();
        begin(&lm, &[1]);
        lm.acquire(TxnId(1), r(1), LockMode::S, AccessVariant::Wait, LONG).unwrap();
        assert_eq!(
            lm.acquire(TxnId(1), r(1), LockMode::X, AccessVariant::Wait, Duration::ZERO).unwrap(),
            AcquireOutcome::Granted
        );
        assert_eq!(lm.holders(r(1)), vec![(TxnId(1), LockMode::X)]);
    }

    #[test]
    fn constructed_deadlock_times_out() {
        let lm = mgr();
        begin(&lm, &[1, 2]);
        lm.acquire(TxnId(1), r(1), LockMode::X, AccessVariant::Wait, LONG).unwrap();
        lm.acquire(TxnId(2), r(2), LockMode::X, AccessVariant::Wait, LONG).unwrap();
        let timeout = Duration::from_millis(100);
        let start = std::time::Instant::now();
        let a = {
            let lm = lm.clone();
            thread::spawn(move || lm.acquire(TxnId(1), r(2), LockMode::X, AccessVariant::Wait, timeout).unwrap())
        };
        let b = {
            let lm = lm.clone();
            thread::spawn(move || lm.acquire(TxnId(2), r(1), LockMode::X, AccessVariant::Wait, timeout).unwrap())
        };
        let (a, b) = (a.join().unwrap(), b.join().unwrap());
        assert!(start.elapsed() < 2 * timeout + Duration::from_millis(100));
        assert!(a == AcquireOutcome::TimedOut || b == AcquireOutcome::TimedOut);
        assert!(lm.abort_required(TxnId(1)) || lm.abort_required(TxnId(2)));
    }

    #[test]
    fn timeout_victims_with_deterministic_clock() {
        let clock = ManualClock::new();
        let lm = Arc::new(LockManager::new(clock.clone()));
        assert!(lm.detect_timeout_victims().is_empty());
        begin(&lm, &[1, 2, 3]);
        lm.acquire(TxnId(1), r(1), LockMode::X, AccessVariant::Wait, LONG).unwrap();
        let w2 = {
            let lm = lm.clone();
            thread::spawn(move || {
                lm.acquire(TxnId(2), r(1), LockMode::X, AccessVariant::Wait, Duration::from_millis(100)).unwrap()
            })
        };
        while lm.waiters(r(1)).is_empty() {
            thread::yield_now();
        }
        // granted just before its deadline: not a victim
        clock.advance(Duration::from_millis(99));
        lm.release_all(TxnId(1));
        assert_eq!(w2.join().unwrap(), AcquireOutcome::Granted);
        clock.advance(Duration::from_millis(10));
        assert!(lm.detect_timeout_victims().is_empty());

        let w3 = {
            let lm = lm.clone();
            thread::spawn(move || {
                lm.acquire(TxnId(3), r(1), LockMode::S, AccessVariant::Wait, Duration::from_millis(100)).unwrap()
            })
        };
        while lm.waiters(r(1)).is_empty() {
            thread::yield_now();
        }
        clock.advance(Duration::from_millis(100));
        assert_eq!(lm.detect_timeout_victims(), vec![TxnId(3)]);
        assert_eq!(w3.join().unwrap(), AcquireOutcome::TimedOut);
        assert!(lm.abort_required(TxnId(3)));
        assert!(lm.waiters(r(1)).is_empty());
    }

    #[test]
    fn subscription_latches_signals() {
        let lm = mgr();
        let sub = lm.subscribe(7, QueueId(1));
        assert_eq!(sub.try_recv(), None);
        lm.notify(QueueId(1), NotifyReason::NonEmpty);
        lm.notify(QueueId(2), NotifyReason::NonEmpty);
        assert_eq!(sub.wait(Duration::from_millis(1)), Some(NotifyReason::NonEmpty));
        assert_eq!(sub.wait(Duration::from_millis(1)), None);
        assert_eq!(lm.subscriber_count(QueueId(1)), 1);
        drop(sub);
        assert_eq!(lm.subscriber_count(QueueId(1)), 0);
    }

    #[test]
    fn dump_is_sorted_and_stable() {
        let lm = mgr();
        begin(&lm, &[1, 2]);
        lm.acquire(TxnId(2), ResourceId::catalog(QueueId(1)), LockMode::S, AccessVariant::Wait, LONG).unwrap();
        lm.acquire(TxnId(1), r(3), LockMode::X, AccessVariant::Wait, LONG).unwrap();
        lm.acquire(TxnId(1), ResourceId::queue_head(QueueId(1)), LockMode::X, AccessVariant::Wait, LONG).unwrap();
        assert_eq!(
            lm.dump(),
            "head(q1) holders=[t1:X] waiters=[]\nrecord(q1,m3) holders=[t1:X] waiters=[]\ncatalog(q1) holders=[t2:S] waiters=[]\n"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use std::collections::HashMap;

        #[derive(Debug, Clone)]
        enum Op {
            Acquire { txn: u64, res: u64, x: bool, variant: AccessVariant },
            Finish { txn: u64 },
        }

        fn op() -> impl Strategy<Value = Op> {
            let variant =
                prop_oneof![Just(AccessVariant::Wait), Just(AccessVariant::ReadPast), Just(AccessVariant::ReadThrough)];
            prop_oneof![
                6 => (1..5u64, 1..4u64, any::<bool>(), variant).prop_map(|(txn, res, x, variant)| {
                    let x = x && variant == AccessVariant::Wait;
                    Op::Acquire { txn, res, x, variant }
                }),
                1 => (1..5u64).prop_map(|txn| Op::Finish { txn }),
            ]
        }

        proptest! {
            #[test]
            fn holders_stay_compatible(ops in prop::collection::vec(op(), 1..120)) {
                let lm = mgr();
                begin(&lm, &[1, 2, 3, 4]);
                // resource -> txn -> strongest mode held
                let mut model: HashMap<u64, HashMap<u64, LockMode>> = HashMap::new();
                for op in ops {
                    match op {
                        Op::Acquire { txn, res, x, variant } => {
                            let mode = if x { LockMode::X } else { LockMode::S };
                            let waits = lm.stats().waits;
                            let got = lm.acquire(TxnId(txn), r(res), mode, variant, Duration::ZERO).unwrap();
                            prop_assert_eq!(lm.stats().waits, waits);
                            let holders = model.entry(res).or_default();
                            let writer = holders.iter().find(|(_, m)| **m == LockMode::X).map(|(t, _)| TxnId(*t));
                            let own = holders.get(&txn).copied();
                            let others_ok = holders.iter().filter(|(t, _)| **t != txn).all(|(_, m)| m.compatible(mode));
                            let want = match variant {
                                AccessVariant::ReadThrough => AcquireOutcome::DirtyGranted { writer },
                                _ if own == Some(LockMode::X) || own == Some(mode) || others_ok => AcquireOutcome::Granted,
                                AccessVariant::ReadPast => AcquireOutcome::Skipped,
                                _ => AcquireOutcome::TimedOut,
                            };
                            prop_assert_eq!(got, want);
                            if want == AcquireOutcome::Granted && own != Some(LockMode::X) {
                                holders.insert(txn, mode);
                            }
                        }
                        Op::Finish { txn } => {
                            lm.release_all(TxnId(txn));
                            lm.begin(TxnId(txn));
                            for holders in model.values_mut() {
                                holders.remove(&txn);
                            }
                        }
                    }
                    lm.audit().map_err(TestCaseError::fail)?;
                    for (res, holders) in &model {
                        let mut want: Vec<_> = holders.iter().map(|(t, m)| (TxnId(*t), *m)).collect();
                        let mut got = lm.holders(r(*res));
                        want.sort();
                        got.sort();
                        prop_assert_eq!(got, want);
                    }
                }
            }
        }
    }
}
