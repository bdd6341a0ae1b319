//! Procedures attached to queue events.
//!
//! A trigger fires on enqueue or dequeue, either at the time of the
//! operation (immediate) or after the firing transaction commits
//! (deferred), and runs either inside the firing transaction or in a new
//! top-level transaction of its own. Top-level firings run on the engine's
//! trigger work queue.

use std::fmt;
use std::panic::{AssertUnwindSafe, catch_unwind};
use std::sync::Arc;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};

use parking_lot::{Condvar, Mutex};
use serde::Serialize;

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::txn::{MAX_TRIGGER_DEPTH, Txn};
use crate::types::{MessageId, QueueId, TxnId};

/// Consecutive top-level failures after which a trigger is suspended.
pub const SUSPEND_AFTER: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct TriggerId(pub u64);

impl fmt::Display for TriggerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "trg{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TriggerEvent {
    OnEnqueue,
    OnDequeue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TriggerTiming {
    Immediate,
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TriggerScope {
    SameTxn,
    NewTopLevel,
}

#[derive(Clone)]
pub struct TriggerContext {
    pub engine: Engine,
    pub trigger: TriggerId,
    pub queue: String,
    pub queue_id: QueueId,
    pub message: MessageId,
    pub event: TriggerEvent,
    /// The transaction whose operation fired the trigger.
    pub firing_txn: TxnId,
}

impl fmt::Debug for TriggerContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TriggerContext")
            .field("trigger", &self.trigger)
            .field("queue", &self.queue)
            .field("message", &self.message)
            .field("event", &self.event)
            .field("firing_txn", &self.firing_txn)
            .finish()
    }
}

/// Trigger body. `txn` is the firing transaction for same-transaction
/// triggers and a fresh transaction otherwise. An `Err` aborts `txn`.
pub type TriggerHandler = Arc<dyn Fn(&TriggerContext, &mut Txn) -> Result<(), String> + Send + Sync>;

#[derive(Clone)]
pub struct TriggerSpec {
    pub queue: String,
    pub event: TriggerEvent,
    pub timing: TriggerTiming,
    pub scope: TriggerScope,
    pub handler: TriggerHandler,
}

impl TriggerSpec {
    pub fn new(
        queue: impl Into<String>,
        event: TriggerEvent,
        timing: TriggerTiming,
        scope: TriggerScope,
        handler: impl Fn(&TriggerContext, &mut Txn) -> Result<(), String> + Send + Sync + 'static,
    ) -> Self {
        TriggerSpec { queue: queue.into(), event, timing, scope, handler: Arc::new(handler) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TriggerStats {
    pub id: TriggerId,
    pub queue: String,
    pub event: TriggerEvent,
    pub timing: TriggerTiming,
    pub scope: TriggerScope,
    pub fired: u64,
    pub failures: u64,
    pub suspended: bool,
}

pub(crate) struct Entry {
    id: TriggerId,
    queue: QueueId,
    queue_name: String,
    event: TriggerEvent,
    timing: TriggerTiming,
    scope: TriggerScope,
    handler: TriggerHandler,
    /// (active, firings in progress)
    gate: Mutex<(bool, usize)>,
    cv: Condvar,
    fired: AtomicU64,
    failures: AtomicU64,
    consecutive: AtomicU32,
    suspended: AtomicBool,
}

impl Entry {
    fn enter(&self) -> bool {
        let mut g = self.gate.lock();
        if !g.0 || self.suspended.load(Ordering::SeqCst) {
            return false;
        }
        g.1 += 1;
        true
    }

    fn exit(&self) {
        let mut g = self.gate.lock();
        g.1 -= 1;
        self.cv.notify_all();
    }

    fn deactivate(&self, wait: bool) {
        let mut g = self.gate.lock();
        g.0 = false;
        while wait && g.1 > 0 {
            self.cv.wait(&mut g);
        }
    }

    fn record(&self, ok: bool) {
        self.fired.fetch_add(1, Ordering::SeqCst);
        if ok {
            self.consecutive.store(0, Ordering::SeqCst);
            return;
        }
        self.failures.fetch_add(1, Ordering::SeqCst);
        let n = self.consecutive.fetch_add(1, Ordering::SeqCst) + 1;
        if self.scope == TriggerScope::NewTopLevel && n >= SUSPEND_AFTER {
            log::warn!("trigger {} suspended after {n} consecutive failures", self.id);
            self.suspended.store(true, Ordering::SeqCst);
        }
    }

    fn stats(&self) -> TriggerStats {
        TriggerStats {
            id: self.id,
            queue: self.queue_name.clone(),
            event: self.event,
            timing: self.timing,
            scope: self.scope,
            fired: self.fired.load(Ordering::SeqCst),
            failures: self.failures.load(Ordering::SeqCst),
            suspended: self.suspended.load(Ordering::SeqCst),
        }
    }
}

/// A top-level firing waiting to run.
pub(crate) struct Firing {
    entry: Arc<Entry>,
    ctx: TriggerContext,
    depth: u32,
}

#[derive(Default)]
pub(crate) struct TriggerRegistry {
    entries: Mutex<Vec<Arc<Entry>>>,
    next: AtomicU64,
}

impl TriggerRegistry {
    pub fn register(&self, queue: QueueId, spec: TriggerSpec) -> Result<TriggerId> {
        if spec.timing == TriggerTiming::Deferred && spec.scope == TriggerScope::SameTxn {
            return Err(Error::usage(
                "a deferred trigger cannot run in the firing transaction, which is already committing",
            ));
        }
        let id = TriggerId(self.next.fetch_add(1, Ordering::SeqCst) + 1);
        self.entries.lock().push(Arc::new(Entry {
            id,
            queue,
            queue_name: spec.queue,
            event: spec.event,
            timing: spec.timing,
            scope: spec.scope,
            handler: spec.handler,
            gate: Mutex::new((true, 0)),
            cv: Condvar::new(),
            fired: AtomicU64::new(0),
            failures: AtomicU64::new(0),
            consecutive: AtomicU32::new(0),
            suspended: AtomicBool::new(false),
        }));
        Ok(id)
    }

    /// Removes a trigger. Firings already running finish first; none start
    /// afterwards.
    pub fn unregister(&self, id: TriggerId) -> Result<()> {
        let entry = {
            let mut entries = self.entries.lock();
            let pos =
                entries.iter().position(|e| e.id == id).ok_or_else(|| Error::NotFound(format!("trigger {id}")))?;
            entries.remove(pos)
        };
        entry.deactivate(true);
        Ok(())
    }

    pub fn resume(&self, id: TriggerId) -> Result<()> {
        let entries = self.entries.lock();
        let e = entries.iter().find(|e| e.id == id).ok_or_else(|| Error::NotFound(format!("trigger {id}")))?;
        e.consecutive.store(0, Ordering::SeqCst);
        e.suspended.store(false, Ordering::SeqCst);
        Ok(())
    }

    pub fn remove_queue(&self, queue: QueueId) {
        let mut entries = self.entries.lock();
        entries.retain(|e| {
            if e.queue == queue {
                e.deactivate(false);
                false
            } else {
                true
            }
        });
    }

    pub fn stats(&self) -> Vec<TriggerStats> {
        self.entries.lock().iter().map(|e| e.stats()).collect()
    }

    fn matching(&self, queue: QueueId, event: TriggerEvent) -> Vec<Arc<Entry>> {
        self.entries.lock().iter().filter(|e| e.queue == queue && e.event == event).cloned().collect()
    }

    /// Fires the triggers matching an operation that `txn` just performed.
    /// Same-transaction handlers run here; an error from one is returned and
    /// the caller aborts `txn`.
    pub fn fire(
        &self,
        engine: &Engine,
        txn: &mut Txn,
        queue_id: QueueId,
        queue: &str,
        message: MessageId,
        event: TriggerEvent,
    ) -> Result<()> {
        let entries = self.matching(queue_id, event);
        if entries.is_empty() {
            return Ok(());
        }
        if txn.trigger_depth >= MAX_TRIGGER_DEPTH {
            return Err(Error::TriggerFailed {
                trigger: entries[0].id.0,
                reason: format!("trigger nesting deeper than {MAX_TRIGGER_DEPTH}"),
            });
        }
        let mut immediate = Vec::new();
        for entry in entries {
            let ctx = TriggerContext {
                engine: engine.clone(),
                trigger: entry.id,
                queue: queue.to_string(),
                queue_id,
                message,
                event,
                firing_txn: txn.id(),
            };
            match (entry.timing, entry.scope) {
                (TriggerTiming::Immediate, TriggerScope::SameTxn) => {
                    if !entry.enter() {
                        continue;
                    }
                    txn.trigger_depth += 1;
                    let res = catch_unwind(AssertUnwindSafe(|| (entry.handler)(&ctx, txn)))
                        .unwrap_or_else(|_| Err("handler panicked".into()));
                    txn.trigger_depth -= 1;
                    entry.record(res.is_ok());
                    entry.exit();
                    if let Err(reason) = res {
                        return Err(Error::TriggerFailed { trigger: entry.id.0, reason });
                    }
                }
                (TriggerTiming::Immediate, TriggerScope::NewTopLevel) => {
                    immediate.push(Firing { entry, ctx, depth: txn.trigger_depth + 1 });
                }
                (TriggerTiming::Deferred, _) => {
                    let depth = txn.trigger_depth + 1;
                    txn.defer(Firing { entry, ctx, depth });
                }
            }
        }
        if !immediate.is_empty() {
            self.dispatch(engine, immediate);
        }
        Ok(())
    }

    /// Runs top-level firings, in order, as one job on the work queue.
    pub fn dispatch(&self, engine: &Engine, firings: Vec<Firing>) {
        engine.inner.work.submit(Box::new(move || {
            for f in firings {
                run_top_level(f);
            }
        }));
    }
}

fn run_top_level(f: Firing) {
    if !f.entry.enter() {
        return;
    }
    let res = catch_unwind(AssertUnwindSafe(|| -> Result<(), String> {
        let mut txn = f.ctx.engine.begin().map_err(|e| e.to_string())?;
        txn.trigger_depth = f.depth;
        match (f.entry.handler)(&f.ctx, &mut txn) {
            Ok(()) => txn.commit().map_err(|e| e.to_string()),
            Err(e) => {
                let _ = txn.abort();
                Err(e)
            }
        }
    }))
    .unwrap_or_else(|_| Err("handler panicked".into()));
    if let Err(e) = &res {
        log::debug!("trigger {} failed: {e}", f.entry.id);
    }
    f.entry.record(res.is_ok());
    f.entry.exit();
}

/// Handlers the CLI and the broker config can attach by name.
pub mod builtin {
    use std::sync::Arc;
    use std::sync::atomic::{AtomicU64, Ordering};

    use super::TriggerHandler;

    /// Enqueues a copy of the firing message into `target` within the
    /// handler's transaction.
    pub fn copy_to_queue(target: impl Into<String>) -> TriggerHandler {
        let target = target.into();
        Arc::new(move |ctx, txn| {
            let entry = ctx
                .engine
                .poll_with(
                    &ctx.queue,
                    crate::queue::PollOptions {
                        filter: crate::queue::PollFilter::ById(ctx.message),
                        include_dirty: true,
                        include_payload: true,
                        unsafe_dirty_payload: true,
                    },
                )
                .map_err(|e| e.to_string())?;
            let (priority, payload) =
                entry.into_iter().next().map(|e| (e.priority, e.payload.unwrap_or_default())).unwrap_or_default();
            txn.enqueue(&target, priority, &payload).map(|_| ()).map_err(|e| e.to_string())
        })
    }

    pub fn counter(count: Arc<AtomicU64>) -> TriggerHandler {
        Arc::new(move |_, _| {
            count.fetch_add(1, Ordering::SeqCst);
            Ok(())
        })
    }
}
