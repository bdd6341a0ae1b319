//! Server pools: worker threads dedicated to one queue, sized between a
//! minimum and a maximum by demand, with a failure window that declares the
//! queue broken.

mod scale;
mod work;

pub use scale::{Policy, ScaleInput, ScalingDecision, scale_tick, window_index};
pub use work::{Job, WorkQueue};

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::panic::{AssertUnwindSafe, catch_unwind};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineInner};
use crate::error::{Error, Result};
use crate::queue::Message;
use crate::txn::Txn;
use crate::types::{IsolationMode, QueueId, QueueState};

/// How long STOP waits for busy workers to finish.
pub const DRAIN_DEADLINE: Duration = Duration::from_secs(10);
/// How long an idle worker sleeps on the queue's notify signal before it
/// re-checks its pool.
const IDLE_SLICE: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct PoolId(pub u64);

impl fmt::Display for PoolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pool{}", self.0)
    }
}

/// Worker body: runs inside the transaction that dequeued `message`.
/// `Ok` commits that transaction; `Err` or a panic aborts it and counts as
/// a server failure.
pub type WorkerHandler = Arc<dyn Fn(&mut Txn, &Message) -> Result<(), String> + Send + Sync>;

#[derive(Clone)]
pub struct PoolConfig {
    pub queue: String,
    pub min_servers: u32,
    pub max_servers: u32,
    pub policy: Policy,
    pub failure_limit: u32,
    pub failure_window: Duration,
    pub idle_shrink_after: Duration,
    pub isolation: IsolationMode,
    pub handler: WorkerHandler,
}

impl fmt::Debug for PoolConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PoolConfig")
            .field("queue", &self.queue)
            .field("min_servers", &self.min_servers)
            .field("max_servers", &self.max_servers)
            .field("policy", &self.policy)
            .field("failure_limit", &self.failure_limit)
            .field("failure_window", &self.failure_window)
            .field("idle_shrink_after", &self.idle_shrink_after)
            .field("isolation", &self.isolation)
            .finish()
    }
}

impl PoolConfig {
    pub fn new(
        queue: impl Into<String>,
        handler: impl Fn(&mut Txn, &Message) -> Result<(), String> + Send + Sync + 'static,
    ) -> Self {
        PoolConfig {
            queue: queue.into(),
            min_servers: 1,
            max_servers: 4,
            policy: Policy::Event,
            failure_limit: 3,
            failure_window: Duration::from_secs(10),
            idle_shrink_after: Duration::from_secs(5),
            isolation: IsolationMode::ReadPastDequeue,
            handler: Arc::new(handler),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_servers > self.max_servers {
            return Err(Error::usage("min_servers exceeds max_servers"));
        }
        if self.max_servers < 1 {
            return Err(Error::usage("max_servers must be at least 1"));
        }
        if self.failure_limit < 1 {
            return Err(Error::usage("failure_limit must be at least 1"));
        }
        if self.failure_window.is_zero() {
            return Err(Error::usage("failure_window must be positive"));
        }
        match self.policy {
            Policy::Batch { threshold } if threshold < 1 => Err(Error::usage("batch threshold must be at least 1")),
            Policy::Periodic { interval } if interval.is_zero() => {
                Err(Error::usage("periodic interval must be positive"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PoolState {
    Running,
    Stopped,
    Broken,
}

impl fmt::Display for PoolState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolState::Running => "RUNNING",
            PoolState::Stopped => "STOPPED",
            PoolState::Broken => "BROKEN",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureOutcome {
    Replaced,
    Broken,
}

#[derive(Clone)]
pub enum PoolControl {
    Start,
    Stop,
    Redefine(PoolConfig),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PoolStatus {
    pub pool: PoolId,
    pub queue: String,
    pub state: PoolState,
    pub current_servers: u32,
    pub busy_servers: u32,
    pub min_servers: u32,
    pub max_servers: u32,
    pub policy: Policy,
    /// Failure times (milliseconds on the engine clock) inside the window.
    pub recent_failures: Vec<u64>,
    pub dispatched_count: u64,
    pub failed_count: u64,
    pub replaced_count: u64,
}

struct Worker {
    busy: bool,
    idle_since: Duration,
    retire: bool,
}

struct PoolInner {
    config: PoolConfig,
    state: PoolState,
    workers: BTreeMap<u64, Worker>,
    failures: VecDeque<Duration>,
    dispatched: u64,
    failed: u64,
    replaced: u64,
    next_worker: u64,
    t0: Duration,
    window_open: bool,
    last_window: Option<u64>,
}

impl PoolInner {
    fn active_workers(&self) -> u32 {
        self.workers.values().filter(|w| !w.retire).count() as u32
    }

    fn retire_all(&mut self) {
        for w in self.workers.values_mut() {
            w.retire = true;
        }
    }

    fn update_window(&mut self, now: Duration) {
        if let Policy::Periodic { interval } = self.config.policy {
            let idx = window_index(now, self.t0, interval);
            if now >= self.t0 && self.last_window.is_none_or(|l| idx > l) {
                self.last_window = Some(idx);
                self.window_open = true;
            }
        }
    }

    fn may_dispatch(&self) -> bool {
        match self.config.policy {
            Policy::Periodic { .. } => self.window_open,
            _ => true,
        }
    }
}

pub(crate) struct Pool {
    id: PoolId,
    queue: QueueId,
    inner: Mutex<PoolInner>,
    cv: Condvar,
}

impl Pool {
    fn status(&self) -> PoolStatus {
        let p = self.inner.lock();
        PoolStatus {
            pool: self.id,
            queue: p.config.queue.clone(),
            state: p.state,
            current_servers: p.workers.len() as u32,
            busy_servers: p.workers.values().filter(|w| w.busy).count() as u32,
            min_servers: p.config.min_servers,
            max_servers: p.config.max_servers,
            policy: p.config.policy,
            recent_failures: p.failures.iter().map(|t| t.as_millis() as u64).collect(),
            dispatched_count: p.dispatched,
            failed_count: p.failed,
            replaced_count: p.replaced,
        }
    }

    fn spawn(self: &Arc<Self>, p: &mut PoolInner, engine: &Engine, n: u32) {
        let now = engine.clock().now();
        for _ in 0..n {
            let id = p.next_worker;
            p.next_worker += 1;
            p.workers.insert(id, Worker { busy: false, idle_since: now, retire: false });
            let pool = self.clone();
            let weak = engine.downgrade();
            let spawned = thread::Builder::new()
                .name(format!("qdb-{}-w{id}", self.id))
                .spawn(move || worker_loop(pool, weak, id));
            if let Err(e) = spawned {
                log::error!("cannot start pool worker: {e}");
                p.workers.remove(&id);
            }
        }
    }

    /// One scaling evaluation; `depth` is read before the pool lock.
    fn tick(self: &Arc<Self>, engine: &Engine, depth: u64) -> ScalingDecision {
        let now = engine.clock().now();
        let mut p = self.inner.lock();
        if p.state != PoolState::Running {
            return ScalingDecision::None;
        }
        p.update_window(now);
        let idle_after = p.config.idle_shrink_after;
        let input = ScaleInput {
            depth,
            busy: p.workers.values().filter(|w| w.busy && !w.retire).count() as u32,
            current: p.active_workers(),
            idle_expired: p
                .workers
                .values()
                .filter(|w| !w.retire && !w.busy && now.saturating_sub(w.idle_since) >= idle_after)
                .count() as u32,
            min: p.config.min_servers,
            max: p.config.max_servers,
            policy: p.config.policy,
        };
        let decision = scale_tick(input);
        match decision {
            ScalingDecision::Grow(k) => self.spawn(&mut p, engine, k),
            ScalingDecision::Shrink(k) => {
                // longest-idle first, busy servers last
                let mut order: Vec<(bool, Duration, u64)> =
                    p.workers.iter().filter(|(_, w)| !w.retire).map(|(id, w)| (w.busy, w.idle_since, *id)).collect();
                order.sort();
                for (_, _, id) in order.into_iter().take(k as usize) {
                    p.workers.get_mut(&id).unwrap().retire = true;
                }
            }
            ScalingDecision::None => {}
        }
        decision
    }
}

#[derive(Default)]
pub(crate) struct PoolManager {
    pools: Mutex<BTreeMap<QueueId, Arc<Pool>>>,
    next: AtomicU64,
}

fn depth_of(engine: &Engine, queue: QueueId) -> u64 {
    let store = engine.inner.store.lock();
    store.queues.get(&queue).map(|q| q.visible).unwrap_or(0)
}

impl PoolManager {
    fn get(&self, engine_queue: QueueId) -> Option<Arc<Pool>> {
        self.pools.lock().get(&engine_queue).cloned()
    }

    fn by_name(&self, engine: &Engine, queue: &str) -> Result<Arc<Pool>> {
        let id = engine.queue_id(queue)?;
        self.get(id).ok_or_else(|| Error::NotFound(format!("no pool attached to queue {queue}")))
    }

    pub fn attach(&self, engine: &Engine, config: PoolConfig) -> Result<PoolId> {
        self.restore(engine, config, PoolState::Running)
    }

    /// Attaches a pool in a given state, as remembered from an earlier run.
    /// A broken pool also marks its queue broken; only a running pool
    /// starts servers.
    pub fn restore(&self, engine: &Engine, config: PoolConfig, state: PoolState) -> Result<PoolId> {
        config.validate()?;
        let desc = engine.queue(&config.queue)?;
        if desc.state != QueueState::Active {
            return Err(Error::Unavailable(format!("queue {} is {}", desc.name, desc.state)));
        }
        let mut pools = self.pools.lock();
        if pools.contains_key(&desc.id) {
            return Err(Error::AlreadyExists(format!("pool on queue {}", desc.name)));
        }
        let id = PoolId(self.next.fetch_add(1, Ordering::SeqCst) + 1);
        let now = engine.clock().now();
        let min = config.min_servers;
        let pool = Arc::new(Pool {
            id,
            queue: desc.id,
            inner: Mutex::new(PoolInner {
                config,
                state,
                workers: BTreeMap::new(),
                failures: VecDeque::new(),
                dispatched: 0,
                failed: 0,
                replaced: 0,
                next_worker: 1,
                t0: now,
                window_open: false,
                last_window: None,
            }),
            cv: Condvar::new(),
        });
        if state == PoolState::Running {
            let mut p = pool.inner.lock();
            p.update_window(now);
            pool.spawn(&mut p, engine, min);
        }
        if state == PoolState::Broken {
            engine.set_queue_state_by_id(desc.id, QueueState::Broken);
        }
        pools.insert(desc.id, pool);
        Ok(id)
    }

    pub fn status(&self, queue: &str) -> Result<PoolStatus> {
        let pools = self.pools.lock();
        pools
            .values()
            .find(|p| p.inner.lock().config.queue == queue)
            .map(|p| p.status())
            .ok_or_else(|| Error::NotFound(format!("no pool attached to queue {queue}")))
    }

    pub fn statuses(&self) -> Vec<PoolStatus> {
        let pools: Vec<_> = self.pools.lock().values().cloned().collect();
        let mut v: Vec<_> = pools.iter().map(|p| p.status()).collect();
        v.sort_by(|a, b| a.queue.cmp(&b.queue));
        v
    }

    pub fn control(&self, engine: &Engine, queue: &str, action: PoolControl) -> Result<PoolStatus> {
        let pool = self.by_name(engine, queue)?;
        match action {
            PoolControl::Stop => {
                {
                    let mut p = pool.inner.lock();
                    p.state = PoolState::Stopped;
                    p.retire_all();
                }
                wait_drained(&pool, DRAIN_DEADLINE);
            }
            PoolControl::Start => {
                let now = engine.clock().now();
                let mut p = pool.inner.lock();
                if p.state != PoolState::Running {
                    p.failures.clear();
                    p.state = PoolState::Running;
                    p.t0 = now;
                    p.last_window = None;
                    p.window_open = false;
                    p.update_window(now);
                    engine.set_queue_state_by_id(pool.queue, QueueState::Active);
                    let have = p.active_workers();
                    let min = p.config.min_servers;
                    if have < min {
                        pool.spawn(&mut p, engine, min - have);
                    }
                }
            }
            PoolControl::Redefine(config) => {
                config.validate()?;
                if config.queue != queue {
                    return Err(Error::usage("a pool cannot be moved to another queue"));
                }
                pool.inner.lock().config = config;
                let depth = depth_of(engine, pool.queue);
                pool.tick(engine, depth);
            }
        }
        Ok(pool.status())
    }

    pub fn report_failure(&self, engine: &Engine, queue: &str, at: Duration) -> Result<FailureOutcome> {
        let pool = self.by_name(engine, queue)?;
        Ok(record_failure(&pool, engine, at))
    }

    pub fn on_commit(&self, engine: &Engine, queues: &[QueueId]) {
        for q in queues {
            if let Some(pool) = self.get(*q) {
                let depth = depth_of(engine, *q);
                pool.tick(engine, depth);
            }
        }
    }

    pub fn tick_all(&self, engine: &Engine) {
        let pools: Vec<_> = self.pools.lock().values().cloned().collect();
        for pool in pools {
            let depth = depth_of(engine, pool.queue);
            pool.tick(engine, depth);
        }
    }

    pub fn queue_destroyed(&self, queue: QueueId) {
        if let Some(pool) = self.pools.lock().remove(&queue) {
            let mut p = pool.inner.lock();
            p.state = PoolState::Stopped;
            p.retire_all();
        }
    }

    pub fn stop_all(&self, engine: &Engine) {
        let names: Vec<String> = self.pools.lock().values().map(|p| p.inner.lock().config.queue.clone()).collect();
        for name in names {
            let _ = self.control(engine, &name, PoolControl::Stop);
        }
    }
}

fn wait_drained(pool: &Pool, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    let mut p = pool.inner.lock();
    while !p.workers.is_empty() {
        if pool.cv.wait_until(&mut p, deadline).timed_out() {
            return p.workers.is_empty();
        }
    }
    true
}

/// Sliding-window failure accounting: `failure_limit` failures within
/// `failure_window` of each other break the pool and its queue.
fn record_failure(pool: &Pool, engine: &Engine, at: Duration) -> FailureOutcome {
    let mut p = pool.inner.lock();
    p.failed += 1;
    if p.state != PoolState::Running {
        return if p.state == PoolState::Broken { FailureOutcome::Broken } else { FailureOutcome::Replaced };
    }
    let window = p.config.failure_window;
    p.failures.push_back(at);
    p.failures.retain(|t| *t + window > at);
    if p.failures.len() as u32 >= p.config.failure_limit {
        p.state = PoolState::Broken;
        p.retire_all();
        log::warn!("pool on {} broken after {} failures", p.config.queue, p.failures.len());
        engine.set_queue_state_by_id(pool.queue, QueueState::Broken);
        FailureOutcome::Broken
    } else {
        p.replaced += 1;
        FailureOutcome::Replaced
    }
}

enum Step {
    Exit,
    Idle,
    Work,
}

fn worker_loop(pool: Arc<Pool>, weak: Weak<EngineInner>, id: u64) {
    let mut sub = None;
    loop {
        let step = {
            let mut p = pool.inner.lock();
            match p.workers.get(&id) {
                None => Step::Exit,
                Some(w) if w.retire || p.state != PoolState::Running => Step::Exit,
                Some(_) => {
                    if let Some(engine) = Engine::upgrade(&weak) {
                        p.update_window(engine.clock().now());
                    }
                    if p.may_dispatch() { Step::Work } else { Step::Idle }
                }
            }
        };
        match step {
            Step::Exit => break,
            Step::Idle => {
                thread::sleep(IDLE_SLICE);
                continue;
            }
            Step::Work => {}
        }
        let Some(engine) = Engine::upgrade(&weak) else { break };
        let (queue, isolation, handler) = {
            let p = pool.inner.lock();
            (p.config.queue.clone(), p.config.isolation, p.config.handler.clone())
        };
        if sub.is_none() {
            match engine.subscribe(id, &queue) {
                Ok(s) => sub = Some(s),
                Err(_) => break,
            }
        }
        let mut txn = match engine.begin() {
            Ok(t) => t,
            Err(_) => {
                thread::sleep(IDLE_SLICE);
                continue;
            }
        };
        let msg = match txn.dequeue(&queue, isolation, Duration::ZERO) {
            Ok(Some(m)) => m,
            Ok(None) => {
                let _ = txn.abort();
                {
                    let mut p = pool.inner.lock();
                    p.window_open = false;
                }
                drop(engine);
                if let Some(s) = &sub {
                    let _ = s.wait(IDLE_SLICE);
                }
                continue;
            }
            Err(Error::NotFound(_)) => break,
            Err(_) => {
                let _ = txn.abort();
                drop(engine);
                thread::sleep(IDLE_SLICE);
                continue;
            }
        };
        {
            let mut p = pool.inner.lock();
            let dispatch = p.state == PoolState::Running && p.workers.get(&id).is_some_and(|w| !w.retire);
            if !dispatch {
                drop(p);
                let _ = txn.abort();
                continue;
            }
            p.dispatched += 1;
            if let Some(w) = p.workers.get_mut(&id) {
                w.busy = true;
            }
        }
        let res = catch_unwind(AssertUnwindSafe(|| handler(&mut txn, &msg)))
            .unwrap_or_else(|_| Err("handler panicked".into()));
        let ok = match res {
            Ok(()) => match txn.commit() {
                Ok(()) => true,
                Err(e) => {
                    log::debug!("pool worker commit failed: {e}");
                    true
                }
            },
            Err(e) => {
                log::debug!("pool handler failed on {}: {e}", msg.id);
                let _ = txn.abort();
                false
            }
        };
        let now = engine.clock().now();
        {
            let mut p = pool.inner.lock();
            if let Some(w) = p.workers.get_mut(&id) {
                w.busy = false;
                w.idle_since = now;
            }
        }
        if !ok {
            record_failure(&pool, &engine, now);
        }
    }
    let mut p = pool.inner.lock();
    p.workers.remove(&id);
    pool.cv.notify_all();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let ok = PoolConfig::new("q", |_, _| Ok(()));
        ok.validate().unwrap();
        let bad = PoolConfig { min_servers: 5, max_servers: 2, ..ok.clone() };
        assert!(matches!(bad.validate(), Err(Error::Usage(_))));
        let bad = PoolConfig { max_servers: 0, min_servers: 0, ..ok.clone() };
        assert!(bad.validate().is_err());
        let bad = PoolConfig { policy: Policy::Batch { threshold: 0 }, ..ok.clone() };
        assert!(bad.validate().is_err());
        let bad = PoolConfig { failure_window: Duration::ZERO, ..ok };
        assert!(bad.validate().is_err());
    }
}
