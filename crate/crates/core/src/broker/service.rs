//! The operations behind both the broker and the embedded CLI: one
//! `Service` per engine, one `Session` per client connection.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineConfig};
use crate::error::{Error, Result};
use crate::pool::{PoolControl, PoolState, PoolStatus};
use crate::queue::{PollOptions, QueueStats};
use crate::storage::Storage;
use crate::txn::Txn;

use super::config::{BrokerConfig, PoolSpec};
use super::protocol::{PoolAction, Request, Response, WireMessage, WirePollEntry};

/// Pool definitions of a data directory, kept next to the log.
pub const POOLS_FILE: &str = "pools.json";
/// Transactions one session may hold open at once.
pub const MAX_SESSION_TXNS: usize = 64;
/// Longest blocking dequeue a client may ask for.
pub const MAX_WAIT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PoolRecord {
    spec: PoolSpec,
    state: PoolState,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueueReport {
    pub queue: QueueStats,
    pub pool: Option<PoolStatus>,
}

pub struct Service {
    engine: Engine,
    storage: Option<Arc<dyn Storage>>,
    pools: Mutex<BTreeMap<String, PoolRecord>>,
}

impl Service {
    /// Wraps an engine whose pool definitions are not persisted.
    pub fn new(engine: Engine) -> Arc<Service> {
        Arc::new(Service { engine, storage: None, pools: Mutex::new(BTreeMap::new()) })
    }

    /// Opens a data directory and re-attaches the pools defined in it.
    pub fn open_dir(dir: impl AsRef<Path>, config: EngineConfig) -> Result<Arc<Service>> {
        let engine = Engine::open_dir(dir.as_ref(), config)?;
        let storage: Arc<dyn Storage> = Arc::new(crate::storage::FileStorage::open(dir.as_ref())?);
        let records: BTreeMap<String, PoolRecord> = match storage.read(POOLS_FILE)? {
            Some(b) => serde_json::from_slice(&b).map_err(|e| Error::Corrupt(format!("{POOLS_FILE}: {e}")))?,
            None => BTreeMap::new(),
        };
        let svc = Service { engine, storage: Some(storage), pools: Mutex::new(BTreeMap::new()) };
        for (queue, rec) in records {
            if svc.engine.queue(&queue).is_err() {
                continue;
            }
            let config = rec.spec.to_config(&queue)?;
            svc.engine.inner.pools.restore(&svc.engine, config, rec.state)?;
            svc.pools.lock().insert(queue, rec);
        }
        Ok(Arc::new(svc))
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Creates the configured queues and pools that do not exist yet.
    /// Existing ones are left alone, so applying a config twice is a no-op.
    pub fn apply_config(&self, config: &BrokerConfig) -> Result<()> {
        for q in &config.queues {
            match self.engine.queue(&q.name) {
                Ok(d) => {
                    if d.durability != q.durability || d.ordering != q.ordering {
                        log::warn!("queue {} exists with different attributes; keeping them", q.name);
                    }
                }
                Err(Error::NotFound(_)) => {
                    self.engine.create_queue(&q.name, q.durability, q.ordering)?;
                }
                Err(e) => return Err(e),
            }
            if let Some(spec) = &q.pool
                && !self.pools.lock().contains_key(&q.name)
            {
                self.attach_pool(&q.name, spec.clone())?;
            }
        }
        Ok(())
    }

    fn persist(&self, pools: &BTreeMap<String, PoolRecord>) -> Result<()> {
        if let Some(s) = &self.storage {
            let bytes = serde_json::to_vec_pretty(pools).expect("pool records serialize");
            s.write_atomic(POOLS_FILE, &bytes)?;
        }
        Ok(())
    }

    /// Brings remembered pool states up to date with the live ones (a pool
    /// may have broken since the last control action) and saves them.
    pub fn sync_pools(&self) -> Result<()> {
        let mut pools = self.pools.lock();
        for st in self.engine.pool_statuses() {
            if let Some(rec) = pools.get_mut(&st.queue) {
                rec.state = st.state;
            }
        }
        self.persist(&pools)
    }

    pub fn attach_pool(&self, queue: &str, spec: PoolSpec) -> Result<PoolStatus> {
        let config = spec.to_config(queue)?;
        let mut pools = self.pools.lock();
        self.engine.attach_pool(config)?;
        pools.insert(queue.to_string(), PoolRecord { spec, state: PoolState::Running });
        self.persist(&pools)?;
        drop(pools);
        self.engine.pool_status(queue)
    }

    pub fn pool_control(&self, queue: &str, action: PoolAction, spec: &PoolSpec) -> Result<PoolStatus> {
        let mut pools = self.pools.lock();
        let control = match action {
            PoolAction::Status => {
                drop(pools);
                return self.engine.pool_status(queue);
            }
            PoolAction::Start => PoolControl::Start,
            PoolAction::Stop => PoolControl::Stop,
            PoolAction::Redefine => {
                let base = pools
                    .get(queue)
                    .map(|r| r.spec.clone())
                    .ok_or_else(|| Error::NotFound(format!("no pool attached to queue {queue}")))?;
                PoolControl::Redefine(base.merged(spec).to_config(queue)?)
            }
        };
        let status = self.engine.pool_control(queue, control)?;
        if let Some(rec) = pools.get_mut(queue) {
            if action == PoolAction::Redefine {
                rec.spec = rec.spec.merged(spec);
            }
            rec.state = status.state;
        }
        self.persist(&pools)?;
        Ok(status)
    }

    pub fn destroy_queue(&self, name: &str) -> Result<()> {
        self.engine.destroy_queue(name)?;
        let mut pools = self.pools.lock();
        if pools.remove(name).is_some() {
            self.persist(&pools)?;
        }
        Ok(())
    }

    pub fn queue_report(&self, name: &str) -> Result<QueueReport> {
        Ok(QueueReport { queue: self.engine.stats(name)?, pool: self.engine.pool_status(name).ok() })
    }

    /// Saves pool states, then stops the engine with a final checkpoint.
    pub fn shutdown(&self) -> Result<()> {
        self.sync_pools()?;
        self.engine.shutdown()
    }

    pub fn session(self: &Arc<Self>) -> Session {
        Session { service: self.clone(), txns: HashMap::new() }
    }
}

/// One client's view: the transactions it has open. Dropping a session
/// aborts them.
pub struct Session {
    service: Arc<Service>,
    txns: HashMap<u64, Txn>,
}

fn json<T: Serialize>(v: &T) -> Response {
    Response::Json(serde_json::to_string(v).expect("reply serializes"))
}

impl Session {
    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }

    pub fn open_txns(&self) -> usize {
        self.txns.len()
    }

    pub fn handle(&mut self, req: Request) -> Response {
        match self.exec(req) {
            Ok(r) => r,
            Err(e) => Response::from_error(&e),
        }
    }

    fn txn(&mut self, id: u64) -> Result<&mut Txn> {
        self.txns.get_mut(&id).ok_or(Error::StaleTransaction(crate::TxnId(id)))
    }

    /// Runs `f` in the session transaction `txn`, or in a fresh one that
    /// commits on success when `txn` is 0. A failed operation in a session
    /// transaction leaves it open unless the engine requires an abort.
    fn in_txn<T>(&mut self, txn: u64, f: impl FnOnce(&mut Txn) -> Result<T>) -> Result<T> {
        if txn == 0 {
            return self.service.engine.with_txn(f);
        }
        let t = self.txn(txn)?;
        let res = f(t);
        if let Err(Error::DeadlockTimeout(_) | Error::TriggerFailed { .. }) = &res {
            self.txns.remove(&txn);
        }
        res
    }

    fn exec(&mut self, req: Request) -> Result<Response> {
        let svc = self.service.clone();
        let engine = svc.engine();
        Ok(match req {
            Request::Begin => {
                if self.txns.len() >= MAX_SESSION_TXNS {
                    return Err(Error::usage(format!("at most {MAX_SESSION_TXNS} open transactions per session")));
                }
                let t = engine.begin()?;
                let id = t.id().0;
                self.txns.insert(id, t);
                Response::Txn(id)
            }
            Request::Commit { txn } => {
                let mut t = self.txns.remove(&txn).ok_or(Error::StaleTransaction(crate::TxnId(txn)))?;
                t.commit()?;
                Response::Done
            }
            Request::Abort { txn } => {
                let mut t = self.txns.remove(&txn).ok_or(Error::StaleTransaction(crate::TxnId(txn)))?;
                t.abort()?;
                Response::Done
            }
            Request::Enqueue { txn, queue, priority, payload } => {
                Response::Enqueued(self.in_txn(txn, |t| t.enqueue(&queue, priority, &payload))?)
            }
            Request::Dequeue { txn, queue, isolation, wait_ms } => {
                let wait = Duration::from_millis(wait_ms as u64).min(MAX_WAIT);
                let m = self.in_txn(txn, |t| t.dequeue(&queue, isolation, wait))?;
                Response::Dequeued(m.map(|m| WireMessage {
                    id: m.id,
                    priority: m.priority,
                    seq: m.seq,
                    redeliveries: m.redeliveries,
                    payload: m.payload,
                }))
            }
            Request::Poll { queue, include_dirty } => {
                let opts = PollOptions { include_dirty, include_payload: true, ..PollOptions::default() };
                let entries = engine.poll_with(&queue, opts)?;
                Response::Polled(
                    entries
                        .into_iter()
                        .map(|e| WirePollEntry {
                            id: e.message,
                            priority: e.priority,
                            visibility: e.visibility,
                            writer: e.writer,
                            payload: e.payload,
                        })
                        .collect(),
                )
            }
            Request::Stats { queue } if queue.is_empty() => json(&engine.report()),
            Request::Stats { queue } => json(&svc.queue_report(&queue)?),
            Request::CreateQueue { name, durability, ordering } => {
                json(&engine.create_queue(&name, durability, ordering)?)
            }
            Request::DestroyQueue { name } => {
                svc.destroy_queue(&name)?;
                Response::Done
            }
            Request::ListQueues => json(&engine.list_queues()),
            Request::PoolAttach { queue, spec } => json(&svc.attach_pool(&queue, spec)?),
            Request::PoolControl { queue, action, spec } => json(&svc.pool_control(&queue, action, &spec)?),
            Request::Checkpoint => Response::Checkpointed(engine.checkpoint()?.0),
        })
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        for (_, mut t) in self.txns.drain() {
            let _ = t.abort();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Durability, IsolationMode, Ordering};

    fn dequeue_request(queue: &str, isolation: IsolationMode) -> Request {
        Request::Dequeue { txn: 0, queue: queue.to_string(), isolation, wait_ms: 0 }
    }

    fn service() -> Arc<Service> {
        let e = Engine::open_memory(EngineConfig { pool_tick: None, ..EngineConfig::default() }).unwrap();
        Service::new(e)
    }

    #[test]
    fn session_transaction_lifecycle() {
        let svc = service();
        let mut s = svc.session();
        let r = s.handle(Request::CreateQueue {
            name: "q".into(),
            durability: Durability::Durable,
            ordering: Ordering::Fifo,
        });
        assert!(matches!(r, Response::Json(_)));
        let Response::Txn(t) = s.handle(Request::Begin) else { panic!() };
        let r = s.handle(Request::Enqueue { txn: t, queue: "q".into(), priority: 0, payload: b"a".to_vec() });
        assert!(matches!(r, Response::Enqueued(_)));
        assert!(svc.engine().poll("q", crate::PollFilter::All, false).unwrap().is_empty());
        assert_eq!(s.handle(Request::Commit { txn: t }), Response::Done);
        assert!(matches!(s.handle(Request::Commit { txn: t }), Response::Error { .. }));
        let Response::Dequeued(Some(m)) = s.handle(dequeue_request("q", IsolationMode::ReadPastDequeue)) else {
            panic!()
        };
        assert_eq!(m.payload, b"a");
    }

    #[test]
    fn dropped_session_rolls_back() {
        let svc = service();
        svc.engine().create_queue("q", Durability::Durable, Ordering::Fifo).unwrap();
        svc.engine().enqueue("q", 0, b"x").unwrap();
        {
            let mut s = svc.session();
            let Response::Txn(t) = s.handle(Request::Begin) else { panic!() };
            let r = s.handle(Request::Dequeue {
                txn: t,
                queue: "q".into(),
                isolation: IsolationMode::ReadPastDequeue,
                wait_ms: 0,
            });
            assert!(matches!(r, Response::Dequeued(Some(_))));
        }
        assert_eq!(svc.engine().poll("q", crate::PollFilter::All, false).unwrap().len(), 1);
    }

    #[test]
    fn errors_come_back_as_error_replies() {
        let svc = service();
        let mut s = svc.session();
        match s.handle(Request::Poll { queue: "nope".into(), include_dirty: false }) {
            Response::Error { code, .. } => assert_eq!(code, crate::ErrorCode::NotFound),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn session_transaction_cap() {
        let svc = service();
        let mut s = svc.session();
        for _ in 0..MAX_SESSION_TXNS {
            assert!(matches!(s.handle(Request::Begin), Response::Txn(_)));
        }
        assert!(matches!(s.handle(Request::Begin), Response::Error { .. }));
    }
}
