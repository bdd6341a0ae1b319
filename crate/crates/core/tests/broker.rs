mod common;

use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use qdb::broker::{Broker, BrokerConfig, Client, PoolAction, PoolSpec, Request, Response};
use qdb::{Durability, IsolationMode, Ordering};

fn config(dir: &Path, extra: &str) -> BrokerConfig {
    BrokerConfig::parse(&format!("data_dir = {:?}\nlisten = \"127.0.0.1:0\"\n{extra}", dir.to_str().unwrap())).unwrap()
}

fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(5));
    }
    f()
}

fn dequeue(txn: u64, queue: &str) -> Request {
    Request::Dequeue { txn, queue: queue.into(), isolation: IsolationMode::ReadPastDequeue, wait_ms: 0 }
}

#[test]
fn dropped_connection_rolls_back_its_transaction() {
    let dir = tempfile::tempdir().unwrap();
    let broker = Broker::start(&config(dir.path(), "[[queues]]\nname = \"q\"\n")).unwrap();
    let mut c = Client::connect(broker.local_addr()).unwrap();
    c.call(&Request::Enqueue { txn: 0, queue: "q".into(), priority: 0, payload: b"job".to_vec() }).unwrap();
    let Response::Txn(t) = c.call(&Request::Begin).unwrap() else { panic!("no txn") };
    let Response::Dequeued(Some(m)) = c.call(&dequeue(t, "q")).unwrap() else { panic!("no message") };
    assert_eq!(m.payload, b"job");
    drop(c);

    assert!(wait_until(Duration::from_secs(5), || broker.connections() == 0));
    let mut other = Client::connect(broker.local_addr()).unwrap();
    let Response::Dequeued(Some(again)) = other.call(&dequeue(0, "q")).unwrap() else { panic!("message lost") };
    assert_eq!((again.id, again.redeliveries), (m.id, 1));
    drop(other);
    broker.shutdown().unwrap();
}

#[test]
fn one_broker_per_data_directory() {
    let dir = tempfile::tempdir().unwrap();
    let first = Broker::start(&config(dir.path(), "")).unwrap();
    assert!(Broker::start(&config(dir.path(), "")).is_err());
    first.shutdown().unwrap();
    Broker::start(&config(dir.path(), "")).unwrap().shutdown().unwrap();
}

#[test]
fn restart_keeps_queues_messages_and_pools() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "[[queues]]\nname = \"jobs\"\nordering = \"priority\"\n[[queues]]\nname = \"scratch\"\ndurability = \"volatile\"\n",
    );
    let broker = Broker::start(&cfg).unwrap();
    let addr = broker.local_addr();
    let mut c = Client::connect(addr).unwrap();
    for (q, p) in [("jobs", 1), ("jobs", 7), ("scratch", 0)] {
        c.call(&Request::Enqueue { txn: 0, queue: q.into(), priority: p, payload: vec![p as u8] })
            .unwrap()
            .into_result()
            .unwrap();
    }
    c.call(&Request::CreateQueue { name: "idle".into(), durability: Durability::Durable, ordering: Ordering::Fifo })
        .unwrap()
        .into_result()
        .unwrap();
    let spec = PoolSpec { min_servers: Some(0), max_servers: Some(2), ..Default::default() };
    c.call(&Request::PoolAttach { queue: "idle".into(), spec }).unwrap().into_result().unwrap();
    c.call(&Request::PoolControl { queue: "idle".into(), action: PoolAction::Stop, spec: PoolSpec::default() })
        .unwrap()
        .into_result()
        .unwrap();
    drop(c);
    broker.shutdown().unwrap();

    // the config lists the same queues again; startup must accept that
    let broker = Broker::start(&cfg).unwrap();
    let engine = broker.service().engine().clone();
    assert_eq!(engine.stats("jobs").unwrap().depth_visible, 2);
    assert_eq!(engine.stats("scratch").unwrap().depth_visible, 0);
    let pool = engine.pool_status("idle").unwrap();
    assert_eq!(pool.state, qdb::PoolState::Stopped);
    let m = engine.dequeue("jobs", IsolationMode::ReadPastDequeue, Duration::ZERO).unwrap().unwrap();
    assert_eq!(m.priority, 7);
    drop(engine);
    broker.shutdown().unwrap();
}

#[test]
fn existing_queue_keeps_its_attributes() {
    let dir = tempfile::tempdir().unwrap();
    let broker = Broker::start(&config(dir.path(), "[[queues]]\nname = \"q\"\n")).unwrap();
    broker.service().engine().enqueue("q", 0, b"kept").unwrap();
    broker.shutdown().unwrap();
    let changed = config(dir.path(), "[[queues]]\nname = \"q\"\ndurability = \"volatile\"\n");
    let broker = Broker::start(&changed).unwrap();
    let engine = broker.service().engine().clone();
    assert_eq!(engine.queue("q").unwrap().durability, Durability::Durable);
    assert_eq!(engine.list_queues().len(), 1);
    assert_eq!(engine.stats("q").unwrap().depth_visible, 1);
    drop(engine);
    broker.shutdown().unwrap();
}

#[test]
fn errors_come_back_as_error_replies() {
    let dir = tempfile::tempdir().unwrap();
    let broker = Broker::start(&config(dir.path(), "")).unwrap();
    let mut c = Client::connect(broker.local_addr()).unwrap();
    let r = c.call(&dequeue(0, "missing")).unwrap();
    assert!(matches!(r, Response::Error { code: qdb::ErrorCode::NotFound, .. }), "{r:?}");
    let r = c.call(&Request::Commit { txn: 12345 }).unwrap();
    assert!(matches!(r, Response::Error { .. }));
    assert!(matches!(c.call(&Request::ListQueues).unwrap(), Response::Json(_)));
    drop(c);
    broker.shutdown().unwrap();
}
