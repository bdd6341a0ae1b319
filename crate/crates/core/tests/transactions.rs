mod common;

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering as AtomicOrdering};
use std::sync::{Arc, Barrier, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use common::quiet_config;
use qdb::{Durability, Engine, EngineConfig, Error, IsolationMode, Ordering, PollFilter};

fn engine_with(queues: &[&str]) -> Engine {
    let engine = Engine::open_memory(quiet_config()).unwrap();
    for q in queues {
        engine.create_queue(q, Durability::Durable, Ordering::Fifo).unwrap();
    }
    engine
}

#[test]
fn serializable_dequeues_take_turns() {
    let engine = engine_with(&["q"]);
    for i in 0..2u8 {
        engine.enqueue("q", 0, &[i]).unwrap();
    }
    let mut first = engine.begin().unwrap();
    first.dequeue("q", IsolationMode::Serializable, Duration::ZERO).unwrap().unwrap();

    let started = Arc::new(Barrier::new(2));
    let done = Arc::new(AtomicBool::new(false));
    let second = {
        let (engine, started, done) = (engine.clone(), started.clone(), done.clone());
        thread::spawn(move || {
            started.wait();
            let m = engine.dequeue("q", IsolationMode::Serializable, Duration::ZERO).unwrap();
            done.store(true, AtomicOrdering::SeqCst);
            m
        })
    };
    started.wait();
    thread::sleep(Duration::from_millis(100));
    assert!(!done.load(AtomicOrdering::SeqCst), "second serializable dequeue ran beside the first");
    assert!(engine.lock_manager().stats().waits >= 1);
    first.commit().unwrap();
    let m = second.join().unwrap().expect("second message");
    assert_eq!(m.payload, [1]);
    engine.lock_manager().audit().unwrap();
}

#[test]
fn read_past_dequeues_do_not_block_each_other() {
    let engine = engine_with(&["q"]);
    for i in 0..2u8 {
        engine.enqueue("q", 0, &[i]).unwrap();
    }
    let waits = engine.lock_manager().stats().waits;
    let mut a = engine.begin().unwrap();
    let mut b = engine.begin().unwrap();
    let ma = a.dequeue("q", IsolationMode::ReadPastDequeue, Duration::ZERO).unwrap().unwrap();
    let mb = b.dequeue("q", IsolationMode::ReadPastDequeue, Duration::ZERO).unwrap().unwrap();
    assert_ne!(ma.id, mb.id);
    assert_eq!(engine.lock_manager().stats().waits, waits);
    a.commit().unwrap();
    b.commit().unwrap();
    assert_eq!(engine.stats("q").unwrap().depth_visible, 0);
}

#[test]
fn exactly_once_with_aborting_consumers() {
    const N: u32 = 400;
    let engine = engine_with(&["q"]);
    for i in 0..N {
        engine.enqueue("q", 0, &i.to_le_bytes()).unwrap();
    }
    let consumed = Arc::new(Mutex::new(Vec::new()));
    let workers: Vec<_> = (0..6u64)
        .map(|w| {
            let (engine, consumed) = (engine.clone(), consumed.clone());
            thread::spawn(move || {
                let mut n = w;
                loop {
                    let mut txn = engine.begin().unwrap();
                    let Some(m) = txn.dequeue("q", IsolationMode::ReadPastDequeue, Duration::ZERO).unwrap() else {
                        txn.abort().unwrap();
                        if engine.stats("q").unwrap().depth_visible == 0 && engine.stats("q").unwrap().depth_dirty == 0
                        {
                            return;
                        }
                        thread::yield_now();
                        continue;
                    };
                    n = n.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    if n >> 62 == 0 {
                        txn.abort().unwrap();
                    } else {
                        txn.commit().unwrap();
                        consumed.lock().unwrap().push(u32::from_le_bytes(m.payload.try_into().unwrap()));
                    }
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    let mut got = consumed.lock().unwrap().clone();
    got.sort();
    assert_eq!(got, (0..N).collect::<Vec<_>>());
    engine.audit().unwrap();
}

#[test]
fn readers_never_see_part_of_a_transaction() {
    let engine = engine_with(&["a", "b"]);
    let stop = Arc::new(AtomicBool::new(false));
    let reader = {
        let (engine, stop) = (engine.clone(), stop.clone());
        thread::spawn(move || {
            let mut checks = 0;
            while !stop.load(AtomicOrdering::SeqCst) {
                let report = engine.report();
                let depth = |q: &str| report.queues.iter().find(|s| s.name == q).unwrap().depth_visible;
                assert_eq!(depth("a"), depth("b"), "saw half a transaction");
                checks += 1;
            }
            checks
        })
    };
    for i in 0..300u32 {
        let mut t = engine.begin().unwrap();
        t.enqueue("a", 0, &i.to_le_bytes()).unwrap();
        t.enqueue("b", 0, &i.to_le_bytes()).unwrap();
        if i % 3 == 0 { t.abort().unwrap() } else { t.commit().unwrap() }
    }
    stop.store(true, AtomicOrdering::SeqCst);
    assert!(reader.join().unwrap() > 0);
}

#[test]
fn empty_transactions_write_nothing() {
    let engine = engine_with(&["q"]);
    let before = engine.log_records().unwrap().len();
    for _ in 0..10 {
        let mut t = engine.begin().unwrap();
        assert!(t.dequeue("q", IsolationMode::ReadPastDequeue, Duration::ZERO).unwrap().is_none());
        engine.poll("q", PollFilter::All, true).unwrap();
        t.commit().unwrap();
    }
    assert_eq!(engine.log_records().unwrap().len(), before);
}

#[test]
fn payload_limit_is_enforced() {
    let engine = Engine::open_memory(EngineConfig { max_payload: 16, ..quiet_config() }).unwrap();
    engine.create_queue("q", Durability::Durable, Ordering::Fifo).unwrap();
    engine.enqueue("q", 0, &[0; 16]).unwrap();
    assert!(matches!(engine.enqueue("q", 0, &[0; 17]), Err(Error::Usage(_))));
}

#[test]
fn finished_transactions_refuse_work() {
    let engine = engine_with(&["q"]);
    let mut t = engine.begin().unwrap();
    t.commit().unwrap();
    assert!(matches!(t.enqueue("q", 0, b"x"), Err(Error::Usage(_))));
    assert!(t.commit().is_err());
}

#[test]
fn waiting_dequeue_wakes_on_commit() {
    let engine = engine_with(&["q"]);
    let waiter = {
        let engine = engine.clone();
        thread::spawn(move || {
            let started = Instant::now();
            let m = engine.dequeue("q", IsolationMode::ReadPastDequeue, Duration::from_secs(10)).unwrap();
            (m, started.elapsed())
        })
    };
    thread::sleep(Duration::from_millis(50));
    engine.enqueue("q", 0, b"wake").unwrap();
    let (m, waited) = waiter.join().unwrap();
    assert_eq!(m.unwrap().payload, b"wake");
    assert!(waited < Duration::from_secs(5));
}

#[test]
fn lock_wait_times_out_and_aborts_the_waiter() {
    let engine =
        Engine::open_memory(EngineConfig { lock_timeout: Duration::from_millis(50), ..quiet_config() }).unwrap();
    engine.create_queue("q", Durability::Durable, Ordering::Fifo).unwrap();
    engine.enqueue("q", 0, b"x").unwrap();
    let mut holder = engine.begin().unwrap();
    holder.dequeue("q", IsolationMode::Serializable, Duration::ZERO).unwrap().unwrap();
    let mut victim = engine.begin().unwrap();
    let r = victim.dequeue("q", IsolationMode::Serializable, Duration::ZERO);
    assert!(matches!(r, Err(Error::DeadlockTimeout(_))), "{r:?}");
    assert!(victim.commit().is_err());
    holder.abort().unwrap();
    engine.lock_manager().audit().unwrap();
    let ids: HashSet<_> = engine.poll("q", PollFilter::All, false).unwrap().into_iter().map(|e| e.message).collect();
    assert_eq!(ids.len(), 1);
}
