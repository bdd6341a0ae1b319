mod common;

use std::time::Duration;

use proptest::prelude::*;

use common::{after_restart, observe, quiet_config};
use qdb::{Durability, Engine, IsolationMode, Ordering, PollFilter};

const QUEUES: [(&str, Durability, Ordering); 3] = [
    ("fifo", Durability::Durable, Ordering::Fifo),
    ("prio", Durability::Durable, Ordering::Priority),
    ("vol", Durability::Volatile, Ordering::Priority),
];

#[derive(Debug, Clone)]
struct TxnPlan {
    dequeues: Vec<usize>,
    enqueues: Vec<(usize, i64)>,
    commit: bool,
    checkpoint_after: bool,
}

fn plan() -> impl Strategy<Value = TxnPlan> {
    (
        prop::collection::vec(0..QUEUES.len(), 0..3),
        prop::collection::vec((0..QUEUES.len(), -3i64..4), 0..4),
        prop::bool::weighted(0.75),
        prop::bool::weighted(0.1),
    )
        .prop_map(|(dequeues, enqueues, commit, checkpoint_after)| TxnPlan {
            dequeues,
            enqueues,
            commit,
            checkpoint_after,
        })
}

/// Committed contents per queue: (priority, commit order, payload).
#[derive(Default, Clone)]
struct Model {
    queues: Vec<Vec<(i64, u64, Vec<u8>)>>,
    seq: u64,
}

impl Model {
    fn new() -> Self {
        Model { queues: vec![Vec::new(); QUEUES.len()], seq: 0 }
    }

    /// Index of the next message a dequeue must return, skipping ones
    /// already taken by the running transaction.
    fn head(&self, q: usize, taken: &[(usize, usize)]) -> Option<usize> {
        let fifo = QUEUES[q].2 == Ordering::Fifo;
        (0..self.queues[q].len()).filter(|i| !taken.contains(&(q, *i))).min_by_key(|&i| {
            let (p, s, _) = &self.queues[q][i];
            if fifo { (0, *s) } else { (-*p, *s) }
        })
    }
}

/// Runs the plans against `engine`, checking each dequeue against the model.
fn drive(engine: &Engine, model: &mut Model, plans: &[TxnPlan], serial: &mut u32) {
    for p in plans {
        let mut txn = engine.begin().unwrap();
        let mut taken = Vec::new();
        for &q in &p.dequeues {
            let want = model.head(q, &taken);
            let got = txn.dequeue(QUEUES[q].0, IsolationMode::ReadPastDequeue, Duration::ZERO).unwrap();
            match (want, got) {
                (None, None) => {}
                (Some(i), Some(m)) => {
                    assert_eq!(m.payload, model.queues[q][i].2, "dequeue order on {}", QUEUES[q].0);
                    taken.push((q, i));
                }
                (w, g) => panic!("model expected {w:?}, engine returned {g:?}"),
            }
        }
        let mut added = Vec::new();
        for &(q, prio) in &p.enqueues {
            *serial += 1;
            let payload = serial.to_le_bytes().to_vec();
            txn.enqueue(QUEUES[q].0, prio, &payload).unwrap();
            added.push((q, prio, payload));
        }
        if p.commit {
            txn.commit().unwrap();
            taken.sort_by(|a, b| b.cmp(a));
            for (q, i) in taken {
                model.queues[q].remove(i);
            }
            for (q, prio, payload) in added {
                model.seq += 1;
                model.queues[q].push((prio, model.seq, payload));
            }
        } else {
            txn.abort().unwrap();
        }
        if p.checkpoint_after {
            engine.checkpoint().unwrap();
        }
    }
}

fn create_all(engine: &Engine) {
    for (name, d, o) in QUEUES {
        engine.create_queue(name, d, o).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn dequeue_order_and_conservation(plans in prop::collection::vec(plan(), 1..40)) {
        let engine = Engine::open_memory(quiet_config()).unwrap();
        create_all(&engine);
        let mut model = Model::new();
        let mut serial = 0;
        drive(&engine, &mut model, &plans, &mut serial);

        for (q, (name, _, _)) in QUEUES.iter().enumerate() {
            let s = engine.stats(name).unwrap();
            prop_assert_eq!(s.depth_visible, model.queues[q].len() as u64);
            prop_assert_eq!(s.enqueue_count - s.dequeue_count, s.depth_visible);
            prop_assert_eq!(s.depth_dirty, 0);
        }
        engine.audit().unwrap();
        engine.lock_manager().audit().unwrap();
    }

    #[test]
    fn poll_is_pure(plans in prop::collection::vec(plan(), 1..20)) {
        let engine = Engine::open_memory(quiet_config()).unwrap();
        create_all(&engine);
        let mut model = Model::new();
        let mut serial = 0;
        drive(&engine, &mut model, &plans, &mut serial);
        let mut open = engine.begin().unwrap();
        open.enqueue("fifo", 0, b"in flight").unwrap();

        let before = engine.state_hash();
        for (name, _, _) in QUEUES {
            engine.poll(name, PollFilter::All, true).unwrap();
            engine.stats(name).unwrap();
        }
        prop_assert_eq!(engine.state_hash(), before);
        open.abort().unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn restart_keeps_durable_state(plans in prop::collection::vec(plan(), 1..30)) {
        let dir = tempfile::tempdir().unwrap();
        let engine = Engine::open_dir(dir.path(), quiet_config()).unwrap();
        create_all(&engine);
        let mut model = Model::new();
        let mut serial = 0;
        drive(&engine, &mut model, &plans, &mut serial);
        let expected = after_restart(&observe(&engine));
        drop(engine);

        let reopened = Engine::open_dir(dir.path(), quiet_config()).unwrap();
        prop_assert_eq!(observe(&reopened), expected.clone());
        reopened.audit().unwrap();
        drop(reopened);
        let again = Engine::open_dir(dir.path(), quiet_config()).unwrap();
        prop_assert_eq!(observe(&again), expected);
    }
}
