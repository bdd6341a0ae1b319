//! In-memory queue store: committed records plus the provisional state of
//! in-flight transactions.

use std::cmp::Reverse;
use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::types::{Durability, Lsn, MessageId, Ordering, QueueId, QueueState, TxnId};

/// Sort keys of uncommitted inserts live above every real sequence number,
/// so they sort after committed records of the same priority.
pub(crate) const PENDING_SEQ_BASE: u64 = 1 << 63;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueueDescriptor {
    pub id: QueueId,
    pub name: String,
    pub durability: Durability,
    pub ordering: Ordering,
    pub state: QueueState,
    pub created_lsn: Lsn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub id: MessageId,
    pub queue: String,
    pub priority: i64,
    pub seq: u64,
    pub payload: Vec<u8>,
    /// How many earlier dequeues of this message were rolled back.
    pub redeliveries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Visibility {
    Visible,
    UncommittedInsert,
    UncommittedDelete,
}

impl std::fmt::Display for Visibility {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Visibility::Visible => "VISIBLE",
            Visibility::UncommittedInsert => "UNCOMMITTED_INSERT",
            Visibility::UncommittedDelete => "UNCOMMITTED_DELETE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PollFilter {
    All,
    ById(MessageId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PollOptions {
    pub filter: PollFilter,
    pub include_dirty: bool,
    /// Attach payloads of committed entries.
    pub include_payload: bool,
    /// Also attach payloads of uncommitted entries.
    pub unsafe_dirty_payload: bool,
}

impl Default for PollOptions {
    fn default() -> Self {
        PollOptions {
            filter: PollFilter::All,
            include_dirty: false,
            include_payload: false,
            unsafe_dirty_payload: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PollEntry {
    pub message: MessageId,
    pub priority: i64,
    pub visibility: Visibility,
    pub writer: Option<TxnId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    pub name: String,
    pub depth_visible: u64,
    pub depth_dirty: u64,
    pub enqueue_count: u64,
    pub dequeue_count: u64,
    pub lock_waits: u64,
    pub state: QueueState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RecState {
    Committed,
    PendingInsert(TxnId),
    PendingDelete(TxnId),
}

#[derive(Debug, Clone)]
pub(crate) struct Rec {
    pub priority: i64,
    pub seq: u64,
    pub payload: Vec<u8>,
    pub state: RecState,
    pub redeliveries: u32,
}

impl Rec {
    fn key(&self) -> (Reverse<i64>, u64) {
        (Reverse(self.priority), self.seq)
    }
}

#[derive(Debug)]
pub(crate) struct QueueData {
    pub id: QueueId,
    pub name: String,
    pub durability: Durability,
    pub ordering: Ordering,
    pub state: QueueState,
    pub created_lsn: Lsn,
    pub next_seq: u64,
    pub order: BTreeMap<(Reverse<i64>, u64), MessageId>,
    pub recs: HashMap<MessageId, Rec>,
    /// Committed records not provisionally deleted.
    pub visible: u64,
    pub pending_inserts: u64,
    pub pending_deletes: u64,
    pub enqueue_count: u64,
    pub dequeue_count: u64,
}

impl QueueData {
    pub fn new(id: QueueId, name: String, durability: Durability, ordering: Ordering, created_lsn: Lsn) -> Self {
        QueueData {
            id,
            name,
            durability,
            ordering,
            state: QueueState::Active,
            created_lsn,
            next_seq: 1,
            order: BTreeMap::new(),
            recs: HashMap::new(),
            visible: 0,
            pending_inserts: 0,
            pending_deletes: 0,
            enqueue_count: 0,
            dequeue_count: 0,
        }
    }

    pub fn descriptor(&self) -> QueueDescriptor {
        QueueDescriptor {
            id: self.id,
            name: self.name.clone(),
            durability: self.durability,
            ordering: self.ordering,
            state: self.state,
            created_lsn: self.created_lsn,
        }
    }

    /// Loads a committed record during startup.
    pub fn load(&mut self, id: MessageId, priority: i64, seq: u64, payload: Vec<u8>) {
        let rec = Rec { priority, seq, payload, state: RecState::Committed, redeliveries: 0 };
        self.order.insert(rec.key(), id);
        self.recs.insert(id, rec);
        self.visible += 1;
        self.enqueue_count += 1;
    }

    pub fn insert_pending(&mut self, txn: TxnId, id: MessageId, priority: i64, payload: Vec<u8>) {
        let rec = Rec {
            priority,
            seq: PENDING_SEQ_BASE + id.0,
            payload,
            state: RecState::PendingInsert(txn),
            redeliveries: 0,
        };
        self.order.insert(rec.key(), id);
        self.recs.insert(id, rec);
        self.pending_inserts += 1;
    }

    /// Marks a committed record as provisionally deleted by `txn`.
    pub fn mark_deleted(&mut self, txn: TxnId, id: MessageId) {
        let rec = self.recs.get_mut(&id).expect("record exists");
        debug_assert_eq!(rec.state, RecState::Committed);
        rec.state = RecState::PendingDelete(txn);
        self.visible -= 1;
        self.pending_deletes += 1;
    }

    /// Makes a pending insert committed with its final sequence number.
    /// Returns true when the queue went from no visible records to some.
    pub fn commit_insert(&mut self, id: MessageId, seq: u64) -> bool {
        let Some(rec) = self.recs.get_mut(&id) else { return false };
        self.order.remove(&(Reverse(rec.priority), rec.seq));
        rec.seq = seq;
        rec.state = RecState::Committed;
        self.order.insert((Reverse(rec.priority), seq), id);
        self.pending_inserts -= 1;
        self.visible += 1;
        self.enqueue_count += 1;
        self.visible == 1
    }

    pub fn commit_delete(&mut self, id: MessageId) {
        if let Some(rec) = self.recs.remove(&id) {
            self.order.remove(&rec.key());
            self.pending_deletes -= 1;
            self.dequeue_count += 1;
        }
    }

    pub fn rollback_insert(&mut self, id: MessageId) {
        if let Some(rec) = self.recs.remove(&id) {
            self.order.remove(&rec.key());
            self.pending_inserts -= 1;
        }
    }

    /// Returns true when the restored record made the queue non-empty.
    pub fn rollback_delete(&mut self, id: MessageId) -> bool {
        let Some(rec) = self.recs.get_mut(&id) else { return false };
        rec.state = RecState::Committed;
        rec.redeliveries += 1;
        self.pending_deletes -= 1;
        self.visible += 1;
        self.visible == 1
    }

    pub fn stats(&self, lock_waits: u64) -> QueueStats {
        QueueStats {
            name: self.name.clone(),
            depth_visible: self.visible,
            depth_dirty: self.pending_inserts + self.pending_deletes,
            enqueue_count: self.enqueue_count,
            dequeue_count: self.dequeue_count,
            lock_waits,
            state: self.state,
        }
    }

    /// Committed records (including provisionally deleted ones) in order.
    pub fn committed(&self) -> impl Iterator<Item = (MessageId, &Rec)> {
        self.order.values().filter_map(|id| {
            let rec = &self.recs[id];
            (!matches!(rec.state, RecState::PendingInsert(_))).then_some((*id, rec))
        })
    }
}

#[derive(Debug, Default)]
pub(crate) struct Store {
    pub queues: BTreeMap<QueueId, QueueData>,
    pub names: HashMap<String, QueueId>,
}

impl Store {
    pub fn by_name(&self, name: &str) -> Option<&QueueData> {
        self.names.get(name).and_then(|id| self.queues.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut QueueData> {
        let id = *self.names.get(name)?;
        self.queues.get_mut(&id)
    }

    pub fn add(&mut self, q: QueueData) {
        self.names.insert(q.name.clone(), q.id);
        self.queues.insert(q.id, q);
    }

    pub fn remove(&mut self, id: QueueId) -> Option<QueueData> {
        let q = self.queues.remove(&id)?;
        self.names.remove(&q.name);
        Some(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q() -> QueueData {
        QueueData::new(QueueId(1), "q".into(), Durability::Durable, Ordering::Priority, Lsn(1))
    }

    fn order(q: &QueueData) -> Vec<u64> {
        q.order.values().map(|m| m.0).collect()
    }

    #[test]
    fn pending_inserts_sort_after_committed_of_same_priority() {
        let mut q = q();
        q.load(MessageId(1), 0, 1, vec![]);
        q.insert_pending(TxnId(9), MessageId(2), 0, vec![]);
        q.load(MessageId(3), 0, 2, vec![]);
        assert_eq!(order(&q), vec![1, 3, 2]);
        assert!(!q.commit_insert(MessageId(2), 3));
        assert_eq!(order(&q), vec![1, 3, 2]);
        assert_eq!(q.visible, 3);
    }

    #[test]
    fn delete_rollback_keeps_position() {
        let mut q = q();
        q.load(MessageId(1), 5, 1, vec![]);
        q.load(MessageId(2), 1, 2, vec![]);
        q.mark_deleted(TxnId(3), MessageId(1));
        assert_eq!(q.visible, 1);
        assert!(!q.rollback_delete(MessageId(1)));
        assert_eq!(order(&q), vec![1, 2]);
        assert_eq!(q.recs[&MessageId(1)].redeliveries, 1);
    }

    #[test]
    fn counters_conserve() {
        let mut q = q();
        for i in 1..=10 {
            q.insert_pending(TxnId(1), MessageId(i), 0, vec![]);
            q.commit_insert(MessageId(i), i);
        }
        for i in 1..=4 {
            q.mark_deleted(TxnId(2), MessageId(i));
            q.commit_delete(MessageId(i));
        }
        let s = q.stats(0);
        assert_eq!(s.depth_visible, 6);
        assert_eq!(s.enqueue_count - s.dequeue_count, s.depth_visible);
    }

    #[test]
    fn zero_to_one_transition_reported_once() {
        let mut q = q();
        q.insert_pending(TxnId(1), MessageId(1), 0, vec![]);
        q.insert_pending(TxnId(1), MessageId(2), 0, vec![]);
        assert!(q.commit_insert(MessageId(1), 1));
        assert!(!q.commit_insert(MessageId(2), 2));
    }
}
