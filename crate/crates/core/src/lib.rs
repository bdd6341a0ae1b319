//! A transactional message queue engine: queues are tables in a small
//! database with a write-ahead log, a lock manager that understands queue
//! access patterns, triggers, server pools and request/response workflows.

pub mod bench;
pub mod broker;
pub mod cli;
pub mod clock;
pub mod codec;
pub mod engine;
pub mod error;
pub mod lockmgr;
pub mod pool;
pub mod queue;
pub mod storage;
pub mod triggers;
pub mod txn;
pub mod types;
pub mod wal;
pub mod workflow;

pub use clock::{Clock, ManualClock, SharedClock, SystemClock};
pub use engine::{Engine, EngineConfig, RecoveryInfo, StatsReport};
pub use error::{Error, ErrorCode, Result};
pub use pool::{Policy, PoolConfig, PoolControl, PoolId, PoolState, PoolStatus};
pub use queue::{Message, PollEntry, PollFilter, PollOptions, QueueDescriptor, QueueStats, Visibility};
pub use triggers::{TriggerEvent, TriggerId, TriggerScope, TriggerSpec, TriggerTiming};
pub use txn::{Txn, TxnState};
pub use types::*;
