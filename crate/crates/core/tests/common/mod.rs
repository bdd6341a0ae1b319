#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use qdb::{Durability, Engine, EngineConfig, Ordering, PollFilter, PollOptions};

/// Engine config for tests: no background pool ticker, short lock waits.
pub fn quiet_config() -> EngineConfig {
    EngineConfig { pool_tick: None, lock_timeout: Duration::from_secs(2), ..EngineConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueImage {
    pub durable: bool,
    pub priority: bool,
    /// (message id, priority, payload)
    pub messages: BTreeSet<(u64, i64, Vec<u8>)>,
}

pub type Image = BTreeMap<String, QueueImage>;

/// Committed catalog and contents as seen through the public API.
pub fn observe(engine: &Engine) -> Image {
    let mut out = Image::new();
    for d in engine.list_queues() {
        let opts = PollOptions {
            filter: PollFilter::All,
            include_dirty: false,
            include_payload: true,
            unsafe_dirty_payload: false,
        };
        let messages = engine
            .poll_with(&d.name, opts)
            .unwrap()
            .into_iter()
            .map(|e| (e.message.0, e.priority, e.payload.expect("payload requested")))
            .collect();
        out.insert(
            d.name.clone(),
            QueueImage {
                durable: d.durability == Durability::Durable,
                priority: d.ordering == Ordering::Priority,
                messages,
            },
        );
    }
    out
}

/// What a restart must show: volatile queues keep their definition but
/// lose their contents.
pub fn after_restart(image: &Image) -> Image {
    image
        .iter()
        .map(|(k, q)| {
            let mut q = q.clone();
            if !q.durable {
                q.messages.clear();
            }
            (k.clone(), q)
        })
        .collect()
}
