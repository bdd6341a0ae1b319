//! Broker configuration file and the pool definitions it (and the CLI)
//! can express.
//!
//! The file is TOML:
//!
//! ```toml
//! data_dir = "/var/lib/qdb"
//! listen = "127.0.0.1:7411"
//! lock_timeout_ms = 5000
//! group_commit_wait_us = 1000
//! group_commit_batch = 64
//!
//! [[queues]]
//! name = "orders"
//! durability = "durable"      # or "volatile"
//! ordering = "priority"       # or "fifo"
//!
//! [queues.pool]
//! min_servers = 1
//! max_servers = 4
//! policy = "batch"            # "event", "batch" or "periodic"
//! batch_threshold = 10
//! handler = "copy-to-queue:shipping"
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::pool::{Policy, PoolConfig, WorkerHandler};
use crate::types::{Durability, Ordering};
use crate::wal::GroupCommit;
use crate::workflow;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:7411";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerConfig {
    pub data_dir: PathBuf,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub lock_timeout_ms: Option<u64>,
    #[serde(default)]
    pub group_commit_wait_us: Option<u64>,
    #[serde(default)]
    pub group_commit_batch: Option<usize>,
    #[serde(default)]
    pub queues: Vec<QueueSpec>,
}

fn default_listen() -> String {
    DEFAULT_LISTEN.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueSpec {
    pub name: String,
    #[serde(default = "default_durability")]
    pub durability: Durability,
    #[serde(default = "default_ordering")]
    pub ordering: Ordering,
    #[serde(default)]
    pub pool: Option<PoolSpec>,
}

fn default_durability() -> Durability {
    Durability::Durable
}

fn default_ordering() -> Ordering {
    Ordering::Fifo
}

/// A pool definition with every field optional: unset fields take their
/// defaults on attach and keep their current values on redefine.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_servers: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_servers: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_threshold: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_limit: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_window_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle_shrink_after_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isolation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handler: Option<String>,
}

impl PoolSpec {
    /// `self` with every field set in `over` replaced.
    pub fn merged(&self, over: &PoolSpec) -> PoolSpec {
        fn pick<T: Clone>(a: &Option<T>, b: &Option<T>) -> Option<T> {
            b.clone().or_else(|| a.clone())
        }
        PoolSpec {
            min_servers: pick(&self.min_servers, &over.min_servers),
            max_servers: pick(&self.max_servers, &over.max_servers),
            policy: pick(&self.policy, &over.policy),
            batch_threshold: pick(&self.batch_threshold, &over.batch_threshold),
            interval_ms: pick(&self.interval_ms, &over.interval_ms),
            failure_limit: pick(&self.failure_limit, &over.failure_limit),
            failure_window_ms: pick(&self.failure_window_ms, &over.failure_window_ms),
            idle_shrink_after_ms: pick(&self.idle_shrink_after_ms, &over.idle_shrink_after_ms),
            isolation: pick(&self.isolation, &over.isolation),
            handler: pick(&self.handler, &over.handler),
        }
    }

    pub fn policy(&self) -> Result<Policy> {
        match self.policy.as_deref().unwrap_or("event") {
            "event" => Ok(Policy::Event),
            "batch" => Ok(Policy::Batch { threshold: self.batch_threshold.unwrap_or(10) }),
            "periodic" => Ok(Policy::Periodic { interval: Duration::from_millis(self.interval_ms.unwrap_or(1000)) }),
            p => Err(Error::usage(format!("unknown pool policy {p:?}"))),
        }
    }

    pub fn to_config(&self, queue: &str) -> Result<PoolConfig> {
        let handler = builtin_handler(self.handler.as_deref().unwrap_or("echo"))?;
        let d = PoolConfig::new(queue, |_, _| Ok(()));
        let config = PoolConfig {
            queue: queue.to_string(),
            min_servers: self.min_servers.unwrap_or(d.min_servers),
            max_servers: self.max_servers.unwrap_or(d.max_servers),
            policy: self.policy()?,
            failure_limit: self.failure_limit.unwrap_or(d.failure_limit),
            failure_window: self.failure_window_ms.map(Duration::from_millis).unwrap_or(d.failure_window),
            idle_shrink_after: self.idle_shrink_after_ms.map(Duration::from_millis).unwrap_or(d.idle_shrink_after),
            isolation: match &self.isolation {
                Some(s) => s.parse().map_err(Error::Usage)?,
                None => d.isolation,
            },
            handler,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Worker bodies that can be named in a config file or on the command
/// line:
///
/// * `echo`: answers workflow requests with their own body; other messages
///   are consumed.
/// * `copy-to-queue:NAME`: moves each message to queue NAME.
/// * `sleep-ms:N`: consumes each message after N milliseconds.
/// * `fail-percent:P`: fails P percent of messages (they are redelivered),
///   consumes the rest.
pub fn builtin_handler(name: &str) -> Result<WorkerHandler> {
    let (kind, arg) = match name.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (name, None),
    };
    let bad = || Error::usage(format!("bad handler {name:?}"));
    Ok(match (kind, arg) {
        ("echo", None) => Arc::new(|txn, msg| {
            if workflow::decode_request(&msg.payload).is_ok() {
                workflow::process(txn, msg, &|b: &[u8]| Ok(b.to_vec())).map_err(|e| e.to_string())?;
            }
            Ok(())
        }),
        ("copy-to-queue", Some(target)) if !target.is_empty() => {
            let target = target.to_string();
            Arc::new(move |txn, msg| {
                txn.enqueue(&target, msg.priority, &msg.payload).map(|_| ()).map_err(|e| e.to_string())
            })
        }
        ("sleep-ms", Some(ms)) => {
            let ms: u64 = ms.parse().map_err(|_| bad())?;
            Arc::new(move |_, _| {
                thread::sleep(Duration::from_millis(ms));
                Ok(())
            })
        }
        ("fail-percent", Some(p)) => {
            let p: u32 = p.parse().map_err(|_| bad())?;
            if p > 100 {
                return Err(bad());
            }
            Arc::new(move |_, _| if rand::random::<u32>() % 100 < p { Err("injected failure".into()) } else { Ok(()) })
        }
        _ => return Err(bad()),
    })
}

impl BrokerConfig {
    pub fn parse(text: &str) -> Result<BrokerConfig> {
        let c: BrokerConfig = toml::from_str(text).map_err(|e| Error::usage(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<BrokerConfig> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for q in &self.queues {
            if !seen.insert(q.name.as_str()) {
                return Err(Error::usage(format!("queue {} configured twice", q.name)));
            }
            if let Some(p) = &q.pool {
                p.to_config(&q.name)?;
            }
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        let d = EngineConfig::default();
        EngineConfig {
            lock_timeout: self.lock_timeout_ms.map(Duration::from_millis).unwrap_or(d.lock_timeout),
            group_commit: GroupCommit {
                max_wait: self.group_commit_wait_us.map(Duration::from_micros).unwrap_or(d.group_commit.max_wait),
                max_batch: self.group_commit_batch.unwrap_or(d.group_commit.max_batch),
            },
            ..d
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let c = BrokerConfig::parse(
            r#"
            data_dir = "/tmp/x"
            lock_timeout_ms = 200
            [[queues]]
            name = "orders"
            ordering = "priority"
            [queues.pool]
            min_servers = 2
            max_servers = 3
            policy = "batch"
            batch_threshold = 4
            handler = "copy-to-queue:out"
            [[queues]]
            name = "out"
            durability = "volatile"
            "#,
        )
        .unwrap();
        assert_eq!(c.listen, DEFAULT_LISTEN);
        assert_eq!(c.engine_config().lock_timeout, Duration::from_millis(200));
        assert_eq!(c.queues[0].ordering, Ordering::Priority);
        assert_eq!(c.queues[1].durability, Durability::Volatile);
        let p = c.queues[0].pool.as_ref().unwrap().to_config("orders").unwrap();
        assert_eq!((p.min_servers, p.max_servers, p.policy), (2, 3, Policy::Batch { threshold: 4 }));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(BrokerConfig::parse("listen = 3").is_err());
        assert!(BrokerConfig::parse("data_dir = 'd'\nbogus = 1").is_err());
        let dup = "data_dir = 'd'\n[[queues]]\nname = 'a'\n[[queues]]\nname = 'a'\n";
        assert!(BrokerConfig::parse(dup).is_err());
        let bounds = "data_dir = 'd'\n[[queues]]\nname = 'a'\npool = { min_servers = 5, max_servers = 1 }\n";
        assert!(matches!(BrokerConfig::parse(bounds), Err(Error::Usage(_))));
        let handler = "data_dir = 'd'\n[[queues]]\nname = 'a'\npool = { handler = 'rm-rf' }\n";
        assert!(BrokerConfig::parse(handler).is_err());
    }

    #[test]
    fn merge_keeps_unset_fields() {
        let base = PoolSpec { min_servers: Some(1), max_servers: Some(4), ..Default::default() };
        let over = PoolSpec { max_servers: Some(8), ..Default::default() };
        let m = base.merged(&over);
        assert_eq!((m.min_servers, m.max_servers), (Some(1), Some(8)));
    }

    #[test]
    fn builtin_handler_names() {
        for ok in ["echo", "copy-to-queue:x", "sleep-ms:5", "fail-percent:10"] {
            assert!(builtin_handler(ok).is_ok(), "{ok}");
        }
        for bad in ["", "echo:1", "copy-to-queue", "copy-to-queue:", "sleep-ms:x", "fail-percent:101"] {
            assert!(builtin_handler(bad).is_err(), "{bad}");
        }
    }
}
