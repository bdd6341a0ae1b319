use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(TxnId, "t");
id_type!(QueueId, "q");
id_type!(MessageId, "m");
id_type!(Lsn, "lsn:");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Durability {
    Durable,
    Volatile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    Fifo,
    Priority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum QueueState {
    Active,
    Stopped,
    Broken,
}

impl Durability {
    pub fn to_byte(self) -> u8 {
        match self {
            Durability::Durable => 0,
            Durability::Volatile => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Durability::Durable),
            1 => Some(Durability::Volatile),
            _ => None,
        }
    }
}

impl Ordering {
    pub fn to_byte(self) -> u8 {
        match self {
            Ordering::Fifo => 0,
            Ordering::Priority => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Ordering::Fifo),
            1 => Some(Ordering::Priority),
            _ => None,
        }
    }
}

impl fmt::Display for QueueState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueueState::Active => "ACTIVE",
            QueueState::Stopped => "STOPPED",
            QueueState::Broken => "BROKEN",
        })
    }
}

/// How a dequeue isolates itself from concurrent dequeuers on the same queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum IsolationMode {
    /// Holds X on the queue head until the transaction ends: one dequeuer
    /// at a time per queue.
    Serializable,
    /// Skips records locked by other transactions.
    #[default]
    ReadPastDequeue,
}

impl IsolationMode {
    pub fn to_byte(self) -> u8 {
        match self {
            IsolationMode::ReadPastDequeue => 0,
            IsolationMode::Serializable => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(IsolationMode::ReadPastDequeue),
            1 => Some(IsolationMode::Serializable),
            _ => None,
        }
    }
}

impl FromStr for IsolationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "serializable" => Ok(IsolationMode::Serializable),
            "read_past" | "read-past" | "readpast" => Ok(IsolationMode::ReadPastDequeue),
            other => Err(format!("unknown isolation mode {other:?}")),
        }
    }
}
