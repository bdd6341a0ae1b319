//! Broker daemon, its wire protocol and configuration, and the client used
//! by the CLI.

pub mod client;
pub mod config;
pub mod protocol;
pub mod server;
pub mod service;

pub use client::Client;
pub use config::{BrokerConfig, PoolSpec, QueueSpec, builtin_handler};
pub use protocol::{PoolAction, Request, Response, WireMessage, WirePollEntry};
pub use server::Broker;
pub use service::{QueueReport, Service, Session};
