//! HTTP gateway, blocking client and configuration on top of `powgate-core`.

pub mod client;
pub mod config;
pub mod http;

pub use client::{CallReport, ClientError, ClientSession, RetryPolicy};
pub use config::{ConfigError, ServerConfig};
pub use http::{router, serve, BackgroundServer, SnapshotPolicy};
