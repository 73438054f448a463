//! Simulated verifiable data registry.
//!
//! An append-only transaction log anchors DID documents with owner-only
//! update enforcement and carries status lists for credential revocation.
//! Every record embeds the hash of its predecessor; replaying the persisted
//! log verifies the chain. Multi-party governance is modeled by the
//! authorization rules, not by consensus.

mod client;
mod ledger;
mod server;

pub use client::{VdrClient, VdrMethodHandler, VdrStatusChecker, DEFAULT_VDR_TIMEOUT};
pub use ledger::{
    status_create_payload, status_set_payload, Ledger, LedgerTransaction, StatusList, TxKind,
};
pub use server::{serve, VdrServer, VdrServerHandle};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VdrError {
    #[error("DID already anchored")]
    AlreadyAnchored,
    #[error("signature does not verify")]
    BadSignature,
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("not found")]
    NotFound,
    #[error("version conflict: current {current}, proposed {proposed}")]
    VersionConflict { current: u64, proposed: u64 },
    #[error("signer key is not authorized")]
    UnauthorizedKey,
    #[error("status list id already exists")]
    DuplicateList,
    #[error("status index out of range")]
    IndexOutOfRange,
    #[error("corrupt log: {0}")]
    CorruptLog(String),
    #[error("bind failure: {0}")]
    BindFailure(String),
    #[error("registry unavailable: {0}")]
    Unavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl VdrError {
    /// Stable machine-readable code, used on the wire and by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            VdrError::AlreadyAnchored => "already_anchored",
            VdrError::BadSignature => "bad_signature",
            VdrError::MalformedDocument(_) => "malformed_document",
            VdrError::NotFound => "not_found",
            VdrError::VersionConflict { .. } => "version_conflict",
            VdrError::UnauthorizedKey => "unauthorized_key",
            VdrError::DuplicateList => "duplicate_list",
            VdrError::IndexOutOfRange => "index_out_of_range",
            VdrError::CorruptLog(_) => "corrupt_log",
            VdrError::BindFailure(_) => "bind_failure",
            VdrError::Unavailable(_) => "registry_unavailable",
            VdrError::Protocol(_) => "protocol_error",
            VdrError::Io(_) => "io_failure",
        }
    }

    pub(crate) fn from_code(code: &str, message: &str) -> Self {
        match code {
            "already_anchored" => VdrError::AlreadyAnchored,
            "bad_signature" => VdrError::BadSignature,
            "malformed_document" => VdrError::MalformedDocument(message.to_string()),
            "not_found" => VdrError::NotFound,
            "unauthorized_key" => VdrError::UnauthorizedKey,
            "duplicate_list" => VdrError::DuplicateList,
            "index_out_of_range" => VdrError::IndexOutOfRange,
            "version_conflict" => VdrError::VersionConflict {
                current: 0,
                proposed: 0,
            },
            other => VdrError::Protocol(format!("{other}: {message}")),
        }
    }
}

/// Artificial service latency, applied server-side so that timing effects
/// include wire round trips.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub read_delay_ms: u64,
    pub write_delay_ms: u64,
    /// Uniform jitter applied as `± jitter_ms` to each delay.
    pub jitter_ms: u64,
}

impl LatencyProfile {
    pub fn reads(read_delay_ms: u64) -> Self {
        Self {
            read_delay_ms,
            ..Self::default()
        }
    }

    fn jittered(&self, base_ms: u64) -> std::time::Duration {
        let ms = if self.jitter_ms == 0 {
            base_ms as i64
        } else {
            let j = self.jitter_ms as i64;
            base_ms as i64 + rand::thread_rng().gen_range(-j..=j)
        };
        std::time::Duration::from_millis(ms.max(0) as u64)
    }

    pub(crate) fn read_pause(&self) -> std::time::Duration {
        self.jittered(self.read_delay_ms)
    }

    pub(crate) fn write_pause(&self) -> std::time::Duration {
        self.jittered(self.write_delay_ms)
    }
}
