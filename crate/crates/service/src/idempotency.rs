//! Stored responses keyed by (org, request id).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::http::StatusCode;
use pathwarden_core::canonical::Digest;
use tokio::sync::OnceCell;

#[derive(Debug, Clone)]
pub struct StoredResponse {
    pub status: StatusCode,
    pub body: Bytes,
    /// Digest of route and payload of the request that produced the response.
    pub fingerprint: Digest,
}

type Key = (String, String);

/// Concurrent duplicates wait on the first request's cell instead of running
/// the operation again. Entries live for the lifetime of the process.
#[derive(Debug, Default)]
pub struct IdempotencyStore {
    slots: Mutex<HashMap<Key, Arc<OnceCell<StoredResponse>>>>,
}

impl IdempotencyStore {
    pub fn slot(&self, org: &str, request_id: &str) -> Arc<OnceCell<StoredResponse>> {
        let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        slots.entry((org.to_string(), request_id.to_string())).or_default().clone()
    }

    /// Drops the entry if it still is `cell`, so the key can be retried.
    pub fn forget(&self, org: &str, request_id: &str, cell: &Arc<OnceCell<StoredResponse>>) {
        let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        let key = (org.to_string(), request_id.to_string());
        if slots.get(&key).is_some_and(|c| Arc::ptr_eq(c, cell)) {
            slots.remove(&key);
        }
    }

    pub fn len(&self) -> usize {
        self.slots.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
