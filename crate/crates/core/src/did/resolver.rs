//! DID resolution through pluggable method handlers, with a freshness-policy
//! cache.
//!
//! The resolver is safe for concurrent use; cache updates are atomic per DID.
//! Method handlers may block (the `vdrsim` handler talks to the registry over
//! TCP), so callers that need bounded latency use [`CacheMode::CacheOnly`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, Duration as ChronoDuration, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{derive_key_document, Did, DidDocument};

#[derive(Debug, Error)]
pub enum ResolveError {
    #[error("no handler registered for DID method {0:?}")]
    UnsupportedMethod(String),
    #[error("no document found for {0}")]
    NotFound(String),
    #[error("cache-only resolution missed for {0}")]
    CacheMiss(String),
    #[error("registry unavailable: {0}")]
    RegistryUnavailable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    PreferCache,
    ForceResolve,
    CacheOnly,
}

/// Freshness policy for cached documents. The paper leaves the permissible
/// cache age to "local security policies"; the default here is 300 seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachePolicy {
    pub max_age_secs: u64,
    pub mode: CacheMode,
}

impl CachePolicy {
    pub const DEFAULT_MAX_AGE_SECS: u64 = 300;

    pub fn prefer_cache(max_age_secs: u64) -> Self {
        Self {
            max_age_secs,
            mode: CacheMode::PreferCache,
        }
    }

    pub fn force_resolve() -> Self {
        Self {
            max_age_secs: Self::DEFAULT_MAX_AGE_SECS,
            mode: CacheMode::ForceResolve,
        }
    }

    pub fn cache_only() -> Self {
        Self {
            max_age_secs: Self::DEFAULT_MAX_AGE_SECS,
            mode: CacheMode::CacheOnly,
        }
    }
}

impl Default for CachePolicy {
    fn default() -> Self {
        Self::prefer_cache(Self::DEFAULT_MAX_AGE_SECS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionSource {
    Cache,
    MethodHandler,
}

#[derive(Debug, Clone)]
pub struct ResolutionResult {
    pub document: DidDocument,
    pub source: ResolutionSource,
    pub resolved_in_ms: f64,
    pub fresh_until: DateTime<Utc>,
}

/// Resolves documents for one DID method. Implementations must be cheap to
/// share across threads.
pub trait MethodHandler: Send + Sync {
    fn method(&self) -> &str;
    fn resolve(&self, did: &Did) -> Result<DidDocument, ResolveError>;
}

/// Handler for the registry-free `key`/`peer` methods: the document is
/// decoded from the identifier itself.
pub struct KeyMethodHandler {
    method: &'static str,
}

impl KeyMethodHandler {
    pub fn key() -> Self {
        Self { method: "key" }
    }

    pub fn peer() -> Self {
        Self { method: "peer" }
    }
}

impl MethodHandler for KeyMethodHandler {
    fn method(&self) -> &str {
        self.method
    }

    fn resolve(&self, did: &Did) -> Result<DidDocument, ResolveError> {
        let (derived, doc) = derive_key_document(self.method, &{
            super::key_from_did(did).map_err(|e| ResolveError::NotFound(e.to_string()))?
        })
        .map_err(|e| ResolveError::NotFound(e.to_string()))?;
        if &derived != did {
            return Err(ResolveError::NotFound(format!(
                "identifier {did} does not re-derive"
            )));
        }
        Ok(doc)
    }
}

struct CacheEntry {
    document: DidDocument,
    inserted_at: DateTime<Utc>,
    fresh_until: DateTime<Utc>,
}

#[derive(Debug, Default, Clone, Copy, Serialize)]
pub struct ResolverStats {
    pub handler_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub force_resolves: u64,
}

pub struct Resolver {
    handlers: Mutex<HashMap<String, Arc<dyn MethodHandler>>>,
    cache: Mutex<HashMap<String, CacheEntry>>,
    handler_calls: AtomicU64,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
    force_resolves: AtomicU64,
}

impl Default for Resolver {
    fn default() -> Self {
        Self::new()
    }
}

impl Resolver {
    /// Empty resolver with no handlers registered.
    pub fn new() -> Self {
        Self {
            handlers: Mutex::new(HashMap::new()),
            cache: Mutex::new(HashMap::new()),
            handler_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            cache_misses: AtomicU64::new(0),
            force_resolves: AtomicU64::new(0),
        }
    }

    /// Resolver with the registry-free built-ins (`key`, `peer`) registered.
    pub fn with_builtins() -> Self {
        let r = Self::new();
        r.register(Arc::new(KeyMethodHandler::key()));
        r.register(Arc::new(KeyMethodHandler::peer()));
        r
    }

    pub fn register(&self, handler: Arc<dyn MethodHandler>) {
        self.handlers
            .lock()
            .insert(handler.method().to_string(), handler);
    }

    pub fn stats(&self) -> ResolverStats {
        ResolverStats {
            handler_calls: self.handler_calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            cache_misses: self.cache_misses.load(Ordering::Relaxed),
            force_resolves: self.force_resolves.load(Ordering::Relaxed),
        }
    }

    pub fn handler_calls(&self) -> u64 {
        self.handler_calls.load(Ordering::Relaxed)
    }

    /// Pre-populates the cache, e.g. from a document file. Subsequent
    /// `prefer_cache`/`cache_only` resolutions within the freshness window
    /// return this document without handler contact.
    pub fn seed_cache(&self, document: DidDocument, fresh_until: DateTime<Utc>) {
        let mut cache = self.cache.lock();
        cache.insert(
            document.id.to_string(),
            CacheEntry {
                document,
                inserted_at: Utc::now(),
                fresh_until,
            },
        );
    }

    pub fn evict(&self, did: &Did) {
        self.cache.lock().remove(did.as_str());
    }

    pub fn resolve(&self, did: &Did, policy: CachePolicy) -> Result<ResolutionResult, ResolveError> {
        let started = Instant::now();
        let now = Utc::now();
        match policy.mode {
            CacheMode::CacheOnly => {
                if let Some(hit) = self.cache_lookup(did, policy, now) {
                    self.cache_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(ResolutionResult {
                        fresh_until: hit.1,
                        document: hit.0,
                        source: ResolutionSource::Cache,
                        resolved_in_ms: ms_since(started),
                    });
                }
                Err(ResolveError::CacheMiss(did.to_string()))
            }
            CacheMode::PreferCache => {
                if let Some(hit) = self.cache_lookup(did, policy, now) {
                    self.cache_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(ResolutionResult {
                        fresh_until: hit.1,
                        document: hit.0,
                        source: ResolutionSource::Cache,
                        resolved_in_ms: ms_since(started),
                    });
                }
                self.cache_misses.fetch_add(1, Ordering::Relaxed);
                self.resolve_via_handler(did, policy, started)
            }
            CacheMode::ForceResolve => {
                self.force_resolves.fetch_add(1, Ordering::Relaxed);
                self.resolve_via_handler(did, policy, started)
            }
        }
    }

    fn cache_lookup(
        &self,
        did: &Did,
        policy: CachePolicy,
        now: DateTime<Utc>,
    ) -> Option<(DidDocument, DateTime<Utc>)> {
        let cache = self.cache.lock();
        let entry = cache.get(did.as_str())?;
        let age_ok = now - entry.inserted_at < ChronoDuration::seconds(policy.max_age_secs as i64);
        if now < entry.fresh_until && age_ok {
            Some((entry.document.clone(), entry.fresh_until))
        } else {
            None
        }
    }

    fn resolve_via_handler(
        &self,
        did: &Did,
        policy: CachePolicy,
        started: Instant,
    ) -> Result<ResolutionResult, ResolveError> {
        let handler = {
            let handlers = self.handlers.lock();
            handlers
                .get(did.method())
                .cloned()
                .ok_or_else(|| ResolveError::UnsupportedMethod(did.method().to_string()))?
        };
        self.handler_calls.fetch_add(1, Ordering::Relaxed);
        let document = handler.resolve(did)?;
        let fresh_until = Utc::now() + ChronoDuration::seconds(policy.max_age_secs as i64);
        self.seed_cache(document.clone(), fresh_until);
        Ok(ResolutionResult {
            document,
            source: ResolutionSource::MethodHandler,
            resolved_in_ms: ms_since(started),
            fresh_until,
        })
    }
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}
