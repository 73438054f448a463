//! Registry client and its resolver/status integrations.

use std::net::TcpStream;
use std::time::Duration;

use serde_json::json;

use super::server::{read_frame, write_frame, WireResponse};
use super::VdrError;
use crate::did::{Did, DidDocument, MethodHandler, ResolveError};
use crate::util::b64;

/// A handler transport failure surfaces as `RegistryUnavailable`, never as
/// `NotFound` — the two have distinct security meaning.
pub const DEFAULT_VDR_TIMEOUT: Duration = Duration::from_secs(5);

/// Talks the registry wire protocol. One connection per request keeps the
/// client trivially safe for concurrent use.
#[derive(Debug, Clone)]
pub struct VdrClient {
    addr: String,
    timeout: Duration,
}

impl VdrClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            timeout: DEFAULT_VDR_TIMEOUT,
        }
    }

    pub fn with_timeout(addr: impl Into<String>, timeout: Duration) -> Self {
        Self {
            addr: addr.into(),
            timeout,
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn request(&self, body: serde_json::Value) -> Result<serde_json::Value, VdrError> {
        let addr = self
            .addr
            .parse()
            .map_err(|e| VdrError::Unavailable(format!("bad address {:?}: {e}", self.addr)))?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout)
            .map_err(|e| VdrError::Unavailable(format!("{}: {e}", self.addr)))?;
        stream
            .set_read_timeout(Some(self.timeout))
            .and_then(|_| stream.set_write_timeout(Some(self.timeout)))
            .map_err(|e| VdrError::Unavailable(e.to_string()))?;
        let _ = stream.set_nodelay(true);

        let bytes = serde_json::to_vec(&body).expect("request serializes");
        write_frame(&mut stream, &bytes).map_err(|e| VdrError::Unavailable(e.to_string()))?;
        let reply = read_frame(&mut stream).map_err(|e| VdrError::Unavailable(e.to_string()))?;
        let response: WireResponse = serde_json::from_slice(&reply)
            .map_err(|e| VdrError::Protocol(format!("malformed response: {e}")))?;
        if response.ok {
            Ok(response.result.unwrap_or(serde_json::Value::Null))
        } else {
            Err(VdrError::from_code(
                response.error.as_deref().unwrap_or("protocol_error"),
                response.message.as_deref().unwrap_or(""),
            ))
        }
    }

    pub fn anchor(&self, document: &DidDocument, signature: &[u8]) -> Result<u64, VdrError> {
        let result = self.request(json!({
            "op": "anchor",
            "document": document,
            "signature": b64(signature),
        }))?;
        Ok(result["seq"].as_u64().unwrap_or_default())
    }

    pub fn update(
        &self,
        did: &Did,
        document: &DidDocument,
        signature: &[u8],
        signer_key_id: &str,
    ) -> Result<u64, VdrError> {
        let result = self.request(json!({
            "op": "update",
            "did": did,
            "document": document,
            "signature": b64(signature),
            "signer_key_id": signer_key_id,
        }))?;
        Ok(result["seq"].as_u64().unwrap_or_default())
    }

    pub fn lookup(&self, did: &Did) -> Result<DidDocument, VdrError> {
        let result = self.request(json!({"op": "lookup", "did": did}))?;
        serde_json::from_value(result).map_err(|e| VdrError::Protocol(e.to_string()))
    }

    pub fn create_status_list(
        &self,
        list_id: &str,
        owner: &Did,
        size: u64,
        signature: &[u8],
    ) -> Result<u64, VdrError> {
        let result = self.request(json!({
            "op": "status_create",
            "list_id": list_id,
            "owner": owner,
            "size": size,
            "signature": b64(signature),
        }))?;
        Ok(result["seq"].as_u64().unwrap_or_default())
    }

    pub fn set_status(
        &self,
        list_id: &str,
        index: u64,
        revoked: bool,
        signature: &[u8],
    ) -> Result<u64, VdrError> {
        let result = self.request(json!({
            "op": "status_set",
            "list_id": list_id,
            "index": index,
            "revoked": revoked,
            "signature": b64(signature),
        }))?;
        Ok(result["seq"].as_u64().unwrap_or_default())
    }

    pub fn get_status(&self, list_id: &str, index: u64) -> Result<bool, VdrError> {
        let result = self.request(json!({
            "op": "status_get",
            "list_id": list_id,
            "index": index,
        }))?;
        Ok(result["revoked"].as_bool().unwrap_or_default())
    }

    pub fn status(&self) -> Result<serde_json::Value, VdrError> {
        self.request(json!({"op": "status"}))
    }
}

/// Resolver handler for `did:vdrsim`.
pub struct VdrMethodHandler {
    client: VdrClient,
}

impl VdrMethodHandler {
    pub fn new(client: VdrClient) -> Self {
        Self { client }
    }
}

impl MethodHandler for VdrMethodHandler {
    fn method(&self) -> &str {
        "vdrsim"
    }

    fn resolve(&self, did: &Did) -> Result<DidDocument, ResolveError> {
        match self.client.lookup(did) {
            Ok(doc) => Ok(doc),
            Err(VdrError::NotFound) => Err(ResolveError::NotFound(did.to_string())),
            Err(e) => Err(ResolveError::RegistryUnavailable(e.to_string())),
        }
    }
}

/// Status checking backed by the registry, for credential verification.
pub struct VdrStatusChecker {
    client: VdrClient,
}

impl VdrStatusChecker {
    pub fn new(client: VdrClient) -> Self {
        Self { client }
    }
}

impl crate::vc::StatusChecker for VdrStatusChecker {
    fn is_revoked(&self, list_id: &str, index: u64) -> Result<bool, VdrError> {
        self.client.get_status(list_id, index)
    }
}
