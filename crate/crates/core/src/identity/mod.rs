//! The post-handshake identification sub-layer.
//!
//! Two logical flows run over one session: flow 0 carries the client's
//! verification of the server, flow 1 the server's verification of the
//! client. Each flow steps through request → presentation → result →
//! complete; a side without a request closes its flow immediately with an
//! identification-complete frame. In parallel mode (the default) both flows
//! interleave on the session's single writer, frames staying atomic.

pub mod frame;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cert::{KeyPair, TLS_SERVER_NAME};
use crate::channel::{ChannelError, Role, SecureSession};
use crate::did::{Did, Resolver};
use crate::util::{b64url, b64url_decode};
use crate::vc::{
    derive_presentation, verify_presentation, HolderBindingRequest, Presentation, SdJwtCredential,
    StatusChecker, VcError, VerifyPolicy,
};
use frame::{
    Frame, FLOW_CLIENT_VERIFIES, FLOW_SERVER_VERIFIES, FT_ERROR, FT_IDENTIFICATION_COMPLETE,
    FT_NEGOTIATION_PREAMBLE, FT_PRESENTATION, FT_PRESENTATION_REQUEST, FT_RESULT,
};

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("verification failed: {0}")]
    VerificationFailed(#[from] VcError),
    #[error("peer refused to present")]
    PeerRefused,
    #[error("identification timed out")]
    Timeout,
    #[error("session rejected: {0}")]
    Rejected(String),
    #[error("transport: {0}")]
    Transport(String),
}

impl IdentError {
    pub fn code(&self) -> &'static str {
        match self {
            IdentError::ProtocolViolation(_) => "protocol_violation",
            IdentError::VerificationFailed(e) => e.code(),
            IdentError::PeerRefused => "peer_refused",
            IdentError::Timeout => "timeout",
            IdentError::Rejected(_) => "handshake_rejected",
            IdentError::Transport(_) => "transport_error",
        }
    }
}

/// A verifier's demand: which claims, from which issuers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PresentationRequest {
    pub request_id: String,
    pub required_claims: Vec<String>,
    pub accepted_issuers: Vec<Did>,
    /// 16 fresh random bytes; binds any holder proof to this request.
    pub nonce: Vec<u8>,
}

impl PresentationRequest {
    pub fn new(required_claims: Vec<String>, accepted_issuers: Vec<Did>) -> Self {
        let mut nonce = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut nonce);
        let mut id = [0u8; 8];
        rand::thread_rng().fill_bytes(&mut id);
        Self {
            request_id: hex::encode(id),
            required_claims,
            accepted_issuers,
            nonce: nonce.to_vec(),
        }
    }
}

/// A credential this side can present, with the key needed for holder
/// binding when the credential subject is not the channel DID.
#[derive(Clone)]
pub struct HeldCredential {
    pub credential: SdJwtCredential,
    pub holder_key: Option<KeyPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentificationMode {
    Parallel,
    ClientFirst,
    ServerFirst,
}

pub struct RoleConfig {
    pub credentials: Vec<HeldCredential>,
    /// Set when this side wants to verify the peer.
    pub request: Option<PresentationRequest>,
    pub mode: IdentificationMode,
    pub resolver: Arc<Resolver>,
    pub status_checker: Arc<dyn StatusChecker>,
    pub timeout: Duration,
}

impl RoleConfig {
    pub fn new(resolver: Arc<Resolver>) -> Self {
        Self {
            credentials: Vec::new(),
            request: None,
            mode: IdentificationMode::Parallel,
            resolver,
            status_checker: Arc::new(crate::vc::NoStatusChecker),
            timeout: crate::channel::IDENTIFICATION_TIMEOUT,
        }
    }
}

/// Verified identity of the peer, from this side's own request.
#[derive(Debug, Clone, Serialize)]
pub struct IdentificationResult {
    pub peer_claims: BTreeMap<String, Value>,
    pub peer_subject_did: Did,
    pub holder_binding_checked: bool,
    pub duration_ms: f64,
}

#[derive(Serialize, Deserialize)]
struct PresentationJson {
    request_id: String,
    presentation: String,
}

#[derive(Serialize, Deserialize)]
struct ResultJson {
    request_id: String,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    claims: Option<BTreeMap<String, Value>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RequestJson {
    request_id: String,
    required_claims: Vec<String>,
    accepted_issuers: Vec<Did>,
    nonce: String,
}

#[derive(Serialize, Deserialize)]
struct ErrorJson {
    code: String,
    message: String,
}

/// Runs the identification step over an established session. Returns this
/// side's verification result, or `None` when it did not request one.
/// Callers skip this entirely when identification was not negotiated.
pub fn run_identification(
    session: &mut SecureSession,
    config: &RoleConfig,
) -> Result<Option<IdentificationResult>, IdentError> {
    let started = Instant::now();
    if let Some(agreement) = session.negotiated() {
        if !agreement.identification_enabled {
            return Err(IdentError::ProtocolViolation(
                "identification sub-layer was not negotiated".into(),
            ));
        }
    }
    let my_flow = match session.role {
        Role::Client => FLOW_CLIENT_VERIFIES,
        Role::Server => FLOW_SERVER_VERIFIES,
    };
    let peer_flow = match session.role {
        Role::Client => FLOW_SERVER_VERIFIES,
        Role::Server => FLOW_CLIENT_VERIFIES,
    };
    let send_request_now = match config.mode {
        IdentificationMode::Parallel => true,
        IdentificationMode::ClientFirst => session.role == Role::Client,
        IdentificationMode::ServerFirst => session.role == Role::Server,
    };

    let mut runner = Runner {
        session,
        config,
        my_flow,
        peer_flow,
        my_request_sent: false,
        my_result: None,
        my_flow_done: false,
        peer_flow_done: false,
        failure: None,
        deadline: started + config.timeout,
    };
    runner.start(send_request_now)?;
    runner.pump()?;

    if let Some(failure) = runner.failure {
        return Err(failure);
    }
    let duration_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(runner.my_result.map(|mut r| {
        r.duration_ms = duration_ms;
        r
    }))
}

struct Runner<'a> {
    session: &'a mut SecureSession,
    config: &'a RoleConfig,
    my_flow: u8,
    peer_flow: u8,
    my_request_sent: bool,
    my_result: Option<IdentificationResult>,
    my_flow_done: bool,
    peer_flow_done: bool,
    /// First verification failure on this side's own flow; the protocol
    /// still completes so the peer is informed.
    failure: Option<IdentError>,
    deadline: Instant,
}

impl Runner<'_> {
    fn start(&mut self, send_request_now: bool) -> Result<(), IdentError> {
        match &self.config.request {
            None => {
                // Nothing to verify: close this side's flow immediately.
                self.send(FT_IDENTIFICATION_COMPLETE, self.my_flow, b"{}".to_vec())?;
                self.my_flow_done = true;
            }
            Some(request) if send_request_now => {
                self.send_request(request.clone())?;
            }
            Some(_) => {}
        }
        Ok(())
    }

    fn send_request(&mut self, request: PresentationRequest) -> Result<(), IdentError> {
        let json = RequestJson {
            request_id: request.request_id.clone(),
            required_claims: request.required_claims.clone(),
            accepted_issuers: request.accepted_issuers.clone(),
            nonce: b64url(&request.nonce),
        };
        let payload = serde_json::to_vec(&json).expect("request serializes");
        self.send(FT_PRESENTATION_REQUEST, self.my_flow, payload)?;
        self.my_request_sent = true;
        Ok(())
    }

    fn pump(&mut self) -> Result<(), IdentError> {
        while !(self.my_flow_done && self.peer_flow_done) {
            let remaining = self
                .deadline
                .checked_duration_since(Instant::now())
                .ok_or(IdentError::Timeout)?;
            self.session
                .set_read_timeout(Some(remaining))
                .map_err(|e| IdentError::Transport(e.to_string()))?;
            let frame = match self.session.recv_frame() {
                Ok(f) => f,
                Err(e)
                    if matches!(
                        e.kind(),
                        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                    ) =>
                {
                    return Err(IdentError::Timeout)
                }
                Err(e) => return Err(IdentError::Transport(e.to_string())),
            };
            self.dispatch(frame)?;
        }
        Ok(())
    }

    fn dispatch(&mut self, frame: Frame) -> Result<(), IdentError> {
        match frame.frame_type {
            FT_NEGOTIATION_PREAMBLE => self.on_agreement(frame),
            FT_PRESENTATION_REQUEST if frame.flow_id == self.peer_flow => {
                self.on_request(frame.payload)
            }
            FT_PRESENTATION if frame.flow_id == self.my_flow => self.on_presentation(frame.payload),
            FT_RESULT if frame.flow_id == self.peer_flow => Ok(()), // peer's verdict on us
            FT_IDENTIFICATION_COMPLETE if frame.flow_id == self.peer_flow => {
                self.peer_flow_done = true;
                Ok(())
            }
            FT_ERROR => self.on_error(frame.payload),
            other => {
                // Unknown or misdirected frame: answer with a protocol error.
                let payload = serde_json::to_vec(&ErrorJson {
                    code: "protocol_violation".into(),
                    message: format!("unexpected frame type {other:#04x} on flow {}", frame.flow_id),
                })
                .expect("error serializes");
                let _ = self.send(FT_ERROR, frame.flow_id, payload);
                Err(IdentError::ProtocolViolation(format!(
                    "unexpected frame type {other:#04x}"
                )))
            }
        }
    }

    fn on_agreement(&mut self, frame: Frame) -> Result<(), IdentError> {
        // The pipelined client sees the preamble agreement here.
        let agreement = crate::channel::parse_agreement_frame_pub(&frame).map_err(|e| match e {
            ChannelError::HandshakeRejected(code) => IdentError::Rejected(code),
            other => IdentError::Transport(other.to_string()),
        })?;
        if !agreement.identification_enabled {
            return Err(IdentError::ProtocolViolation(
                "peer did not enable the identification sub-layer".into(),
            ));
        }
        self.session.store_agreement(agreement);
        Ok(())
    }

    fn on_request(&mut self, payload: Vec<u8>) -> Result<(), IdentError> {
        let json: RequestJson = serde_json::from_slice(&payload)
            .map_err(|e| self.flow_violation(self.peer_flow, &format!("bad request: {e}")))?;
        let nonce = b64url_decode(&json.nonce)
            .map_err(|e| self.flow_violation(self.peer_flow, &format!("bad nonce: {e}")))?;

        // Pick the first held credential covering the required claims.
        let candidate = self.config.credentials.iter().find(|held| {
            json.required_claims
                .iter()
                .all(|c| held.credential.claim_names().contains(&c.as_str()))
        });
        let Some(held) = candidate else {
            let payload = serde_json::to_vec(&ErrorJson {
                code: "peer_refused".into(),
                message: "no credential covers the requested claims".into(),
            })
            .expect("error serializes");
            self.send(FT_ERROR, self.peer_flow, payload)?;
            return Ok(());
        };

        // Holder binding only when the credential subject is not the DID
        // this side authenticated with on the channel.
        let disclose: Vec<&str> = json.required_claims.iter().map(String::as_str).collect();
        let needs_binding = self.session.local_did.as_ref() != Some(&held.credential.body.subject);
        let binding = if needs_binding {
            let Some(holder_key) = &held.holder_key else {
                let payload = serde_json::to_vec(&ErrorJson {
                    code: "peer_refused".into(),
                    message: "holder binding required but no holder key held".into(),
                })
                .expect("error serializes");
                self.send(FT_ERROR, self.peer_flow, payload)?;
                return Ok(());
            };
            Some(HolderBindingRequest {
                holder_key,
                nonce: &nonce,
                audience: self.verifier_audience(),
            })
        } else {
            None
        };
        let audience_owned = self.verifier_audience().to_string();
        let binding = binding.map(|b| HolderBindingRequest {
            holder_key: b.holder_key,
            nonce: &nonce,
            audience: &audience_owned,
        });
        let presentation = derive_presentation(&held.credential, &disclose, binding)
            .map_err(IdentError::VerificationFailed)?;
        let reply = PresentationJson {
            request_id: json.request_id,
            presentation: presentation.to_compact(),
        };
        self.send(
            FT_PRESENTATION,
            self.peer_flow,
            serde_json::to_vec(&reply).expect("presentation serializes"),
        )
    }

    /// The audience named in a holder proof: the verifier's channel DID when
    /// it authenticated with one, else the placeholder endpoint name.
    fn verifier_audience(&self) -> &str {
        self.session
            .peer
            .peer_did
            .as_ref()
            .map(|d| d.as_str())
            .unwrap_or(TLS_SERVER_NAME)
    }

    fn on_presentation(&mut self, payload: Vec<u8>) -> Result<(), IdentError> {
        let Some(request) = &self.config.request else {
            return Err(self.flow_violation(self.my_flow, "presentation without a request"));
        };
        if !self.my_request_sent {
            return Err(self.flow_violation(self.my_flow, "presentation before request"));
        }
        if self.my_flow_done {
            return Err(self.flow_violation(self.my_flow, "duplicate presentation"));
        }
        let json: PresentationJson = serde_json::from_slice(&payload)
            .map_err(|e| self.flow_violation(self.my_flow, &format!("bad presentation: {e}")))?;
        if json.request_id != request.request_id {
            return Err(self.flow_violation(self.my_flow, "presentation answers unknown request"));
        }

        let outcome = Presentation::from_compact(&json.presentation)
            .map_err(VcError::from_malformed)
            .and_then(|presentation| {
                let my_audience = self
                    .session
                    .local_did
                    .as_ref()
                    .map(|d| d.as_str().to_string())
                    .unwrap_or_else(|| TLS_SERVER_NAME.to_string());
                let policy = VerifyPolicy {
                    expected_subject: self.session.peer.peer_did.as_ref(),
                    accepted_issuers: &request.accepted_issuers,
                    nonce: Some(&request.nonce),
                    audience: Some(&my_audience),
                    now: Utc::now(),
                    cache: crate::did::CachePolicy::default(),
                };
                verify_presentation(
                    &presentation,
                    &policy,
                    &self.config.resolver,
                    self.config.status_checker.as_ref(),
                )
            });

        let (result_json, failure) = match outcome {
            Ok(verified) => {
                self.my_result = Some(IdentificationResult {
                    peer_claims: verified.claims.clone(),
                    peer_subject_did: verified.subject.clone(),
                    holder_binding_checked: verified.holder_binding_checked,
                    duration_ms: 0.0,
                });
                (
                    ResultJson {
                        request_id: request.request_id.clone(),
                        ok: true,
                        claims: Some(verified.claims),
                        error: None,
                    },
                    None,
                )
            }
            Err(e) => (
                ResultJson {
                    request_id: request.request_id.clone(),
                    ok: false,
                    claims: None,
                    error: Some(e.code().to_string()),
                },
                Some(IdentError::VerificationFailed(e)),
            ),
        };
        self.send(
            FT_RESULT,
            self.my_flow,
            serde_json::to_vec(&result_json).expect("result serializes"),
        )?;
        self.send(FT_IDENTIFICATION_COMPLETE, self.my_flow, b"{}".to_vec())?;
        self.my_flow_done = true;
        if self.failure.is_none() {
            self.failure = failure;
        }
        Ok(())
    }

    fn on_error(&mut self, payload: Vec<u8>) -> Result<(), IdentError> {
        let json: ErrorJson = serde_json::from_slice(&payload).unwrap_or(ErrorJson {
            code: "protocol_violation".into(),
            message: "unreadable error frame".into(),
        });
        match json.code.as_str() {
            "peer_refused" => {
                // The peer declines to present; our flow cannot complete.
                if self.failure.is_none() {
                    self.failure = Some(IdentError::PeerRefused);
                }
                self.send(FT_IDENTIFICATION_COMPLETE, self.my_flow, b"{}".to_vec())?;
                self.my_flow_done = true;
                Ok(())
            }
            code => Err(IdentError::ProtocolViolation(format!(
                "peer error: {code}: {}",
                json.message
            ))),
        }
    }

    fn flow_violation(&mut self, flow: u8, message: &str) -> IdentError {
        let payload = serde_json::to_vec(&ErrorJson {
            code: "protocol_violation".into(),
            message: message.to_string(),
        })
        .expect("error serializes");
        let _ = self.send(FT_ERROR, flow, payload);
        IdentError::ProtocolViolation(message.to_string())
    }

    fn send(&mut self, frame_type: u8, flow_id: u8, payload: Vec<u8>) -> Result<(), IdentError> {
        self.session
            .send_frame(&Frame::new(frame_type, flow_id, payload))
            .map_err(|e| IdentError::Transport(e.to_string()))
    }
}

impl VcError {
    fn from_malformed(e: VcError) -> VcError {
        e
    }
}
