//! TLS 1.3 sessions with DID Link authentication.
//!
//! The TLS state machine, key schedule, and record protection are delegated
//! to rustls; this module supplies certificates, installs the custom peer
//! verification procedure, and exchanges the negotiation preamble. rustls
//! exposes no raw hello-extension hooks and refuses non-hostname SNI values,
//! so the encoded extensions ride in a preamble frame (type 0x05) exchanged
//! as the first post-handshake frames; the server therefore presents its
//! default identity during the handshake and SNI acts as confirmation — a
//! mismatch aborts the session with `unknown_server_did` (or fails the
//! client's expected-DID check during the handshake itself).

mod verify;

pub use verify::{provider, verify_peer, TrustRoots, VerifyContext, VerifySide};

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer, ServerName};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cert::{BindingVerdict, CertBundle, CertKind, TLS_SERVER_NAME};
use crate::did::{CachePolicy, Did, Resolver};
use crate::identity::frame::{
    encode_frame, read_frame, Frame, FT_ERROR, FT_NEGOTIATION_PREAMBLE,
};
use crate::negotiation::{
    negotiate, ClientAuthMode, EncodedExtension, NegotiationAgreement, NegotiationOffer,
    Rejection, ServerAuthMode, ServerCaps,
};
use crate::util::{b64, b64_decode};
use verify::{CaptureHandle, DidLinkClientVerifier, DidLinkServerVerifier, VerifierCore};

pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
pub const IDENTIFICATION_TIMEOUT: Duration = Duration::from_secs(15);

/// How the negotiation extensions actually traveled; recorded in reports so
/// measurements stay honest about the transport.
pub const EXTENSION_TRANSPORT: &str = "post_handshake_preamble";

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("handshake rejected: {0}")]
    HandshakeRejected(String),
    #[error("DID binding invalid: {0}")]
    BindingInvalid(String),
    #[error("resolution failed: {0}")]
    ResolutionFailed(String),
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("timed out")]
    Timeout,
    #[error("channel misconfigured: {0}")]
    Config(String),
}

impl ChannelError {
    pub fn code(&self) -> &'static str {
        match self {
            ChannelError::HandshakeRejected(_) => "handshake_rejected",
            ChannelError::BindingInvalid(_) => "binding_invalid",
            ChannelError::ResolutionFailed(_) => "resolution_failed",
            ChannelError::TransportError(_) => "transport_error",
            ChannelError::Timeout => "timeout",
            ChannelError::Config(_) => "config_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthMode {
    Anonymous,
    CertChain,
    Did,
    DidPendingVc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionSourceKind {
    Cache,
    MethodHandler,
    NoneNeeded,
}

/// How (and as whom) the peer authenticated, with timing breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct PeerAuthResult {
    pub mode: AuthMode,
    pub peer_did: Option<Did>,
    pub binding: Option<BindingVerdict>,
    pub resolution_source: Option<ResolutionSourceKind>,
    pub handshake_ms: f64,
    /// 0 when resolution was served from cache or not needed.
    pub resolve_ms: f64,
}

impl PeerAuthResult {
    fn anonymous() -> Self {
        Self {
            mode: AuthMode::Anonymous,
            peer_did: None,
            binding: None,
            resolution_source: None,
            handshake_ms: 0.0,
            resolve_ms: 0.0,
        }
    }
}

/// Wire-byte accounting shared with the stream wrapper.
#[derive(Debug, Clone, Default)]
pub struct ByteCounters {
    read: Arc<AtomicU64>,
    written: Arc<AtomicU64>,
}

impl ByteCounters {
    pub fn bytes_read(&self) -> u64 {
        self.read.load(Ordering::Relaxed)
    }

    pub fn bytes_written(&self) -> u64 {
        self.written.load(Ordering::Relaxed)
    }
}

struct CountingStream {
    inner: TcpStream,
    counters: ByteCounters,
}

impl Read for CountingStream {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.counters.read.fetch_add(n as u64, Ordering::Relaxed);
        Ok(n)
    }
}

impl Write for CountingStream {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.counters
            .written
            .fetch_add(n as u64, Ordering::Relaxed);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

enum TlsStream {
    Client(rustls::StreamOwned<rustls::ClientConnection, CountingStream>),
    Server(rustls::StreamOwned<rustls::ServerConnection, CountingStream>),
}

impl TlsStream {
    fn sock(&self) -> &TcpStream {
        match self {
            TlsStream::Client(s) => &s.sock.inner,
            TlsStream::Server(s) => &s.sock.inner,
        }
    }
}

impl Read for TlsStream {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        match self {
            TlsStream::Client(s) => s.read(buf),
            TlsStream::Server(s) => s.read(buf),
        }
    }
}

impl Write for TlsStream {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        match self {
            TlsStream::Client(s) => s.write(buf),
            TlsStream::Server(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> std::io::Result<()> {
        match self {
            TlsStream::Client(s) => s.flush(),
            TlsStream::Server(s) => s.flush(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

/// An authenticated TLS 1.3 session. Application data may flow once this
/// exists; the identification sub-layer runs over it first when enabled.
pub struct SecureSession {
    stream: TlsStream,
    pub role: Role,
    pub peer: PeerAuthResult,
    /// Set once the preamble agreement has been exchanged. `connect` leaves
    /// it pending when identification was offered, so the client can emit
    /// its first identification frame without waiting for the server.
    negotiated: Option<NegotiationAgreement>,
    /// The offer as sent (client) or received (server).
    pub offer: NegotiationOffer,
    pub local_did: Option<Did>,
    pub counters: ByteCounters,
    pub session_tickets_bytes: u64,
}

impl SecureSession {
    pub fn negotiated(&self) -> Option<&NegotiationAgreement> {
        self.negotiated.as_ref()
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> std::io::Result<()> {
        self.stream.sock().set_read_timeout(timeout)
    }

    pub(crate) fn send_frame(&mut self, frame: &Frame) -> std::io::Result<()> {
        let bytes = encode_frame(frame);
        self.stream.write_all(&bytes)?;
        self.stream.flush()
    }

    pub(crate) fn recv_frame(&mut self) -> std::io::Result<Frame> {
        read_frame(&mut self.stream)
    }

    pub(crate) fn store_agreement(&mut self, agreement: NegotiationAgreement) {
        if agreement.identification_enabled
            && agreement.server_auth_mode.presents_vc()
            && self.role == Role::Client
            && self.peer.mode == AuthMode::Did
        {
            self.peer.mode = AuthMode::DidPendingVc;
        }
        self.negotiated = Some(agreement);
    }

    /// Waits for the preamble agreement if it is still pending, dispatching
    /// nothing else: only used on paths where no identification frames can
    /// be in flight.
    pub fn await_agreement(&mut self) -> Result<&NegotiationAgreement, ChannelError> {
        if self.negotiated.is_none() {
            let frame = self
                .recv_frame()
                .map_err(|e| map_io_error(e, "awaiting negotiation agreement"))?;
            let agreement = parse_agreement_frame(&frame)?;
            self.store_agreement(agreement);
        }
        Ok(self.negotiated.as_ref().expect("agreement stored"))
    }
}

impl Read for SecureSession {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        self.stream.read(buf)
    }
}

impl Write for SecureSession {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.stream.write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.stream.flush()
    }
}

/// Client-side channel configuration.
pub struct ClientChannelConfig {
    pub identity: Option<CertBundle>,
    pub offer: NegotiationOffer,
    pub resolver: Arc<Resolver>,
    pub cache_policy: CachePolicy,
    /// DER trust anchors for CA-issued peers.
    pub trust_roots: Vec<Vec<u8>>,
    /// Abort unless the server authenticates as exactly this DID.
    pub expected_server_did: Option<Did>,
    /// Run document resolution concurrently with signature verification.
    pub parallel_verification: bool,
    pub handshake_timeout: Duration,
}

impl ClientChannelConfig {
    pub fn new(resolver: Arc<Resolver>) -> Self {
        Self {
            identity: None,
            offer: NegotiationOffer::default(),
            resolver,
            cache_policy: CachePolicy::default(),
            trust_roots: Vec::new(),
            expected_server_did: None,
            parallel_verification: true,
            handshake_timeout: HANDSHAKE_TIMEOUT,
        }
    }
}

/// Server-side channel configuration.
pub struct ServerChannelConfig {
    pub caps: ServerCaps,
    pub client_auth_required: bool,
    pub resolver: Arc<Resolver>,
    pub cache_policy: CachePolicy,
    pub trust_roots: Vec<Vec<u8>>,
    pub parallel_verification: bool,
    pub handshake_timeout: Duration,
}

impl ServerChannelConfig {
    pub fn new(caps: ServerCaps, resolver: Arc<Resolver>) -> Self {
        Self {
            caps,
            client_auth_required: false,
            resolver,
            cache_policy: CachePolicy::default(),
            trust_roots: Vec::new(),
            parallel_verification: true,
            handshake_timeout: HANDSHAKE_TIMEOUT,
        }
    }
}

fn bundle_identity(bundle: &CertBundle) -> Result<(Vec<CertificateDer<'static>>, PrivateKeyDer<'static>), ChannelError> {
    let chain: Vec<CertificateDer<'static>> = bundle
        .presented_chain()
        .into_iter()
        .map(CertificateDer::from)
        .collect();
    let key_der = bundle
        .key
        .to_pkcs8_der()
        .map_err(|e| ChannelError::Config(e.to_string()))?;
    Ok((
        chain,
        PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(key_der)),
    ))
}

fn map_io_error(e: std::io::Error, what: &str) -> ChannelError {
    match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => ChannelError::Timeout,
        _ => ChannelError::TransportError(format!("{what}: {e}")),
    }
}

fn map_handshake_error(e: std::io::Error, capture: &CaptureHandle) -> ChannelError {
    if let Some(err) = capture.take_error() {
        return err;
    }
    if matches!(
        e.kind(),
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
    ) {
        return ChannelError::Timeout;
    }
    if let Some(inner) = e.get_ref().and_then(|i| i.downcast_ref::<rustls::Error>()) {
        return match inner {
            rustls::Error::AlertReceived(alert) => {
                ChannelError::HandshakeRejected(format!("peer alert: {alert:?}"))
            }
            rustls::Error::NoCertificatesPresented => {
                ChannelError::HandshakeRejected("peer presented no certificate".into())
            }
            rustls::Error::InvalidCertificate(reason) => {
                ChannelError::HandshakeRejected(format!("certificate refused: {reason:?}"))
            }
            other => ChannelError::TransportError(other.to_string()),
        };
    }
    ChannelError::TransportError(e.to_string())
}

// Preamble payloads: canonical JSON envelopes around the encoded extension
// payloads. Auth modes are not extensions; on the wire each side learns the
// peer's mode from the certificate presented during the handshake, and the
// agreement envelope echoes the server's resulting mode for classification.
#[derive(Serialize, Deserialize)]
struct PreambleJson {
    kind: String,
    extensions: Vec<ExtensionJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    server_auth_mode: Option<ServerAuthMode>,
}

#[derive(Serialize, Deserialize)]
struct ExtensionJson {
    code: u16,
    payload: String,
}

fn encode_preamble(
    kind: &str,
    extensions: &[EncodedExtension],
    server_auth_mode: Option<ServerAuthMode>,
) -> Vec<u8> {
    let json = PreambleJson {
        kind: kind.to_string(),
        extensions: extensions
            .iter()
            .map(|(code, payload)| ExtensionJson {
                code: *code,
                payload: b64(payload),
            })
            .collect(),
        server_auth_mode,
    };
    serde_json::to_vec(&json).expect("preamble serializes")
}

fn decode_preamble(payload: &[u8]) -> Result<(String, Vec<EncodedExtension>, Option<ServerAuthMode>), ChannelError> {
    let json: PreambleJson = serde_json::from_slice(payload)
        .map_err(|e| ChannelError::TransportError(format!("malformed preamble: {e}")))?;
    let mut extensions = Vec::with_capacity(json.extensions.len());
    for ext in json.extensions {
        let bytes = b64_decode(&ext.payload)
            .map_err(|e| ChannelError::TransportError(format!("malformed preamble: {e}")))?;
        extensions.push((ext.code, bytes));
    }
    Ok((json.kind, extensions, json.server_auth_mode))
}

fn parse_agreement_frame(frame: &Frame) -> Result<NegotiationAgreement, ChannelError> {
    match frame.frame_type {
        FT_NEGOTIATION_PREAMBLE => {
            let (kind, extensions, mode) = decode_preamble(&frame.payload)?;
            if kind != "agreement" {
                return Err(ChannelError::TransportError(format!(
                    "expected agreement preamble, got {kind:?}"
                )));
            }
            let mode = mode.ok_or_else(|| {
                ChannelError::TransportError("agreement preamble lacks server auth mode".into())
            })?;
            NegotiationAgreement::from_extensions(&extensions, mode)
                .map_err(|e| ChannelError::TransportError(e.to_string()))
        }
        FT_ERROR => {
            let code = serde_json::from_slice::<serde_json::Value>(&frame.payload)
                .ok()
                .and_then(|v| v["code"].as_str().map(str::to_string))
                .unwrap_or_else(|| "unknown".into());
            Err(ChannelError::HandshakeRejected(code))
        }
        other => Err(ChannelError::TransportError(format!(
            "unexpected frame type {other:#04x} during negotiation"
        ))),
    }
}

/// Establishes a DID Link session as the client.
pub fn connect(addr: impl ToSocketAddrs, config: &ClientChannelConfig) -> Result<SecureSession, ChannelError> {
    config
        .offer
        .validate()
        .map_err(|e| ChannelError::Config(e.to_string()))?;
    let sock_addr = addr
        .to_socket_addrs()
        .map_err(|e| ChannelError::Config(e.to_string()))?
        .next()
        .ok_or_else(|| ChannelError::Config("endpoint does not resolve".into()))?;
    let tcp = TcpStream::connect_timeout(&sock_addr, config.handshake_timeout)
        .map_err(|e| map_io_error(e, "connect"))?;
    let _ = tcp.set_nodelay(true);
    tcp.set_read_timeout(Some(config.handshake_timeout))
        .map_err(|e| map_io_error(e, "socket setup"))?;

    let counters = ByteCounters::default();
    let stream = CountingStream {
        inner: tcp,
        counters: counters.clone(),
    };

    let trust = Arc::new(TrustRoots::from_der_roots(&config.trust_roots)?);
    let capture = CaptureHandle::new();
    let verifier = Arc::new(DidLinkServerVerifier {
        core: VerifierCore {
            resolver: config.resolver.clone(),
            cache_policy: config.cache_policy,
            trust,
            expected_did: config.expected_server_did.clone(),
            parallel: config.parallel_verification,
            side: VerifySide::Server,
            capture: capture.clone(),
        },
    });

    let builder = rustls::ClientConfig::builder_with_provider(provider())
        .with_protocol_versions(&[&rustls::version::TLS13])
        .map_err(|e| ChannelError::Config(e.to_string()))?
        .dangerous()
        .with_custom_certificate_verifier(verifier);
    let tls_config = match (&config.identity, config.offer.client_auth_mode) {
        (_, ClientAuthMode::None) | (None, _) => builder.with_no_client_auth(),
        (Some(bundle), _) => {
            let (chain, key) = bundle_identity(bundle)?;
            builder
                .with_client_auth_cert(chain, key)
                .map_err(|e| ChannelError::Config(e.to_string()))?
        }
    };

    let server_name = ServerName::try_from(TLS_SERVER_NAME).expect("constant server name");
    let conn = rustls::ClientConnection::new(Arc::new(tls_config), server_name)
        .map_err(|e| ChannelError::Config(e.to_string()))?;
    let mut tls = rustls::StreamOwned::new(conn, stream);

    let started = Instant::now();
    while tls.conn.is_handshaking() {
        if started.elapsed() > config.handshake_timeout {
            return Err(ChannelError::Timeout);
        }
        if let Err(e) = tls.conn.complete_io(&mut tls.sock) {
            capture.finalize(Utc::now()).err(); // surface pending binding errors first
            return Err(map_handshake_error(e, &capture));
        }
    }
    capture.finalize(Utc::now())?;
    let handshake_ms = started.elapsed().as_secs_f64() * 1e3;

    let mut peer = capture
        .take_peer()
        .ok_or_else(|| ChannelError::TransportError("verifier produced no result".into()))?;
    peer.handshake_ms = handshake_ms;

    let local_did = match config.offer.client_auth_mode {
        ClientAuthMode::None => None,
        _ => config.identity.as_ref().and_then(|b| b.did.clone()),
    };

    let mut session = SecureSession {
        stream: TlsStream::Client(tls),
        role: Role::Client,
        peer,
        negotiated: None,
        offer: config.offer.clone(),
        local_did,
        counters,
        session_tickets_bytes: 0,
    };
    session
        .set_read_timeout(Some(IDENTIFICATION_TIMEOUT))
        .map_err(|e| map_io_error(e, "socket setup"))?;

    // Negotiation preamble. When identification was offered the client does
    // not wait for the agreement here — it emits its first identification
    // frame immediately, mirroring a client that starts identifying while
    // the server is still finishing the handshake.
    let extensions = session
        .offer
        .to_extensions()
        .map_err(|e| ChannelError::Config(e.to_string()))?;
    let payload = encode_preamble("offer", &extensions, None);
    session
        .send_frame(&Frame::new(FT_NEGOTIATION_PREAMBLE, 0, payload))
        .map_err(|e| map_io_error(e, "sending preamble"))?;
    if session.offer.presentation_protocols.is_empty() {
        session.await_agreement()?;
    }
    Ok(session)
}

/// A listener accepting DID Link sessions.
pub struct ChannelServer {
    listener: TcpListener,
}

impl ChannelServer {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self, ChannelError> {
        let listener = TcpListener::bind(addr)
            .map_err(|e| ChannelError::Config(format!("bind: {e}")))?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    /// Accepts and authenticates one session.
    pub fn accept(&self, config: &ServerChannelConfig) -> Result<SecureSession, ChannelError> {
        let (tcp, _) = self
            .listener
            .accept()
            .map_err(|e| map_io_error(e, "accept"))?;
        self.serve_stream(tcp, config)
    }

    fn serve_stream(
        &self,
        tcp: TcpStream,
        config: &ServerChannelConfig,
    ) -> Result<SecureSession, ChannelError> {
        let _ = tcp.set_nodelay(true);
        tcp.set_read_timeout(Some(config.handshake_timeout))
            .map_err(|e| map_io_error(e, "socket setup"))?;
        let counters = ByteCounters::default();
        let stream = CountingStream {
            inner: tcp,
            counters: counters.clone(),
        };

        let trust = Arc::new(TrustRoots::from_der_roots(&config.trust_roots)?);
        let capture = CaptureHandle::new();
        let builder = rustls::ServerConfig::builder_with_provider(provider())
            .with_protocol_versions(&[&rustls::version::TLS13])
            .map_err(|e| ChannelError::Config(e.to_string()))?;
        let identity = &config.caps.default_identity;
        let (chain, key) = bundle_identity(identity)?;
        let mut tls_config = if config.client_auth_required {
            let verifier = Arc::new(DidLinkClientVerifier {
                core: VerifierCore {
                    resolver: config.resolver.clone(),
                    cache_policy: config.cache_policy,
                    trust,
                    expected_did: None,
                    parallel: config.parallel_verification,
                    side: VerifySide::Client,
                    capture: capture.clone(),
                },
            });
            builder
                .with_client_cert_verifier(verifier)
                .with_single_cert(chain, key)
                .map_err(|e| ChannelError::Config(e.to_string()))?
        } else {
            builder
                .with_no_client_auth()
                .with_single_cert(chain, key)
                .map_err(|e| ChannelError::Config(e.to_string()))?
        };
        // Two tickets for potential session resumption, counted below.
        tls_config.send_tls13_tickets = 2;

        let conn = rustls::ServerConnection::new(Arc::new(tls_config))
            .map_err(|e| ChannelError::Config(e.to_string()))?;
        let mut tls = rustls::StreamOwned::new(conn, stream);

        let started = Instant::now();
        while tls.conn.is_handshaking() {
            if started.elapsed() > config.handshake_timeout {
                return Err(ChannelError::Timeout);
            }
            if let Err(e) = tls.conn.complete_io(&mut tls.sock) {
                capture.finalize(Utc::now()).err();
                return Err(map_handshake_error(e, &capture));
            }
        }
        capture.finalize(Utc::now())?;
        let handshake_ms = started.elapsed().as_secs_f64() * 1e3;

        // Session tickets are queued once the client Finished is processed;
        // flush and attribute those bytes.
        let before_tickets = counters.bytes_written();
        while tls.conn.wants_write() {
            tls.conn
                .write_tls(&mut tls.sock)
                .map_err(|e| map_io_error(e, "flushing tickets"))?;
        }
        let session_tickets_bytes = counters.bytes_written() - before_tickets;

        let mut peer = if config.client_auth_required {
            capture
                .take_peer()
                .ok_or_else(|| ChannelError::TransportError("verifier produced no result".into()))?
        } else {
            PeerAuthResult::anonymous()
        };
        peer.handshake_ms = handshake_ms;

        let mut session = SecureSession {
            stream: TlsStream::Server(tls),
            role: Role::Server,
            peer,
            negotiated: None,
            offer: NegotiationOffer::default(),
            local_did: identity.did.clone(),
            counters,
            session_tickets_bytes,
        };
        session
            .set_read_timeout(Some(IDENTIFICATION_TIMEOUT))
            .map_err(|e| map_io_error(e, "socket setup"))?;

        // Read the client's preamble and run the negotiation.
        let frame = session
            .recv_frame()
            .map_err(|e| map_io_error(e, "awaiting preamble"))?;
        if frame.frame_type != FT_NEGOTIATION_PREAMBLE {
            return Err(ChannelError::TransportError(format!(
                "expected preamble, got frame type {:#04x}",
                frame.frame_type
            )));
        }
        let (kind, extensions, _) = decode_preamble(&frame.payload)?;
        if kind != "offer" {
            return Err(ChannelError::TransportError(format!(
                "expected offer preamble, got {kind:?}"
            )));
        }
        // The client's auth mode is implied by what it presented during the
        // handshake; the distinction between plain DID and DID+VC does not
        // change any agreement field.
        let inferred_mode = match session.peer.mode {
            AuthMode::Anonymous => ClientAuthMode::None,
            AuthMode::CertChain => ClientAuthMode::Cert,
            AuthMode::Did | AuthMode::DidPendingVc => ClientAuthMode::Did,
        };
        let offer = NegotiationOffer::from_extensions(&extensions, inferred_mode)
            .map_err(|e| ChannelError::TransportError(e.to_string()))?;

        let agreement = match negotiate(&offer, &config.caps) {
            Ok(agreement) => agreement,
            Err(rejection) => {
                self.send_rejection(&mut session, &rejection);
                return Err(ChannelError::HandshakeRejected(rejection.code().into()));
            }
        };
        // With the preamble transport the handshake already presented the
        // default identity; an SNI naming any other identity cannot be
        // honored retroactively.
        if offer.sni_present() {
            let presented = &config.caps.default_identity;
            let matches = match (&offer.target_server_did, &offer.target_server_name) {
                (Some(did), _) => presented.did.as_ref() == Some(did),
                (None, Some(name)) => {
                    presented.did.is_none()
                        && crate::negotiation::certificate_common_name(&presented.certificate_der)
                            .as_deref()
                            == Some(name.as_str())
                }
                (None, None) => true,
            };
            if !matches {
                let rejection = Rejection::UnknownServerDid;
                self.send_rejection(&mut session, &rejection);
                return Err(ChannelError::HandshakeRejected(rejection.code().into()));
            }
        }

        let reply_extensions = agreement
            .to_extensions()
            .map_err(|e| ChannelError::Config(e.to_string()))?;
        let payload = encode_preamble("agreement", &reply_extensions, Some(agreement.server_auth_mode));
        session
            .send_frame(&Frame::new(FT_NEGOTIATION_PREAMBLE, 0, payload))
            .map_err(|e| map_io_error(e, "sending agreement"))?;

        if agreement.identification_enabled && session.peer.mode == AuthMode::Did {
            // Every matrix row with an identified DID client is a +VC client.
            session.peer.mode = AuthMode::DidPendingVc;
        }
        session.offer = offer;
        session.negotiated = Some(agreement);
        Ok(session)
    }

    fn send_rejection(&self, session: &mut SecureSession, rejection: &Rejection) {
        let payload = serde_json::to_vec(&serde_json::json!({
            "code": rejection.code(),
            "message": rejection.to_string(),
        }))
        .expect("rejection serializes");
        let _ = session.send_frame(&Frame::new(FT_ERROR, 0, payload));
    }
}

/// True when this bundle authenticates as a DID (used to pick offer modes).
pub fn bundle_is_did(bundle: &CertBundle) -> bool {
    bundle.kind == CertKind::DidSelfIssued
}
