//! The custom peer-verification procedure installed into the host TLS stack.
//!
//! Dispatch is on certificate shape: a DID in the SAN selects the DID path
//! (resolution plus binding check), a chain with no DID goes through
//! standard webpki validation against the configured trust anchors, and a
//! self-signed certificate whose subject CN re-derives from its own key is
//! accepted as a derived-identifier peer.
//!
//! On the DID path the document resolution may run on a separate thread,
//! concurrent with the stack's CertificateVerify processing; outcomes are
//! combined so the result is identical to the sequential order.

use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, TimeZone, Utc};
use parking_lot::Mutex;
use rustls::client::danger::{HandshakeSignatureValid, ServerCertVerified, ServerCertVerifier};
use rustls::crypto::CryptoProvider;
use rustls::pki_types::{CertificateDer, ServerName, UnixTime};
use rustls::server::danger::{ClientCertVerified, ClientCertVerifier};
use rustls::DigitallySignedStruct;

use super::{AuthMode, ChannelError, PeerAuthResult, ResolutionSourceKind};
use crate::cert::{
    derived_identifier, extract_did, validate_did_binding, CertError, TLS_SERVER_NAME,
};
use crate::did::{CachePolicy, Did, ResolutionResult, ResolutionSource, Resolver, ResolveError};

pub(crate) fn provider() -> Arc<CryptoProvider> {
    static PROVIDER: std::sync::OnceLock<Arc<CryptoProvider>> = std::sync::OnceLock::new();
    PROVIDER
        .get_or_init(|| Arc::new(rustls::crypto::ring::default_provider()))
        .clone()
}

/// Trust anchors for the CA-issued path, wrapped with prebuilt webpki
/// verifiers for both roles.
pub struct TrustRoots {
    server_verifier: Option<Arc<rustls::client::WebPkiServerVerifier>>,
    client_verifier: Option<Arc<dyn ClientCertVerifier>>,
}

impl TrustRoots {
    pub fn empty() -> Self {
        Self {
            server_verifier: None,
            client_verifier: None,
        }
    }

    pub fn from_der_roots(roots: &[Vec<u8>]) -> Result<Self, ChannelError> {
        if roots.is_empty() {
            return Ok(Self::empty());
        }
        let mut store = rustls::RootCertStore::empty();
        for der in roots {
            store
                .add(CertificateDer::from(der.clone()))
                .map_err(|e| ChannelError::Config(format!("bad trust root: {e}")))?;
        }
        let store = Arc::new(store);
        let server_verifier =
            rustls::client::WebPkiServerVerifier::builder_with_provider(store.clone(), provider())
                .build()
                .map_err(|e| ChannelError::Config(e.to_string()))?;
        let client_verifier =
            rustls::server::WebPkiClientVerifier::builder_with_provider(store, provider())
                .build()
                .map_err(|e| ChannelError::Config(e.to_string()))?;
        Ok(Self {
            server_verifier: Some(server_verifier),
            client_verifier: Some(client_verifier),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifySide {
    /// We are the client, verifying a server.
    Server,
    /// We are the server, verifying a client.
    Client,
}

pub struct VerifyContext<'a> {
    pub resolver: &'a Resolver,
    pub cache_policy: CachePolicy,
    pub trust: &'a TrustRoots,
    pub expected_did: Option<&'a Did>,
    pub side: VerifySide,
    pub now: DateTime<Utc>,
}

/// Verifies a presented certificate (chain) and produces the peer's
/// authentication result. This is the sequential form; the rustls hook
/// below additionally supports running the resolution concurrently with
/// signature verification.
pub fn verify_peer(
    end_entity: &[u8],
    intermediates: &[Vec<u8>],
    ctx: &VerifyContext<'_>,
) -> Result<PeerAuthResult, ChannelError> {
    match extract_did(end_entity) {
        Ok(did) => {
            precheck_did(&did, ctx.expected_did)?;
            let (resolution, resolve_ms) = resolve_timed(ctx.resolver, &did, ctx.cache_policy)?;
            finish_did_binding(end_entity, &did, &resolution, resolve_ms, ctx.now)
        }
        Err(CertError::NoDidPresent) => verify_non_did(end_entity, intermediates, ctx),
        Err(CertError::AmbiguousDid) => Err(ChannelError::BindingInvalid(
            "certificate carries multiple DID SAN entries".into(),
        )),
        Err(e) => Err(ChannelError::TransportError(format!(
            "undecodable peer certificate: {e}"
        ))),
    }
}

fn precheck_did(did: &Did, expected: Option<&Did>) -> Result<(), ChannelError> {
    if let Some(expected) = expected {
        if did != expected {
            return Err(ChannelError::BindingInvalid(format!(
                "peer presented {did}, expected {expected}"
            )));
        }
    }
    Ok(())
}

fn resolve_timed(
    resolver: &Resolver,
    did: &Did,
    policy: CachePolicy,
) -> Result<(ResolutionResult, f64), ChannelError> {
    let started = Instant::now();
    let result = resolver
        .resolve(did, policy)
        .map_err(|e| match e {
            ResolveError::RegistryUnavailable(m) => ChannelError::ResolutionFailed(m),
            other => ChannelError::ResolutionFailed(other.to_string()),
        })?;
    // A cache hit means resolution was skipped for timing purposes.
    let resolve_ms = match result.source {
        ResolutionSource::Cache => 0.0,
        ResolutionSource::MethodHandler => started.elapsed().as_secs_f64() * 1e3,
    };
    Ok((result, resolve_ms))
}

fn finish_did_binding(
    end_entity: &[u8],
    did: &Did,
    resolution: &ResolutionResult,
    resolve_ms: f64,
    now: DateTime<Utc>,
) -> Result<PeerAuthResult, ChannelError> {
    let verdict = validate_did_binding(end_entity, &resolution.document, now)
        .map_err(|e| ChannelError::TransportError(e.to_string()))?;
    if !verdict.valid {
        return Err(ChannelError::BindingInvalid(format!(
            "binding check failed: {:?}",
            verdict.reason
        )));
    }
    Ok(PeerAuthResult {
        mode: AuthMode::Did,
        peer_did: Some(did.clone()),
        binding: Some(verdict),
        resolution_source: Some(match resolution.source {
            ResolutionSource::Cache => ResolutionSourceKind::Cache,
            ResolutionSource::MethodHandler => ResolutionSourceKind::MethodHandler,
        }),
        handshake_ms: 0.0,
        resolve_ms,
    })
}

fn verify_non_did(
    end_entity: &[u8],
    intermediates: &[Vec<u8>],
    ctx: &VerifyContext<'_>,
) -> Result<PeerAuthResult, ChannelError> {
    if intermediates.is_empty() {
        if let Some(result) = try_derived_identifier(end_entity, ctx.now)? {
            return Ok(result);
        }
    }
    // Standard chain validation against the trust anchors.
    let end = CertificateDer::from(end_entity.to_vec());
    let inters: Vec<CertificateDer<'_>> = intermediates
        .iter()
        .map(|d| CertificateDer::from(d.clone()))
        .collect();
    let now = UnixTime::since_unix_epoch(std::time::Duration::from_secs(
        ctx.now.timestamp().max(0) as u64,
    ));
    match ctx.side {
        VerifySide::Server => {
            let verifier = ctx.trust.server_verifier.as_ref().ok_or_else(|| {
                ChannelError::HandshakeRejected(
                    "peer presented a certificate chain but no trust roots are configured".into(),
                )
            })?;
            let name = ServerName::try_from(TLS_SERVER_NAME).expect("constant server name");
            verifier
                .verify_server_cert(&end, &inters, &name, &[], now)
                .map_err(|e| ChannelError::HandshakeRejected(format!("chain validation: {e}")))?;
        }
        VerifySide::Client => {
            let verifier = ctx.trust.client_verifier.as_ref().ok_or_else(|| {
                ChannelError::HandshakeRejected(
                    "peer presented a certificate chain but no trust roots are configured".into(),
                )
            })?;
            verifier
                .verify_client_cert(&end, &inters, now)
                .map_err(|e| ChannelError::HandshakeRejected(format!("chain validation: {e}")))?;
        }
    }
    Ok(PeerAuthResult {
        mode: AuthMode::CertChain,
        peer_did: None,
        binding: None,
        resolution_source: Some(ResolutionSourceKind::NoneNeeded),
        handshake_ms: 0.0,
        resolve_ms: 0.0,
    })
}

/// Accepts a lone self-signed certificate whose subject CN equals the
/// identifier derived from its own public key.
fn try_derived_identifier(
    end_entity: &[u8],
    now: DateTime<Utc>,
) -> Result<Option<PeerAuthResult>, ChannelError> {
    use x509_parser::prelude::{FromDer, X509Certificate};
    let (_, cert) = X509Certificate::from_der(end_entity)
        .map_err(|e| ChannelError::TransportError(format!("undecodable certificate: {e}")))?;
    if cert.issuer() != cert.subject() {
        return Ok(None);
    }
    let Some(cn) = cert
        .subject()
        .iter_common_name()
        .next()
        .and_then(|a| a.as_str().ok())
    else {
        return Ok(None);
    };
    let Ok((_, spki)) = crate::cert::certificate_public_key(end_entity) else {
        return Ok(None);
    };
    if cn != derived_identifier(&spki) {
        return Ok(None);
    }
    let t = now.timestamp();
    if t < cert.validity().not_before.timestamp() - crate::util::CLOCK_SKEW_SECS
        || t > cert.validity().not_after.timestamp() + crate::util::CLOCK_SKEW_SECS
    {
        return Err(ChannelError::HandshakeRejected(
            "derived-identifier certificate outside validity".into(),
        ));
    }
    Ok(Some(PeerAuthResult {
        mode: AuthMode::CertChain,
        peer_did: None,
        binding: None,
        resolution_source: Some(ResolutionSourceKind::NoneNeeded),
        handshake_ms: 0.0,
        resolve_ms: 0.0,
    }))
}

type ResolutionOutcome = (Result<ResolutionResult, ResolveError>, f64);

struct PendingResolution {
    handle: std::thread::JoinHandle<ResolutionOutcome>,
    cert_der: Vec<u8>,
    did: Did,
}

#[derive(Default)]
pub(crate) struct Capture {
    pub peer: Option<PeerAuthResult>,
    pub error: Option<ChannelError>,
    pending: Option<PendingResolution>,
}

/// Shared state between the rustls verifier callbacks and the channel that
/// installed them.
#[derive(Clone)]
pub(crate) struct CaptureHandle(Arc<Mutex<Capture>>);

impl CaptureHandle {
    pub fn new() -> Self {
        Self(Arc::new(Mutex::new(Capture::default())))
    }

    pub fn take_error(&self) -> Option<ChannelError> {
        self.0.lock().error.take()
    }

    pub fn take_peer(&self) -> Option<PeerAuthResult> {
        self.0.lock().peer.take()
    }

    /// Joins a resolution still in flight (reached when the handshake ended
    /// before CertificateVerify processing, or on the error path).
    pub fn finalize(&self, now: DateTime<Utc>) -> Result<(), ChannelError> {
        let pending = self.0.lock().pending.take();
        let Some(pending) = pending else {
            return Ok(());
        };
        let (outcome, resolve_ms) = pending
            .handle
            .join()
            .map_err(|_| ChannelError::ResolutionFailed("resolver thread panicked".into()))?;
        let resolution = outcome.map_err(|e| match e {
            ResolveError::RegistryUnavailable(m) => ChannelError::ResolutionFailed(m),
            other => ChannelError::ResolutionFailed(other.to_string()),
        })?;
        let peer = finish_did_binding(&pending.cert_der, &pending.did, &resolution, resolve_ms, now)?;
        self.0.lock().peer = Some(peer);
        Ok(())
    }

    fn record(&self, result: Result<PeerAuthResult, ChannelError>) -> Result<(), rustls::Error> {
        match result {
            Ok(peer) => {
                self.0.lock().peer = Some(peer);
                Ok(())
            }
            Err(e) => {
                let msg = e.to_string();
                self.0.lock().error = Some(e);
                Err(rustls::Error::General(msg))
            }
        }
    }
}

pub(crate) struct VerifierCore {
    pub resolver: Arc<Resolver>,
    pub cache_policy: CachePolicy,
    pub trust: Arc<TrustRoots>,
    pub expected_did: Option<Did>,
    pub parallel: bool,
    pub side: VerifySide,
    pub capture: CaptureHandle,
}

impl VerifierCore {
    fn ctx<'a>(&'a self, now: DateTime<Utc>) -> VerifyContext<'a> {
        VerifyContext {
            resolver: &self.resolver,
            cache_policy: self.cache_policy,
            trust: &self.trust,
            expected_did: self.expected_did.as_ref(),
            side: self.side,
            now,
        }
    }

    fn verify_cert(
        &self,
        end_entity: &CertificateDer<'_>,
        intermediates: &[CertificateDer<'_>],
        now: UnixTime,
    ) -> Result<(), rustls::Error> {
        let now = Utc
            .timestamp_opt(now.as_secs() as i64, 0)
            .single()
            .unwrap_or_else(Utc::now);
        let inters: Vec<Vec<u8>> = intermediates.iter().map(|c| c.as_ref().to_vec()).collect();

        // The DID path can overlap its resolution with the CertificateVerify
        // check that follows; structural checks still happen here.
        if self.parallel {
            if let Ok(did) = extract_did(end_entity.as_ref()) {
                if let Err(e) = precheck_did(&did, self.expected_did.as_ref()) {
                    return self.capture.record(Err(e));
                }
                let resolver = self.resolver.clone();
                let policy = self.cache_policy;
                let target = did.clone();
                let handle = std::thread::spawn(move || {
                    let started = Instant::now();
                    let outcome = resolver.resolve(&target, policy);
                    let resolve_ms = match &outcome {
                        Ok(r) if r.source == ResolutionSource::Cache => 0.0,
                        _ => started.elapsed().as_secs_f64() * 1e3,
                    };
                    (outcome, resolve_ms)
                });
                self.capture.0.lock().pending = Some(PendingResolution {
                    handle,
                    cert_der: end_entity.as_ref().to_vec(),
                    did,
                });
                return Ok(());
            }
        }
        self.capture
            .record(verify_peer(end_entity.as_ref(), &inters, &self.ctx(now)))
    }

    fn verify_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        let valid = rustls::crypto::verify_tls13_signature(
            message,
            cert,
            dss,
            &provider().signature_verification_algorithms,
        )?;
        // Ownership proof done; join the concurrent binding check.
        if let Err(e) = self.capture.finalize(Utc::now()) {
            let msg = e.to_string();
            self.capture.0.lock().error = Some(e);
            return Err(rustls::Error::General(msg));
        }
        Ok(valid)
    }

    fn schemes(&self) -> Vec<rustls::SignatureScheme> {
        provider()
            .signature_verification_algorithms
            .supported_schemes()
    }
}

impl std::fmt::Debug for VerifierCore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VerifierCore")
            .field("side", &self.side)
            .field("parallel", &self.parallel)
            .finish()
    }
}

/// Client-side verifier (checks the server's certificate).
#[derive(Debug)]
pub(crate) struct DidLinkServerVerifier {
    pub core: VerifierCore,
}

impl ServerCertVerifier for DidLinkServerVerifier {
    fn verify_server_cert(
        &self,
        end_entity: &CertificateDer<'_>,
        intermediates: &[CertificateDer<'_>],
        _server_name: &ServerName<'_>,
        _ocsp_response: &[u8],
        now: UnixTime,
    ) -> Result<ServerCertVerified, rustls::Error> {
        self.core.verify_cert(end_entity, intermediates, now)?;
        Ok(ServerCertVerified::assertion())
    }

    fn verify_tls12_signature(
        &self,
        _message: &[u8],
        _cert: &CertificateDer<'_>,
        _dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        Err(rustls::Error::PeerIncompatible(
            rustls::PeerIncompatible::Tls12NotOffered,
        ))
    }

    fn verify_tls13_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        self.core.verify_signature(message, cert, dss)
    }

    fn supported_verify_schemes(&self) -> Vec<rustls::SignatureScheme> {
        self.core.schemes()
    }
}

/// Server-side verifier (checks the client's certificate under mTLS).
#[derive(Debug)]
pub(crate) struct DidLinkClientVerifier {
    pub core: VerifierCore,
}

impl ClientCertVerifier for DidLinkClientVerifier {
    fn offer_client_auth(&self) -> bool {
        true
    }

    fn client_auth_mandatory(&self) -> bool {
        true
    }

    fn root_hint_subjects(&self) -> &[rustls::DistinguishedName] {
        &[]
    }

    fn verify_client_cert(
        &self,
        end_entity: &CertificateDer<'_>,
        intermediates: &[CertificateDer<'_>],
        now: UnixTime,
    ) -> Result<ClientCertVerified, rustls::Error> {
        self.core.verify_cert(end_entity, intermediates, now)?;
        Ok(ClientCertVerified::assertion())
    }

    fn verify_tls12_signature(
        &self,
        _message: &[u8],
        _cert: &CertificateDer<'_>,
        _dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        Err(rustls::Error::PeerIncompatible(
            rustls::PeerIncompatible::Tls12NotOffered,
        ))
    }

    fn verify_tls13_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        self.core.verify_signature(message, cert, dss)
    }

    fn supported_verify_schemes(&self) -> Vec<rustls::SignatureScheme> {
        self.core.schemes()
    }
}
