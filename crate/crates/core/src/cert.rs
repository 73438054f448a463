//! Key pairs and the certificate flavors used for authentication: DID-bearing
//! self-issued, derived-identifier self-issued, and CA-issued via a mini CA.
//!
//! A DID certificate is only a vehicle to communicate the DID-to-key binding.
//! [`validate_did_binding`] therefore checks the SAN DID against the resolved
//! document and the SubjectPublicKeyInfo against the document's
//! authentication keys, but does not verify the self-signature by default —
//! proof of possession comes from the TLS CertificateVerify message.

use std::fmt;
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use ed25519_dalek::pkcs8::{DecodePrivateKey as _, EncodePrivateKey as _};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use x509_parser::prelude::{FromDer, GeneralName, X509Certificate};

use crate::did::{parse_did, Did, DidDocument, KeyPurpose, KeyType};
use crate::util::{b64, b64_decode, sha256, CLOCK_SKEW_SECS};

/// Subject/issuer common name on DID-bearing self-issued certificates. The
/// identifier itself lives in the SAN extension; the subject field only has
/// to satisfy X.509 naming rules.
pub const DID_CERT_CN: &str = "did-link";

/// DNS name carried by CA-issued certificates and dialed by clients. DIDs
/// violate hostname grammar, so DID endpoints are always addressed under
/// this placeholder name and identified by their certificate instead.
pub const TLS_SERVER_NAME: &str = "didlink.local";

const MAX_DID_SAN_LEN: usize = 2048;

#[derive(Debug, Error)]
pub enum CertError {
    #[error("DID too large to embed in a SAN entry")]
    OversizeDid,
    #[error("certificate validity interval is empty")]
    InvalidValidity,
    #[error("no DID present in certificate SAN")]
    NoDidPresent,
    #[error("multiple DID SAN entries present")]
    AmbiguousDid,
    #[error("issuer bundle is not a CA root")]
    NotACa,
    #[error("malformed certificate: {0}")]
    Malformed(String),
    #[error("key error: {0}")]
    Key(String),
    #[error("certificate generation failed: {0}")]
    Generation(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<rcgen::Error> for CertError {
    fn from(e: rcgen::Error) -> Self {
        CertError::Generation(e.to_string())
    }
}

/// Private key bytes in a container that is never serialized by default and
/// never printed.
#[derive(Clone)]
pub struct SecretBytes(Vec<u8>);

impl SecretBytes {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn expose(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for SecretBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretBytes(..)")
    }
}

/// A signing (or key-agreement) key pair. The public key is kept in
/// canonical form: raw 32 bytes for Ed25519/X25519, compressed SEC1 point
/// for P-256.
#[derive(Debug, Clone)]
pub struct KeyPair {
    pub key_type: KeyType,
    pub public_key: Vec<u8>,
    secret: SecretBytes,
}

impl KeyPair {
    pub fn generate(key_type: KeyType) -> KeyPair {
        match key_type {
            KeyType::Ed25519 => {
                let sk = ed25519_dalek::SigningKey::generate(&mut rand::rngs::OsRng);
                KeyPair {
                    key_type,
                    public_key: sk.verifying_key().to_bytes().to_vec(),
                    secret: SecretBytes::new(sk.to_bytes().to_vec()),
                }
            }
            KeyType::EcdsaP256 => {
                use p256::elliptic_curve::sec1::ToEncodedPoint;
                let sk = p256::SecretKey::random(&mut rand::rngs::OsRng);
                let public = sk.public_key().to_encoded_point(true).as_bytes().to_vec();
                KeyPair {
                    key_type,
                    public_key: public,
                    secret: SecretBytes::new(sk.to_bytes().to_vec()),
                }
            }
            KeyType::X25519 => {
                let sk = x25519_dalek::StaticSecret::random_from_rng(rand::rngs::OsRng);
                let public = x25519_dalek::PublicKey::from(&sk);
                KeyPair {
                    key_type,
                    public_key: public.as_bytes().to_vec(),
                    secret: SecretBytes::new(sk.to_bytes().to_vec()),
                }
            }
        }
    }

    pub fn secret(&self) -> &SecretBytes {
        &self.secret
    }

    /// Signs a message. Panics on X25519 keys, which cannot sign.
    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        match self.key_type {
            KeyType::Ed25519 => {
                use ed25519_dalek::Signer;
                let sk = self.ed25519_signing_key();
                sk.sign(message).to_bytes().to_vec()
            }
            KeyType::EcdsaP256 => {
                use p256::ecdsa::signature::Signer;
                let sk = p256::ecdsa::SigningKey::from(self.p256_secret_key());
                let sig: p256::ecdsa::DerSignature = sk.sign(message);
                sig.to_vec()
            }
            KeyType::X25519 => panic!("X25519 keys do not sign"),
        }
    }

    pub fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        verify_with_key(self.key_type, &self.public_key, message, signature)
    }

    fn ed25519_signing_key(&self) -> ed25519_dalek::SigningKey {
        let seed: [u8; 32] = self
            .secret
            .expose()
            .try_into()
            .expect("ed25519 secret is 32 bytes");
        ed25519_dalek::SigningKey::from_bytes(&seed)
    }

    fn p256_secret_key(&self) -> p256::SecretKey {
        p256::SecretKey::from_slice(self.secret.expose()).expect("well-formed p256 secret")
    }

    pub fn x25519_secret(&self) -> x25519_dalek::StaticSecret {
        let bytes: [u8; 32] = self
            .secret
            .expose()
            .try_into()
            .expect("x25519 secret is 32 bytes");
        x25519_dalek::StaticSecret::from(bytes)
    }

    /// PKCS#8 DER export (signing key types only).
    pub fn to_pkcs8_der(&self) -> Result<Vec<u8>, CertError> {
        match self.key_type {
            KeyType::Ed25519 => Ok(self
                .ed25519_signing_key()
                .to_pkcs8_der()
                .map_err(|e| CertError::Key(e.to_string()))?
                .as_bytes()
                .to_vec()),
            KeyType::EcdsaP256 => {
                use p256::pkcs8::EncodePrivateKey;
                Ok(self
                    .p256_secret_key()
                    .to_pkcs8_der()
                    .map_err(|e| CertError::Key(e.to_string()))?
                    .as_bytes()
                    .to_vec())
            }
            KeyType::X25519 => Err(CertError::Key("X25519 keys have no PKCS#8 export".into())),
        }
    }

    pub fn to_pkcs8_pem(&self) -> Result<String, CertError> {
        Ok(pem_encode("PRIVATE KEY", &self.to_pkcs8_der()?))
    }

    pub fn from_pkcs8_der(key_type: KeyType, der: &[u8]) -> Result<KeyPair, CertError> {
        match key_type {
            KeyType::Ed25519 => {
                let sk = ed25519_dalek::SigningKey::from_pkcs8_der(der)
                    .map_err(|e| CertError::Key(e.to_string()))?;
                Ok(KeyPair {
                    key_type,
                    public_key: sk.verifying_key().to_bytes().to_vec(),
                    secret: SecretBytes::new(sk.to_bytes().to_vec()),
                })
            }
            KeyType::EcdsaP256 => {
                use p256::elliptic_curve::sec1::ToEncodedPoint;
                use p256::pkcs8::DecodePrivateKey;
                let sk = p256::SecretKey::from_pkcs8_der(der)
                    .map_err(|e| CertError::Key(e.to_string()))?;
                let public = sk.public_key().to_encoded_point(true).as_bytes().to_vec();
                Ok(KeyPair {
                    key_type,
                    public_key: public,
                    secret: SecretBytes::new(sk.to_bytes().to_vec()),
                })
            }
            KeyType::X25519 => Err(CertError::Key("X25519 keys have no PKCS#8 import".into())),
        }
    }
}

pub fn verify_with_key(
    key_type: KeyType,
    public_key: &[u8],
    message: &[u8],
    signature: &[u8],
) -> bool {
    match key_type {
        KeyType::Ed25519 => {
            let Ok(key): Result<[u8; 32], _> = public_key.try_into() else {
                return false;
            };
            let Ok(sig): Result<[u8; 64], _> = signature.try_into() else {
                return false;
            };
            let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&key) else {
                return false;
            };
            use ed25519_dalek::Verifier;
            vk.verify(message, &ed25519_dalek::Signature::from_bytes(&sig))
                .is_ok()
        }
        KeyType::EcdsaP256 => {
            use p256::ecdsa::signature::Verifier;
            let Ok(vk) = p256::ecdsa::VerifyingKey::from_sec1_bytes(public_key) else {
                return false;
            };
            let Ok(sig) = p256::ecdsa::Signature::from_der(signature) else {
                return false;
            };
            vk.verify(message, &sig).is_ok()
        }
        KeyType::X25519 => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertKind {
    DidSelfIssued,
    DerivedSelfIssued,
    CaIssued,
    CaRoot,
}

/// A key pair plus a certificate (and, for CA-issued leaves, the chain up to
/// the root).
#[derive(Debug, Clone)]
pub struct CertBundle {
    pub kind: CertKind,
    pub certificate_der: Vec<u8>,
    pub chain_der: Vec<Vec<u8>>,
    pub key: KeyPair,
    pub did: Option<Did>,
}

impl CertBundle {
    pub fn certificate_pem(&self) -> String {
        pem_encode("CERTIFICATE", &self.certificate_der)
    }

    /// Leaf plus chain, as presented during the handshake.
    pub fn presented_chain(&self) -> Vec<Vec<u8>> {
        let mut out = vec![self.certificate_der.clone()];
        out.extend(self.chain_der.iter().cloned());
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CertError> {
        let file = BundleFile {
            kind: self.kind,
            did: self.did.as_ref().map(|d| d.to_string()),
            key_type: self.key.key_type,
            certificate_pem: self.certificate_pem(),
            chain_pem: self
                .chain_der
                .iter()
                .map(|der| pem_encode("CERTIFICATE", der))
                .collect(),
            private_key_pem: self.key.to_pkcs8_pem()?,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file).expect("bundle"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CertBundle, CertError> {
        let text = std::fs::read_to_string(path)?;
        let file: BundleFile =
            serde_json::from_str(&text).map_err(|e| CertError::Malformed(e.to_string()))?;
        let certificate_der = pem_decode_one(&file.certificate_pem)?;
        let mut chain_der = Vec::new();
        for pem in &file.chain_pem {
            chain_der.push(pem_decode_one(pem)?);
        }
        let key_der = pem_decode_with_tag(&file.private_key_pem, "PRIVATE KEY")?;
        let key = KeyPair::from_pkcs8_der(file.key_type, &key_der)?;
        let did = match file.did {
            Some(text) => Some(parse_did(&text).map_err(|e| CertError::Malformed(e.to_string()))?),
            None => None,
        };
        Ok(CertBundle {
            kind: file.kind,
            certificate_der,
            chain_der,
            key,
            did,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BundleFile {
    kind: CertKind,
    did: Option<String>,
    key_type: KeyType,
    certificate_pem: String,
    chain_pem: Vec<String>,
    private_key_pem: String,
}

fn pem_encode(tag: &str, der: &[u8]) -> String {
    let body = b64(der);
    let mut out = format!("-----BEGIN {tag}-----\n");
    for chunk in body.as_bytes().chunks(64) {
        out.push_str(std::str::from_utf8(chunk).expect("base64 is ascii"));
        out.push('\n');
    }
    out.push_str(&format!("-----END {tag}-----\n"));
    out
}

pub fn pem_decode_one(pem: &str) -> Result<Vec<u8>, CertError> {
    pem_decode_with_tag(pem, "CERTIFICATE")
}

fn pem_decode_with_tag(pem: &str, tag: &str) -> Result<Vec<u8>, CertError> {
    let begin = format!("-----BEGIN {tag}-----");
    let end = format!("-----END {tag}-----");
    let start = pem
        .find(&begin)
        .ok_or_else(|| CertError::Malformed(format!("missing {begin}")))?
        + begin.len();
    let stop = pem[start..]
        .find(&end)
        .ok_or_else(|| CertError::Malformed(format!("missing {end}")))?;
    let body: String = pem[start..start + stop]
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect();
    b64_decode(&body).map_err(|e| CertError::Malformed(e.to_string()))
}

/// Fresh random key pair of the requested type.
pub fn generate_keypair(key_type: KeyType) -> KeyPair {
    KeyPair::generate(key_type)
}

fn to_offset(dt: DateTime<Utc>) -> time::OffsetDateTime {
    time::OffsetDateTime::from_unix_timestamp(dt.timestamp())
        .expect("timestamp in representable range")
}

fn rcgen_keypair(key: &KeyPair) -> Result<rcgen::KeyPair, CertError> {
    let der = key.to_pkcs8_der()?;
    rcgen::KeyPair::try_from(der.as_slice()).map_err(|e| CertError::Key(e.to_string()))
}

fn check_validity(not_before: DateTime<Utc>, not_after: DateTime<Utc>) -> Result<(), CertError> {
    if not_after <= not_before {
        return Err(CertError::InvalidValidity);
    }
    Ok(())
}

/// Self-signed X.509 v3 certificate carrying `did` as its sole SAN URI
/// entry. DIDs routinely exceed the 64-byte common-name limit, which is why
/// they live in the SAN.
pub fn make_did_certificate(
    did: &Did,
    key: &KeyPair,
    not_before: DateTime<Utc>,
    not_after: DateTime<Utc>,
) -> Result<CertBundle, CertError> {
    check_validity(not_before, not_after)?;
    if did.as_str().len() > MAX_DID_SAN_LEN {
        return Err(CertError::OversizeDid);
    }
    let mut params = rcgen::CertificateParams::default();
    params.not_before = to_offset(not_before);
    params.not_after = to_offset(not_after);
    params.subject_alt_names = vec![rcgen::SanType::URI(
        rcgen::Ia5String::try_from(did.as_str()).map_err(|_| CertError::OversizeDid)?,
    )];
    params
        .distinguished_name
        .push(rcgen::DnType::CommonName, DID_CERT_CN);
    params.is_ca = rcgen::IsCa::ExplicitNoCa;
    params.key_usages = vec![rcgen::KeyUsagePurpose::DigitalSignature];
    let rc_key = rcgen_keypair(key)?;
    let cert = params.self_signed(&rc_key)?;
    Ok(CertBundle {
        kind: CertKind::DidSelfIssued,
        certificate_der: cert.der().to_vec(),
        chain_der: Vec::new(),
        key: key.clone(),
        did: Some(did.clone()),
    })
}

/// The identifier derived from a public key: base58 of the first 20 bytes of
/// its SHA-256. A pure function of the key, like a cryptocurrency address.
pub fn derived_identifier(public_key: &[u8]) -> String {
    bs58::encode(&sha256(public_key)[..20]).into_string()
}

/// Self-signed certificate whose subject CN is the identifier derived from
/// the key itself — the registry-free baseline against which DID
/// authentication is compared.
pub fn make_derived_id_certificate(
    key: &KeyPair,
    not_before: DateTime<Utc>,
    not_after: DateTime<Utc>,
) -> Result<CertBundle, CertError> {
    check_validity(not_before, not_after)?;
    let mut params = rcgen::CertificateParams::default();
    params.not_before = to_offset(not_before);
    params.not_after = to_offset(not_after);
    params
        .distinguished_name
        .push(rcgen::DnType::CommonName, derived_identifier(&key.public_key));
    params.is_ca = rcgen::IsCa::ExplicitNoCa;
    params.key_usages = vec![rcgen::KeyUsagePurpose::DigitalSignature];
    let rc_key = rcgen_keypair(key)?;
    let cert = params.self_signed(&rc_key)?;
    Ok(CertBundle {
        kind: CertKind::DerivedSelfIssued,
        certificate_der: cert.der().to_vec(),
        chain_der: Vec::new(),
        key: key.clone(),
        did: None,
    })
}

/// Minimal CA root for the hybrid/legacy scenarios.
pub fn make_ca_root(name: &str) -> Result<CertBundle, CertError> {
    let key = KeyPair::generate(KeyType::Ed25519);
    let now = Utc::now();
    let mut params = rcgen::CertificateParams::default();
    params.not_before = to_offset(now - chrono::Duration::hours(1));
    params.not_after = to_offset(now + chrono::Duration::days(3650));
    params
        .distinguished_name
        .push(rcgen::DnType::CommonName, name);
    params.is_ca = rcgen::IsCa::Ca(rcgen::BasicConstraints::Unconstrained);
    params.key_usages = vec![
        rcgen::KeyUsagePurpose::KeyCertSign,
        rcgen::KeyUsagePurpose::DigitalSignature,
        rcgen::KeyUsagePurpose::CrlSign,
    ];
    let rc_key = rcgen_keypair(&key)?;
    let cert = params.self_signed(&rc_key)?;
    Ok(CertBundle {
        kind: CertKind::CaRoot,
        certificate_der: cert.der().to_vec(),
        chain_der: Vec::new(),
        key,
        did: None,
    })
}

/// Issues a leaf certificate signed by the mini-CA root. The leaf carries a
/// `didlink.local` DNS SAN so that standard chain validation by the host TLS
/// stack succeeds for both server and client roles.
pub fn issue_ca_certificate(
    root: &CertBundle,
    subject_name: &str,
    key: &KeyPair,
    not_before: DateTime<Utc>,
    not_after: DateTime<Utc>,
) -> Result<CertBundle, CertError> {
    if root.kind != CertKind::CaRoot {
        return Err(CertError::NotACa);
    }
    check_validity(not_before, not_after)?;

    // Rebuild the issuer's parameters from its stored DER; only the
    // distinguished name and key identifier flow into the leaf.
    let root_der = rustls::pki_types::CertificateDer::from(root.certificate_der.clone());
    let issuer_params = rcgen::CertificateParams::from_ca_cert_der(&root_der)?;
    let issuer_key = rcgen_keypair(&root.key)?;
    let issuer_cert = issuer_params.self_signed(&issuer_key)?;

    let mut params = rcgen::CertificateParams::default();
    params.not_before = to_offset(not_before);
    params.not_after = to_offset(not_after);
    params
        .distinguished_name
        .push(rcgen::DnType::CommonName, subject_name);
    params.subject_alt_names = vec![rcgen::SanType::DnsName(
        rcgen::Ia5String::try_from(TLS_SERVER_NAME).expect("constant is IA5"),
    )];
    params.is_ca = rcgen::IsCa::ExplicitNoCa;
    params.key_usages = vec![rcgen::KeyUsagePurpose::DigitalSignature];
    params.extended_key_usages = vec![
        rcgen::ExtendedKeyUsagePurpose::ServerAuth,
        rcgen::ExtendedKeyUsagePurpose::ClientAuth,
    ];
    params.use_authority_key_identifier_extension = true;

    let subject_key = rcgen_keypair(key)?;
    let cert = params.signed_by(&subject_key, &issuer_cert, &issuer_key)?;
    Ok(CertBundle {
        kind: CertKind::CaIssued,
        certificate_der: cert.der().to_vec(),
        chain_der: vec![root.certificate_der.clone()],
        key: key.clone(),
        did: None,
    })
}

/// Extracts the DID from the sole SAN URI entry of a certificate.
pub fn extract_did(certificate_der: &[u8]) -> Result<Did, CertError> {
    let (_, cert) = X509Certificate::from_der(certificate_der)
        .map_err(|e| CertError::Malformed(e.to_string()))?;
    extract_did_parsed(&cert)
}

fn extract_did_parsed(cert: &X509Certificate<'_>) -> Result<Did, CertError> {
    let san = cert
        .subject_alternative_name()
        .map_err(|e| CertError::Malformed(e.to_string()))?;
    let mut dids = Vec::new();
    if let Some(ext) = san {
        for name in &ext.value.general_names {
            if let GeneralName::URI(uri) = name {
                if let Ok(did) = parse_did(uri) {
                    dids.push(did);
                }
            }
        }
    }
    match dids.len() {
        0 => Err(CertError::NoDidPresent),
        1 => Ok(dids.remove(0)),
        _ => Err(CertError::AmbiguousDid),
    }
}

/// Raw public key (in canonical form) and its type, from a certificate's
/// SubjectPublicKeyInfo.
pub fn certificate_public_key(certificate_der: &[u8]) -> Result<(KeyType, Vec<u8>), CertError> {
    let (_, cert) = X509Certificate::from_der(certificate_der)
        .map_err(|e| CertError::Malformed(e.to_string()))?;
    spki_public_key(&cert)
}

fn spki_public_key(cert: &X509Certificate<'_>) -> Result<(KeyType, Vec<u8>), CertError> {
    let spki = cert.public_key();
    let alg_oid = spki.algorithm.algorithm.to_id_string();
    let data = spki.subject_public_key.data.as_ref();
    match alg_oid.as_str() {
        // id-Ed25519
        "1.3.101.112" => {
            if data.len() != 32 {
                return Err(CertError::Malformed("bad Ed25519 key length".into()));
            }
            Ok((KeyType::Ed25519, data.to_vec()))
        }
        // id-ecPublicKey; canonicalize the point to compressed form.
        "1.2.840.10045.2.1" => {
            use p256::elliptic_curve::sec1::ToEncodedPoint;
            let pk = p256::PublicKey::from_sec1_bytes(data)
                .map_err(|e| CertError::Malformed(format!("bad P-256 point: {e}")))?;
            Ok((KeyType::EcdsaP256, pk.to_encoded_point(true).as_bytes().to_vec()))
        }
        other => Err(CertError::Malformed(format!(
            "unsupported SPKI algorithm {other}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingFailure {
    Ok,
    DidMismatch,
    KeyNotInDocument,
    ExpiredCertificate,
    Malformed,
}

/// Outcome of the DID-to-key binding check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BindingVerdict {
    pub valid: bool,
    pub matched_method_id: Option<String>,
    pub reason: BindingFailure,
}

impl BindingVerdict {
    fn ok(method_id: String) -> Self {
        Self {
            valid: true,
            matched_method_id: Some(method_id),
            reason: BindingFailure::Ok,
        }
    }

    fn fail(reason: BindingFailure) -> Self {
        Self {
            valid: false,
            matched_method_id: None,
            reason,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BindingOptions {
    /// Also verify the certificate's self-signature. Off by default: the
    /// certificate is only a vehicle for the binding, and possession is
    /// proven by CertificateVerify.
    pub verify_self_signature: bool,
    pub clock_skew_secs: i64,
}

impl Default for BindingOptions {
    fn default() -> Self {
        Self {
            verify_self_signature: false,
            clock_skew_secs: CLOCK_SKEW_SECS,
        }
    }
}

/// Checks that the certificate's SAN DID matches `document.id`, that its
/// public key appears among the document's authentication keys (bitwise,
/// after canonical compression), and that `now` falls within the
/// certificate's validity. Semantic failures are verdicts; only undecodable
/// input is an error.
pub fn validate_did_binding(
    certificate_der: &[u8],
    document: &DidDocument,
    now: DateTime<Utc>,
) -> Result<BindingVerdict, CertError> {
    validate_did_binding_with(certificate_der, document, now, &BindingOptions::default())
}

pub fn validate_did_binding_with(
    certificate_der: &[u8],
    document: &DidDocument,
    now: DateTime<Utc>,
    options: &BindingOptions,
) -> Result<BindingVerdict, CertError> {
    let (_, cert) = X509Certificate::from_der(certificate_der)
        .map_err(|e| CertError::Malformed(e.to_string()))?;

    let did = match extract_did_parsed(&cert) {
        Ok(did) => did,
        Err(CertError::NoDidPresent) | Err(CertError::AmbiguousDid) => {
            return Ok(BindingVerdict::fail(BindingFailure::Malformed))
        }
        Err(e) => return Err(e),
    };
    if did != document.id {
        return Ok(BindingVerdict::fail(BindingFailure::DidMismatch));
    }

    let (key_type, cert_key) = match spki_public_key(&cert) {
        Ok(v) => v,
        Err(_) => return Ok(BindingVerdict::fail(BindingFailure::Malformed)),
    };
    let matched = document
        .methods_with_purpose(KeyPurpose::Authentication)
        .find(|vm| vm.key_type == key_type && vm.public_key == cert_key);
    let Some(vm) = matched else {
        return Ok(BindingVerdict::fail(BindingFailure::KeyNotInDocument));
    };

    let not_before = cert.validity().not_before.timestamp() - options.clock_skew_secs;
    let not_after = cert.validity().not_after.timestamp() + options.clock_skew_secs;
    let t = now.timestamp();
    if t < not_before || t > not_after {
        return Ok(BindingVerdict::fail(BindingFailure::ExpiredCertificate));
    }

    if options.verify_self_signature && !self_signature_valid(&cert, key_type, &cert_key) {
        return Ok(BindingVerdict::fail(BindingFailure::Malformed));
    }

    Ok(BindingVerdict::ok(vm.id.clone()))
}

fn self_signature_valid(cert: &X509Certificate<'_>, key_type: KeyType, key: &[u8]) -> bool {
    let tbs = cert.tbs_certificate.as_ref();
    let sig = cert.signature_value.data.as_ref();
    verify_with_key(key_type, key, tbs, sig)
}

/// Timestamp helpers for certificate validity windows.
pub fn validity_days(days: i64) -> (DateTime<Utc>, DateTime<Utc>) {
    let now = Utc::now();
    (now - chrono::Duration::hours(1), now + chrono::Duration::days(days))
}

pub fn epoch(ts: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(ts, 0).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::did::{make_key_did, DidDocument, VerificationMethod};

    fn did_identity() -> (Did, DidDocument, KeyPair) {
        let key = KeyPair::generate(KeyType::Ed25519);
        let (did, doc) = make_key_did(&key.public_key).unwrap();
        (did, doc, key)
    }

    #[test]
    fn generated_keys_are_fresh_and_usable() {
        let a = generate_keypair(KeyType::Ed25519);
        let b = generate_keypair(KeyType::Ed25519);
        assert_eq!(a.public_key.len(), 32);
        assert_ne!(a.public_key, b.public_key);
        let sig = a.sign(b"hello");
        assert!(a.verify(b"hello", &sig));
        assert!(!a.verify(b"other", &sig));
        assert!(!b.verify(b"hello", &sig));

        let p = generate_keypair(KeyType::EcdsaP256);
        assert_eq!(p.public_key.len(), 33);
        let sig = p.sign(b"hello");
        assert!(p.verify(b"hello", &sig));
    }

    #[test]
    fn did_certificate_round_trips_its_did() {
        let (did, _, key) = did_identity();
        let (nb, na) = validity_days(30);
        let bundle = make_did_certificate(&did, &key, nb, na).unwrap();
        assert_eq!(bundle.kind, CertKind::DidSelfIssued);
        assert_eq!(extract_did(&bundle.certificate_der).unwrap(), did);
        let (kt, pk) = certificate_public_key(&bundle.certificate_der).unwrap();
        assert_eq!(kt, KeyType::Ed25519);
        assert_eq!(pk, key.public_key);
    }

    #[test]
    fn did_longer_than_cn_limit_still_embeds() {
        // SAN entries are not subject to the 64-byte common-name limit.
        let key = KeyPair::generate(KeyType::Ed25519);
        let long_subject = "x".repeat(200);
        let did = parse_did(&format!("did:vdrsim:{long_subject}")).unwrap();
        assert!(did.as_str().len() > 64);
        let (nb, na) = validity_days(30);
        let bundle = make_did_certificate(&did, &key, nb, na).unwrap();
        assert_eq!(extract_did(&bundle.certificate_der).unwrap(), did);
    }

    #[test]
    fn empty_validity_rejected() {
        let (did, _, key) = did_identity();
        let now = Utc::now();
        assert!(matches!(
            make_did_certificate(&did, &key, now, now - chrono::Duration::seconds(1)),
            Err(CertError::InvalidValidity)
        ));
    }

    #[test]
    fn derived_identifier_deterministic_and_short() {
        let key = KeyPair::generate(KeyType::Ed25519);
        let (nb, na) = validity_days(30);
        let a = make_derived_id_certificate(&key, nb, na).unwrap();
        let b = make_derived_id_certificate(&key, nb, na).unwrap();
        let cn = |der: &[u8]| {
            let (_, cert) = X509Certificate::from_der(der).unwrap();
            cert.subject()
                .iter_common_name()
                .next()
                .unwrap()
                .as_str()
                .unwrap()
                .to_string()
        };
        assert_eq!(cn(&a.certificate_der), cn(&b.certificate_der));
        assert_eq!(cn(&a.certificate_der), derived_identifier(&key.public_key));
        assert!(cn(&a.certificate_der).len() <= 64);
        assert!(matches!(
            extract_did(&a.certificate_der),
            Err(CertError::NoDidPresent)
        ));
    }

    #[test]
    fn derived_identifier_collision_scan() {
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let key = KeyPair::generate(KeyType::Ed25519);
            let id = derived_identifier(&key.public_key);
            assert!(id.len() <= 64);
            assert!(seen.insert(id), "derived identifier collision");
        }
    }

    #[test]
    fn ambiguous_did_detected() {
        let key = KeyPair::generate(KeyType::Ed25519);
        let (did_a, _) = make_key_did(&key.public_key).unwrap();
        let other = KeyPair::generate(KeyType::Ed25519);
        let (did_b, _) = make_key_did(&other.public_key).unwrap();

        let mut params = rcgen::CertificateParams::default();
        params.subject_alt_names = vec![
            rcgen::SanType::URI(rcgen::Ia5String::try_from(did_a.as_str()).unwrap()),
            rcgen::SanType::URI(rcgen::Ia5String::try_from(did_b.as_str()).unwrap()),
        ];
        let rc_key = rcgen_keypair(&key).unwrap();
        let cert = params.self_signed(&rc_key).unwrap();
        assert!(matches!(
            extract_did(cert.der()),
            Err(CertError::AmbiguousDid)
        ));
    }

    #[test]
    fn binding_validates_matching_cert_and_doc() {
        let (did, doc, key) = did_identity();
        let (nb, na) = validity_days(30);
        let bundle = make_did_certificate(&did, &key, nb, na).unwrap();
        let verdict = validate_did_binding(&bundle.certificate_der, &doc, Utc::now()).unwrap();
        assert!(verdict.valid);
        assert_eq!(verdict.reason, BindingFailure::Ok);
        assert!(verdict.matched_method_id.is_some());
    }

    #[test]
    fn binding_rejects_swapped_key() {
        // Impersonation attempt: victim's DID, attacker's key in the cert.
        let (did, doc, _) = did_identity();
        let attacker = KeyPair::generate(KeyType::Ed25519);
        let (nb, na) = validity_days(30);
        let forged = make_did_certificate(&did, &attacker, nb, na).unwrap();
        let verdict = validate_did_binding(&forged.certificate_der, &doc, Utc::now()).unwrap();
        assert!(!verdict.valid);
        assert_eq!(verdict.reason, BindingFailure::KeyNotInDocument);
    }

    #[test]
    fn binding_rejects_wrong_document() {
        let (did, _, key) = did_identity();
        let (_, other_doc, _) = did_identity();
        let (nb, na) = validity_days(30);
        let bundle = make_did_certificate(&did, &key, nb, na).unwrap();
        let verdict =
            validate_did_binding(&bundle.certificate_der, &other_doc, Utc::now()).unwrap();
        assert_eq!(verdict.reason, BindingFailure::DidMismatch);
    }

    #[test]
    fn binding_rejects_after_key_rotation() {
        // The document rotates to a new key; the old certificate no longer
        // binds.
        let (did, _, key) = did_identity();
        let (nb, na) = validity_days(30);
        let bundle = make_did_certificate(&did, &key, nb, na).unwrap();

        let new_key = KeyPair::generate(KeyType::Ed25519);
        let vm = VerificationMethod::new(
            "key-2",
            KeyType::Ed25519,
            new_key.public_key.clone(),
            [KeyPurpose::Authentication, KeyPurpose::Assertion],
        )
        .unwrap();
        let v2 = DidDocument::new(did, vec![vm], 2, Utc::now()).unwrap();
        let verdict = validate_did_binding(&bundle.certificate_der, &v2, Utc::now()).unwrap();
        assert_eq!(verdict.reason, BindingFailure::KeyNotInDocument);
    }

    #[test]
    fn binding_rejects_expired_certificate() {
        let (did, doc, key) = did_identity();
        let nb = epoch(1_000_000);
        let na = epoch(2_000_000);
        let bundle = make_did_certificate(&did, &key, nb, na).unwrap();
        let verdict = validate_did_binding(&bundle.certificate_der, &doc, Utc::now()).unwrap();
        assert_eq!(verdict.reason, BindingFailure::ExpiredCertificate);

        // Within the skew tolerance the certificate still binds.
        let verdict = validate_did_binding(
            &bundle.certificate_der,
            &doc,
            epoch(2_000_000 + CLOCK_SKEW_SECS - 1),
        )
        .unwrap();
        assert!(verdict.valid);
    }

    #[test]
    fn binding_undecodable_input_is_error() {
        let (_, doc, _) = did_identity();
        assert!(matches!(
            validate_did_binding(b"not-a-certificate", &doc, Utc::now()),
            Err(CertError::Malformed(_))
        ));
    }

    #[test]
    fn strict_mode_verifies_self_signature() {
        let (did, doc, key) = did_identity();
        let (nb, na) = validity_days(30);
        let bundle = make_did_certificate(&did, &key, nb, na).unwrap();
        let opts = BindingOptions {
            verify_self_signature: true,
            ..Default::default()
        };
        let verdict =
            validate_did_binding_with(&bundle.certificate_der, &doc, Utc::now(), &opts).unwrap();
        assert!(verdict.valid);
    }

    #[test]
    fn p256_certificate_binds_against_dual_listed_document() {
        let ed = KeyPair::generate(KeyType::Ed25519);
        let p = KeyPair::generate(KeyType::EcdsaP256);
        let did = parse_did("did:vdrsim:dual").unwrap();
        let doc = DidDocument::new(
            did.clone(),
            vec![
                VerificationMethod::new(
                    "key-1",
                    KeyType::Ed25519,
                    ed.public_key.clone(),
                    [KeyPurpose::Authentication, KeyPurpose::Assertion],
                )
                .unwrap(),
                VerificationMethod::new(
                    "key-2",
                    KeyType::EcdsaP256,
                    p.public_key.clone(),
                    [KeyPurpose::Authentication],
                )
                .unwrap(),
            ],
            1,
            Utc::now(),
        )
        .unwrap();
        let (nb, na) = validity_days(30);
        let bundle = make_did_certificate(&did, &p, nb, na).unwrap();
        let verdict = validate_did_binding(&bundle.certificate_der, &doc, Utc::now()).unwrap();
        assert!(verdict.valid);
        assert_eq!(verdict.matched_method_id.as_deref(), Some("key-2"));
    }

    #[test]
    fn bundle_file_round_trip() {
        let (did, _, key) = did_identity();
        let (nb, na) = validity_days(30);
        let bundle = make_did_certificate(&did, &key, nb, na).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.json");
        bundle.save(&path).unwrap();
        let loaded = CertBundle::load(&path).unwrap();
        assert_eq!(loaded.kind, bundle.kind);
        assert_eq!(loaded.certificate_der, bundle.certificate_der);
        assert_eq!(loaded.did, bundle.did);
        assert_eq!(loaded.key.public_key, bundle.key.public_key);
        let sig = loaded.key.sign(b"probe");
        assert!(bundle.key.verify(b"probe", &sig));
    }

    #[test]
    fn ca_issue_requires_root() {
        let key = KeyPair::generate(KeyType::Ed25519);
        let (nb, na) = validity_days(30);
        let not_a_root = make_derived_id_certificate(&key, nb, na).unwrap();
        let leaf_key = KeyPair::generate(KeyType::Ed25519);
        assert!(matches!(
            issue_ca_certificate(&not_a_root, "leaf", &leaf_key, nb, na),
            Err(CertError::NotACa)
        ));
    }

    #[test]
    fn ca_issued_leaf_chains_to_root() {
        let root = make_ca_root("didlink test ca").unwrap();
        let leaf_key = KeyPair::generate(KeyType::Ed25519);
        let (nb, na) = validity_days(30);
        let leaf = issue_ca_certificate(&root, "server", &leaf_key, nb, na).unwrap();
        assert_eq!(leaf.kind, CertKind::CaIssued);
        assert_eq!(leaf.chain_der, vec![root.certificate_der.clone()]);

        // Issuer DN of the leaf equals the subject DN of the root.
        let (_, leaf_cert) = X509Certificate::from_der(&leaf.certificate_der).unwrap();
        let (_, root_cert) = X509Certificate::from_der(&root.certificate_der).unwrap();
        assert_eq!(leaf_cert.issuer(), root_cert.subject());
    }
}
