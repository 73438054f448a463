//! Decentralized identifiers and their documents.
//!
//! A DID is a string of the form `did:<method>:<subject_id>` that resolves to
//! a single DID document holding the subject's verification material. The
//! registry-free methods (`key` and its alias `peer`) encode the document in
//! the identifier itself; `vdrsim` documents live on the simulated registry.

mod resolver;

pub use resolver::{
    CacheMode, CachePolicy, KeyMethodHandler, MethodHandler, ResolutionResult, ResolutionSource,
    Resolver, ResolverStats,
};

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::util::{canonical_json, multibase_b58, multibase_b58_decode};

#[derive(Debug, Error)]
pub enum DidError {
    #[error("malformed DID: {0}")]
    MalformedDid(String),
    #[error("invalid key material")]
    InvalidKey,
    #[error("malformed DID document: {0}")]
    MalformedDocument(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A parsed decentralized identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Did {
    method: String,
    subject_id: String,
    full: String,
}

impl Did {
    pub fn method(&self) -> &str {
        &self.method
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn as_str(&self) -> &str {
        &self.full
    }
}

impl fmt::Display for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.full)
    }
}

impl FromStr for Did {
    type Err = DidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_did(s)
    }
}

impl Serialize for Did {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.full)
    }
}

impl<'de> Deserialize<'de> for Did {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_did(&s).map_err(D::Error::custom)
    }
}

/// Parses `did:<method>:<subject_id>`. The method is non-empty lowercase
/// ASCII letters/digits; the subject id is non-empty, printable ASCII with no
/// whitespace (it may itself contain colons).
pub fn parse_did(text: &str) -> Result<Did, DidError> {
    let rest = text
        .strip_prefix("did:")
        .ok_or_else(|| DidError::MalformedDid(format!("missing did: prefix in {text:?}")))?;
    let (method, subject_id) = rest
        .split_once(':')
        .ok_or_else(|| DidError::MalformedDid(format!("missing method separator in {text:?}")))?;
    if method.is_empty() {
        return Err(DidError::MalformedDid("empty method".into()));
    }
    if !method
        .bytes()
        .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit())
    {
        return Err(DidError::MalformedDid(format!(
            "method {method:?} must be lowercase ASCII letters/digits"
        )));
    }
    if subject_id.is_empty() {
        return Err(DidError::MalformedDid("empty subject id".into()));
    }
    if !subject_id
        .bytes()
        .all(|b| b.is_ascii_graphic())
    {
        return Err(DidError::MalformedDid(format!(
            "subject id in {text:?} contains whitespace or non-printable characters"
        )));
    }
    Ok(Did {
        method: method.to_string(),
        subject_id: subject_id.to_string(),
        full: text.to_string(),
    })
}

/// Key types carried in verification methods. Ed25519 and P-256 sign;
/// X25519 entries provide key agreement material for the envelope baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeyType {
    Ed25519,
    EcdsaP256,
    X25519,
}

impl KeyType {
    /// Multicodec prefix used in `publicKeyMultibase`.
    fn multicodec_prefix(self) -> [u8; 2] {
        match self {
            KeyType::Ed25519 => [0xed, 0x01],
            KeyType::EcdsaP256 => [0x80, 0x24],
            KeyType::X25519 => [0xec, 0x01],
        }
    }

    fn from_multicodec(data: &[u8]) -> Option<(Self, &[u8])> {
        if data.len() < 2 {
            return None;
        }
        let kt = match [data[0], data[1]] {
            [0xed, 0x01] => KeyType::Ed25519,
            [0x80, 0x24] => KeyType::EcdsaP256,
            [0xec, 0x01] => KeyType::X25519,
            _ => return None,
        };
        Some((kt, &data[2..]))
    }

    /// Expected canonical encoded length of a public key of this type.
    pub fn key_len(self) -> usize {
        match self {
            KeyType::Ed25519 | KeyType::X25519 => 32,
            KeyType::EcdsaP256 => 33,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum KeyPurpose {
    Authentication,
    Assertion,
    KeyAgreement,
}

/// One entry of a DID document's verification material.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationMethod {
    /// Fragment identifier, unique within the document.
    pub id: String,
    pub key_type: KeyType,
    /// Canonical key bytes (32 raw bytes for Ed25519/X25519, 33-byte
    /// compressed point for P-256).
    pub public_key: Vec<u8>,
    pub purposes: BTreeSet<KeyPurpose>,
}

impl VerificationMethod {
    pub fn new(
        id: impl Into<String>,
        key_type: KeyType,
        public_key: Vec<u8>,
        purposes: impl IntoIterator<Item = KeyPurpose>,
    ) -> Result<Self, DidError> {
        let public_key = canonicalize_key(key_type, public_key)?;
        Ok(Self {
            id: id.into(),
            key_type,
            public_key,
            purposes: purposes.into_iter().collect(),
        })
    }

    pub fn has_purpose(&self, p: KeyPurpose) -> bool {
        self.purposes.contains(&p)
    }

    pub fn public_key_multibase(&self) -> String {
        let mut data = self.key_type.multicodec_prefix().to_vec();
        data.extend_from_slice(&self.public_key);
        multibase_b58(&data)
    }
}

fn canonicalize_key(key_type: KeyType, key: Vec<u8>) -> Result<Vec<u8>, DidError> {
    match key_type {
        KeyType::Ed25519 | KeyType::X25519 => {
            if key.len() != 32 {
                return Err(DidError::InvalidKey);
            }
            Ok(key)
        }
        KeyType::EcdsaP256 => match key.len() {
            33 => Ok(key),
            65 => {
                use p256::elliptic_curve::sec1::ToEncodedPoint;
                let pk = p256::PublicKey::from_sec1_bytes(&key)
                    .map_err(|_| DidError::InvalidKey)?;
                Ok(pk.to_encoded_point(true).as_bytes().to_vec())
            }
            _ => Err(DidError::InvalidKey),
        },
    }
}

/// The verification-material record a DID resolves to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DidDocument {
    pub id: Did,
    pub verification_methods: Vec<VerificationMethod>,
    /// 1-based, increases by one per update.
    pub version: u64,
    pub updated_at: DateTime<Utc>,
}

impl DidDocument {
    pub fn new(
        id: Did,
        verification_methods: Vec<VerificationMethod>,
        version: u64,
        updated_at: DateTime<Utc>,
    ) -> Result<Self, DidError> {
        let doc = Self {
            id,
            verification_methods,
            version,
            updated_at,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<(), DidError> {
        if self.verification_methods.is_empty() {
            return Err(DidError::MalformedDocument(
                "document has no verification methods".into(),
            ));
        }
        if self.version == 0 {
            return Err(DidError::MalformedDocument("version is 1-based".into()));
        }
        let mut seen = BTreeSet::new();
        for vm in &self.verification_methods {
            if !seen.insert(&vm.id) {
                return Err(DidError::MalformedDocument(format!(
                    "duplicate verification method id {:?}",
                    vm.id
                )));
            }
            if vm.public_key.len() != vm.key_type.key_len() {
                return Err(DidError::MalformedDocument(format!(
                    "key {:?} has wrong length for its type",
                    vm.id
                )));
            }
        }
        Ok(())
    }

    pub fn find_method(&self, fragment: &str) -> Option<&VerificationMethod> {
        self.verification_methods.iter().find(|m| m.id == fragment)
    }

    pub fn methods_with_purpose(
        &self,
        purpose: KeyPurpose,
    ) -> impl Iterator<Item = &VerificationMethod> {
        self.verification_methods
            .iter()
            .filter(move |m| m.has_purpose(purpose))
    }

    /// Canonical serialization: sorted-key compact JSON of the exchange
    /// schema. Equality of documents is byte equality of this form.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(self)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DidError> {
        let doc: DidDocument = serde_json::from_str(text)
            .map_err(|e| DidError::MalformedDocument(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self, DidError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), DidError> {
        std::fs::write(path, self.to_json_pretty())?;
        Ok(())
    }
}

// Exchange schema: {"id", "updatedAt", "verificationMethod":
// [{"id","type","publicKeyMultibase","purpose"}], "version"}.
#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct DocumentJson {
    id: String,
    updated_at: String,
    verification_method: Vec<MethodJson>,
    version: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct MethodJson {
    id: String,
    #[serde(rename = "type")]
    key_type: String,
    public_key_multibase: String,
    purpose: Vec<String>,
}

impl Serialize for DidDocument {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let json = DocumentJson {
            id: self.id.to_string(),
            updated_at: self.updated_at.to_rfc3339_opts(SecondsFormat::Secs, true),
            verification_method: self
                .verification_methods
                .iter()
                .map(|m| MethodJson {
                    id: m.id.clone(),
                    key_type: "Multikey".to_string(),
                    public_key_multibase: m.public_key_multibase(),
                    purpose: m
                        .purposes
                        .iter()
                        .map(|p| purpose_str(*p).to_string())
                        .collect(),
                })
                .collect(),
            version: self.version,
        };
        json.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DidDocument {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let json = DocumentJson::deserialize(deserializer)?;
        let id = parse_did(&json.id).map_err(D::Error::custom)?;
        let updated_at = DateTime::parse_from_rfc3339(&json.updated_at)
            .map_err(D::Error::custom)?
            .with_timezone(&Utc);
        let mut methods = Vec::with_capacity(json.verification_method.len());
        for m in json.verification_method {
            let decoded = multibase_b58_decode(&m.public_key_multibase)
                .ok_or_else(|| D::Error::custom("bad multibase key"))?;
            let (key_type, key) = KeyType::from_multicodec(&decoded)
                .ok_or_else(|| D::Error::custom("unknown key multicodec"))?;
            let mut purposes = BTreeSet::new();
            for p in m.purpose {
                purposes.insert(parse_purpose(&p).ok_or_else(|| {
                    D::Error::custom(format!("unknown verification purpose {p:?}"))
                })?);
            }
            methods.push(VerificationMethod {
                id: m.id,
                key_type,
                public_key: key.to_vec(),
                purposes,
            });
        }
        Ok(DidDocument {
            id,
            verification_methods: methods,
            version: json.version,
            updated_at,
        })
    }
}

fn purpose_str(p: KeyPurpose) -> &'static str {
    match p {
        KeyPurpose::Authentication => "authentication",
        KeyPurpose::Assertion => "assertion",
        KeyPurpose::KeyAgreement => "keyAgreement",
    }
}

fn parse_purpose(s: &str) -> Option<KeyPurpose> {
    match s {
        "authentication" => Some(KeyPurpose::Authentication),
        "assertion" => Some(KeyPurpose::Assertion),
        "keyAgreement" => Some(KeyPurpose::KeyAgreement),
        _ => None,
    }
}

/// Derives a `did:key` identifier and its document from an Ed25519 public
/// key. Deterministic: the document (including its timestamp) is a pure
/// function of the key bytes, so resolving the DID without any registry
/// reproduces it exactly.
pub fn make_key_did(public_key: &[u8]) -> Result<(Did, DidDocument), DidError> {
    let (did, doc) = derive_key_document("key", public_key)?;
    Ok((did, doc))
}

/// `did:peer` is implemented as the same key-derivation as `did:key`: the
/// document is encoded within the identifier and needs no registry.
pub fn make_peer_did(public_key: &[u8]) -> Result<(Did, DidDocument), DidError> {
    derive_key_document("peer", public_key)
}

pub(crate) fn derive_key_document(
    method: &str,
    public_key: &[u8],
) -> Result<(Did, DidDocument), DidError> {
    let key: [u8; 32] = public_key.try_into().map_err(|_| DidError::InvalidKey)?;
    let vk = ed25519_dalek::VerifyingKey::from_bytes(&key).map_err(|_| DidError::InvalidKey)?;
    if vk.is_weak() {
        return Err(DidError::InvalidKey);
    }
    let mut data = KeyType::Ed25519.multicodec_prefix().to_vec();
    data.extend_from_slice(&key);
    let multibase = multibase_b58(&data);
    let did = parse_did(&format!("did:{method}:{multibase}"))?;
    let vm = VerificationMethod::new(
        multibase,
        KeyType::Ed25519,
        key.to_vec(),
        [KeyPurpose::Authentication, KeyPurpose::Assertion],
    )?;
    let doc = DidDocument::new(did.clone(), vec![vm], 1, Utc.timestamp_opt(0, 0).unwrap())?;
    Ok((did, doc))
}

/// Decodes the Ed25519 public key embedded in a `did:key`/`did:peer`
/// identifier.
pub fn key_from_did(did: &Did) -> Result<[u8; 32], DidError> {
    let data = multibase_b58_decode(did.subject_id())
        .ok_or_else(|| DidError::MalformedDid("subject id is not multibase".into()))?;
    match KeyType::from_multicodec(&data) {
        Some((KeyType::Ed25519, key)) if key.len() == 32 => {
            Ok(key.try_into().expect("length checked"))
        }
        _ => Err(DidError::MalformedDid(
            "subject id does not encode an Ed25519 key".into(),
        )),
    }
}
