//! SD-JWT style verifiable credentials bound to DIDs.
//!
//! The issuer signs a body that commits to salted claim digests; the holder
//! later discloses any subset of the claims. A presentation is holder-bound
//! (nonce + audience + a signature by the subject's authentication key)
//! whenever the credential subject differs from the DID authenticated on the
//! channel — if they match, DID ownership was already proven during the
//! handshake and the holder proof may be empty.
//!
//! Serialized form: dot-separated base64url segments
//! `signed-body ‖ disclosures ‖ optional holder binding`.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cert::{verify_with_key, KeyPair};
use crate::did::{CachePolicy, Did, KeyPurpose, Resolver};
use crate::util::{b64url, b64url_decode, canonical_json, sha256, CLOCK_SKEW_SECS};
use crate::vdr::VdrError;

#[derive(Debug, Error)]
pub enum VcError {
    #[error("credential has no claims")]
    EmptyClaims,
    #[error("claim {0:?} was not issued")]
    UnknownClaim(String),
    #[error("issuer signature does not verify")]
    BadIssuerSignature,
    #[error("disclosure digest not committed in the signed body")]
    DigestMismatch,
    #[error("credential outside its validity window")]
    Expired,
    #[error("credential has been revoked")]
    Revoked,
    #[error("issuer not accepted by policy")]
    IssuerNotAccepted,
    #[error("holder binding required but absent")]
    HolderBindingRequired,
    #[error("holder binding invalid")]
    HolderBindingInvalid,
    #[error("resolution failed: {0}")]
    ResolutionFailed(String),
    #[error("malformed credential: {0}")]
    Malformed(String),
}

impl VcError {
    pub fn code(&self) -> &'static str {
        match self {
            VcError::EmptyClaims => "empty_claims",
            VcError::UnknownClaim(_) => "unknown_claim",
            VcError::BadIssuerSignature => "bad_issuer_signature",
            VcError::DigestMismatch => "digest_mismatch",
            VcError::Expired => "expired",
            VcError::Revoked => "revoked",
            VcError::IssuerNotAccepted => "issuer_not_accepted",
            VcError::HolderBindingRequired => "holder_binding_required",
            VcError::HolderBindingInvalid => "holder_binding_invalid",
            VcError::ResolutionFailed(_) => "resolution_failed",
            VcError::Malformed(_) => "malformed_credential",
        }
    }
}

/// Where a credential's revocation bit lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusRef {
    pub list_id: String,
    pub index: u64,
}

/// The issuer-signed portion. Claim values never appear here — only their
/// salted digests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialBody {
    pub issuer: Did,
    pub subject: Did,
    /// base64url(sha256(canonical disclosure)) per claim, sorted.
    pub claim_digests: Vec<String>,
    pub not_before: DateTime<Utc>,
    pub not_after: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status_ref: Option<StatusRef>,
}

impl CredentialBody {
    fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(self)
    }
}

/// One disclosable claim: 16-byte salt, name, value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disclosure {
    pub salt: String,
    pub name: String,
    pub value: Value,
}

impl Disclosure {
    /// Canonical encoding committed to by the signed body:
    /// `[salt_b64url, name, value]` as canonical JSON.
    fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(&serde_json::json!([self.salt, self.name, self.value]))
    }

    pub fn digest(&self) -> String {
        b64url(&sha256(&self.canonical_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdJwtCredential {
    pub body: CredentialBody,
    /// Base64url Ed25519 signature over the canonical body.
    pub issuer_signature: String,
    pub disclosures: Vec<Disclosure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HolderBinding {
    pub nonce: String,
    pub audience: String,
    /// base64url(sha256(presented `body.disclosures` segments)), binding the
    /// proof to this exact presentation.
    pub sd_hash: String,
    /// Base64url signature by the subject's authentication key.
    pub signature: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presentation {
    pub body: CredentialBody,
    pub issuer_signature: String,
    pub disclosures: Vec<Disclosure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holder_binding: Option<HolderBinding>,
    pub presented_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CredentialStatus {
    Valid,
    Expired,
    Revoked,
}

/// Claims that survived verification.
#[derive(Debug, Clone, Serialize)]
pub struct VerifiedClaims {
    pub claims: BTreeMap<String, Value>,
    pub issuer: Did,
    pub subject: Did,
    pub status: CredentialStatus,
    pub holder_binding_checked: bool,
}

/// Issues a credential over `claims`. Fresh random salts make repeated
/// issuance of identical claims unlinkable by digest.
pub fn issue(
    issuer_key: &KeyPair,
    issuer: &Did,
    subject: &Did,
    claims: &BTreeMap<String, Value>,
    not_before: DateTime<Utc>,
    not_after: DateTime<Utc>,
    status_ref: Option<StatusRef>,
) -> Result<SdJwtCredential, VcError> {
    if claims.is_empty() {
        return Err(VcError::EmptyClaims);
    }
    let mut disclosures = Vec::with_capacity(claims.len());
    for (name, value) in claims {
        let mut salt = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut salt);
        disclosures.push(Disclosure {
            salt: b64url(&salt),
            name: name.clone(),
            value: value.clone(),
        });
    }
    let mut claim_digests: Vec<String> = disclosures.iter().map(Disclosure::digest).collect();
    claim_digests.sort();
    let body = CredentialBody {
        issuer: issuer.clone(),
        subject: subject.clone(),
        claim_digests,
        not_before,
        not_after,
        status_ref,
    };
    let issuer_signature = b64url(&issuer_key.sign(&body.canonical_bytes()));
    Ok(SdJwtCredential {
        body,
        issuer_signature,
        disclosures,
    })
}

/// Holder inputs for producing a bound presentation.
pub struct HolderBindingRequest<'a> {
    pub holder_key: &'a KeyPair,
    pub nonce: &'a [u8],
    pub audience: &'a str,
}

/// Derives a presentation disclosing exactly `disclose`. Undisclosed claim
/// values do not appear anywhere in the serialized bytes.
pub fn derive_presentation(
    credential: &SdJwtCredential,
    disclose: &[&str],
    binding: Option<HolderBindingRequest<'_>>,
) -> Result<Presentation, VcError> {
    let mut selected = Vec::with_capacity(disclose.len());
    for name in disclose {
        let d = credential
            .disclosures
            .iter()
            .find(|d| d.name == *name)
            .ok_or_else(|| VcError::UnknownClaim(name.to_string()))?;
        selected.push(d.clone());
    }
    let mut presentation = Presentation {
        body: credential.body.clone(),
        issuer_signature: credential.issuer_signature.clone(),
        disclosures: selected,
        holder_binding: None,
        presented_at: Utc::now(),
    };
    if let Some(req) = binding {
        let sd_hash = presentation_sd_hash(&presentation);
        let nonce = b64url(req.nonce);
        let payload = binding_payload(&nonce, req.audience, &sd_hash);
        let signature = b64url(&req.holder_key.sign(&payload));
        presentation.holder_binding = Some(HolderBinding {
            nonce,
            audience: req.audience.to_string(),
            sd_hash,
            signature,
        });
    }
    Ok(presentation)
}

fn binding_payload(nonce_b64: &str, audience: &str, sd_hash: &str) -> Vec<u8> {
    canonical_json(&serde_json::json!({
        "aud": audience,
        "nonce": nonce_b64,
        "sd_hash": sd_hash,
    }))
}

fn presentation_sd_hash(p: &Presentation) -> String {
    let prefix = format!("{}.{}", body_segment(p), disclosures_segment(p));
    b64url(&sha256(prefix.as_bytes()))
}

fn body_segment(p: &Presentation) -> String {
    let signed = serde_json::json!({
        "body": p.body,
        "signature": p.issuer_signature,
    });
    b64url(&canonical_json(&signed))
}

fn disclosures_segment(p: &Presentation) -> String {
    let arr: Vec<Value> = p
        .disclosures
        .iter()
        .map(|d| serde_json::json!([d.salt, d.name, d.value]))
        .collect();
    b64url(&canonical_json(&arr))
}

impl Presentation {
    /// Compact three-part dotted form. The binding segment is present only
    /// for holder-bound presentations.
    pub fn to_compact(&self) -> String {
        let mut out = format!("{}.{}", body_segment(self), disclosures_segment(self));
        if let Some(binding) = &self.holder_binding {
            out.push('.');
            out.push_str(&b64url(&canonical_json(binding)));
        }
        out
    }

    pub fn from_compact(text: &str) -> Result<Presentation, VcError> {
        let parts: Vec<&str> = text.split('.').collect();
        if parts.len() != 2 && parts.len() != 3 {
            return Err(VcError::Malformed(format!(
                "expected 2 or 3 segments, got {}",
                parts.len()
            )));
        }
        let body_bytes =
            b64url_decode(parts[0]).map_err(|e| VcError::Malformed(e.to_string()))?;
        #[derive(Deserialize)]
        struct Signed {
            body: CredentialBody,
            signature: String,
        }
        let signed: Signed = serde_json::from_slice(&body_bytes)
            .map_err(|e| VcError::Malformed(e.to_string()))?;
        let disc_bytes =
            b64url_decode(parts[1]).map_err(|e| VcError::Malformed(e.to_string()))?;
        let raw: Vec<(String, String, Value)> = serde_json::from_slice(&disc_bytes)
            .map_err(|e| VcError::Malformed(e.to_string()))?;
        let disclosures = raw
            .into_iter()
            .map(|(salt, name, value)| Disclosure { salt, name, value })
            .collect();
        let holder_binding = if parts.len() == 3 {
            let bytes = b64url_decode(parts[2]).map_err(|e| VcError::Malformed(e.to_string()))?;
            Some(
                serde_json::from_slice(&bytes)
                    .map_err(|e| VcError::Malformed(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Presentation {
            body: signed.body,
            issuer_signature: signed.signature,
            disclosures,
            holder_binding,
            presented_at: Utc::now(),
        })
    }
}

impl SdJwtCredential {
    pub fn claim_names(&self) -> Vec<&str> {
        self.disclosures.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("credential serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, VcError> {
        serde_json::from_str(text).map_err(|e| VcError::Malformed(e.to_string()))
    }
}

/// Revocation lookup abstraction; backed by the registry in production and
/// by stubs in tests.
pub trait StatusChecker: Send + Sync {
    fn is_revoked(&self, list_id: &str, index: u64) -> Result<bool, VdrError>;
}

/// For credentials without status references.
pub struct NoStatusChecker;

impl StatusChecker for NoStatusChecker {
    fn is_revoked(&self, _list_id: &str, _index: u64) -> Result<bool, VdrError> {
        Err(VdrError::NotFound)
    }
}

/// Checks the revocation bit behind a status reference.
pub fn check_status(
    status_ref: &StatusRef,
    checker: &dyn StatusChecker,
) -> Result<CredentialStatus, VdrError> {
    let revoked = checker.is_revoked(&status_ref.list_id, status_ref.index)?;
    Ok(if revoked {
        CredentialStatus::Revoked
    } else {
        CredentialStatus::Valid
    })
}

/// Verification policy. `expected_subject` is the DID authenticated on the
/// channel; when the credential subject matches it, the holder proof may be
/// absent.
pub struct VerifyPolicy<'a> {
    pub expected_subject: Option<&'a Did>,
    pub accepted_issuers: &'a [Did],
    /// The nonce from the verifier's presentation request.
    pub nonce: Option<&'a [u8]>,
    /// The audience the binding must name (the verifier's channel DID or
    /// endpoint string).
    pub audience: Option<&'a str>,
    pub now: DateTime<Utc>,
    pub cache: CachePolicy,
}

impl<'a> Default for VerifyPolicy<'a> {
    fn default() -> Self {
        Self {
            expected_subject: None,
            accepted_issuers: &[],
            nonce: None,
            audience: None,
            now: Utc::now(),
            cache: CachePolicy::default(),
        }
    }
}

/// Verifies a presentation: issuer signature via the resolved issuer
/// document, digest membership per disclosure, validity window, revocation
/// status, and the holder-binding rule.
pub fn verify_presentation(
    p: &Presentation,
    policy: &VerifyPolicy<'_>,
    resolver: &Resolver,
    status_checker: &dyn StatusChecker,
) -> Result<VerifiedClaims, VcError> {
    if !policy.accepted_issuers.is_empty() && !policy.accepted_issuers.contains(&p.body.issuer) {
        return Err(VcError::IssuerNotAccepted);
    }

    // Issuer signature against the issuer's *current* document.
    let issuer_doc = resolver
        .resolve(&p.body.issuer, policy.cache)
        .map_err(|e| VcError::ResolutionFailed(e.to_string()))?
        .document;
    let sig = b64url_decode(&p.issuer_signature).map_err(|_| VcError::BadIssuerSignature)?;
    let body_bytes = p.body.canonical_bytes();
    let signed_ok = issuer_doc
        .methods_with_purpose(KeyPurpose::Assertion)
        .any(|vm| verify_with_key(vm.key_type, &vm.public_key, &body_bytes, &sig));
    if !signed_ok {
        return Err(VcError::BadIssuerSignature);
    }

    // Every disclosure must be committed in the signed body.
    for d in &p.disclosures {
        if !p.body.claim_digests.contains(&d.digest()) {
            return Err(VcError::DigestMismatch);
        }
    }

    let t = policy.now.timestamp();
    if t < p.body.not_before.timestamp() - CLOCK_SKEW_SECS
        || t > p.body.not_after.timestamp() + CLOCK_SKEW_SECS
    {
        return Err(VcError::Expired);
    }

    if let Some(status_ref) = &p.body.status_ref {
        match check_status(status_ref, status_checker) {
            Ok(CredentialStatus::Revoked) => return Err(VcError::Revoked),
            Ok(_) => {}
            Err(e) => return Err(VcError::ResolutionFailed(e.to_string())),
        }
    }

    // Holder binding is required exactly when the subject is not the DID
    // already proven on the channel.
    let binding_required = match policy.expected_subject {
        Some(channel_did) => p.body.subject != *channel_did,
        None => true,
    };
    let mut holder_binding_checked = false;
    if let Some(binding) = &p.holder_binding {
        verify_holder_binding(p, binding, policy, resolver)?;
        holder_binding_checked = true;
    } else if binding_required {
        return Err(VcError::HolderBindingRequired);
    }

    let claims = p
        .disclosures
        .iter()
        .map(|d| (d.name.clone(), d.value.clone()))
        .collect();
    Ok(VerifiedClaims {
        claims,
        issuer: p.body.issuer.clone(),
        subject: p.body.subject.clone(),
        status: CredentialStatus::Valid,
        holder_binding_checked,
    })
}

fn verify_holder_binding(
    p: &Presentation,
    binding: &HolderBinding,
    policy: &VerifyPolicy<'_>,
    resolver: &Resolver,
) -> Result<(), VcError> {
    if let Some(nonce) = policy.nonce {
        if binding.nonce != b64url(nonce) {
            return Err(VcError::HolderBindingInvalid);
        }
    }
    if let Some(audience) = policy.audience {
        if binding.audience != audience {
            return Err(VcError::HolderBindingInvalid);
        }
    }
    if binding.sd_hash != presentation_sd_hash(p) {
        return Err(VcError::HolderBindingInvalid);
    }
    let subject_doc = resolver
        .resolve(&p.body.subject, policy.cache)
        .map_err(|e| VcError::ResolutionFailed(e.to_string()))?
        .document;
    let payload = binding_payload(&binding.nonce, &binding.audience, &binding.sd_hash);
    let sig = b64url_decode(&binding.signature).map_err(|_| VcError::HolderBindingInvalid)?;
    let ok = subject_doc
        .methods_with_purpose(KeyPurpose::Authentication)
        .any(|vm| verify_with_key(vm.key_type, &vm.public_key, &payload, &sig));
    if ok {
        Ok(())
    } else {
        Err(VcError::HolderBindingInvalid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cert::KeyPair;
    use crate::did::{make_key_did, KeyType};
    use serde_json::json;

    struct Fixture {
        issuer: Did,
        issuer_key: KeyPair,
        subject: Did,
        subject_key: KeyPair,
        resolver: Resolver,
    }

    fn fixture() -> Fixture {
        let issuer_key = KeyPair::generate(KeyType::Ed25519);
        let (issuer, _) = make_key_did(&issuer_key.public_key).unwrap();
        let subject_key = KeyPair::generate(KeyType::Ed25519);
        let (subject, _) = make_key_did(&subject_key.public_key).unwrap();
        Fixture {
            issuer,
            issuer_key,
            subject,
            subject_key,
            resolver: Resolver::with_builtins(),
        }
    }

    fn window() -> (DateTime<Utc>, DateTime<Utc>) {
        let now = Utc::now();
        (now - chrono::Duration::hours(1), now + chrono::Duration::days(7))
    }

    fn claims(pairs: &[(&str, &str)]) -> BTreeMap<String, Value> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), json!(v)))
            .collect()
    }

    #[test]
    fn issue_one_digest_per_claim() {
        let f = fixture();
        let (nb, na) = window();
        let cred = issue(
            &f.issuer_key,
            &f.issuer,
            &f.subject,
            &claims(&[("org", "ExampleCo")]),
            nb,
            na,
            None,
        )
        .unwrap();
        assert_eq!(cred.body.claim_digests.len(), 1);
        assert_eq!(cred.disclosures.len(), 1);
    }

    #[test]
    fn issuing_twice_yields_fresh_digests() {
        let f = fixture();
        let (nb, na) = window();
        let c = claims(&[("org", "ExampleCo")]);
        let a = issue(&f.issuer_key, &f.issuer, &f.subject, &c, nb, na, None).unwrap();
        let b = issue(&f.issuer_key, &f.issuer, &f.subject, &c, nb, na, None).unwrap();
        assert_ne!(a.body.claim_digests, b.body.claim_digests);
    }

    #[test]
    fn empty_claims_rejected() {
        let f = fixture();
        let (nb, na) = window();
        assert!(matches!(
            issue(&f.issuer_key, &f.issuer, &f.subject, &BTreeMap::new(), nb, na, None),
            Err(VcError::EmptyClaims)
        ));
    }

    #[test]
    fn issue_present_verify_round_trip() {
        let f = fixture();
        let (nb, na) = window();
        let original = claims(&[("org", "ExampleCo"), ("role", "ops"), ("id", "E-1")]);
        let cred = issue(&f.issuer_key, &f.issuer, &f.subject, &original, nb, na, None).unwrap();
        let p = derive_presentation(&cred, &["org", "role", "id"], None).unwrap();
        let policy = VerifyPolicy {
            expected_subject: Some(&f.subject),
            ..Default::default()
        };
        let verified = verify_presentation(&p, &policy, &f.resolver, &NoStatusChecker).unwrap();
        assert_eq!(verified.claims, original);
        assert_eq!(verified.issuer, f.issuer);
        assert_eq!(verified.subject, f.subject);
        assert_eq!(verified.status, CredentialStatus::Valid);
    }

    #[test]
    fn minimal_disclosure_hides_other_values() {
        let f = fixture();
        let (nb, na) = window();
        let cred = issue(
            &f.issuer_key,
            &f.issuer,
            &f.subject,
            &claims(&[("a", "VALUE-A-9d2"), ("b", "VALUE-B-7x1"), ("c", "VALUE-C-4q8")]),
            nb,
            na,
            None,
        )
        .unwrap();
        let p = derive_presentation(&cred, &["a"], None).unwrap();
        let compact = p.to_compact();
        // Values are plain ASCII, so base64url of any segment containing
        // them would contain them only after decoding; check decoded bytes.
        for segment in compact.split('.') {
            let bytes = b64url_decode(segment).unwrap();
            let text = String::from_utf8_lossy(&bytes);
            assert!(!text.contains("VALUE-B-7x1"));
            assert!(!text.contains("VALUE-C-4q8"));
        }
        assert!(compact.split('.').any(|s| {
            String::from_utf8_lossy(&b64url_decode(s).unwrap()).contains("VALUE-A-9d2")
        }));

        let policy = VerifyPolicy {
            expected_subject: Some(&f.subject),
            ..Default::default()
        };
        let verified = verify_presentation(&p, &policy, &f.resolver, &NoStatusChecker).unwrap();
        assert_eq!(verified.claims.len(), 1);
        assert!(verified.claims.contains_key("a"));
    }

    #[test]
    fn zero_disclosure_presentation_still_valid() {
        let f = fixture();
        let (nb, na) = window();
        let cred = issue(
            &f.issuer_key,
            &f.issuer,
            &f.subject,
            &claims(&[("a", "1")]),
            nb,
            na,
            None,
        )
        .unwrap();
        let p = derive_presentation(&cred, &[], None).unwrap();
        let policy = VerifyPolicy {
            expected_subject: Some(&f.subject),
            ..Default::default()
        };
        let verified = verify_presentation(&p, &policy, &f.resolver, &NoStatusChecker).unwrap();
        assert!(verified.claims.is_empty());
    }

    #[test]
    fn unknown_claim_rejected() {
        let f = fixture();
        let (nb, na) = window();
        let cred = issue(
            &f.issuer_key,
            &f.issuer,
            &f.subject,
            &claims(&[("a", "1")]),
            nb,
            na,
            None,
        )
        .unwrap();
        assert!(matches!(
            derive_presentation(&cred, &["d"], None),
            Err(VcError::UnknownClaim(_))
        ));
    }

    #[test]
    fn tampered_disclosure_value_detected() {
        let f = fixture();
        let (nb, na) = window();
        let cred = issue(
            &f.issuer_key,
            &f.issuer,
            &f.subject,
            &claims(&[("org", "ExampleCo")]),
            nb,
            na,
            None,
        )
        .unwrap();
        let mut p = derive_presentation(&cred, &["org"], None).unwrap();
        p.disclosures[0].value = json!("EvilCo");
        let policy = VerifyPolicy {
            expected_subject: Some(&f.subject),
            ..Default::default()
        };
        assert!(matches!(
            verify_presentation(&p, &policy, &f.resolver, &NoStatusChecker),
            Err(VcError::DigestMismatch)
        ));
    }

    #[test]
    fn holder_binding_rule_matrix() {
        let f = fixture();
        let (nb, na) = window();
        let cred = issue(
            &f.issuer_key,
            &f.issuer,
            &f.subject,
            &claims(&[("org", "ExampleCo")]),
            nb,
            na,
            None,
        )
        .unwrap();
        let nonce = [7u8; 16];
        let other_key = KeyPair::generate(KeyType::Ed25519);
        let (channel_did, _) = make_key_did(&other_key.public_key).unwrap();

        // subject == channel DID, no binding: accepted.
        let p = derive_presentation(&cred, &["org"], None).unwrap();
        let policy = VerifyPolicy {
            expected_subject: Some(&f.subject),
            ..Default::default()
        };
        assert!(verify_presentation(&p, &policy, &f.resolver, &NoStatusChecker).is_ok());

        // subject != channel DID, no binding: required.
        let policy = VerifyPolicy {
            expected_subject: Some(&channel_did),
            ..Default::default()
        };
        assert!(matches!(
            verify_presentation(&p, &policy, &f.resolver, &NoStatusChecker),
            Err(VcError::HolderBindingRequired)
        ));

        // subject != channel DID, valid binding: accepted.
        let bound = derive_presentation(
            &cred,
            &["org"],
            Some(HolderBindingRequest {
                holder_key: &f.subject_key,
                nonce: &nonce,
                audience: "did:key:verifier",
            }),
        )
        .unwrap();
        let policy = VerifyPolicy {
            expected_subject: Some(&channel_did),
            nonce: Some(&nonce),
            audience: Some("did:key:verifier"),
            ..Default::default()
        };
        let verified =
            verify_presentation(&bound, &policy, &f.resolver, &NoStatusChecker).unwrap();
        assert!(verified.holder_binding_checked);

        // subject == channel DID, binding present anyway: verified, accepted.
        let policy = VerifyPolicy {
            expected_subject: Some(&f.subject),
            nonce: Some(&nonce),
            audience: Some("did:key:verifier"),
            ..Default::default()
        };
        assert!(verify_presentation(&bound, &policy, &f.resolver, &NoStatusChecker).is_ok());
    }

    #[test]
    fn replayed_binding_rejected_under_fresh_nonce() {
        let f = fixture();
        let (nb, na) = window();
        let cred = issue(
            &f.issuer_key,
            &f.issuer,
            &f.subject,
            &claims(&[("org", "ExampleCo")]),
            nb,
            na,
            None,
        )
        .unwrap();
        let bound = derive_presentation(
            &cred,
            &["org"],
            Some(HolderBindingRequest {
                holder_key: &f.subject_key,
                nonce: &[1u8; 16],
                audience: "aud",
            }),
        )
        .unwrap();
        let policy = VerifyPolicy {
            expected_subject: None,
            nonce: Some(&[2u8; 16]),
            audience: Some("aud"),
            ..Default::default()
        };
        assert!(matches!(
            verify_presentation(&bound, &policy, &f.resolver, &NoStatusChecker),
            Err(VcError::HolderBindingInvalid)
        ));
    }

    #[test]
    fn expired_credential_rejected() {
        let f = fixture();
        let nb = Utc::now() - chrono::Duration::days(10);
        let na = Utc::now() - chrono::Duration::days(3);
        let cred = issue(
            &f.issuer_key,
            &f.issuer,
            &f.subject,
            &claims(&[("a", "1")]),
            nb,
            na,
            None,
        )
        .unwrap();
        let p = derive_presentation(&cred, &["a"], None).unwrap();
        let policy = VerifyPolicy {
            expected_subject: Some(&f.subject),
            ..Default::default()
        };
        assert!(matches!(
            verify_presentation(&p, &policy, &f.resolver, &NoStatusChecker),
            Err(VcError::Expired)
        ));
    }

    #[test]
    fn issuer_not_accepted() {
        let f = fixture();
        let (nb, na) = window();
        let cred = issue(
            &f.issuer_key,
            &f.issuer,
            &f.subject,
            &claims(&[("a", "1")]),
            nb,
            na,
            None,
        )
        .unwrap();
        let p = derive_presentation(&cred, &["a"], None).unwrap();
        let other = make_key_did(&KeyPair::generate(KeyType::Ed25519).public_key)
            .unwrap()
            .0;
        let accepted = [other];
        let policy = VerifyPolicy {
            expected_subject: Some(&f.subject),
            accepted_issuers: &accepted,
            ..Default::default()
        };
        assert!(matches!(
            verify_presentation(&p, &policy, &f.resolver, &NoStatusChecker),
            Err(VcError::IssuerNotAccepted)
        ));
    }

    #[test]
    fn compact_form_round_trips() {
        let f = fixture();
        let (nb, na) = window();
        let cred = issue(
            &f.issuer_key,
            &f.issuer,
            &f.subject,
            &claims(&[("a", "1"), ("b", "2")]),
            nb,
            na,
            Some(StatusRef {
                list_id: "rl".into(),
                index: 4,
            }),
        )
        .unwrap();
        let p = derive_presentation(
            &cred,
            &["a"],
            Some(HolderBindingRequest {
                holder_key: &f.subject_key,
                nonce: &[9u8; 16],
                audience: "aud",
            }),
        )
        .unwrap();
        let compact = p.to_compact();
        let back = Presentation::from_compact(&compact).unwrap();
        assert_eq!(back.body, p.body);
        assert_eq!(back.disclosures, p.disclosures);
        assert_eq!(back.holder_binding, p.holder_binding);
        assert_eq!(back.to_compact(), compact);
    }

    #[test]
    fn salt_uniqueness_over_many_issuances() {
        let f = fixture();
        let (nb, na) = window();
        let c = claims(&[("k", "same-value")]);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let cred = issue(&f.issuer_key, &f.issuer, &f.subject, &c, nb, na, None).unwrap();
            assert!(
                seen.insert(cred.body.claim_digests[0].clone()),
                "digest reuse implies salt reuse"
            );
        }
    }
}
