//! Parameter negotiation for DID Link sessions.
//!
//! Six hello extensions are modeled: the DID-bearing server name indication
//! (SNI), client name indication (CNI), client/server DID method indications
//! (CMI/SMI), and the presentation protocol proposal/agreement (CPP/SPA).
//! The host TLS stack exposes no raw hello-extension hooks, so the encoded
//! payloads travel in a negotiation preamble frame exchanged as the first
//! post-handshake frames of the identification sub-layer — this also keeps
//! source and target identifiers off the unencrypted hellos, where they
//! would let eavesdroppers trace interactions.

mod codec;
mod table;

pub use codec::{CodecError, EncodedExtension, EXT_CMI, EXT_CNI, EXT_CPP, EXT_SMI, EXT_SNI, EXT_SPA};
pub use table::{all_rows, ExtensionKind, Mark, RowGroup, RowSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cert::{CertBundle, CertKind};
use crate::did::Did;

/// The registered presentation protocol: a minimal profile of the DIF
/// Presentation Exchange request/submission shape.
pub const PRESENTATION_PROTOCOL_DIF_PE2: &str = "dif-pe-2";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientAuthMode {
    None,
    Cert,
    Did,
    DidVc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerAuthMode {
    CertDefault,
    Cert,
    DidDefault,
    Did,
    DidVcDefault,
    DidVc,
}

impl ServerAuthMode {
    pub fn is_default_identity(self) -> bool {
        matches!(
            self,
            ServerAuthMode::CertDefault | ServerAuthMode::DidDefault | ServerAuthMode::DidVcDefault
        )
    }

    pub fn presents_vc(self) -> bool {
        matches!(self, ServerAuthMode::DidVc | ServerAuthMode::DidVcDefault)
    }
}

/// The client's proposed DID Link parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegotiationOffer {
    /// Desired server DID (SNI carrying a DID).
    pub target_server_did: Option<Did>,
    /// Desired server certificate name (SNI carrying a legacy hostname, for
    /// CA-identified servers).
    pub target_server_name: Option<String>,
    /// The client's own DID, announced up front (CNI).
    pub client_did: Option<Did>,
    /// DID methods the client supports and can resolve (CMI), in preference
    /// order.
    pub client_did_methods: Vec<String>,
    /// Presentation protocols the client proposes for the identification
    /// sub-layer (CPP), in preference order.
    pub presentation_protocols: Vec<String>,
    pub client_auth_mode: ClientAuthMode,
}

impl Default for NegotiationOffer {
    fn default() -> Self {
        Self {
            target_server_did: None,
            target_server_name: None,
            client_did: None,
            client_did_methods: Vec::new(),
            presentation_protocols: Vec::new(),
            client_auth_mode: ClientAuthMode::None,
        }
    }
}

#[derive(Debug, Error)]
pub enum OfferError {
    #[error("DID client authentication requires client_did or client_did_methods")]
    MissingDidAnnouncement,
    #[error("target_server_did and target_server_name are mutually exclusive")]
    ConflictingTargets,
}

impl NegotiationOffer {
    pub fn validate(&self) -> Result<(), OfferError> {
        if matches!(
            self.client_auth_mode,
            ClientAuthMode::Did | ClientAuthMode::DidVc
        ) && self.client_did.is_none()
            && self.client_did_methods.is_empty()
        {
            return Err(OfferError::MissingDidAnnouncement);
        }
        if self.target_server_did.is_some() && self.target_server_name.is_some() {
            return Err(OfferError::ConflictingTargets);
        }
        Ok(())
    }

    pub fn sni_present(&self) -> bool {
        self.target_server_did.is_some() || self.target_server_name.is_some()
    }
}

/// The server's decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegotiationAgreement {
    /// Subset of the client's CMI methods the server also supports (SMI),
    /// preserving the client's order. Empty when the server does not answer
    /// CMI for this scenario shape.
    pub server_did_methods: Vec<String>,
    /// Selected presentation protocol (SPA).
    pub agreed_presentation_protocol: Option<String>,
    pub server_auth_mode: ServerAuthMode,
    /// The existence of CPP/SPA legitimizes the identification sub-layer.
    pub identification_enabled: bool,
}

/// What the server is able and willing to do.
#[derive(Clone)]
pub struct ServerCaps {
    /// DID methods the server supports and can resolve.
    pub supported_methods: Vec<String>,
    pub supported_presentation_protocols: Vec<String>,
    pub available_identities: Vec<CertBundle>,
    pub default_identity: CertBundle,
    /// Whether the server intends to present credentials of its own during
    /// identification (the `+VC` server rows).
    pub presents_credentials: bool,
}

impl ServerCaps {
    pub fn single_identity(identity: CertBundle) -> Self {
        Self {
            supported_methods: vec!["key".into(), "peer".into(), "vdrsim".into()],
            supported_presentation_protocols: Vec::new(),
            available_identities: vec![identity.clone()],
            default_identity: identity,
            presents_credentials: false,
        }
    }
}

/// A refused negotiation. Rejections are values, signaled to the peer as a
/// handshake abort.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    #[error("no common DID method")]
    NoCommonMethod,
    #[error("no common presentation protocol")]
    NoCommonPresentationProtocol,
    #[error("server does not own the requested identity")]
    UnknownServerDid,
}

impl Rejection {
    pub fn code(&self) -> &'static str {
        match self {
            Rejection::NoCommonMethod => "no_common_method",
            Rejection::NoCommonPresentationProtocol => "no_common_presentation_protocol",
            Rejection::UnknownServerDid => "unknown_server_did",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "no_common_method" => Some(Rejection::NoCommonMethod),
            "no_common_presentation_protocol" => Some(Rejection::NoCommonPresentationProtocol),
            "unknown_server_did" => Some(Rejection::UnknownServerDid),
            _ => None,
        }
    }
}

/// Runs the server side of the negotiation. Deterministic in
/// `(offer, caps)`; ties break in the client's preference order.
pub fn negotiate(
    offer: &NegotiationOffer,
    caps: &ServerCaps,
) -> Result<NegotiationAgreement, Rejection> {
    // Presentation protocol agreement: first client entry the server
    // supports. A proposal with no overlap aborts early.
    let agreed_presentation_protocol = if offer.presentation_protocols.is_empty() {
        None
    } else {
        Some(
            offer
                .presentation_protocols
                .iter()
                .find(|p| caps.supported_presentation_protocols.contains(p))
                .ok_or(Rejection::NoCommonPresentationProtocol)?
                .clone(),
        )
    };
    let identification_enabled = agreed_presentation_protocol.is_some();

    // Identity selection: an explicit SNI target must be owned; without SNI
    // the default identity is used.
    let selected = if let Some(target) = &offer.target_server_did {
        caps.available_identities
            .iter()
            .find(|b| b.did.as_ref() == Some(target))
            .ok_or(Rejection::UnknownServerDid)?
    } else if let Some(name) = &offer.target_server_name {
        caps.available_identities
            .iter()
            .find(|b| b.did.is_none() && certificate_common_name(&b.certificate_der).as_deref() == Some(name))
            .ok_or(Rejection::UnknownServerDid)?
    } else {
        &caps.default_identity
    };
    let is_default = !offer.sni_present();
    let server_auth_mode = match selected.kind {
        CertKind::DidSelfIssued => {
            if caps.presents_credentials && identification_enabled {
                if is_default {
                    ServerAuthMode::DidVcDefault
                } else {
                    ServerAuthMode::DidVc
                }
            } else if is_default {
                ServerAuthMode::DidDefault
            } else {
                ServerAuthMode::Did
            }
        }
        _ => {
            if is_default {
                ServerAuthMode::CertDefault
            } else {
                ServerAuthMode::Cert
            }
        }
    };

    // Method intersection. A client that listed methods and got no overlap
    // cannot proceed with any DID activity; abort before certificates flow.
    let cmi_present = !offer.client_did_methods.is_empty();
    let intersection: Vec<String> = offer
        .client_did_methods
        .iter()
        .filter(|m| caps.supported_methods.contains(m))
        .cloned()
        .collect();
    if cmi_present && intersection.is_empty() {
        return Err(Rejection::NoCommonMethod);
    }
    // The client must also be able to resolve the server's own DID.
    if cmi_present {
        if let Some(did) = &selected.did {
            if !offer
                .client_did_methods
                .iter()
                .any(|m| m == did.method())
            {
                return Err(Rejection::NoCommonMethod);
            }
        }
    }

    // SMI is answered when the method agreement is load-bearing: credential
    // exchange will happen, or the client announced DID authentication by
    // methods rather than by name and the server identity is not an
    // SNI-pinned certificate (the Table 1 shapes).
    let smi_relevant = identification_enabled
        || (offer.client_auth_mode == ClientAuthMode::Did
            && offer.client_did.is_none()
            && server_auth_mode != ServerAuthMode::Cert);
    let server_did_methods = if cmi_present && smi_relevant {
        intersection
    } else {
        Vec::new()
    };

    Ok(NegotiationAgreement {
        server_did_methods,
        agreed_presentation_protocol,
        server_auth_mode,
        identification_enabled,
    })
}

pub(crate) fn certificate_common_name(der: &[u8]) -> Option<String> {
    use x509_parser::prelude::{FromDer, X509Certificate};
    let (_, cert) = X509Certificate::from_der(der).ok()?;
    cert.subject()
        .iter_common_name()
        .next()
        .and_then(|cn| cn.as_str().ok())
        .map(str::to_string)
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("extension combination matches no scenario row")]
    NoMatchingRow,
}

/// The Table 1 row an (offer, agreement) pair lands on.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioClass {
    pub row: &'static RowSpec,
    pub extensions_present: std::collections::BTreeSet<ExtensionKind>,
}

/// Maps a successful negotiation to the unique scenario row consistent with
/// its auth modes and extension set.
pub fn classify_scenario(
    offer: &NegotiationOffer,
    agreement: &NegotiationAgreement,
) -> Result<ScenarioClass, ClassifyError> {
    let sni = offer.sni_present();
    let cni = offer.client_did.is_some();
    let cmi = !offer.client_did_methods.is_empty();
    let smi = !agreement.server_did_methods.is_empty();
    let cpp = !offer.presentation_protocols.is_empty();
    let spa = agreement.agreed_presentation_protocol.is_some();

    // SMI answers CMI, and SPA answers CPP.
    if smi && !cmi {
        return Err(ClassifyError::NoMatchingRow);
    }
    if (spa != agreement.identification_enabled) || (spa && !cpp) {
        return Err(ClassifyError::NoMatchingRow);
    }
    // CPP/SPA co-occur exactly when a party intends to present credentials.
    let vc_involved = offer.client_auth_mode == ClientAuthMode::DidVc
        || agreement.server_auth_mode.presents_vc();
    if vc_involved != agreement.identification_enabled {
        return Err(ClassifyError::NoMatchingRow);
    }

    let row = table::find_row(
        offer.client_auth_mode,
        agreement.server_auth_mode,
        sni,
        cni,
        cmi,
        smi,
    )
    .ok_or(ClassifyError::NoMatchingRow)?;

    let mut extensions_present = std::collections::BTreeSet::new();
    for (kind, present) in [
        (ExtensionKind::Sni, sni),
        (ExtensionKind::Cni, cni),
        (ExtensionKind::Cmi, cmi),
        (ExtensionKind::Smi, smi),
        (ExtensionKind::Cpp, cpp),
        (ExtensionKind::Spa, spa),
    ] {
        if present {
            extensions_present.insert(kind);
        }
    }
    Ok(ScenarioClass {
        row,
        extensions_present,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cert::{make_did_certificate, validity_days, KeyPair};
    use crate::did::{make_key_did, KeyType};

    fn did_bundle() -> CertBundle {
        let key = KeyPair::generate(KeyType::Ed25519);
        let (did, _) = make_key_did(&key.public_key).unwrap();
        let (nb, na) = validity_days(30);
        make_did_certificate(&did, &key, nb, na).unwrap()
    }

    fn caps_with(methods: &[&str]) -> ServerCaps {
        let mut caps = ServerCaps::single_identity(did_bundle());
        caps.supported_methods = methods.iter().map(|s| s.to_string()).collect();
        caps
    }

    #[test]
    fn smi_preserves_client_order() {
        let caps = caps_with(&["vdrsim", "key"]);
        let offer = NegotiationOffer {
            client_did_methods: vec!["key".into(), "vdrsim".into()],
            client_auth_mode: ClientAuthMode::Did,
            ..Default::default()
        };
        let agreement = negotiate(&offer, &caps).unwrap();
        assert_eq!(agreement.server_did_methods, vec!["key", "vdrsim"]);
    }

    #[test]
    fn method_intersection_subset_of_cmi() {
        let caps = caps_with(&["key", "vdrsim"]);
        let offer = NegotiationOffer {
            client_did_methods: vec!["key".into(), "web".into()],
            client_auth_mode: ClientAuthMode::Did,
            ..Default::default()
        };
        let agreement = negotiate(&offer, &caps).unwrap();
        assert_eq!(agreement.server_did_methods, vec!["key"]);
    }

    #[test]
    fn no_method_overlap_rejected() {
        // Server's own identity is did:key, so restrict its support set.
        let mut caps = caps_with(&["vdrsim"]);
        let offer = NegotiationOffer {
            client_did_methods: vec!["vdrsim".into()],
            client_auth_mode: ClientAuthMode::Did,
            ..Default::default()
        };
        // Client cannot resolve the server's did:key identity.
        assert_eq!(negotiate(&offer, &caps), Err(Rejection::NoCommonMethod));

        caps.supported_methods = vec!["key".into()];
        let offer = NegotiationOffer {
            client_did_methods: vec!["vdrsim".into()],
            client_auth_mode: ClientAuthMode::Did,
            ..Default::default()
        };
        assert_eq!(negotiate(&offer, &caps), Err(Rejection::NoCommonMethod));
    }

    #[test]
    fn presentation_protocol_agreement_and_rejection() {
        let mut caps = caps_with(&["key"]);
        caps.supported_presentation_protocols = vec![PRESENTATION_PROTOCOL_DIF_PE2.into()];
        let offer = NegotiationOffer {
            client_did_methods: vec!["key".into()],
            presentation_protocols: vec![PRESENTATION_PROTOCOL_DIF_PE2.into()],
            client_auth_mode: ClientAuthMode::DidVc,
            ..Default::default()
        };
        let agreement = negotiate(&offer, &caps).unwrap();
        assert_eq!(
            agreement.agreed_presentation_protocol.as_deref(),
            Some(PRESENTATION_PROTOCOL_DIF_PE2)
        );
        assert!(agreement.identification_enabled);

        caps.supported_presentation_protocols.clear();
        assert_eq!(
            negotiate(&offer, &caps),
            Err(Rejection::NoCommonPresentationProtocol)
        );
    }

    #[test]
    fn sni_target_must_be_owned() {
        let caps = caps_with(&["key"]);
        let other = did_bundle();
        let offer = NegotiationOffer {
            target_server_did: other.did.clone(),
            ..Default::default()
        };
        assert_eq!(negotiate(&offer, &caps), Err(Rejection::UnknownServerDid));

        let offer = NegotiationOffer {
            target_server_did: caps.default_identity.did.clone(),
            ..Default::default()
        };
        let agreement = negotiate(&offer, &caps).unwrap();
        assert_eq!(agreement.server_auth_mode, ServerAuthMode::Did);
    }

    #[test]
    fn absent_sni_uses_default_identity() {
        let caps = caps_with(&["key"]);
        let agreement = negotiate(&NegotiationOffer::default(), &caps).unwrap();
        assert_eq!(agreement.server_auth_mode, ServerAuthMode::DidDefault);
        assert!(!agreement.identification_enabled);
    }

    #[test]
    fn negotiate_is_deterministic() {
        let mut caps = caps_with(&["key", "vdrsim"]);
        caps.supported_presentation_protocols = vec![PRESENTATION_PROTOCOL_DIF_PE2.into()];
        caps.presents_credentials = true;
        let offer = NegotiationOffer {
            client_did_methods: vec!["key".into()],
            presentation_protocols: vec![PRESENTATION_PROTOCOL_DIF_PE2.into()],
            client_auth_mode: ClientAuthMode::DidVc,
            ..Default::default()
        };
        let a = negotiate(&offer, &caps).unwrap();
        let b = negotiate(&offer, &caps).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn offer_invariant_enforced() {
        let offer = NegotiationOffer {
            client_auth_mode: ClientAuthMode::Did,
            ..Default::default()
        };
        assert!(offer.validate().is_err());
    }
}
