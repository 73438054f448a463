//! Bit-exact payload formats for the hello extensions.
//!
//! - SNI reuses the standard `server_name` layout (RFC 6066), with the DID
//!   placed verbatim in the host_name bytes when the target is a DID.
//! - CNI: 2-byte length ‖ UTF-8 DID.
//! - CMI/SMI/CPP/SPA: 2-byte entry count ‖ per entry (1-byte length ‖ UTF-8).
//!
//! Unknown extension codes are ignored on decode for forward compatibility.

use thiserror::Error;

use super::{NegotiationAgreement, NegotiationOffer, ServerAuthMode};
use crate::did::parse_did;

/// Standard server_name extension code; the remaining codes sit in the
/// private-use range.
pub const EXT_SNI: u16 = 0x0000;
pub const EXT_CNI: u16 = 0xFF00;
pub const EXT_CMI: u16 = 0xFF01;
pub const EXT_SMI: u16 = 0xFF02;
pub const EXT_CPP: u16 = 0xFF03;
pub const EXT_SPA: u16 = 0xFF04;

pub type EncodedExtension = (u16, Vec<u8>);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("extension payload exceeds 65535 bytes")]
    OversizePayload,
    #[error("malformed extension payload: {0}")]
    MalformedPayload(String),
}

fn push_u16(out: &mut Vec<u8>, v: usize) -> Result<(), CodecError> {
    let v = u16::try_from(v).map_err(|_| CodecError::OversizePayload)?;
    out.extend_from_slice(&v.to_be_bytes());
    Ok(())
}

fn encode_string16(text: &str) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(2 + text.len());
    push_u16(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

fn encode_list(entries: &[String]) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    push_u16(&mut out, entries.len())?;
    for entry in entries {
        let len = u8::try_from(entry.len()).map_err(|_| CodecError::OversizePayload)?;
        out.push(len);
        out.extend_from_slice(entry.as_bytes());
    }
    if out.len() > u16::MAX as usize {
        return Err(CodecError::OversizePayload);
    }
    Ok(out)
}

fn encode_sni(host_name: &str) -> Result<Vec<u8>, CodecError> {
    // server_name_list: u16 list length ‖ (type 0x00 ‖ u16 length ‖ bytes).
    let mut entry = vec![0u8];
    entry.extend_from_slice(&encode_string16(host_name)?);
    let mut out = Vec::with_capacity(2 + entry.len());
    push_u16(&mut out, entry.len())?;
    out.extend_from_slice(&entry);
    Ok(out)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.data.len() {
            return Err(CodecError::MalformedPayload("short payload".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn finished(&self) -> bool {
        self.pos == self.data.len()
    }
}

fn decode_string16(payload: &[u8]) -> Result<String, CodecError> {
    let mut c = Cursor::new(payload);
    let len = c.u16()? as usize;
    let bytes = c.take(len)?;
    if !c.finished() {
        return Err(CodecError::MalformedPayload("trailing bytes".into()));
    }
    String::from_utf8(bytes.to_vec())
        .map_err(|_| CodecError::MalformedPayload("invalid utf-8".into()))
}

fn decode_list(payload: &[u8]) -> Result<Vec<String>, CodecError> {
    let mut c = Cursor::new(payload);
    let count = c.u16()? as usize;
    let mut out = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = c.u8()? as usize;
        let bytes = c.take(len)?;
        out.push(
            String::from_utf8(bytes.to_vec())
                .map_err(|_| CodecError::MalformedPayload("invalid utf-8".into()))?,
        );
    }
    if !c.finished() {
        return Err(CodecError::MalformedPayload("trailing bytes".into()));
    }
    Ok(out)
}

fn decode_sni(payload: &[u8]) -> Result<String, CodecError> {
    let mut c = Cursor::new(payload);
    let list_len = c.u16()? as usize;
    let entry = c.take(list_len)?;
    if !c.finished() {
        return Err(CodecError::MalformedPayload("trailing bytes".into()));
    }
    let mut e = Cursor::new(entry);
    let name_type = e.u8()?;
    if name_type != 0 {
        return Err(CodecError::MalformedPayload(format!(
            "unsupported name type {name_type}"
        )));
    }
    let len = e.u16()? as usize;
    let bytes = e.take(len)?;
    if !e.finished() {
        return Err(CodecError::MalformedPayload("trailing bytes".into()));
    }
    String::from_utf8(bytes.to_vec())
        .map_err(|_| CodecError::MalformedPayload("invalid utf-8".into()))
}

impl NegotiationOffer {
    /// Canonical extension list for this offer; an empty offer encodes to an
    /// empty list.
    pub fn to_extensions(&self) -> Result<Vec<EncodedExtension>, CodecError> {
        let mut out = Vec::new();
        if let Some(did) = &self.target_server_did {
            out.push((EXT_SNI, encode_sni(did.as_str())?));
        } else if let Some(name) = &self.target_server_name {
            out.push((EXT_SNI, encode_sni(name)?));
        }
        if let Some(did) = &self.client_did {
            out.push((EXT_CNI, encode_string16(did.as_str())?));
        }
        if !self.client_did_methods.is_empty() {
            out.push((EXT_CMI, encode_list(&self.client_did_methods)?));
        }
        if !self.presentation_protocols.is_empty() {
            out.push((EXT_CPP, encode_list(&self.presentation_protocols)?));
        }
        Ok(out)
    }

    /// Inverse of [`Self::to_extensions`]. The client auth mode is not an
    /// extension: on the wire the server learns it from the certificate the
    /// client presents (or does not present) during the handshake.
    pub fn from_extensions(
        extensions: &[EncodedExtension],
        client_auth_mode: super::ClientAuthMode,
    ) -> Result<Self, CodecError> {
        let mut offer = NegotiationOffer {
            client_auth_mode,
            ..Default::default()
        };
        for (code, payload) in extensions {
            match *code {
                EXT_SNI => {
                    let name = decode_sni(payload)?;
                    match parse_did(&name) {
                        Ok(did) => offer.target_server_did = Some(did),
                        Err(_) => offer.target_server_name = Some(name),
                    }
                }
                EXT_CNI => {
                    let text = decode_string16(payload)?;
                    offer.client_did = Some(parse_did(&text).map_err(|e| {
                        CodecError::MalformedPayload(format!("CNI: {e}"))
                    })?);
                }
                EXT_CMI => offer.client_did_methods = decode_list(payload)?,
                EXT_CPP => offer.presentation_protocols = decode_list(payload)?,
                _ => {} // unknown codes ignored
            }
        }
        Ok(offer)
    }
}

impl NegotiationAgreement {
    pub fn to_extensions(&self) -> Result<Vec<EncodedExtension>, CodecError> {
        let mut out = Vec::new();
        if !self.server_did_methods.is_empty() {
            out.push((EXT_SMI, encode_list(&self.server_did_methods)?));
        }
        if let Some(p) = &self.agreed_presentation_protocol {
            out.push((EXT_SPA, encode_list(std::slice::from_ref(p))?));
        }
        Ok(out)
    }

    /// Inverse of [`Self::to_extensions`]; identification is enabled exactly
    /// when SPA is present.
    pub fn from_extensions(
        extensions: &[EncodedExtension],
        server_auth_mode: ServerAuthMode,
    ) -> Result<Self, CodecError> {
        let mut agreement = NegotiationAgreement {
            server_did_methods: Vec::new(),
            agreed_presentation_protocol: None,
            server_auth_mode,
            identification_enabled: false,
        };
        for (code, payload) in extensions {
            match *code {
                EXT_SMI => agreement.server_did_methods = decode_list(payload)?,
                EXT_SPA => {
                    let entries = decode_list(payload)?;
                    if entries.len() != 1 {
                        return Err(CodecError::MalformedPayload(format!(
                            "SPA carries {} entries",
                            entries.len()
                        )));
                    }
                    agreement.agreed_presentation_protocol = Some(entries[0].clone());
                }
                _ => {}
            }
        }
        agreement.identification_enabled = agreement.agreed_presentation_protocol.is_some();
        Ok(agreement)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::negotiation::ClientAuthMode;

    #[test]
    fn cmi_payload_layout_is_bit_exact() {
        let offer = NegotiationOffer {
            client_did_methods: vec!["key".into(), "vdrsim".into()],
            ..Default::default()
        };
        let exts = offer.to_extensions().unwrap();
        assert_eq!(exts.len(), 1);
        let (code, payload) = &exts[0];
        assert_eq!(*code, 0xFF01);
        assert_eq!(
            payload.as_slice(),
            &[0x00, 0x02, 0x03, b'k', b'e', b'y', 0x06, b'v', b'd', b'r', b's', b'i', b'm'][..]
        );
    }

    #[test]
    fn empty_offer_encodes_to_empty_list() {
        assert!(NegotiationOffer::default().to_extensions().unwrap().is_empty());
    }

    #[test]
    fn cni_payload_layout() {
        let did = parse_did("did:key:zAbc").unwrap();
        let offer = NegotiationOffer {
            client_did: Some(did.clone()),
            ..Default::default()
        };
        let exts = offer.to_extensions().unwrap();
        let (code, payload) = &exts[0];
        assert_eq!(*code, 0xFF00);
        let mut expect = vec![0x00, did.as_str().len() as u8];
        expect.extend_from_slice(did.as_str().as_bytes());
        assert_eq!(payload, &expect);
    }

    #[test]
    fn sni_carries_did_verbatim_in_host_name() {
        let did = parse_did("did:vdrsim:target").unwrap();
        let offer = NegotiationOffer {
            target_server_did: Some(did.clone()),
            ..Default::default()
        };
        let exts = offer.to_extensions().unwrap();
        let (code, payload) = &exts[0];
        assert_eq!(*code, 0x0000);
        let host = decode_sni(payload).unwrap();
        assert_eq!(host, did.as_str());
    }

    #[test]
    fn sni_hostname_distinguished_from_did() {
        let offer = NegotiationOffer {
            target_server_name: Some("didlink.local".into()),
            ..Default::default()
        };
        let exts = offer.to_extensions().unwrap();
        let back = NegotiationOffer::from_extensions(&exts, ClientAuthMode::None).unwrap();
        assert_eq!(back.target_server_name.as_deref(), Some("didlink.local"));
        assert!(back.target_server_did.is_none());
    }

    #[test]
    fn unknown_codes_ignored() {
        let exts = vec![(0xAAAA_u16, vec![1, 2, 3])];
        let offer = NegotiationOffer::from_extensions(&exts, ClientAuthMode::None).unwrap();
        assert_eq!(offer, NegotiationOffer::default());
    }

    #[test]
    fn truncated_list_is_malformed() {
        let exts = vec![(EXT_CMI, vec![0x00, 0x02, 0x03, b'k'])];
        assert!(matches!(
            NegotiationOffer::from_extensions(&exts, ClientAuthMode::None),
            Err(CodecError::MalformedPayload(_))
        ));
    }

    #[test]
    fn oversize_method_rejected() {
        let offer = NegotiationOffer {
            client_did_methods: vec!["m".repeat(300)],
            ..Default::default()
        };
        assert_eq!(offer.to_extensions(), Err(CodecError::OversizePayload));
    }
}
