//! Small shared helpers: canonical JSON, base64url, multibase, hashing.

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::engine::general_purpose::STANDARD as B64_STANDARD;
use base64::Engine;
use sha2::{Digest, Sha256};

/// Serializes a value as canonical JSON: lexicographically sorted object
/// keys, no insignificant whitespace. All signatures and hashes in this crate
/// are computed over canonical bytes so that re-serialization is stable.
pub fn canonical_json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    // serde_json::Value objects are backed by a BTreeMap, so converting to a
    // Value first yields sorted keys; compact output has no whitespace.
    let v = serde_json::to_value(value).expect("serializable value");
    serde_json::to_vec(&v).expect("canonical serialization")
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(data);
    h.finalize().into()
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(sha256(data))
}

pub fn b64url(data: &[u8]) -> String {
    URL_SAFE_NO_PAD.encode(data)
}

pub fn b64url_decode(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    URL_SAFE_NO_PAD.decode(text.as_bytes())
}

pub fn b64(data: &[u8]) -> String {
    B64_STANDARD.encode(data)
}

pub fn b64_decode(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    B64_STANDARD.decode(text.as_bytes())
}

/// Multibase base58btc encoding (`z` prefix), as used by `publicKeyMultibase`
/// and `did:key` identifiers.
pub fn multibase_b58(data: &[u8]) -> String {
    format!("z{}", bs58::encode(data).into_string())
}

pub fn multibase_b58_decode(text: &str) -> Option<Vec<u8>> {
    let rest = text.strip_prefix('z')?;
    bs58::decode(rest).into_vec().ok()
}

/// Tolerance applied to certificate and credential validity windows.
pub const CLOCK_SKEW_SECS: i64 = 60;

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn canonical_json_sorts_keys() {
        let mut m = HashMap::new();
        m.insert("zebra", 1);
        m.insert("alpha", 2);
        m.insert("mid", 3);
        let bytes = canonical_json(&m);
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            r#"{"alpha":2,"mid":3,"zebra":1}"#
        );
    }

    #[test]
    fn canonical_json_nested_objects_sorted() {
        let v: serde_json::Value =
            serde_json::from_str(r#"{"b":{"d":1,"c":2},"a":[{"y":0,"x":1}]}"#).unwrap();
        assert_eq!(
            String::from_utf8(canonical_json(&v)).unwrap(),
            r#"{"a":[{"x":1,"y":0}],"b":{"c":2,"d":1}}"#
        );
    }

    #[test]
    fn multibase_round_trip() {
        let data = [0xed, 0x01, 0x42, 0x00, 0xff];
        let enc = multibase_b58(&data);
        assert!(enc.starts_with('z'));
        assert_eq!(multibase_b58_decode(&enc).unwrap(), data);
    }
}
