//! The ledger itself: validation rules, the append-only log, and the
//! hash-chained persistence format.
//!
//! Persistence is newline-delimited JSON. Each line is
//! `{"h":"<sha256 hex of r>","r":{...transaction...}}` and every transaction
//! carries the `h` of its predecessor in `prev_hash` (the first one carries
//! sixty-four zeros). A single flipped byte breaks either the record's own
//! hash or its successor's link.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::VdrError;
use crate::did::{Did, DidDocument, KeyPurpose, KeyType};
use crate::util::{b64, b64_decode, canonical_json, sha256_hex};

const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    Anchor,
    Update,
    StatusCreate,
    StatusSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerTransaction {
    /// 1-based, gapless.
    pub seq: u64,
    pub kind: TxKind,
    pub did: Did,
    /// Canonical document (anchor/update) or status payload.
    pub payload: serde_json::Value,
    /// Base64 Ed25519 signature over the canonical payload bytes.
    pub signature: String,
    /// Fragment of the verification method that produced the signature.
    pub signer_key_id: String,
    pub timestamp: DateTime<Utc>,
    /// Hash of the predecessor record.
    pub prev_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatusList {
    pub list_id: String,
    pub owner: Did,
    /// One byte per bit would be wasteful on the wire; bits are packed LSB
    /// first and carried base64 in payloads.
    pub bits: Vec<u8>,
    pub size: u64,
    pub version: u64,
}

impl StatusList {
    fn new(list_id: String, owner: Did, size: u64) -> Self {
        Self {
            list_id,
            owner,
            bits: vec![0u8; size.div_ceil(8) as usize],
            size,
            version: 1,
        }
    }

    pub fn get(&self, index: u64) -> Option<bool> {
        if index >= self.size {
            return None;
        }
        let byte = self.bits[(index / 8) as usize];
        Some(byte & (1 << (index % 8)) != 0)
    }

    fn set(&mut self, index: u64, revoked: bool) {
        let slot = &mut self.bits[(index / 8) as usize];
        if revoked {
            *slot |= 1 << (index % 8);
        } else {
            *slot &= !(1 << (index % 8));
        }
        self.version += 1;
    }
}

/// Canonical signing payload for `create_status_list`.
pub fn status_create_payload(list_id: &str, owner: &Did, size: u64) -> Vec<u8> {
    canonical_json(&json!({"list_id": list_id, "owner": owner, "size": size}))
}

/// Canonical signing payload for `set_status`.
pub fn status_set_payload(list_id: &str, index: u64, revoked: bool) -> Vec<u8> {
    canonical_json(&json!({"index": index, "list_id": list_id, "revoked": revoked}))
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    h: String,
    r: LedgerTransaction,
}

pub struct Ledger {
    log: Vec<LedgerTransaction>,
    last_hash: String,
    docs: HashMap<String, DidDocument>,
    lists: HashMap<String, StatusList>,
    sink: Option<File>,
    path: Option<PathBuf>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self {
            log: Vec::new(),
            last_hash: GENESIS_HASH.to_string(),
            docs: HashMap::new(),
            lists: HashMap::new(),
            sink: None,
            path: None,
        }
    }

    /// Opens (or creates) a persisted ledger, replaying and verifying the
    /// hash chain of any existing log.
    pub fn open(path: &Path) -> Result<Self, VdrError> {
        let mut ledger = Self::in_memory();
        ledger.path = Some(path.to_path_buf());
        if path.exists() {
            ledger.replay(path)?;
        } else if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        ledger.sink = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(ledger)
    }

    fn replay(&mut self, path: &Path) -> Result<(), VdrError> {
        let reader = BufReader::new(File::open(path)?);
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line)
                .map_err(|e| VdrError::CorruptLog(format!("record {}: {e}", n + 1)))?;
            let recomputed = sha256_hex(&canonical_json(&parsed.r));
            if recomputed != parsed.h {
                return Err(VdrError::CorruptLog(format!(
                    "record {} hash mismatch",
                    n + 1
                )));
            }
            if parsed.r.prev_hash != self.last_hash {
                return Err(VdrError::CorruptLog(format!(
                    "record {} breaks the chain",
                    n + 1
                )));
            }
            if parsed.r.seq != self.log.len() as u64 + 1 {
                return Err(VdrError::CorruptLog(format!(
                    "record {} has seq {}",
                    n + 1,
                    parsed.r.seq
                )));
            }
            self.apply_replayed(&parsed.r)?;
            self.last_hash = parsed.h;
            self.log.push(parsed.r);
        }
        Ok(())
    }

    fn apply_replayed(&mut self, tx: &LedgerTransaction) -> Result<(), VdrError> {
        match tx.kind {
            TxKind::Anchor | TxKind::Update => {
                let doc: DidDocument = serde_json::from_value(tx.payload.clone())
                    .map_err(|e| VdrError::CorruptLog(format!("seq {}: {e}", tx.seq)))?;
                self.docs.insert(doc.id.to_string(), doc);
            }
            TxKind::StatusCreate => {
                let p = &tx.payload;
                let list_id = p["list_id"].as_str().unwrap_or_default().to_string();
                let size = p["size"].as_u64().unwrap_or_default();
                self.lists
                    .insert(list_id.clone(), StatusList::new(list_id, tx.did.clone(), size));
            }
            TxKind::StatusSet => {
                let p = &tx.payload;
                let list_id = p["list_id"].as_str().unwrap_or_default();
                let index = p["index"].as_u64().unwrap_or_default();
                let revoked = p["revoked"].as_bool().unwrap_or_default();
                let list = self
                    .lists
                    .get_mut(list_id)
                    .ok_or_else(|| VdrError::CorruptLog(format!("seq {}: unknown list", tx.seq)))?;
                list.set(index, revoked);
            }
        }
        Ok(())
    }

    pub fn height(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn transactions(&self) -> &[LedgerTransaction] {
        &self.log
    }

    pub fn did_count(&self) -> usize {
        self.docs.len()
    }

    pub fn list_count(&self) -> usize {
        self.lists.len()
    }

    fn append(
        &mut self,
        kind: TxKind,
        did: Did,
        payload: serde_json::Value,
        signature: &[u8],
        signer_key_id: String,
    ) -> Result<u64, VdrError> {
        let tx = LedgerTransaction {
            seq: self.log.len() as u64 + 1,
            kind,
            did,
            payload,
            signature: b64(signature),
            signer_key_id,
            timestamp: Utc::now(),
            prev_hash: self.last_hash.clone(),
        };
        let hash = sha256_hex(&canonical_json(&tx));
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(&LogLine {
                h: hash.clone(),
                r: tx.clone(),
            })
            .expect("transaction serializes");
            sink.write_all(line.as_bytes())?;
            sink.write_all(b"\n")?;
            sink.flush()?;
        }
        self.last_hash = hash;
        let seq = tx.seq;
        self.log.push(tx);
        Ok(seq)
    }

    /// Anchors a version-1 document. The genesis transaction is
    /// self-certifying: the signature must verify under a key listed in the
    /// document itself.
    pub fn anchor_did(&mut self, document: DidDocument, signature: &[u8]) -> Result<u64, VdrError> {
        document
            .validate()
            .map_err(|e| VdrError::MalformedDocument(e.to_string()))?;
        if document.version != 1 {
            return Err(VdrError::MalformedDocument(format!(
                "anchor requires version 1, got {}",
                document.version
            )));
        }
        if self.docs.contains_key(document.id.as_str()) {
            return Err(VdrError::AlreadyAnchored);
        }
        let bytes = document.canonical_bytes();
        let signer = document
            .verification_methods
            .iter()
            .find(|vm| verify_ed25519(vm.key_type, &vm.public_key, &bytes, signature))
            .ok_or(VdrError::BadSignature)?
            .id
            .clone();
        let did = document.id.clone();
        let payload = serde_json::to_value(&document).expect("document serializes");
        self.docs.insert(did.to_string(), document);
        self.append(TxKind::Anchor, did, payload, signature, signer)
    }

    /// Replaces the current document. Only a key that is
    /// authentication-capable in the *current* document may authorize the
    /// update; versions are gapless.
    pub fn update_did(
        &mut self,
        did: &Did,
        new_document: DidDocument,
        signature: &[u8],
        signer_key_id: &str,
    ) -> Result<u64, VdrError> {
        let current = self
            .docs
            .get(did.as_str())
            .ok_or(VdrError::NotFound)?
            .clone();
        new_document
            .validate()
            .map_err(|e| VdrError::MalformedDocument(e.to_string()))?;
        if new_document.id != *did {
            return Err(VdrError::MalformedDocument(
                "document id does not match the DID being updated".into(),
            ));
        }
        if new_document.version != current.version + 1 {
            return Err(VdrError::VersionConflict {
                current: current.version,
                proposed: new_document.version,
            });
        }
        let signer = current
            .find_method(signer_key_id)
            .filter(|vm| vm.has_purpose(KeyPurpose::Authentication))
            .ok_or(VdrError::UnauthorizedKey)?;
        if !verify_ed25519(
            signer.key_type,
            &signer.public_key,
            &new_document.canonical_bytes(),
            signature,
        ) {
            return Err(VdrError::BadSignature);
        }
        let payload = serde_json::to_value(&new_document).expect("document serializes");
        self.docs.insert(did.to_string(), new_document);
        self.append(
            TxKind::Update,
            did.clone(),
            payload,
            signature,
            signer_key_id.to_string(),
        )
    }

    pub fn lookup(&self, did: &Did) -> Result<DidDocument, VdrError> {
        self.docs
            .get(did.as_str())
            .cloned()
            .ok_or(VdrError::NotFound)
    }

    /// Creates a zero-initialized status list owned by an anchored DID. The
    /// signature must come from one of the owner's assertion keys.
    pub fn create_status_list(
        &mut self,
        list_id: &str,
        owner: &Did,
        size: u64,
        signature: &[u8],
    ) -> Result<u64, VdrError> {
        if self.lists.contains_key(list_id) {
            return Err(VdrError::DuplicateList);
        }
        let payload_bytes = status_create_payload(list_id, owner, size);
        let signer = self.owner_assertion_signer(owner, &payload_bytes, signature)?;
        self.lists.insert(
            list_id.to_string(),
            StatusList::new(list_id.to_string(), owner.clone(), size),
        );
        self.append(
            TxKind::StatusCreate,
            owner.clone(),
            serde_json::json!({"list_id": list_id, "owner": owner, "size": size}),
            signature,
            signer,
        )
    }

    pub fn set_status(
        &mut self,
        list_id: &str,
        index: u64,
        revoked: bool,
        signature: &[u8],
    ) -> Result<u64, VdrError> {
        let (owner, size) = {
            let list = self.lists.get(list_id).ok_or(VdrError::NotFound)?;
            (list.owner.clone(), list.size)
        };
        if index >= size {
            return Err(VdrError::IndexOutOfRange);
        }
        let payload_bytes = status_set_payload(list_id, index, revoked);
        let signer = self.owner_assertion_signer(&owner, &payload_bytes, signature)?;
        self.lists
            .get_mut(list_id)
            .expect("list present")
            .set(index, revoked);
        self.append(
            TxKind::StatusSet,
            owner,
            serde_json::json!({"index": index, "list_id": list_id, "revoked": revoked}),
            signature,
            signer,
        )
    }

    pub fn get_status(&self, list_id: &str, index: u64) -> Result<bool, VdrError> {
        let list = self.lists.get(list_id).ok_or(VdrError::NotFound)?;
        list.get(index).ok_or(VdrError::IndexOutOfRange)
    }

    /// Finds the owner's assertion key that produced `signature`. A
    /// signature not attributable to any assertion key of the owner is an
    /// authorization failure, not a malformed-signature one.
    fn owner_assertion_signer(
        &self,
        owner: &Did,
        payload: &[u8],
        signature: &[u8],
    ) -> Result<String, VdrError> {
        if signature.len() != 64 {
            return Err(VdrError::BadSignature);
        }
        let doc = self
            .docs
            .get(owner.as_str())
            .ok_or(VdrError::UnauthorizedKey)?;
        doc.methods_with_purpose(KeyPurpose::Assertion)
            .find(|vm| verify_ed25519(vm.key_type, &vm.public_key, payload, signature))
            .map(|vm| vm.id.clone())
            .ok_or(VdrError::UnauthorizedKey)
    }

    #[allow(dead_code)]
    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}

fn verify_ed25519(key_type: KeyType, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
    if key_type != KeyType::Ed25519 {
        return false;
    }
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

/// Decodes the base64 signature field of a wire request.
pub(crate) fn decode_signature(b64text: &str) -> Result<Vec<u8>, VdrError> {
    b64_decode(b64text).map_err(|_| VdrError::BadSignature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::did::{parse_did, DidDocument, VerificationMethod};
    use ed25519_dalek::{Signer, SigningKey};
    use rand::RngCore;

    pub(crate) fn test_identity(name: &str) -> (Did, DidDocument, SigningKey) {
        let mut seed = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut seed);
        let sk = SigningKey::from_bytes(&seed);
        let did = parse_did(&format!("did:vdrsim:{name}")).unwrap();
        let vm = VerificationMethod::new(
            "key-1",
            KeyType::Ed25519,
            sk.verifying_key().to_bytes().to_vec(),
            [KeyPurpose::Authentication, KeyPurpose::Assertion],
        )
        .unwrap();
        let doc = DidDocument::new(did.clone(), vec![vm], 1, Utc::now()).unwrap();
        (did, doc, sk)
    }

    fn sign(sk: &SigningKey, bytes: &[u8]) -> Vec<u8> {
        sk.sign(bytes).to_bytes().to_vec()
    }

    #[test]
    fn anchor_genesis_and_lookup() {
        let mut ledger = Ledger::in_memory();
        let (did, doc, sk) = test_identity("alpha");
        let sig = sign(&sk, &doc.canonical_bytes());
        let seq = ledger.anchor_did(doc.clone(), &sig).unwrap();
        assert_eq!(seq, 1);
        assert_eq!(ledger.lookup(&did).unwrap(), doc);
    }

    #[test]
    fn anchor_twice_rejected() {
        let mut ledger = Ledger::in_memory();
        let (_, doc, sk) = test_identity("beta");
        let sig = sign(&sk, &doc.canonical_bytes());
        ledger.anchor_did(doc.clone(), &sig).unwrap();
        assert!(matches!(
            ledger.anchor_did(doc, &sig),
            Err(VdrError::AlreadyAnchored)
        ));
    }

    #[test]
    fn anchor_requires_self_certification() {
        let mut ledger = Ledger::in_memory();
        let (_, doc, _) = test_identity("gamma");
        let (_, _, other_sk) = test_identity("other");
        let sig = sign(&other_sk, &doc.canonical_bytes());
        assert!(matches!(
            ledger.anchor_did(doc, &sig),
            Err(VdrError::BadSignature)
        ));
    }

    #[test]
    fn authorized_rotation_accepted() {
        let mut ledger = Ledger::in_memory();
        let (did, doc, sk_a) = test_identity("rotate");
        ledger
            .anchor_did(doc.clone(), &sign(&sk_a, &doc.canonical_bytes()))
            .unwrap();

        // v2 carries only key B, but is signed by (current) key A.
        let mut seed = [1u8; 32];
        rand::thread_rng().fill_bytes(&mut seed);
        let sk_b = SigningKey::from_bytes(&seed);
        let vm_b = VerificationMethod::new(
            "key-2",
            KeyType::Ed25519,
            sk_b.verifying_key().to_bytes().to_vec(),
            [KeyPurpose::Authentication, KeyPurpose::Assertion],
        )
        .unwrap();
        let v2 = DidDocument::new(did.clone(), vec![vm_b], 2, Utc::now()).unwrap();
        let sig = sign(&sk_a, &v2.canonical_bytes());
        ledger.update_did(&did, v2.clone(), &sig, "key-1").unwrap();
        assert_eq!(ledger.lookup(&did).unwrap(), v2);
        // Both versions remain in the log.
        assert_eq!(ledger.height(), 2);
    }

    #[test]
    fn unauthorized_update_rejected() {
        let mut ledger = Ledger::in_memory();
        let (did, doc, sk) = test_identity("victim");
        ledger
            .anchor_did(doc.clone(), &sign(&sk, &doc.canonical_bytes()))
            .unwrap();

        let (_, _, attacker) = test_identity("attacker");
        let mut v2 = doc.clone();
        v2.version = 2;
        let sig = sign(&attacker, &v2.canonical_bytes());
        // Attacker names a fragment that is not in the current document.
        assert!(matches!(
            ledger.update_did(&did, v2.clone(), &sig, "key-x"),
            Err(VdrError::UnauthorizedKey)
        ));
        // Attacker names the right fragment but cannot produce its signature.
        assert!(matches!(
            ledger.update_did(&did, v2, &sig, "key-1"),
            Err(VdrError::BadSignature)
        ));
    }

    #[test]
    fn version_gap_rejected() {
        let mut ledger = Ledger::in_memory();
        let (did, doc, sk) = test_identity("gap");
        ledger
            .anchor_did(doc.clone(), &sign(&sk, &doc.canonical_bytes()))
            .unwrap();
        let mut v3 = doc;
        v3.version = 3;
        let sig = sign(&sk, &v3.canonical_bytes());
        assert!(matches!(
            ledger.update_did(&did, v3, &sig, "key-1"),
            Err(VdrError::VersionConflict {
                current: 1,
                proposed: 3
            })
        ));
    }

    #[test]
    fn lookup_latest_wins_and_missing_errors() {
        let mut ledger = Ledger::in_memory();
        let unknown = parse_did("did:vdrsim:nobody").unwrap();
        assert!(matches!(ledger.lookup(&unknown), Err(VdrError::NotFound)));

        let (did, doc, sk) = test_identity("latest");
        ledger
            .anchor_did(doc.clone(), &sign(&sk, &doc.canonical_bytes()))
            .unwrap();
        let mut v2 = doc;
        v2.version = 2;
        ledger
            .update_did(&did, v2.clone(), &sign(&sk, &v2.canonical_bytes()), "key-1")
            .unwrap();
        assert_eq!(ledger.lookup(&did).unwrap().version, 2);
    }

    #[test]
    fn status_list_lifecycle() {
        let mut ledger = Ledger::in_memory();
        let (did, doc, sk) = test_identity("issuer");
        ledger
            .anchor_did(doc.clone(), &sign(&sk, &doc.canonical_bytes()))
            .unwrap();

        let create_sig = sign(&sk, &status_create_payload("revlist-1", &did, 1024));
        ledger
            .create_status_list("revlist-1", &did, 1024, &create_sig)
            .unwrap();

        // Duplicate list id.
        assert!(matches!(
            ledger.create_status_list("revlist-1", &did, 8, &create_sig),
            Err(VdrError::DuplicateList)
        ));

        // Untouched indexes read as valid.
        assert!(!ledger.get_status("revlist-1", 7).unwrap());

        let set_sig = sign(&sk, &status_set_payload("revlist-1", 7, true));
        ledger.set_status("revlist-1", 7, true, &set_sig).unwrap();
        assert!(ledger.get_status("revlist-1", 7).unwrap());

        // Non-owner signature is an authorization failure.
        let (_, _, mallory) = test_identity("mallory");
        let bad = sign(&mallory, &status_set_payload("revlist-1", 8, true));
        assert!(matches!(
            ledger.set_status("revlist-1", 8, true, &bad),
            Err(VdrError::UnauthorizedKey)
        ));

        assert!(matches!(
            ledger.get_status("revlist-1", 4096),
            Err(VdrError::IndexOutOfRange)
        ));
        assert!(matches!(
            ledger.get_status("missing", 0),
            Err(VdrError::NotFound)
        ));
    }

    #[test]
    fn create_list_by_unanchored_owner_rejected() {
        let mut ledger = Ledger::in_memory();
        let (did, _, sk) = test_identity("ghost");
        let sig = sign(&sk, &status_create_payload("l", &did, 8));
        assert!(matches!(
            ledger.create_status_list("l", &did, 8, &sig),
            Err(VdrError::UnauthorizedKey)
        ));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vdr.log");
        let mut dids = Vec::new();
        {
            let mut ledger = Ledger::open(&path).unwrap();
            for name in ["a", "b", "c"] {
                let (did, doc, sk) = test_identity(name);
                ledger
                    .anchor_did(doc.clone(), &sign(&sk, &doc.canonical_bytes()))
                    .unwrap();
                dids.push((did, doc));
            }
        }
        let ledger = Ledger::open(&path).unwrap();
        assert_eq!(ledger.height(), 3);
        for (did, doc) in &dids {
            assert_eq!(ledger.lookup(did).unwrap(), *doc);
        }
    }

    #[test]
    fn truncated_log_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vdr.log");
        {
            let mut ledger = Ledger::open(&path).unwrap();
            let (_, doc, sk) = test_identity("t");
            ledger
                .anchor_did(doc.clone(), &sign(&sk, &doc.canonical_bytes()))
                .unwrap();
        }
        let data = std::fs::read(&path).unwrap();
        std::fs::write(&path, &data[..data.len() / 2]).unwrap();
        assert!(matches!(Ledger::open(&path), Err(VdrError::CorruptLog(_))));
    }

    #[test]
    fn flipped_byte_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vdr.log");
        {
            let mut ledger = Ledger::open(&path).unwrap();
            for name in ["x", "y"] {
                let (_, doc, sk) = test_identity(name);
                ledger
                    .anchor_did(doc.clone(), &sign(&sk, &doc.canonical_bytes()))
                    .unwrap();
            }
        }
        let mut data = std::fs::read(&path).unwrap();
        // Flip a byte in the middle of the first record's payload.
        let idx = data.len() / 4;
        data[idx] ^= 0x01;
        std::fs::write(&path, &data).unwrap();
        assert!(matches!(Ledger::open(&path), Err(VdrError::CorruptLog(_))));
    }
}
