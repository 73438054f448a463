//! DID Link: TLS 1.3 authentication with ledger-anchored Decentralized
//! Identifiers and post-handshake identification with verifiable credentials.
//!
//! Peers authenticate during a standard TLS 1.3 handshake using self-issued
//! X.509 certificates that carry a DID in the Subject Alternative Name
//! extension. The certificate is only a vehicle for the DID-to-key binding;
//! the binding itself is validated against the DID document resolved from a
//! verifiable data registry (or a local cache), and proof of possession comes
//! from the TLS CertificateVerify signature. After the handshake the peers
//! can optionally identify each other by exchanging selectively-disclosable
//! credentials over a framed identification sub-layer.
//!
//! Module map:
//! - [`did`]: DID parsing, DID documents, resolution with caching.
//! - [`vdr`]: the simulated registry — an append-only, hash-chained ledger
//!   with owner-only updates and credential status lists, served over TCP.
//! - [`cert`]: key pairs, the three certificate flavors, binding validation.
//! - [`negotiation`]: the hello-extension codec, the negotiation state
//!   machine, and the scenario matrix classifier.
//! - [`channel`]: TLS 1.3 sessions through rustls with the custom peer
//!   verification procedure installed.
//! - [`identity`]: the post-handshake identification sub-layer.
//! - [`vc`]: SD-JWT style credentials: issue, present, verify, revoke.
//! - [`bench`]: the evaluation harness (handshake timings, byte accounting,
//!   envelope baseline).

pub mod bench;
pub mod cert;
pub mod channel;
pub mod did;
pub mod identity;
pub mod negotiation;
pub mod util;
pub mod vc;
pub mod vdr;

pub use did::{CacheMode, CachePolicy, Did, DidDocument, Resolver, VerificationMethod};
