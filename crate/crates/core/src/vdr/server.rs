//! The registry service: length-prefixed JSON frames over TCP.
//!
//! All writes funnel through one lock (total order = seq); reads are served
//! concurrently. Artificial latency is applied before replying so that
//! clients experience it as part of the wire round trip.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::ledger::decode_signature;
use super::{Ledger, LatencyProfile, VdrError};
use crate::did::{Did, DidDocument};

pub(crate) const MAX_FRAME_LEN: u32 = 8 * 1024 * 1024;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub(crate) enum WireRequest {
    Anchor {
        document: DidDocument,
        signature: String,
    },
    Update {
        did: Did,
        document: DidDocument,
        signature: String,
        signer_key_id: String,
    },
    Lookup {
        did: Did,
    },
    StatusCreate {
        list_id: String,
        owner: Did,
        size: u64,
        signature: String,
    },
    StatusSet {
        list_id: String,
        index: u64,
        revoked: bool,
        signature: String,
    },
    StatusGet {
        list_id: String,
        index: u64,
    },
    Status,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct WireResponse {
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl WireResponse {
    fn ok(result: serde_json::Value) -> Self {
        Self {
            ok: true,
            result: Some(result),
            error: None,
            message: None,
        }
    }

    fn err(e: &VdrError) -> Self {
        Self {
            ok: false,
            result: None,
            error: Some(e.code().to_string()),
            message: Some(e.to_string()),
        }
    }
}

pub(crate) fn write_frame(stream: &mut impl Write, payload: &[u8]) -> std::io::Result<()> {
    let len = payload.len() as u32;
    stream.write_all(&len.to_be_bytes())?;
    stream.write_all(payload)?;
    stream.flush()
}

pub(crate) fn read_frame(stream: &mut impl Read) -> std::io::Result<Vec<u8>> {
    let mut len_bytes = [0u8; 4];
    stream.read_exact(&mut len_bytes)?;
    let len = u32::from_be_bytes(len_bytes);
    if len > MAX_FRAME_LEN {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "frame too large",
        ));
    }
    let mut buf = vec![0u8; len as usize];
    stream.read_exact(&mut buf)?;
    Ok(buf)
}

/// A bound, replayed registry ready to serve.
pub struct VdrServer {
    listener: TcpListener,
    ledger: Arc<RwLock<Ledger>>,
    latency: LatencyProfile,
}

impl VdrServer {
    pub fn bind(
        addr: impl ToSocketAddrs,
        persistence: Option<&Path>,
        latency: LatencyProfile,
    ) -> Result<Self, VdrError> {
        let ledger = match persistence {
            Some(path) => Ledger::open(path)?,
            None => Ledger::in_memory(),
        };
        let listener =
            TcpListener::bind(addr).map_err(|e| VdrError::BindFailure(e.to_string()))?;
        Ok(Self {
            listener,
            ledger: Arc::new(RwLock::new(ledger)),
            latency,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    /// Serves forever on the current thread.
    pub fn run(self) -> Result<(), VdrError> {
        let running = Arc::new(AtomicBool::new(true));
        self.accept_loop(running);
        Ok(())
    }

    /// Serves on a background thread; the handle stops it on drop.
    pub fn spawn(self) -> VdrServerHandle {
        let addr = self.local_addr();
        let running = Arc::new(AtomicBool::new(true));
        let flag = running.clone();
        let join = std::thread::spawn(move || self.accept_loop(flag));
        VdrServerHandle {
            addr,
            running,
            join: Some(join),
        }
    }

    fn accept_loop(self, running: Arc<AtomicBool>) {
        for conn in self.listener.incoming() {
            if !running.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let ledger = self.ledger.clone();
            let latency = self.latency;
            std::thread::spawn(move || serve_connection(stream, ledger, latency));
        }
    }
}

pub struct VdrServerHandle {
    addr: SocketAddr,
    running: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl VdrServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&mut self) {
        self.running.store(false, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for VdrServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds and serves forever: the `didlink vdr serve` entry point.
pub fn serve(
    bind_addr: &str,
    persistence: PathBuf,
    latency: LatencyProfile,
) -> Result<(), VdrError> {
    let server = VdrServer::bind(bind_addr, Some(&persistence), latency)?;
    eprintln!(
        "vdr: serving on {} (log: {})",
        server.local_addr(),
        persistence.display()
    );
    server.run()
}

fn serve_connection(mut stream: TcpStream, ledger: Arc<RwLock<Ledger>>, latency: LatencyProfile) {
    let _ = stream.set_nodelay(true);
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(f) => f,
            Err(_) => return,
        };
        let response = match serde_json::from_slice::<WireRequest>(&frame) {
            Ok(req) => handle_request(req, &ledger, latency),
            Err(e) => WireResponse::err(&VdrError::Protocol(format!("malformed request: {e}"))),
        };
        let bytes = serde_json::to_vec(&response).expect("response serializes");
        if write_frame(&mut stream, &bytes).is_err() {
            return;
        }
    }
}

fn handle_request(
    req: WireRequest,
    ledger: &RwLock<Ledger>,
    latency: LatencyProfile,
) -> WireResponse {
    let outcome = match req {
        WireRequest::Anchor {
            document,
            signature,
        } => {
            std::thread::sleep(latency.write_pause());
            decode_signature(&signature)
                .and_then(|sig| ledger.write().anchor_did(document, &sig))
                .map(|seq| json!({ "seq": seq }))
        }
        WireRequest::Update {
            did,
            document,
            signature,
            signer_key_id,
        } => {
            std::thread::sleep(latency.write_pause());
            decode_signature(&signature)
                .and_then(|sig| ledger.write().update_did(&did, document, &sig, &signer_key_id))
                .map(|seq| json!({ "seq": seq }))
        }
        WireRequest::Lookup { did } => {
            std::thread::sleep(latency.read_pause());
            ledger
                .read()
                .lookup(&did)
                .map(|doc| serde_json::to_value(doc).expect("document serializes"))
        }
        WireRequest::StatusCreate {
            list_id,
            owner,
            size,
            signature,
        } => {
            std::thread::sleep(latency.write_pause());
            decode_signature(&signature)
                .and_then(|sig| ledger.write().create_status_list(&list_id, &owner, size, &sig))
                .map(|seq| json!({ "seq": seq }))
        }
        WireRequest::StatusSet {
            list_id,
            index,
            revoked,
            signature,
        } => {
            std::thread::sleep(latency.write_pause());
            decode_signature(&signature)
                .and_then(|sig| ledger.write().set_status(&list_id, index, revoked, &sig))
                .map(|seq| json!({ "seq": seq }))
        }
        WireRequest::StatusGet { list_id, index } => {
            std::thread::sleep(latency.read_pause());
            ledger
                .read()
                .get_status(&list_id, index)
                .map(|revoked| json!({ "revoked": revoked }))
        }
        WireRequest::Status => {
            std::thread::sleep(latency.read_pause());
            let l = ledger.read();
            Ok(json!({
                "height": l.height(),
                "dids": l.did_count(),
                "status_lists": l.list_count(),
            }))
        }
    };
    match outcome {
        Ok(result) => WireResponse::ok(result),
        Err(e) => WireResponse::err(&e),
    }
}
