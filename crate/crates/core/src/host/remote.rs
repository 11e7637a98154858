//! A remote client talking to an enclave over an attested channel. The
//! network is the host's message queue, reached by the enclave through
//! the fetch and send edge calls, so every byte in transit passes through
//! untrusted hands.
//!
//! 1. Client -> enclave: `challenge[16] || client_dh_public[32]`.
//! 2. Enclave -> client: `report[REPORT_LEN] || enclave_dh_public[32]`, the
//!    report binding `challenge || enclave_dh_public`.
//! 3. Both derive `key = SHA3-256(shared || "session")[..16]`.
//! 4. Client -> enclave: sealed request. Enclave -> client: sealed word
//!    count of the request.

use thiserror::Error;

use crate::crypto::{dh_public, dh_shared, open_message, seal_message, CryptoError, Hasher, Rng, NONCE_LEN};
use crate::edge::{wordcount, FID_FETCH, FID_SEND};
use crate::machine::EnclaveId;
use crate::sm::{verify_report, AttestationReport, Expectations, Invalid, REPORT_LEN};

use super::{Action, ActionResult, System, SystemError};

pub const CHALLENGE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RemoteError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("report rejected: {0}")]
    Rejected(#[from] Invalid),
    #[error("report does not bind the offered key")]
    Unbound,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("protocol: {0}")]
    Protocol(String),
}

pub fn session_key(shared: &[u8; 32]) -> [u8; 16] {
    let digest = Hasher::new().update(shared).update(b"session").finish();
    digest.0[..16].try_into().expect("16 bytes")
}

fn nonce(direction: u8, counter: u64) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[0] = direction;
    n[1..9].copy_from_slice(&counter.to_le_bytes());
    n
}

/// The verifier's side.
#[derive(Debug, Clone)]
pub struct RemoteClient {
    pub expect: Expectations,
    pub device: crate::crypto::PublicKey,
    challenge: [u8; CHALLENGE_LEN],
    secret: [u8; 32],
    key: Option<[u8; 16]>,
    pub report: Option<AttestationReport>,
}

impl RemoteClient {
    /// `expect` carries the known-good measurements; the challenge prefix
    /// is filled in here.
    pub fn new(seed: u64, device: crate::crypto::PublicKey, expect: Expectations) -> Self {
        let mut rng = Rng::new(seed);
        let mut challenge = [0u8; CHALLENGE_LEN];
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut challenge);
        rng.fill_bytes(&mut secret);
        RemoteClient { expect, device, challenge, secret, key: None, report: None }
    }

    pub fn hello(&self) -> Vec<u8> {
        let mut m = self.challenge.to_vec();
        m.extend_from_slice(&dh_public(&self.secret));
        m
    }

    /// Check the report and bind the session to the enclave's key share.
    pub fn accept(&mut self, msg: &[u8]) -> Result<(), RemoteError> {
        if msg.len() != REPORT_LEN + 32 {
            return Err(RemoteError::Protocol(format!("attestation message of {} bytes", msg.len())));
        }
        let report =
            AttestationReport::from_bytes(&msg[..REPORT_LEN]).map_err(|e| RemoteError::Protocol(e.to_string()))?;
        let peer: [u8; 32] = msg[REPORT_LEN..].try_into().expect("32 bytes");
        let expect = Expectations { data_prefix: Some(self.challenge.to_vec()), ..self.expect.clone() };
        verify_report(&report, &self.device, &expect)?;
        let mut bound = self.challenge.to_vec();
        bound.extend_from_slice(&peer);
        if report.enclave.data() != bound {
            return Err(RemoteError::Unbound);
        }
        self.key = Some(session_key(&dh_shared(&self.secret, &peer)));
        self.report = Some(report);
        Ok(())
    }

    pub fn seal(&self, counter: u64, plaintext: &[u8]) -> Result<Vec<u8>, RemoteError> {
        let key = self.key.ok_or_else(|| RemoteError::Protocol("no session".into()))?;
        Ok(seal_message(&key, nonce(0, counter), plaintext))
    }

    pub fn open(&self, sealed: &[u8]) -> Result<Vec<u8>, RemoteError> {
        let key = self.key.ok_or_else(|| RemoteError::Protocol("no session".into()))?;
        Ok(open_message(&key, sealed)?)
    }
}

/// What the client saw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteOutcome {
    pub reply: Vec<u8>,
    pub report: AttestationReport,
    /// Every message that crossed the host, in order.
    pub transcript: Vec<Vec<u8>>,
}

fn eapp_bytes(sys: &mut System, eid: EnclaveId, action: Action) -> Result<Vec<u8>, RemoteError> {
    match sys.eapp(eid, &action)?.result {
        ActionResult::Bytes(b) => Ok(b),
        other => Err(RemoteError::Protocol(format!("{action:?} gave {other:?}"))),
    }
}

fn eapp_value(sys: &mut System, eid: EnclaveId, action: Action) -> Result<u64, RemoteError> {
    match sys.eapp(eid, &action)?.result {
        ActionResult::Value(v) => Ok(v),
        other => Err(RemoteError::Protocol(format!("{action:?} gave {other:?}"))),
    }
}

/// Enclave-side session state. The key share lives in eapp heap memory
/// at `heap`; `peer` is the client's public share.
struct EnclaveSession {
    heap: u64,
    peer: [u8; 32],
}

fn fetch() -> Action {
    Action::EdgeCall { fid: FID_FETCH, payload: Vec::new() }
}

/// Enclave, first half: read the hello, make a key share, attest to
/// `challenge || share` and send the report out.
fn enclave_attest(sys: &mut System, eid: EnclaveId) -> Result<EnclaveSession, RemoteError> {
    let hello = eapp_bytes(sys, eid, fetch())?;
    if hello.len() != CHALLENGE_LEN + 32 {
        return Err(RemoteError::Protocol("bad hello".into()));
    }
    let heap = eapp_value(sys, eid, Action::Brk(4096))? - 4096;
    let mut secret = [0u8; 32];
    for chunk in secret.chunks_mut(8) {
        chunk.copy_from_slice(&eapp_value(sys, eid, Action::GetRandom)?.to_le_bytes());
    }
    sys.eapp(eid, &Action::WriteV { vaddr: heap, bytes: secret.to_vec() })?;
    let public = dh_public(&secret);

    let mut bound = hello[..CHALLENGE_LEN].to_vec();
    bound.extend_from_slice(&public);
    let ActionResult::Report(report) = sys.eapp(eid, &Action::Attest(bound))?.result else {
        return Err(RemoteError::Protocol("attest failed".into()));
    };
    let mut msg = report.to_bytes();
    msg.extend_from_slice(&public);
    eapp_bytes(sys, eid, Action::EdgeCall { fid: FID_SEND, payload: msg })?;
    Ok(EnclaveSession { heap, peer: hello[CHALLENGE_LEN..].try_into().expect("32 bytes") })
}

/// Enclave, second half: open one request, count its words, send the
/// count back sealed and wipe the key share.
fn enclave_serve(sys: &mut System, eid: EnclaveId, session: &EnclaveSession) -> Result<(), RemoteError> {
    let stored = eapp_bytes(sys, eid, Action::ReadV { vaddr: session.heap, len: 32 })?;
    let secret: [u8; 32] = stored.try_into().expect("32 bytes");
    let key = session_key(&dh_shared(&secret, &session.peer));
    let request = eapp_bytes(sys, eid, fetch())?;
    let plain = open_message(&key, &request)?;
    let reply = seal_message(&key, nonce(1, 0), &wordcount(&plain));
    eapp_bytes(sys, eid, Action::EdgeCall { fid: FID_SEND, payload: reply })?;
    sys.eapp(eid, &Action::WriteV { vaddr: session.heap, bytes: vec![0; 32] })?;
    Ok(())
}

/// Run the whole exchange with a running enclave. The host relays
/// messages between the client and the enclave's queue.
pub fn remote_wordcount(
    sys: &mut System,
    eid: EnclaveId,
    client: &mut RemoteClient,
    request: &[u8],
) -> Result<RemoteOutcome, RemoteError> {
    let mut transcript = Vec::new();
    let relay = |sys: &mut System, transcript: &mut Vec<Vec<u8>>| -> Result<Vec<u8>, RemoteError> {
        let msg = sys.host.outbox.pop().ok_or_else(|| RemoteError::Protocol("enclave sent nothing".into()))?;
        transcript.push(msg.clone());
        Ok(msg)
    };
    sys.host.outbox.clear();

    let hello = client.hello();
    transcript.push(hello.clone());
    sys.host.inbox.push_back(hello);
    let session = enclave_attest(sys, eid)?;
    client.accept(&relay(sys, &mut transcript)?)?;

    let request = client.seal(0, request)?;
    transcript.push(request.clone());
    sys.host.inbox.push_back(request);
    enclave_serve(sys, eid, &session)?;
    let reply = client.open(&relay(sys, &mut transcript)?)?;
    Ok(RemoteOutcome { reply, report: client.report.clone().expect("accepted"), transcript })
}
