//! Attestation reports and the remote verifier.
//!
//! Wire layout (little-endian, 1288 bytes):
//!
//! | offset | size | field                          |
//! |-------:|-----:|--------------------------------|
//! | 0      | 32   | enclave measurement            |
//! | 32     | 8    | data length                    |
//! | 40     | 1024 | data, zero padded              |
//! | 1064   | 64   | SM signature over bytes 0..1064|
//! | 1128   | 32   | SM measurement                 |
//! | 1160   | 32   | SM attestation public key      |
//! | 1192   | 64   | device signature over 1128..1192 |
//! | 1256   | 32   | device public key              |

use thiserror::Error;

use crate::crypto::{verify, BootCertificate, KeyPair, Measurement, PublicKey, Signature};

pub const ATTEST_DATA_MAX: usize = 1024;
const ENCLAVE_SIGNED_LEN: usize = 32 + 8 + ATTEST_DATA_MAX;
pub const REPORT_LEN: usize = ENCLAVE_SIGNED_LEN + 64 + BootCertificate::LEN + 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveReport {
    pub measurement: Measurement,
    data_len: u64,
    data: Vec<u8>,
    pub signature: Signature,
}

impl EnclaveReport {
    pub fn sign(key: &KeyPair, measurement: Measurement, data: &[u8]) -> Self {
        assert!(data.len() <= ATTEST_DATA_MAX);
        let mut padded = vec![0u8; ATTEST_DATA_MAX];
        padded[..data.len()].copy_from_slice(data);
        let mut r =
            EnclaveReport { measurement, data_len: data.len() as u64, data: padded, signature: Signature([0; 64]) };
        r.signature = key.sign(&r.signed_bytes());
        r
    }

    /// The caller-bound data.
    pub fn data(&self) -> &[u8] {
        &self.data[..self.data_len as usize]
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ENCLAVE_SIGNED_LEN);
        out.extend_from_slice(&self.measurement.0);
        out.extend_from_slice(&self.data_len.to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationReport {
    pub enclave: EnclaveReport,
    pub sm: BootCertificate,
    pub device_public: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportParseError {
    #[error("report must be {REPORT_LEN} bytes, got {0}")]
    Length(usize),
    #[error("data length {0} exceeds {ATTEST_DATA_MAX}")]
    DataLength(u64),
}

impl AttestationReport {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.enclave.signed_bytes();
        out.extend_from_slice(&self.enclave.signature.0);
        out.extend_from_slice(&self.sm.to_bytes());
        out.extend_from_slice(&self.device_public.0);
        debug_assert_eq!(out.len(), REPORT_LEN);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, ReportParseError> {
        if b.len() != REPORT_LEN {
            return Err(ReportParseError::Length(b.len()));
        }
        let data_len = u64::from_le_bytes(b[32..40].try_into().expect("8 bytes"));
        if data_len > ATTEST_DATA_MAX as u64 {
            return Err(ReportParseError::DataLength(data_len));
        }
        let sig_at = ENCLAVE_SIGNED_LEN;
        let cert_at = sig_at + 64;
        let dev_at = cert_at + BootCertificate::LEN;
        Ok(AttestationReport {
            enclave: EnclaveReport {
                measurement: Measurement(b[..32].try_into().expect("32 bytes")),
                data_len,
                data: b[40..sig_at].to_vec(),
                signature: Signature(b[sig_at..cert_at].try_into().expect("64 bytes")),
            },
            sm: BootCertificate::from_bytes(&b[cert_at..dev_at]).expect("fixed width"),
            device_public: PublicKey(b[dev_at..].try_into().expect("32 bytes")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Invalid {
    #[error("monitor certificate does not chain to the trusted device key")]
    Chain,
    #[error("monitor signature over the enclave does not verify")]
    EnclaveSignature,
    #[error("monitor measurement does not match")]
    SmMeasurement,
    #[error("enclave measurement does not match")]
    Measurement,
    #[error("bound data does not match")]
    Data,
}

/// What the verifier additionally insists on beyond the signature chain.
#[derive(Debug, Clone, Default)]
pub struct Expectations {
    pub sm_measurement: Option<Measurement>,
    pub enclave_measurement: Option<Measurement>,
    pub data_prefix: Option<Vec<u8>>,
}

/// Device key verifies the monitor part; the monitor key it certifies
/// verifies the enclave part; then the optional expectations.
pub fn verify_report(
    report: &AttestationReport,
    trusted_device: &PublicKey,
    expect: &Expectations,
) -> Result<(), Invalid> {
    if report.device_public != *trusted_device || !report.sm.verify(trusted_device) {
        return Err(Invalid::Chain);
    }
    if !verify(&report.sm.sm_public, &report.enclave.signed_bytes(), &report.enclave.signature) {
        return Err(Invalid::EnclaveSignature);
    }
    if expect.sm_measurement.is_some_and(|m| m != report.sm.sm_measurement) {
        return Err(Invalid::SmMeasurement);
    }
    if expect.enclave_measurement.is_some_and(|m| m != report.enclave.measurement) {
        return Err(Invalid::Measurement);
    }
    if let Some(prefix) = &expect.data_prefix {
        if !report.enclave.data().starts_with(prefix) {
            return Err(Invalid::Data);
        }
    }
    Ok(())
}
