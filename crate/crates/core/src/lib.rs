//! A functional simulator of a PMP-based trusted execution environment on a
//! multi-hart RISC-V-like machine: security monitor, enclave runtime,
//! edge calls, an untrusted host with an attacker harness, and a
//! way-partitioned cache model.

pub mod cache;
pub mod crypto;
pub mod edge;
pub mod host;
pub mod machine;
pub mod paging;
pub mod sm;
