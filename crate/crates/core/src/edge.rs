//! Edge calls: RPC from the enclave to the untrusted host through the shared
//! buffer.
//!
//! The buffer starts with a 32-byte header of eight little-endian `u32`s:
//! `fid, status, args_off, args_len, ret_off, ret_len, error_code, reserved`.
//! Payloads follow the header; the backing store, if any, sits at the tail.
//! The runtime copies arguments in, stops the enclave, and once resumed
//! copies the reply out and scrubs the payload area. The eapp never touches
//! the buffer.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::machine::{HartId, Machine, MachineError, PhysAddr, PrivMode, Region};
use crate::paging::{RtError, Runtime, EDGE_HEADER_LEN};

pub const FID_WORDCOUNT: u32 = 0;
pub const FID_FETCH: u32 = 1;
pub const FID_SEND: u32 = 2;
/// Reserved index for proxied file syscalls.
pub const SYSCALL_FID: u32 = 0xFFFF_FF00;

pub const SYS_OPEN: u32 = 1;
pub const SYS_CLOSE: u32 = 2;
pub const SYS_READ: u32 = 3;
pub const SYS_WRITE: u32 = 4;

pub const ENOENT: u32 = 2;
pub const EBADF: u32 = 9;
pub const EINVAL: u32 = 22;
/// No handler registered under the requested index.
pub const E_NOFUNC: u32 = 0x1_0000;
/// Reply does not fit in the payload area.
pub const E_TOOBIG: u32 = 0x1_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Status {
    Idle = 0,
    Pending = 1,
    Done = 2,
    Error = 3,
}

impl Status {
    fn from_u32(v: u32) -> Option<Status> {
        Some(match v {
            0 => Status::Idle,
            1 => Status::Pending,
            2 => Status::Done,
            3 => Status::Error,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeHeader {
    pub fid: u32,
    pub status: Status,
    pub args_off: u32,
    pub args_len: u32,
    pub ret_off: u32,
    pub ret_len: u32,
    pub error_code: u32,
}

impl EdgeHeader {
    pub const IDLE: EdgeHeader =
        EdgeHeader { fid: 0, status: Status::Idle, args_off: 0, args_len: 0, ret_off: 0, ret_len: 0, error_code: 0 };

    pub fn to_bytes(&self) -> [u8; EDGE_HEADER_LEN as usize] {
        let words = [
            self.fid,
            self.status as u32,
            self.args_off,
            self.args_len,
            self.ret_off,
            self.ret_len,
            self.error_code,
            0,
        ];
        let mut out = [0u8; EDGE_HEADER_LEN as usize];
        for (i, w) in words.iter().enumerate() {
            out[i * 4..i * 4 + 4].copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, EdgeError> {
        if b.len() < EDGE_HEADER_LEN as usize {
            return Err(EdgeError::Malformed("short header".into()));
        }
        let w = |i: usize| u32::from_le_bytes(b[i * 4..i * 4 + 4].try_into().expect("4 bytes"));
        let status = Status::from_u32(w(1)).ok_or_else(|| EdgeError::Malformed(format!("status {}", w(1))))?;
        Ok(EdgeHeader {
            fid: w(0),
            status,
            args_off: w(2),
            args_len: w(3),
            ret_off: w(4),
            ret_len: w(5),
            error_code: w(6),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EdgeError {
    #[error("payload of {len} bytes exceeds capacity {capacity}")]
    PayloadTooLarge { len: usize, capacity: u64 },
    #[error("no host function {0:#x}")]
    UnknownFunction(u32),
    #[error("host error {0}")]
    HostError(u32),
    #[error("an edge call is already pending")]
    Busy,
    #[error("host did not answer the call")]
    NoReply,
    #[error("malformed shared buffer: {0}")]
    Malformed(String),
    #[error("runtime: {0}")]
    Runtime(#[from] RtError),
    #[error("machine: {0}")]
    Machine(String),
}

impl From<MachineError> for EdgeError {
    fn from(e: MachineError) -> Self {
        EdgeError::Machine(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EdgeStats {
    pub calls: u64,
    /// Bytes copied from enclave memory into the shared buffer.
    pub bytes_in: u64,
    /// Bytes copied from the shared buffer into enclave memory.
    pub bytes_out: u64,
}

/// Enclave side of the channel; all buffer accesses go through the runtime.
#[derive(Debug, Clone, Default)]
pub struct EdgeClient {
    pub stats: EdgeStats,
}

impl EdgeClient {
    pub fn capacity(rt: &Runtime) -> u64 {
        let (start, end) = rt.edge_payload();
        end - start
    }

    /// Copy the arguments in and mark the call pending. The caller then
    /// stops the enclave so the host can serve it.
    pub fn begin(&mut self, rt: &Runtime, machine: &mut Machine, fid: u32, payload: &[u8]) -> Result<(), EdgeError> {
        let header = EdgeHeader::from_bytes(&rt.shared_read(machine, 0, EDGE_HEADER_LEN as usize)?)?;
        if header.status == Status::Pending {
            return Err(EdgeError::Busy);
        }
        let capacity = Self::capacity(rt);
        if payload.len() as u64 > capacity {
            return Err(EdgeError::PayloadTooLarge { len: payload.len(), capacity });
        }
        rt.shared_write(machine, EDGE_HEADER_LEN, payload)?;
        let header = EdgeHeader {
            fid,
            status: Status::Pending,
            args_off: EDGE_HEADER_LEN as u32,
            args_len: payload.len() as u32,
            ..EdgeHeader::IDLE
        };
        rt.shared_write(machine, 0, &header.to_bytes())?;
        self.stats.calls += 1;
        self.stats.bytes_in += payload.len() as u64;
        Ok(())
    }

    /// After resume: copy the reply out, scrub the payload area, reset the
    /// header.
    pub fn finish(&mut self, rt: &Runtime, machine: &mut Machine) -> Result<Vec<u8>, EdgeError> {
        let header = EdgeHeader::from_bytes(&rt.shared_read(machine, 0, EDGE_HEADER_LEN as usize)?)?;
        let (start, end) = rt.edge_payload();
        let result = match header.status {
            Status::Done => {
                let off = u64::from(header.ret_off);
                let len = u64::from(header.ret_len);
                if off < start || off + len > end {
                    Err(EdgeError::Malformed(format!("reply {off:#x}+{len:#x} outside payload area")))
                } else {
                    let reply = rt.shared_read(machine, off, len as usize)?;
                    self.stats.bytes_out += len;
                    Ok(reply)
                }
            }
            Status::Error if header.error_code == E_NOFUNC => Err(EdgeError::UnknownFunction(header.fid)),
            Status::Error => Err(EdgeError::HostError(header.error_code)),
            Status::Pending | Status::Idle => Err(EdgeError::NoReply),
        };
        let used = u64::from(header.args_len.max(header.ret_len)).min(end - start);
        if used > 0 {
            rt.shared_write(machine, start, &vec![0u8; used as usize])?;
        }
        rt.shared_write(machine, 0, &EdgeHeader::IDLE.to_bytes())?;
        result
    }
}

pub type HostFn = Box<dyn FnMut(&[u8]) -> Result<Vec<u8>, u32>>;

/// A tiny in-memory filesystem for proxied syscalls.
#[derive(Debug, Clone, Default)]
pub struct ToyFs {
    files: BTreeMap<String, Vec<u8>>,
    handles: BTreeMap<u32, (String, usize)>,
    next_handle: u32,
}

fn u32_at(b: &[u8], at: usize) -> Result<u32, u32> {
    b.get(at..at + 4).map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes"))).ok_or(EINVAL)
}

impl ToyFs {
    pub fn file(&self, path: &str) -> Option<&[u8]> {
        self.files.get(path).map(Vec::as_slice)
    }

    pub fn put(&mut self, path: &str, contents: &[u8]) {
        self.files.insert(path.to_string(), contents.to_vec());
    }

    /// `nr u32 || args`; see the `SYS_*` constants.
    pub fn syscall(&mut self, request: &[u8]) -> Result<Vec<u8>, u32> {
        let nr = u32_at(request, 0)?;
        let args = &request[4..];
        match nr {
            SYS_OPEN => {
                let path = std::str::from_utf8(args).map_err(|_| EINVAL)?.to_string();
                if path.is_empty() {
                    return Err(ENOENT);
                }
                self.files.entry(path.clone()).or_default();
                self.next_handle += 1;
                self.handles.insert(self.next_handle, (path, 0));
                Ok(self.next_handle.to_le_bytes().to_vec())
            }
            SYS_CLOSE => {
                let h = u32_at(args, 0)?;
                self.handles.remove(&h).map(|_| Vec::new()).ok_or(EBADF)
            }
            SYS_READ => {
                let (h, len) = (u32_at(args, 0)?, u32_at(args, 4)? as usize);
                let (path, pos) = self.handles.get_mut(&h).ok_or(EBADF)?;
                let data = &self.files[path.as_str()];
                let end = (*pos + len).min(data.len());
                let out = data[(*pos).min(end)..end].to_vec();
                *pos = end;
                Ok(out)
            }
            SYS_WRITE => {
                let h = u32_at(args, 0)?;
                let (path, pos) = self.handles.get_mut(&h).ok_or(EBADF)?;
                let file = self.files.get_mut(path.as_str()).expect("open handle names a file");
                let bytes = &args[4..];
                if file.len() < *pos + bytes.len() {
                    file.resize(*pos + bytes.len(), 0);
                }
                file[*pos..*pos + bytes.len()].copy_from_slice(bytes);
                *pos += bytes.len();
                Ok((bytes.len() as u32).to_le_bytes().to_vec())
            }
            _ => Err(EINVAL),
        }
    }
}

/// Encode a proxied syscall request.
pub fn syscall_request(nr: u32, args: &[u8]) -> Vec<u8> {
    let mut out = nr.to_le_bytes().to_vec();
    out.extend_from_slice(args);
    out
}

/// Number of whitespace-separated words, as ASCII decimal.
pub fn wordcount(payload: &[u8]) -> Vec<u8> {
    let n = payload.split(|b| b.is_ascii_whitespace()).filter(|w| !w.is_empty()).count();
    n.to_string().into_bytes()
}

/// Host side: the function table plus attacker hooks.
#[derive(Default)]
pub struct HostEdge {
    functions: Vec<HostFn>,
    pub fs: ToyFs,
    /// Messages the host hands to `fetch`, oldest first.
    pub inbox: VecDeque<Vec<u8>>,
    /// Messages the enclave passed to `send`.
    pub outbox: Vec<Vec<u8>>,
    /// Attacker hook: leave the next pending call unanswered.
    pub drop_next_reply: bool,
    pub served: u64,
}

impl fmt::Debug for HostEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HostEdge")
            .field("functions", &self.functions.len())
            .field("served", &self.served)
            .finish_non_exhaustive()
    }
}

impl HostEdge {
    /// Register a handler under the next free index and return it. Indices
    /// 0..=2 are wordcount, fetch and send.
    pub fn register(&mut self, f: HostFn) -> u32 {
        self.functions.push(f);
        self.functions.len() as u32 + FID_SEND
    }

    fn dispatch(&mut self, fid: u32, args: &[u8]) -> Result<Vec<u8>, u32> {
        match fid {
            FID_WORDCOUNT => Ok(wordcount(args)),
            FID_FETCH => Ok(self.inbox.pop_front().unwrap_or_default()),
            FID_SEND => {
                self.outbox.push(args.to_vec());
                Ok(Vec::new())
            }
            SYSCALL_FID => self.fs.syscall(args),
            _ => match self.functions.get_mut((fid - FID_SEND - 1) as usize) {
                Some(f) => f(args),
                None => Err(E_NOFUNC),
            },
        }
    }

    /// Answer a pending call in `utm`, reading and writing as the OS on
    /// `hart`. Returns whether a call was served.
    pub fn serve(
        &mut self,
        machine: &mut Machine,
        hart: HartId,
        utm: Region,
        payload_end: u64,
    ) -> Result<bool, EdgeError> {
        let raw = machine.read(hart, PrivMode::S, PhysAddr(utm.base), EDGE_HEADER_LEN as usize)?;
        let header = EdgeHeader::from_bytes(&raw)?;
        if header.status != Status::Pending {
            return Ok(false);
        }
        if self.drop_next_reply {
            self.drop_next_reply = false;
            machine.log(Some(hart), "edge_drop", &[("fid", header.fid.to_string())]);
            return Ok(false);
        }
        let (off, len) = (u64::from(header.args_off), u64::from(header.args_len));
        let reply = if off < EDGE_HEADER_LEN || off + len > payload_end {
            Err(EINVAL)
        } else {
            let args = machine.read(hart, PrivMode::S, PhysAddr(utm.base + off), len as usize)?;
            self.dispatch(header.fid, &args)
        };
        let capacity = payload_end - EDGE_HEADER_LEN;
        let reply = reply.and_then(|r| if r.len() as u64 > capacity { Err(E_TOOBIG) } else { Ok(r) });
        let out = match reply {
            Ok(bytes) => {
                machine.write(hart, PrivMode::S, PhysAddr(utm.base + EDGE_HEADER_LEN), &bytes)?;
                EdgeHeader {
                    status: Status::Done,
                    ret_off: EDGE_HEADER_LEN as u32,
                    ret_len: bytes.len() as u32,
                    ..header
                }
            }
            Err(code) => EdgeHeader { status: Status::Error, error_code: code, ..header },
        };
        machine.write(hart, PrivMode::S, PhysAddr(utm.base), &out.to_bytes())?;
        self.served += 1;
        machine.log(
            Some(hart),
            "edge_serve",
            &[("fid", header.fid.to_string()), ("status", format!("{:?}", out.status))],
        );
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let h = EdgeHeader {
            fid: 7,
            status: Status::Done,
            args_off: 32,
            args_len: 5,
            ret_off: 32,
            ret_len: 1,
            error_code: 0,
        };
        let b = h.to_bytes();
        assert_eq!(&b[..4], &7u32.to_le_bytes());
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(EdgeHeader::from_bytes(&b).unwrap(), h);
        let mut bad = b;
        bad[4] = 9;
        assert!(EdgeHeader::from_bytes(&bad).is_err());
    }

    #[test]
    fn wordcount_counts_words() {
        assert_eq!(wordcount(b"hello world"), b"2");
        assert_eq!(wordcount(b"  a\tb\nc  "), b"3");
        assert_eq!(wordcount(b""), b"0");
    }

    #[test]
    fn toy_fs_round_trip_and_errors() {
        let mut fs = ToyFs::default();
        let h = fs.syscall(&syscall_request(SYS_OPEN, b"/tmp/x")).unwrap();
        let mut w = h.clone();
        w.extend_from_slice(b"payload");
        assert_eq!(fs.syscall(&syscall_request(SYS_WRITE, &w)).unwrap(), 7u32.to_le_bytes());
        fs.syscall(&syscall_request(SYS_CLOSE, &h)).unwrap();
        let h2 = fs.syscall(&syscall_request(SYS_OPEN, b"/tmp/x")).unwrap();
        let mut r = h2.clone();
        r.extend_from_slice(&64u32.to_le_bytes());
        assert_eq!(fs.syscall(&syscall_request(SYS_READ, &r)).unwrap(), b"payload");
        let mut stale = 99u32.to_le_bytes().to_vec();
        stale.extend_from_slice(&4u32.to_le_bytes());
        assert_eq!(fs.syscall(&syscall_request(SYS_READ, &stale)), Err(EBADF));
    }

    #[test]
    fn registered_functions_are_dense_after_builtins() {
        let mut host = HostEdge::default();
        let fid = host.register(Box::new(|a| Ok(a.iter().rev().copied().collect())));
        assert_eq!(fid, 3);
        assert_eq!(host.dispatch(3, b"abc"), Ok(b"cba".to_vec()));
        assert_eq!(host.dispatch(4, b""), Err(E_NOFUNC));
    }
}
