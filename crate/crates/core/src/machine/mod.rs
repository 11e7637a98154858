//! The simulated physical machine: flat memory, harts with privilege levels
//! and private PMP files, a synchronous IPI bus and an optional shared L2.

mod audit;
mod memory;
pub mod pmp;

use std::fmt;
use std::path::Path;

use thiserror::Error;

pub use audit::{AuditEntry, AuditLog};
pub use memory::{manifest_path, PhysicalMemory};
pub use pmp::{
    decode_entry, encode_region, PmpDecision, PmpEntry, PmpError, PmpFile, PmpMode, PmpPerms, RegionEncoding,
    PMP_ENTRIES,
};

use crate::cache::Cache;

pub const PAGE_SIZE: u64 = 4096;

pub type HartId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PhysAddr(pub u64);

impl PhysAddr {
    pub fn is_page_aligned(self) -> bool {
        self.0.is_multiple_of(PAGE_SIZE)
    }
}

impl fmt::Display for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Enclave identifier, assigned by the security monitor and never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EnclaveId(pub u32);

impl fmt::Display for EnclaveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Who a hart is currently executing for. Drives cache way masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Domain {
    #[default]
    Host,
    Enclave(EnclaveId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
    Execute,
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Execute => "exec",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrivMode {
    U,
    S,
    M,
}

impl fmt::Display for PrivMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrivMode::U => "U",
            PrivMode::S => "S",
            PrivMode::M => "M",
        })
    }
}

/// Half-open physical range `[base, base + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Region {
    pub base: u64,
    pub size: u64,
}

impl Region {
    pub const fn new(base: u64, size: u64) -> Self {
        Region { base, size }
    }

    pub fn pages(base: u64, pages: u64) -> Self {
        Region { base, size: pages * PAGE_SIZE }
    }

    pub fn end(&self) -> u64 {
        self.base.saturating_add(self.size)
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }

    pub fn contains_range(&self, addr: u64, len: u64) -> bool {
        addr >= self.base && addr.checked_add(len).is_some_and(|end| end <= self.end())
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        !self.is_empty() && !other.is_empty() && self.base < other.end() && other.base < self.end()
    }

    pub fn is_page_aligned(&self) -> bool {
        self.base.is_multiple_of(PAGE_SIZE) && self.size.is_multiple_of(PAGE_SIZE)
    }

    pub fn page_count(&self) -> u64 {
        self.size / PAGE_SIZE
    }

    pub fn page_addrs(&self) -> impl Iterator<Item = u64> {
        (self.base..self.end()).step_by(PAGE_SIZE as usize)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}+{:#x}", self.base, self.size)
    }
}

#[derive(Debug, Error)]
pub enum MachineError {
    #[error("access fault: {privilege}-mode {kind} at {addr}")]
    Denied { addr: PhysAddr, kind: AccessKind, privilege: PrivMode },
    #[error("physical access {addr:#x}+{len:#x} out of bounds")]
    OutOfBounds { addr: u64, len: u64 },
    #[error("memory size {0:#x} is not a nonzero multiple of the page size")]
    BadMemorySize(u64),
    #[error("machine needs at least one hart")]
    NoHarts,
    #[error("no hart {0}")]
    NoSuchHart(HartId),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MachineError {
    pub fn is_denied(&self) -> bool {
        matches!(self, MachineError::Denied { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hart {
    pub id: HartId,
    pub privilege: PrivMode,
    pub pmp: PmpFile,
    /// Register file stand-in.
    pub context: Vec<u8>,
    pub domain: Domain,
    cycle_counter: u64,
}

impl Hart {
    fn new(id: HartId) -> Self {
        Hart {
            id,
            privilege: PrivMode::S,
            pmp: PmpFile::new(),
            context: Vec::new(),
            domain: Domain::Host,
            cycle_counter: 0,
        }
    }

    /// The value `rdcycle` returns. Only ever increases.
    pub fn cycles(&self) -> u64 {
        self.cycle_counter
    }
}

/// One memory operation issued by a hart.
#[derive(Debug, Clone, Copy)]
pub enum MemOp<'a> {
    Read(usize),
    Write(&'a [u8]),
    Execute(usize),
}

impl MemOp<'_> {
    pub fn kind(&self) -> AccessKind {
        match self {
            MemOp::Read(_) => AccessKind::Read,
            MemOp::Write(_) => AccessKind::Write,
            MemOp::Execute(_) => AccessKind::Execute,
        }
    }

    pub fn len(&self) -> u64 {
        match self {
            MemOp::Read(n) | MemOp::Execute(n) => *n as u64,
            MemOp::Write(d) => d.len() as u64,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessRecord {
    pub step: u64,
    pub hart: HartId,
    pub addr: u64,
    pub len: u64,
    pub kind: AccessKind,
    pub privilege: PrivMode,
    pub domain: Domain,
    pub allowed: bool,
}

#[derive(Debug, Clone)]
pub struct Machine {
    memory: PhysicalMemory,
    harts: Vec<Hart>,
    step: u64,
    audit: AuditLog,
    cache: Option<Cache>,
    trace: Option<Vec<AccessRecord>>,
}

impl Machine {
    pub fn new(memory_size: u64, hart_count: usize) -> Result<Self, MachineError> {
        Self::with_memory(PhysicalMemory::new(memory_size)?, hart_count)
    }

    fn with_memory(memory: PhysicalMemory, hart_count: usize) -> Result<Self, MachineError> {
        if hart_count == 0 {
            return Err(MachineError::NoHarts);
        }
        Ok(Machine {
            memory,
            harts: (0..hart_count).map(Hart::new).collect(),
            step: 0,
            audit: AuditLog::default(),
            cache: None,
            trace: None,
        })
    }

    pub fn memory_size(&self) -> u64 {
        self.memory.size()
    }

    pub fn hart_count(&self) -> usize {
        self.harts.len()
    }

    pub fn harts(&self) -> &[Hart] {
        &self.harts
    }

    pub fn hart(&self, id: HartId) -> Result<&Hart, MachineError> {
        self.harts.get(id).ok_or(MachineError::NoSuchHart(id))
    }

    pub fn hart_mut(&mut self, id: HartId) -> Result<&mut Hart, MachineError> {
        self.harts.get_mut(id).ok_or(MachineError::NoSuchHart(id))
    }

    /// Global step counter; advanced once per executed host or enclave action.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Account one action step on `hart`.
    pub fn tick(&mut self, hart: HartId) -> Result<(), MachineError> {
        self.hart_mut(hart)?.cycle_counter += 1;
        self.step += 1;
        Ok(())
    }

    pub fn attach_cache(&mut self, cache: Cache) {
        self.cache = Some(cache);
    }

    pub fn cache(&self) -> Option<&Cache> {
        self.cache.as_ref()
    }

    pub fn cache_mut(&mut self) -> Option<&mut Cache> {
        self.cache.as_mut()
    }

    /// Start recording every U/S access issued through [`Machine::mem_access`].
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[AccessRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn take_trace(&mut self) -> Vec<AccessRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn log(&mut self, hart: Option<HartId>, event: &str, args: &[(&str, String)]) {
        self.audit.record(self.step, hart, event, args);
    }

    /// M-mode view of memory.
    pub fn memory(&self) -> &PhysicalMemory {
        &self.memory
    }

    /// M-mode view of memory. Only the security monitor and loaders acting
    /// before isolation exists should write through this.
    pub fn memory_mut(&mut self) -> &mut PhysicalMemory {
        &mut self.memory
    }

    pub fn pmp_check(
        &self,
        hart: HartId,
        addr: PhysAddr,
        len: u64,
        kind: AccessKind,
        privilege: PrivMode,
    ) -> Result<PmpDecision, MachineError> {
        Ok(self.hart(hart)?.pmp.check(addr.0, len, kind, privilege))
    }

    /// A checked load or store by `hart` at `privilege`. Denials are logged
    /// and returned as [`MachineError::Denied`].
    pub fn mem_access(
        &mut self,
        hart: HartId,
        privilege: PrivMode,
        addr: PhysAddr,
        op: MemOp<'_>,
    ) -> Result<Vec<u8>, MachineError> {
        let len = op.len();
        let kind = op.kind();
        if len == 0 {
            return Ok(Vec::new());
        }
        if !self.memory.in_bounds(addr.0, len) {
            return Err(MachineError::OutOfBounds { addr: addr.0, len });
        }
        let h = self.hart(hart)?;
        let domain = h.domain;
        let allowed = h.pmp.check(addr.0, len, kind, privilege) == PmpDecision::Allow;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(AccessRecord { step: self.step, hart, addr: addr.0, len, kind, privilege, domain, allowed });
        }
        if !allowed {
            self.log(
                Some(hart),
                "access_fault",
                &[
                    ("addr", addr.to_string()),
                    ("len", len.to_string()),
                    ("kind", kind.to_string()),
                    ("priv", privilege.to_string()),
                ],
            );
            return Err(MachineError::Denied { addr, kind, privilege });
        }
        if let Some(cache) = self.cache.as_mut() {
            let first = addr.0 / crate::cache::LINE_SIZE;
            let last = (addr.0 + len - 1) / crate::cache::LINE_SIZE;
            for line in first..=last {
                cache.access(domain, line * crate::cache::LINE_SIZE);
            }
        }
        match op {
            MemOp::Read(_) | MemOp::Execute(_) => Ok(self.memory.read(addr.0, len)?.to_vec()),
            MemOp::Write(data) => {
                self.memory.write(addr.0, data)?;
                Ok(Vec::new())
            }
        }
    }

    pub fn read(
        &mut self,
        hart: HartId,
        privilege: PrivMode,
        addr: PhysAddr,
        len: usize,
    ) -> Result<Vec<u8>, MachineError> {
        self.mem_access(hart, privilege, addr, MemOp::Read(len))
    }

    pub fn write(
        &mut self,
        hart: HartId,
        privilege: PrivMode,
        addr: PhysAddr,
        data: &[u8],
    ) -> Result<(), MachineError> {
        self.mem_access(hart, privilege, addr, MemOp::Write(data)).map(|_| ())
    }

    /// Install `entry` at `index` on every hart before returning. Returns the
    /// number of harts updated.
    pub fn broadcast_pmp_update(&mut self, origin: HartId, index: usize, entry: PmpEntry) -> usize {
        for h in &mut self.harts {
            h.pmp.set(index, entry);
        }
        let n = self.harts.len();
        self.log(
            Some(origin),
            "ipi_pmp",
            &[("index", index.to_string()), ("mode", format!("{:?}", entry.mode)), ("harts", n.to_string())],
        );
        n
    }

    /// Change one entry on one hart only (context switches).
    pub fn set_local_pmp(&mut self, hart: HartId, index: usize, entry: PmpEntry) -> Result<(), MachineError> {
        self.hart_mut(hart)?.pmp.set(index, entry);
        Ok(())
    }

    /// Write the raw memory image to `path` plus a `.manifest` sidecar.
    pub fn dump_snapshot(&self, path: &Path) -> Result<(), MachineError> {
        Ok(memory::write_snapshot(path, &self.memory, self.harts.len())?)
    }

    /// Rebuild a machine from a snapshot. Harts start with cleared PMP files.
    pub fn load_snapshot(path: &Path) -> Result<Self, MachineError> {
        let (memory, harts) = memory::read_snapshot(path)?;
        Self::with_memory(memory, harts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn machine() -> Machine {
        Machine::new(64 * PAGE_SIZE, 4).unwrap()
    }

    #[test]
    fn unprotected_machine_denies_supervisor() {
        let mut m = machine();
        let err = m.read(0, PrivMode::S, PhysAddr(0x1000), 4).unwrap_err();
        assert!(err.is_denied());
        assert_eq!(m.audit().events("access_fault").count(), 1);
        assert!(m.read(0, PrivMode::M, PhysAddr(0x1000), 4).is_ok());
    }

    #[test]
    fn broadcast_reaches_every_hart() {
        let mut m = machine();
        let e = PmpEntry::all_memory(PmpPerms::RWX);
        assert_eq!(m.broadcast_pmp_update(0, 15, e), 4);
        assert!(m.harts().iter().all(|h| h.pmp.entry(15) == e));
        m.write(3, PrivMode::U, PhysAddr(0x2000), &[7]).unwrap();
        assert_eq!(m.read(1, PrivMode::S, PhysAddr(0x2000), 1).unwrap(), vec![7]);
    }

    #[test]
    fn local_update_stays_local() {
        let mut m = machine();
        m.set_local_pmp(2, 3, PmpEntry::all_memory(PmpPerms::RW)).unwrap();
        assert_eq!(m.harts()[2].pmp.entry(3).perms, PmpPerms::RW);
        assert_eq!(m.harts()[1].pmp.entry(3), PmpEntry::OFF);
    }

    #[test]
    fn tick_is_monotonic() {
        let mut m = machine();
        m.tick(1).unwrap();
        m.tick(1).unwrap();
        assert_eq!(m.harts()[1].cycles(), 2);
        assert_eq!(m.harts()[0].cycles(), 0);
        assert_eq!(m.step_count(), 2);
    }

    #[test]
    fn trace_records_denials() {
        let mut m = machine();
        m.enable_trace();
        let _ = m.read(0, PrivMode::U, PhysAddr(0), 1);
        assert_eq!(m.trace().len(), 1);
        assert!(!m.trace()[0].allowed);
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.img");
        let mut m = machine();
        m.memory_mut().write(0x3000, b"snapshot").unwrap();
        m.dump_snapshot(&path).unwrap();
        let manifest = std::fs::read_to_string(manifest_path(&path)).unwrap();
        assert_eq!(manifest, format!("memory_size={}\nharts=4\n", 64 * PAGE_SIZE));
        let back = Machine::load_snapshot(&path).unwrap();
        assert_eq!(back.memory(), m.memory());
        assert_eq!(back.hart_count(), 4);
    }

    #[test]
    fn region_overlap_rules() {
        let a = Region::new(0x1000, 0x1000);
        assert!(a.overlaps(&Region::new(0x1fff, 1)));
        assert!(!a.overlaps(&Region::new(0x2000, 0x1000)));
        assert!(!a.overlaps(&Region::new(0x1800, 0)));
        assert!(a.contains_range(0x1000, 0x1000));
        assert!(!a.contains_range(0x1ff0, 0x20));
    }
}
