//! The enclave runtime's memory manager.
//!
//! The runtime owns the page table inside enclave memory and reaches it
//! only through PMP-checked supervisor accesses on the hart executing the
//! enclave. It keeps a free list of unmapped enclave pages, serves mmap/brk
//! and getrandom for the eapp, can page eapp memory out to a sealed backing
//! store in the untrusted shared buffer, and accepts memory the host adds
//! through the extend call.
//!
//! Virtual layout: eapp image from [`EAPP_BASE`], heap right above it, mmap
//! windows from [`MMAP_BASE`], the runtime near the top of the 39-bit space,
//! and the shared buffer mapped runtime-only at [`UTM_VA`].

pub mod pte;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::crypto::{hash, seal_page, unseal_page, Measurement, Rng, SealedPage, NONCE_LEN};
use crate::machine::{AccessKind, EnclaveId, HartId, Machine, MachineError, PhysAddr, PrivMode, Region, PAGE_SIZE};
use crate::sm::{Notice, SecurityMonitor, SmError, Trap, TrapRoute};

use pte::{Pte, PteSource, ScanError, PTE_R, PTE_SHARED, PTE_U, PTE_V, PTE_W, PTE_X};

pub const EAPP_BASE: u64 = 0x40_0000;
pub const MMAP_BASE: u64 = 0x10_0000_0000;
pub const RT_BASE: u64 = 0x3F_C000_0000;
pub const UTM_VA: u64 = 0x3F_8000_0000;
/// Bytes at the start of the shared buffer reserved for the edge-call header.
pub const EDGE_HEADER_LEN: u64 = 32;

const EAPP_DATA: u64 = PTE_V | PTE_R | PTE_W | PTE_U;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FatalKind {
    /// Access outside every eapp mapping, or against its permissions.
    Segfault(u64),
    /// Every backing-store slot is occupied.
    StoreFull,
    /// Eviction needed but no eapp page is resident.
    NoVictim,
    /// A sealed page failed authentication on swap-in.
    Integrity(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RtError {
    #[error("page fault at {vaddr:#x} ({kind})")]
    PageFault { vaddr: u64, kind: AccessKind },
    #[error("page table page at {0:#x} lies outside enclave memory")]
    MapCorruption(u64),
    #[error("physical page {0:#x} is not on the free list")]
    NotFree(u64),
    #[error("virtual page {0:#x} is not mapped")]
    NotMapped(u64),
    #[error("target {0:#x} lies outside enclave memory and the shared buffer")]
    WouldEscapeEpm(u64),
    #[error("out of enclave memory")]
    OutOfMemory,
    /// The runtime must stop and ask the host to extend by this many pages.
    #[error("needs {0} more pages from the host")]
    NeedExtend(u64),
    #[error("extension {0} rejected")]
    ExtendRejected(Region),
    #[error("invalid argument: {0}")]
    BadArgument(String),
    #[error("shared buffer of {have:#x} bytes cannot hold a {need:#x}-byte backing store")]
    UtmTooSmall { need: u64, have: u64 },
    #[error("fatal: {0:?}")]
    Fatal(FatalKind),
    #[error("monitor: {0}")]
    Sm(#[from] SmError),
    #[error("machine: {0}")]
    Machine(String),
}

impl From<MachineError> for RtError {
    fn from(e: MachineError) -> Self {
        RtError::Machine(e.to_string())
    }
}

impl RtError {
    pub fn is_fatal(&self) -> bool {
        matches!(self, RtError::Fatal(_) | RtError::MapCorruption(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RuntimeConfig {
    /// Maximum resident eapp pages; `None` disables self-paging.
    pub paging_limit: Option<usize>,
    /// Encrypt evicted pages. Without it pages are stored in the clear and
    /// only their hash is kept inside the enclave.
    pub encrypt: bool,
    pub dyn_resize: bool,
    /// Backing-store slots carved from the tail of the shared buffer.
    pub store_slots: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RuntimeStats {
    pub faults: u64,
    pub evictions: u64,
    pub swap_ins: u64,
    pub extends: u64,
}

/// In-enclave record of an evicted page.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SlotMeta {
    slot: usize,
    flags: u64,
    nonce: [u8; NONCE_LEN],
    tag: [u8; 32],
}

/// Supervisor reads of table entries, refused outside enclave memory.
struct CheckedTables<'a> {
    machine: &'a mut Machine,
    hart: HartId,
    epm: Region,
}

impl PteSource for CheckedTables<'_> {
    type Error = RtError;

    fn read_pte(&mut self, addr: u64) -> Result<u64, RtError> {
        if !self.epm.contains_range(addr, 8) {
            return Err(RtError::MapCorruption(pte::page_floor(addr)));
        }
        let b = self.machine.read(self.hart, PrivMode::S, PhysAddr(addr), 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn scan_err(e: ScanError<RtError>) -> RtError {
    match e {
        ScanError::Read(e) => e,
        ScanError::Superpage { vaddr, .. } | ScanError::TooDeep { vaddr } | ScanError::ReservedFlags { vaddr } => {
            RtError::MapCorruption(vaddr)
        }
    }
}

#[derive(Debug)]
pub struct Runtime {
    eid: EnclaveId,
    hart: HartId,
    config: RuntimeConfig,
    epm: Region,
    utm: Region,
    root: u64,
    free: BTreeSet<u64>,
    /// Initial eapp pages and their flags.
    image: BTreeMap<u64, u64>,
    heap_start: u64,
    brk: u64,
    mmaps: Vec<Region>,
    mmap_next: u64,
    resident: BTreeSet<u64>,
    swapped: BTreeMap<u64, SlotMeta>,
    free_slots: BTreeSet<usize>,
    store_off: u64,
    key: [u8; 16],
    nonce_counter: u64,
    rng: Rng,
    extend_refused: bool,
    stats: RuntimeStats,
}

impl Runtime {
    /// Start the runtime on `hart`, which must be executing `eid`.
    pub fn boot(
        machine: &mut Machine,
        sm: &mut SecurityMonitor,
        hart: HartId,
        config: RuntimeConfig,
    ) -> Result<Self, RtError> {
        let eid = sm.running_on(hart).ok_or_else(|| RtError::BadArgument(format!("hart {hart} runs no enclave")))?;
        let desc = sm.enclave(eid).expect("running enclave exists");
        let (epm, utm, root) = (desc.epm, desc.utm, desc.pt_root);

        let store_bytes = config.store_slots as u64 * SealedPage::LEN as u64;
        let need = EDGE_HEADER_LEN + store_bytes;
        if need > utm.size {
            return Err(RtError::UtmTooSmall { need, have: utm.size });
        }

        let scan = pte::scan(&mut CheckedTables { machine, hart, epm }, root).map_err(scan_err)?;
        let mut free: BTreeSet<u64> = epm.page_addrs().collect();
        for t in &scan.tables {
            free.remove(t);
        }
        let mut image = BTreeMap::new();
        for leaf in &scan.leaves {
            free.remove(&leaf.pte.target());
            if leaf.pte.has(PTE_U) {
                image.insert(leaf.vaddr, leaf.pte.flags() & (PTE_V | PTE_R | PTE_W | PTE_X | PTE_U));
            }
        }
        let zero = vec![0u8; PAGE_SIZE as usize];
        for &p in &free {
            machine.write(hart, PrivMode::S, PhysAddr(p), &zero)?;
        }

        let mut key = [0u8; 16];
        key[..8].copy_from_slice(&sm.random(machine, hart)?.to_le_bytes());
        key[8..].copy_from_slice(&sm.random(machine, hart)?.to_le_bytes());
        let rng = Rng::new(sm.random(machine, hart)?);

        let heap_start = image.keys().next_back().map_or(EAPP_BASE, |&v| v + PAGE_SIZE);
        let mut rt = Runtime {
            eid,
            hart,
            config,
            epm,
            utm,
            root,
            free,
            resident: image.keys().copied().collect(),
            image,
            heap_start,
            brk: heap_start,
            mmaps: Vec::new(),
            mmap_next: MMAP_BASE,
            swapped: BTreeMap::new(),
            free_slots: (0..config.store_slots).collect(),
            store_off: utm.size - store_bytes,
            key,
            nonce_counter: 0,
            rng,
            extend_refused: false,
            stats: RuntimeStats::default(),
        };
        for off in (0..utm.size).step_by(PAGE_SIZE as usize) {
            rt.map(machine, UTM_VA + off, utm.base + off, PTE_V | PTE_R | PTE_W | PTE_SHARED)?;
        }
        if let Some(limit) = config.paging_limit {
            while rt.resident.len() > limit {
                rt.evict_one(machine)?;
            }
        }
        machine.log(Some(hart), "rt_boot", &[("eid", eid.to_string()), ("free_pages", rt.free.len().to_string())]);
        Ok(rt)
    }

    pub fn eid(&self) -> EnclaveId {
        self.eid
    }

    pub fn hart(&self) -> HartId {
        self.hart
    }

    /// The runtime follows its enclave to whatever hart resumes it.
    pub fn set_hart(&mut self, hart: HartId) {
        self.hart = hart;
    }

    pub fn config(&self) -> RuntimeConfig {
        self.config
    }

    pub fn epm(&self) -> Region {
        self.epm
    }

    pub fn utm(&self) -> Region {
        self.utm
    }

    pub fn stats(&self) -> RuntimeStats {
        self.stats
    }

    pub fn free_pages(&self) -> usize {
        self.free.len()
    }

    pub fn is_free(&self, paddr: u64) -> bool {
        self.free.contains(&paddr)
    }

    pub fn resident_pages(&self) -> usize {
        self.resident.len()
    }

    pub fn swapped_pages(&self) -> usize {
        self.swapped.len()
    }

    pub fn brk(&self) -> u64 {
        self.brk
    }

    /// Byte range of the shared buffer left for edge-call payloads.
    pub fn edge_payload(&self) -> (u64, u64) {
        (EDGE_HEADER_LEN, self.store_off)
    }

    /// Physical address of backing-store slot `slot`.
    pub fn store_slot_addr(&self, slot: usize) -> u64 {
        self.utm.base + self.store_off + slot as u64 * SealedPage::LEN as u64
    }

    /// Store slots currently holding a page, by virtual address.
    pub fn store_slots_in_use(&self) -> Vec<(u64, usize)> {
        self.swapped.iter().map(|(&v, m)| (v, m.slot)).collect()
    }

    fn tables<'a>(&self, machine: &'a mut Machine) -> CheckedTables<'a> {
        CheckedTables { machine, hart: self.hart, epm: self.epm }
    }

    /// Walk the enclave table for an access by `privilege`.
    pub fn translate(
        &self,
        machine: &mut Machine,
        vaddr: u64,
        kind: AccessKind,
        privilege: PrivMode,
    ) -> Result<u64, RtError> {
        let fault = RtError::PageFault { vaddr, kind };
        if !pte::is_canonical(vaddr) {
            return Err(fault);
        }
        let Some(leaf) = pte::walk(&mut self.tables(machine), self.root, vaddr).map_err(scan_err)? else {
            return Err(fault);
        };
        let p = leaf.pte;
        let allowed = match kind {
            AccessKind::Read => p.has(PTE_R),
            AccessKind::Write => p.has(PTE_W),
            AccessKind::Execute => p.has(PTE_X) && !(privilege == PrivMode::S && p.has(PTE_U)),
        };
        if !allowed || (privilege == PrivMode::U && !p.has(PTE_U)) {
            return Err(fault);
        }
        Ok(p.target() + (vaddr & (PAGE_SIZE - 1)))
    }

    fn write_pte(&self, machine: &mut Machine, addr: u64, value: Pte) -> Result<(), RtError> {
        if !self.epm.contains_range(addr, 8) {
            return Err(RtError::MapCorruption(pte::page_floor(addr)));
        }
        machine.write(self.hart, PrivMode::S, PhysAddr(addr), &value.0.to_le_bytes())?;
        Ok(())
    }

    /// Take a zeroed page, evicting or asking for an extension when the
    /// free list is empty.
    fn take_page(&mut self, machine: &mut Machine) -> Result<u64, RtError> {
        if self.free.is_empty() {
            if self.config.dyn_resize && !self.extend_refused {
                return Err(RtError::NeedExtend(1));
            }
            if self.config.paging_limit.is_some() {
                self.evict_one(machine)?;
            }
        }
        self.free.pop_first().ok_or(RtError::OutOfMemory)
    }

    /// Address of the level-0 entry for `vaddr`, creating tables on the way.
    fn leaf_slot(&mut self, machine: &mut Machine, vaddr: u64) -> Result<u64, RtError> {
        let mut table = self.root;
        for level in (1..pte::LEVELS).rev() {
            let addr = table + pte::vpn(vaddr, level) * 8;
            let entry = Pte(self.tables(machine).read_pte(addr)?);
            table = if entry.is_valid() {
                if entry.is_leaf() {
                    return Err(RtError::MapCorruption(pte::page_floor(vaddr)));
                }
                entry.target()
            } else {
                let page = self.take_page(machine)?;
                self.write_pte(machine, addr, Pte::table(page))?;
                page
            };
        }
        Ok(table + pte::vpn(vaddr, 0) * 8)
    }

    /// Install a leaf. Private targets must come off the free list; shared
    /// ones must lie in the shared buffer.
    pub fn map(&mut self, machine: &mut Machine, vaddr: u64, ppage: u64, flags: u64) -> Result<(), RtError> {
        let shared = flags & PTE_SHARED != 0;
        if shared {
            if !self.utm.contains_range(ppage, PAGE_SIZE) {
                return Err(RtError::WouldEscapeEpm(ppage));
            }
        } else if !self.epm.contains_range(ppage, PAGE_SIZE) {
            return Err(RtError::WouldEscapeEpm(ppage));
        } else if !self.free.remove(&ppage) {
            return Err(RtError::NotFree(ppage));
        }
        let result = self.install(machine, vaddr, ppage, flags);
        if result.is_err() && !shared {
            self.free.insert(ppage);
        }
        result
    }

    /// Write the leaf for a page already taken off the free list.
    fn install(&mut self, machine: &mut Machine, vaddr: u64, ppage: u64, flags: u64) -> Result<(), RtError> {
        let slot = self.leaf_slot(machine, pte::page_floor(vaddr))?;
        self.write_pte(machine, slot, Pte::new(ppage, flags | PTE_V))
    }

    /// Remove a leaf; private pages are scrubbed and go back on the free list.
    pub fn unmap(&mut self, machine: &mut Machine, vaddr: u64) -> Result<u64, RtError> {
        let vaddr = pte::page_floor(vaddr);
        let leaf = pte::walk(&mut self.tables(machine), self.root, vaddr)
            .map_err(scan_err)?
            .ok_or(RtError::NotMapped(vaddr))?;
        self.write_pte(machine, leaf.pte_addr, Pte(0))?;
        let target = leaf.pte.target();
        if !leaf.pte.has(PTE_SHARED) {
            machine.write(self.hart, PrivMode::S, PhysAddr(target), &[0u8; PAGE_SIZE as usize])?;
            self.free.insert(target);
        }
        self.resident.remove(&vaddr);
        Ok(target)
    }

    /// Flags the eapp may have at `page`, if any mapping covers it.
    fn vma_flags(&self, page: u64) -> Option<u64> {
        if let Some(&f) = self.image.get(&page) {
            return Some(f);
        }
        if page >= self.heap_start && page < pte::page_ceil(self.brk) {
            return Some(EAPP_DATA);
        }
        self.mmaps.iter().any(|r| r.contains(page)).then_some(EAPP_DATA)
    }

    fn next_nonce(&mut self) -> [u8; NONCE_LEN] {
        self.nonce_counter += 1;
        let mut n = [0u8; NONCE_LEN];
        n[..4].copy_from_slice(&self.eid.0.to_le_bytes());
        n[4..12].copy_from_slice(&self.nonce_counter.to_le_bytes());
        n
    }

    fn utm_write(&self, machine: &mut Machine, off: u64, data: &[u8]) -> Result<(), RtError> {
        let mut done = 0usize;
        while done < data.len() {
            let va = UTM_VA + off + done as u64;
            let chunk = ((PAGE_SIZE - (va & (PAGE_SIZE - 1))) as usize).min(data.len() - done);
            let pa = self.translate(machine, va, AccessKind::Write, PrivMode::S)?;
            machine.write(self.hart, PrivMode::S, PhysAddr(pa), &data[done..done + chunk])?;
            done += chunk;
        }
        Ok(())
    }

    fn utm_read(&self, machine: &mut Machine, off: u64, len: usize) -> Result<Vec<u8>, RtError> {
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            let va = UTM_VA + off + out.len() as u64;
            let chunk = ((PAGE_SIZE - (va & (PAGE_SIZE - 1))) as usize).min(len - out.len());
            let pa = self.translate(machine, va, AccessKind::Read, PrivMode::S)?;
            out.extend(machine.read(self.hart, PrivMode::S, PhysAddr(pa), chunk)?);
        }
        Ok(out)
    }

    /// Runtime access to the shared buffer through its virtual window.
    pub fn shared_write(&self, machine: &mut Machine, off: u64, data: &[u8]) -> Result<(), RtError> {
        self.utm_write(machine, off, data)
    }

    pub fn shared_read(&self, machine: &mut Machine, off: u64, len: usize) -> Result<Vec<u8>, RtError> {
        self.utm_read(machine, off, len)
    }

    /// Seal a random resident eapp page into the backing store and unmap it.
    fn evict_one(&mut self, machine: &mut Machine) -> Result<(), RtError> {
        if self.resident.is_empty() {
            return Err(RtError::Fatal(FatalKind::NoVictim));
        }
        let pick = self.rng.below(self.resident.len() as u64) as usize;
        let victim = *self.resident.iter().nth(pick).expect("index in range");
        let slot = *self.free_slots.first().ok_or(RtError::Fatal(FatalKind::StoreFull))?;
        let leaf = pte::walk(&mut self.tables(machine), self.root, victim)
            .map_err(scan_err)?
            .ok_or(RtError::NotMapped(victim))?;
        let plain = machine.read(self.hart, PrivMode::S, PhysAddr(leaf.pte.target()), PAGE_SIZE as usize)?;
        let nonce = self.next_nonce();
        let (bytes, tag) = if self.config.encrypt {
            let sealed = seal_page(&self.key, nonce, &plain).expect("page sized");
            (sealed.to_bytes(), sealed.tag)
        } else {
            let mut b = plain.clone();
            b.resize(SealedPage::LEN, 0);
            (b, hash(&plain).0)
        };
        self.utm_write(machine, self.store_off + slot as u64 * SealedPage::LEN as u64, &bytes)?;
        self.free_slots.remove(&slot);
        self.swapped.insert(victim, SlotMeta { slot, flags: leaf.pte.flags() & !PTE_SHARED, nonce, tag });
        self.unmap(machine, victim)?;
        self.stats.evictions += 1;
        machine.log(Some(self.hart), "evict", &[("vaddr", format!("{victim:#x}")), ("slot", slot.to_string())]);
        Ok(())
    }

    fn load_slot(&self, machine: &mut Machine, vaddr: u64, meta: &SlotMeta) -> Result<Vec<u8>, RtError> {
        let raw =
            self.utm_read(machine, self.store_off + meta.slot as u64 * SealedPage::LEN as u64, SealedPage::LEN)?;
        let integrity = RtError::Fatal(FatalKind::Integrity(vaddr));
        if self.config.encrypt {
            let sealed = SealedPage::from_bytes(&raw).map_err(|_| integrity.clone())?;
            if sealed.nonce != meta.nonce || sealed.tag != meta.tag {
                return Err(integrity);
            }
            unseal_page(&self.key, &sealed).map_err(|_| integrity)
        } else {
            let plain = raw[..PAGE_SIZE as usize].to_vec();
            if hash(&plain).0 != meta.tag {
                return Err(integrity);
            }
            Ok(plain)
        }
    }

    /// Resolve a fault the monitor delegated to the runtime.
    pub fn handle_page_fault(&mut self, machine: &mut Machine, vaddr: u64, kind: AccessKind) -> Result<(), RtError> {
        let page = pte::page_floor(vaddr);
        let segfault = RtError::Fatal(FatalKind::Segfault(vaddr));
        if pte::walk(&mut self.tables(machine), self.root, page).map_err(scan_err)?.is_some() {
            return Err(segfault);
        }
        let meta = self.swapped.get(&page).copied();
        let flags = match meta {
            Some(m) => m.flags,
            None => self.vma_flags(page).ok_or(segfault.clone())?,
        };
        let permitted = match kind {
            AccessKind::Read => flags & PTE_R != 0,
            AccessKind::Write => flags & PTE_W != 0,
            AccessKind::Execute => flags & PTE_X != 0,
        };
        if !permitted {
            return Err(segfault);
        }
        self.stats.faults += 1;
        if let Some(limit) = self.config.paging_limit {
            while self.resident.len() >= limit.max(1) {
                self.evict_one(machine)?;
            }
        }
        let plain = match meta {
            Some(m) => match self.load_slot(machine, page, &m) {
                Ok(p) => Some(p),
                Err(e) => {
                    machine.log(Some(self.hart), "integrity_fail", &[("vaddr", format!("{page:#x}"))]);
                    return Err(e);
                }
            },
            None => None,
        };
        let ppage = self.take_page(machine)?;
        if let Err(e) = self.install(machine, page, ppage, flags) {
            self.free.insert(ppage);
            return Err(e);
        }
        if let (Some(m), Some(plain)) = (meta, plain) {
            machine.write(self.hart, PrivMode::S, PhysAddr(ppage), &plain)?;
            self.swapped.remove(&page);
            self.free_slots.insert(m.slot);
            self.stats.swap_ins += 1;
        }
        self.resident.insert(page);
        Ok(())
    }

    /// Translate an eapp access, resolving at most one fault through the
    /// monitor's trap delegation.
    fn eapp_translate(
        &mut self,
        machine: &mut Machine,
        sm: &mut SecurityMonitor,
        vaddr: u64,
        kind: AccessKind,
    ) -> Result<u64, RtError> {
        match self.translate(machine, vaddr, kind, PrivMode::U) {
            Err(RtError::PageFault { .. }) => {}
            other => return other,
        }
        match sm.delegate_trap(machine, self.hart, Trap::PageFault { vaddr, kind })? {
            TrapRoute::Runtime => self.handle_page_fault(machine, vaddr, kind)?,
            TrapRoute::Os => return Err(RtError::Fatal(FatalKind::Segfault(vaddr))),
        }
        match self.translate(machine, vaddr, kind, PrivMode::U) {
            Err(RtError::PageFault { .. }) => Err(RtError::Fatal(FatalKind::Segfault(vaddr))),
            other => other,
        }
    }

    pub fn eapp_read(
        &mut self,
        machine: &mut Machine,
        sm: &mut SecurityMonitor,
        vaddr: u64,
        len: usize,
    ) -> Result<Vec<u8>, RtError> {
        let mut out = Vec::with_capacity(len);
        while out.len() < len {
            let va = vaddr + out.len() as u64;
            let chunk = ((PAGE_SIZE - (va & (PAGE_SIZE - 1))) as usize).min(len - out.len());
            let pa = self.eapp_translate(machine, sm, va, AccessKind::Read)?;
            out.extend(machine.read(self.hart, PrivMode::U, PhysAddr(pa), chunk)?);
        }
        Ok(out)
    }

    pub fn eapp_write(
        &mut self,
        machine: &mut Machine,
        sm: &mut SecurityMonitor,
        vaddr: u64,
        data: &[u8],
    ) -> Result<(), RtError> {
        let mut done = 0usize;
        while done < data.len() {
            let va = vaddr + done as u64;
            let chunk = ((PAGE_SIZE - (va & (PAGE_SIZE - 1))) as usize).min(data.len() - done);
            let pa = self.eapp_translate(machine, sm, va, AccessKind::Write)?;
            machine.write(self.hart, PrivMode::U, PhysAddr(pa), &data[done..done + chunk])?;
            done += chunk;
        }
        Ok(())
    }

    /// Map fresh eapp pages now, or leave them to demand faults when paging.
    fn populate(&mut self, machine: &mut Machine, pages: &[u64]) -> Result<(), RtError> {
        if self.config.paging_limit.is_some() {
            return Ok(());
        }
        for (i, &page) in pages.iter().enumerate() {
            let result = self.take_page(machine).and_then(|p| {
                self.install(machine, page, p, EAPP_DATA).inspect_err(|_| {
                    self.free.insert(p);
                })
            });
            if let Err(e) = result {
                for &undo in &pages[..i] {
                    self.unmap(machine, undo)?;
                }
                return Err(e);
            }
            self.resident.insert(page);
        }
        Ok(())
    }

    fn drop_page(&mut self, machine: &mut Machine, page: u64) -> Result<(), RtError> {
        if let Some(meta) = self.swapped.remove(&page) {
            self.free_slots.insert(meta.slot);
        } else if self.resident.contains(&page) {
            self.unmap(machine, page)?;
        }
        Ok(())
    }

    /// Map `ceil(len / 4096)` zeroed pages at the next free window.
    pub fn mmap(&mut self, machine: &mut Machine, len: u64) -> Result<u64, RtError> {
        if len == 0 {
            return Err(RtError::BadArgument("mmap of zero bytes".into()));
        }
        let pages = len.div_ceil(PAGE_SIZE);
        let base = self.mmap_next;
        let list: Vec<u64> = (0..pages).map(|i| base + i * PAGE_SIZE).collect();
        self.populate(machine, &list)?;
        self.mmaps.push(Region::pages(base, pages));
        // One unmapped guard page between windows.
        self.mmap_next = base + (pages + 1) * PAGE_SIZE;
        Ok(base)
    }

    /// Move the heap top by `delta` bytes; returns the new top.
    pub fn sbrk(&mut self, machine: &mut Machine, delta: i64) -> Result<u64, RtError> {
        let new = self
            .brk
            .checked_add_signed(delta)
            .filter(|&b| b >= self.heap_start && b < MMAP_BASE)
            .ok_or_else(|| RtError::BadArgument(format!("brk delta {delta}")))?;
        let (old_top, new_top) = (pte::page_ceil(self.brk), pte::page_ceil(new));
        if new_top > old_top {
            let list: Vec<u64> = (old_top..new_top).step_by(PAGE_SIZE as usize).collect();
            self.populate(machine, &list)?;
        } else {
            for page in (new_top..old_top).step_by(PAGE_SIZE as usize) {
                self.drop_page(machine, page)?;
            }
        }
        self.brk = new;
        Ok(new)
    }

    pub fn getrandom(&mut self, machine: &mut Machine, sm: &mut SecurityMonitor) -> Result<u64, RtError> {
        Ok(sm.random(machine, self.hart)?)
    }

    /// Called after every resume: take extension notices from the monitor.
    pub fn on_resume(&mut self, machine: &mut Machine, sm: &mut SecurityMonitor) -> Result<usize, RtError> {
        let mut added = 0;
        for notice in sm.take_notices(self.eid) {
            match notice {
                Notice::Extended { added: region } => {
                    self.accept_extension(machine, region)?;
                    added += region.page_count() as usize;
                }
            }
        }
        Ok(added)
    }

    /// Record that the host answered an extension request with nothing.
    pub fn extension_refused(&mut self) {
        self.extend_refused = true;
    }

    /// Adopt pages the host says were added above enclave memory. They must
    /// sit directly above the current region and be reachable under the
    /// enclave's PMP view; each is zeroed before use.
    pub fn accept_extension(&mut self, machine: &mut Machine, added: Region) -> Result<(), RtError> {
        if added.is_empty() || !added.is_page_aligned() || added.base != self.epm.end() {
            return Err(RtError::ExtendRejected(added));
        }
        let zero = [0u8; PAGE_SIZE as usize];
        for page in added.page_addrs() {
            if machine.write(self.hart, PrivMode::S, PhysAddr(page), &zero).is_err() {
                return Err(RtError::ExtendRejected(added));
            }
        }
        self.epm = Region::new(self.epm.base, self.epm.size + added.size);
        self.free.extend(added.page_addrs());
        self.extend_refused = false;
        self.stats.extends += 1;
        machine.log(Some(self.hart), "rt_extend", &[("added", added.to_string())]);
        Ok(())
    }

    /// All non-zero eapp pages, read without disturbing residency.
    pub fn eapp_memory(&self, machine: &mut Machine) -> Result<BTreeMap<u64, Vec<u8>>, RtError> {
        let mut out = BTreeMap::new();
        for &page in &self.resident {
            let pa = self.translate(machine, page, AccessKind::Read, PrivMode::S)?;
            let bytes = machine.read(self.hart, PrivMode::S, PhysAddr(pa), PAGE_SIZE as usize)?;
            if bytes.iter().any(|&b| b != 0) {
                out.insert(page, bytes);
            }
        }
        for (&page, meta) in &self.swapped {
            let bytes = self.load_slot(machine, page, meta)?;
            if bytes.iter().any(|&b| b != 0) {
                out.insert(page, bytes);
            }
        }
        Ok(out)
    }

    /// Check that every table page and leaf target is inside enclave memory
    /// (shared leaves inside the buffer) and no physical page is used twice.
    pub fn audit(&self, machine: &mut Machine) -> Result<(), String> {
        let scan = pte::scan(&mut self.tables(machine), self.root).map_err(|e| format!("{}", scan_err(e)))?;
        let mut used = BTreeSet::new();
        for &t in &scan.tables {
            if !self.epm.contains_range(t, PAGE_SIZE) || !used.insert(t) {
                return Err(format!("table page {t:#x} misplaced or shared"));
            }
        }
        for leaf in &scan.leaves {
            let t = leaf.pte.target();
            let region = if leaf.pte.has(PTE_SHARED) { self.utm } else { self.epm };
            if !region.contains_range(t, PAGE_SIZE) {
                return Err(format!("leaf {:#x} -> {t:#x} escapes", leaf.vaddr));
            }
            if !used.insert(t) {
                return Err(format!("physical page {t:#x} mapped twice"));
            }
            if self.free.contains(&t) {
                return Err(format!("mapped page {t:#x} is on the free list"));
            }
            if leaf.pte.has(PTE_U) && leaf.pte.has(PTE_SHARED) {
                return Err(format!("shared page {:#x} visible to the eapp", leaf.vaddr));
            }
        }
        if let Some(limit) = self.config.paging_limit {
            if self.resident.len() > limit.max(1) {
                return Err(format!("{} resident pages over limit {limit}", self.resident.len()));
            }
        }
        Ok(())
    }

    pub fn dump_page_table(&self, machine: &mut Machine) -> Result<String, RtError> {
        pte::dump(&mut self.tables(machine), self.root).map_err(scan_err)
    }

    /// Digest of the current eapp-visible memory, for comparisons.
    pub fn eapp_digest(&self, machine: &mut Machine) -> Result<Measurement, RtError> {
        let mut h = crate::crypto::Hasher::new();
        for (page, bytes) in self.eapp_memory(machine)? {
            h.update(&page.to_le_bytes()).update(&bytes);
        }
        Ok(h.finish())
    }
}
