//! The untrusted OS: a first-fit physical allocator and the loader that
//! copies an image into enclave memory and builds its initial page table.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::machine::{HartId, Machine, MachineError, PhysAddr, PrivMode, Region, PAGE_SIZE};
use crate::paging::pte::{self, Pte, PTE_V};

use super::image::EnclaveImage;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OsError {
    #[error("no free run of {0} pages")]
    OutOfPhysicalMemory(u64),
    #[error("image needs {need} pages, region holds {have}")]
    ImageTooLarge { need: u64, have: u64 },
    #[error("region {0} was not allocated")]
    NotAllocated(Region),
    #[error("machine: {0}")]
    Machine(String),
}

impl From<MachineError> for OsError {
    fn from(e: MachineError) -> Self {
        OsError::Machine(e.to_string())
    }
}

/// First-fit page allocator over physical memory minus reserved ranges.
#[derive(Debug, Clone)]
pub struct Os {
    memory_size: u64,
    reserved: Vec<Region>,
    allocated: BTreeMap<u64, u64>,
}

impl Os {
    pub fn new(memory_size: u64, reserved: Vec<Region>) -> Self {
        Os { memory_size, reserved, allocated: BTreeMap::new() }
    }

    fn is_free(&self, r: Region) -> bool {
        r.end() <= self.memory_size
            && !self.reserved.iter().any(|x| x.overlaps(&r))
            && !self.allocated.iter().any(|(&b, &s)| Region::new(b, s).overlaps(&r))
    }

    pub fn alloc(&mut self, pages: u64) -> Result<Region, OsError> {
        let size = pages * PAGE_SIZE;
        let mut base = 0;
        while base + size <= self.memory_size {
            let r = Region::new(base, size);
            let blocker = self
                .reserved
                .iter()
                .copied()
                .chain(self.allocated.iter().map(|(&b, &s)| Region::new(b, s)))
                .filter(|x| x.overlaps(&r))
                .map(|x| x.end())
                .max();
            match blocker {
                None if pages > 0 => {
                    self.allocated.insert(base, size);
                    return Ok(r);
                }
                None => break,
                Some(end) => base = end.div_ceil(PAGE_SIZE) * PAGE_SIZE,
            }
        }
        Err(OsError::OutOfPhysicalMemory(pages))
    }

    /// Allocate exactly `region` if it is free.
    pub fn alloc_at(&mut self, region: Region) -> Option<Region> {
        if region.is_empty() || !region.is_page_aligned() || !self.is_free(region) {
            return None;
        }
        self.allocated.insert(region.base, region.size);
        Some(region)
    }

    pub fn free(&mut self, region: Region) -> Result<(), OsError> {
        match self.allocated.get(&region.base) {
            Some(&s) if s == region.size => {
                self.allocated.remove(&region.base);
                Ok(())
            }
            _ => Err(OsError::NotAllocated(region)),
        }
    }

    /// Treat `region` as one allocation (merging the pieces it covers).
    pub fn merge(&mut self, region: Region) {
        let inside: Vec<u64> =
            self.allocated.iter().filter(|(&b, &s)| region.contains_range(b, s)).map(|(&b, _)| b).collect();
        for b in inside {
            self.allocated.remove(&b);
        }
        self.allocated.insert(region.base, region.size);
    }

    pub fn allocated(&self) -> impl Iterator<Item = Region> + '_ {
        self.allocated.iter().map(|(&b, &s)| Region::new(b, s))
    }
}

/// Ways a malicious OS can corrupt the initial page table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PtTweak {
    #[default]
    None,
    /// Add a leaf at `vaddr` pointing at a physical page outside the enclave.
    MapOutside { vaddr: u64, paddr: u64 },
    /// Map the first eapp page a second time at `vaddr`.
    Duplicate { vaddr: u64 },
}

/// Pages the loader needs for `image`.
pub fn pages_needed(image: &EnclaveImage) -> u64 {
    image.payload_pages() + image.table_pages()
}

/// Copy the segments into `epm` in file order, then build the table in the
/// pages after them. Writes go through `hart` as ordinary supervisor stores.
pub fn build_initial_pt(
    machine: &mut Machine,
    hart: HartId,
    image: &EnclaveImage,
    epm: Region,
    tweak: PtTweak,
) -> Result<u64, OsError> {
    // Two spare pages for the tables of the runtime's shared-buffer window.
    let need = pages_needed(image) + 2;
    if need > epm.page_count() {
        return Err(OsError::ImageTooLarge { need, have: epm.page_count() });
    }
    let mut next = epm.base;
    let mut leaves: Vec<(u64, u64, u64)> = Vec::new();
    for seg in &image.segments {
        for i in 0..seg.pages() {
            machine.write(hart, PrivMode::S, PhysAddr(next), &seg.page(i))?;
            leaves.push((seg.vaddr + i * PAGE_SIZE, next, PTE_V | u64::from(seg.flags)));
            next += PAGE_SIZE;
        }
    }
    match tweak {
        PtTweak::None => {}
        PtTweak::MapOutside { vaddr, paddr } => leaves.push((vaddr, pte::page_floor(paddr), PTE_V | pte::PTE_R)),
        PtTweak::Duplicate { vaddr } => {
            let first = leaves.iter().find(|l| l.2 & pte::PTE_U != 0).copied().unwrap_or(leaves[0]);
            leaves.push((vaddr, first.1, first.2));
        }
    }

    let mut tables: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    let root = next;
    tables.insert(root, vec![0; 512]);
    next += PAGE_SIZE;
    for &(vaddr, target, flags) in &leaves {
        let mut table = root;
        for level in (1..pte::LEVELS).rev() {
            let idx = pte::vpn(vaddr, level) as usize;
            let existing = Pte(tables[&table][idx]);
            table = if existing.is_valid() {
                existing.target()
            } else {
                let t = next;
                next += PAGE_SIZE;
                tables.insert(t, vec![0; 512]);
                tables.get_mut(&table).expect("table exists")[idx] = Pte::table(t).0;
                t
            };
        }
        tables.get_mut(&table).expect("table exists")[pte::vpn(vaddr, 0) as usize] = Pte::new(target, flags).0;
    }
    if next > epm.end() {
        return Err(OsError::ImageTooLarge { need: (next - epm.base) / PAGE_SIZE, have: epm.page_count() });
    }
    for (addr, entries) in tables {
        let bytes: Vec<u8> = entries.iter().flat_map(|e| e.to_le_bytes()).collect();
        machine.write(hart, PrivMode::S, PhysAddr(addr), &bytes)?;
    }
    Ok(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_fit_skips_reserved() {
        let mut os = Os::new(64 * PAGE_SIZE, vec![Region::pages(0, 8)]);
        let a = os.alloc(4).unwrap();
        assert_eq!(a, Region::pages(8 * PAGE_SIZE, 4));
        let b = os.alloc(4).unwrap();
        assert_eq!(b.base, 12 * PAGE_SIZE);
        assert!(!a.overlaps(&b));
        assert_eq!(os.alloc(100), Err(OsError::OutOfPhysicalMemory(100)));
        os.free(a).unwrap();
        assert_eq!(os.alloc(2).unwrap().base, 8 * PAGE_SIZE);
    }

    #[test]
    fn alloc_at_requires_free_range() {
        let mut os = Os::new(32 * PAGE_SIZE, vec![]);
        let a = os.alloc(4).unwrap();
        assert!(os.alloc_at(Region::pages(a.end(), 2)).is_some());
        assert!(os.alloc_at(Region::pages(a.base, 1)).is_none());
        os.merge(Region::pages(a.base, 6));
        assert_eq!(os.allocated().count(), 1);
    }
}
