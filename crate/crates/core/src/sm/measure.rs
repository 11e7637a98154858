//! Page-table validation, measurement and scratchpad relocation, all done
//! by the monitor with direct physical access.

use std::collections::HashSet;

use crate::crypto::{Hasher, Measurement};
use crate::machine::{PhysicalMemory, Region, PAGE_SIZE};
use crate::paging::pte::{self, Pte, PteSource, ScanError, TableScan, PTE_SHARED};

use super::SmError;

/// Reads entries only from table pages inside the enclave region.
struct EpmTables<'a> {
    memory: &'a PhysicalMemory,
    epm: Region,
}

impl PteSource for EpmTables<'_> {
    type Error = u64;

    fn read_pte(&mut self, addr: u64) -> Result<u64, u64> {
        if !self.epm.contains_range(addr, 8) {
            return Err(addr);
        }
        self.memory.read_u64(addr).map_err(|_| addr)
    }
}

fn scan_error(e: ScanError<u64>) -> SmError {
    match e {
        ScanError::Read(addr) => {
            SmError::InvalidMapping(format!("page table page at {:#x} outside enclave memory", pte::page_floor(addr)))
        }
        ScanError::Superpage { vaddr, level } => {
            SmError::InvalidMapping(format!("superpage leaf at {vaddr:#x} (level {level})"))
        }
        ScanError::TooDeep { vaddr } => SmError::InvalidMapping(format!("table pointer below level 0 at {vaddr:#x}")),
        ScanError::ReservedFlags { vaddr } => SmError::InvalidMapping(format!("write-only mapping at {vaddr:#x}")),
    }
}

/// Walk the OS-provided table: every table page and leaf target inside the
/// enclave region (shared leaves inside the buffer), no physical page used
/// twice.
pub fn validate(memory: &PhysicalMemory, epm: Region, utm: Region, pt_root: u64) -> Result<TableScan, SmError> {
    if !pt_root.is_multiple_of(PAGE_SIZE) || !epm.contains_range(pt_root, PAGE_SIZE) {
        return Err(SmError::InvalidMapping(format!("page table root {pt_root:#x} outside enclave memory")));
    }
    let scan = pte::scan(&mut EpmTables { memory, epm }, pt_root).map_err(scan_error)?;
    let mut used = HashSet::new();
    for &t in &scan.tables {
        if !used.insert(t) {
            return Err(SmError::DuplicatePhysicalPage(t));
        }
    }
    for leaf in &scan.leaves {
        let target = leaf.pte.target();
        let ok = if leaf.pte.has(PTE_SHARED) {
            utm.contains_range(target, PAGE_SIZE)
        } else {
            epm.contains_range(target, PAGE_SIZE)
        };
        if !ok {
            return Err(SmError::InvalidMapping(format!(
                "virtual page {:#x} maps to {target:#x} outside its region",
                leaf.vaddr
            )));
        }
        if !used.insert(target) {
            return Err(SmError::DuplicatePhysicalPage(target));
        }
    }
    Ok(scan)
}

/// Digest of `config || entry_point_le || for each private leaf, ascending:
/// vaddr_le || flags || page`. Shared leaves are skipped.
pub fn measure_scan(memory: &PhysicalMemory, scan: &TableScan, entry_point: u64, config: &[u8]) -> Measurement {
    let mut h = Hasher::new();
    h.update(config).update(&entry_point.to_le_bytes());
    for leaf in scan.leaves.iter().filter(|l| !l.pte.has(PTE_SHARED)) {
        let page = memory.read(leaf.pte.target(), PAGE_SIZE).expect("validated leaf in bounds");
        h.update(&leaf.vaddr.to_le_bytes()).update(&[leaf.pte.measured_flags()]).update(page);
    }
    h.finish()
}

/// Validate then measure.
pub fn measure(
    memory: &PhysicalMemory,
    epm: Region,
    utm: Region,
    pt_root: u64,
    entry_point: u64,
    config: &[u8],
) -> Result<Measurement, SmError> {
    let scan = validate(memory, epm, utm, pt_root)?;
    Ok(measure_scan(memory, &scan, entry_point, config))
}

/// Copy the enclave from `from` into `to`, rewrite every table pointer and
/// private leaf into the new range, and clear the old copy. Returns the new
/// root.
pub fn relocate(memory: &mut PhysicalMemory, scan: &TableScan, from: Region, to: Region, pt_root: u64) -> u64 {
    let shift = |addr: u64| addr - from.base + to.base;
    let bytes = memory.read(from.base, from.size).expect("epm in bounds").to_vec();
    memory.write(to.base, &bytes).expect("scratchpad in bounds");
    for &table in &scan.tables {
        let new_table = shift(table);
        for idx in 0..pte::ENTRIES_PER_TABLE {
            let addr = new_table + idx * 8;
            let p = Pte(memory.read_u64(addr).expect("table in bounds"));
            if p.is_valid() && from.contains(p.target()) {
                memory.write_u64(addr, Pte::new(shift(p.target()), p.flags()).0).expect("table in bounds");
            }
        }
    }
    memory.fill(from.base, from.size, 0).expect("epm in bounds");
    shift(pt_root)
}
