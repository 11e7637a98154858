//! Sv39-style page table entries and walkers.
//!
//! Three levels of 512 eight-byte entries, 4 KiB pages, 39-bit virtual
//! addresses. Only 4 KiB leaves are accepted; a leaf above level 0 is
//! reported rather than translated.

use std::fmt::Write as _;

use crate::machine::PAGE_SIZE;

pub const PTE_V: u64 = 1 << 0;
pub const PTE_R: u64 = 1 << 1;
pub const PTE_W: u64 = 1 << 2;
pub const PTE_X: u64 = 1 << 3;
pub const PTE_U: u64 = 1 << 4;
pub const PTE_G: u64 = 1 << 5;
pub const PTE_A: u64 = 1 << 6;
pub const PTE_D: u64 = 1 << 7;
/// Software bit (RSW): the leaf targets the untrusted shared buffer.
pub const PTE_SHARED: u64 = 1 << 8;

/// Flag bits that enter the measurement: V, R, W, X, U.
pub const MEASURED_FLAGS: u64 = 0x1f;

pub const LEVELS: usize = 3;
pub const ENTRIES_PER_TABLE: u64 = 512;
pub const VA_BITS: u32 = 39;
const PPN_MASK: u64 = (1 << 44) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pte(pub u64);

impl Pte {
    pub fn new(target: u64, flags: u64) -> Self {
        Pte((((target >> 12) & PPN_MASK) << 10) | (flags & 0x3ff))
    }

    pub fn table(target: u64) -> Self {
        Pte::new(target, PTE_V)
    }

    pub fn is_valid(self) -> bool {
        self.0 & PTE_V != 0
    }

    pub fn is_leaf(self) -> bool {
        self.0 & (PTE_R | PTE_W | PTE_X) != 0
    }

    pub fn flags(self) -> u64 {
        self.0 & 0x3ff
    }

    pub fn has(self, flag: u64) -> bool {
        self.0 & flag != 0
    }

    /// Physical address of the page or table this entry points at.
    pub fn target(self) -> u64 {
        ((self.0 >> 10) & PPN_MASK) << 12
    }

    pub fn measured_flags(self) -> u8 {
        (self.0 & MEASURED_FLAGS) as u8
    }
}

pub fn vpn(vaddr: u64, level: usize) -> u64 {
    (vaddr >> (12 + 9 * level)) & (ENTRIES_PER_TABLE - 1)
}

pub fn page_floor(addr: u64) -> u64 {
    addr & !(PAGE_SIZE - 1)
}

pub fn page_ceil(addr: u64) -> u64 {
    addr.div_ceil(PAGE_SIZE) * PAGE_SIZE
}

pub fn is_canonical(vaddr: u64) -> bool {
    vaddr < (1 << VA_BITS)
}

pub fn flag_string(flags: u64) -> String {
    let names = [
        (PTE_V, 'V'),
        (PTE_R, 'R'),
        (PTE_W, 'W'),
        (PTE_X, 'X'),
        (PTE_U, 'U'),
        (PTE_G, 'G'),
        (PTE_A, 'A'),
        (PTE_D, 'D'),
        (PTE_SHARED, 'S'),
    ];
    names.iter().map(|&(bit, c)| if flags & bit != 0 { c } else { '-' }).collect()
}

/// Where a walker reads entries from. Implementations decide which physical
/// pages may hold tables and fail reads outside them.
pub trait PteSource {
    type Error;
    fn read_pte(&mut self, addr: u64) -> Result<u64, Self::Error>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScanError<E> {
    Read(E),
    /// A leaf above level 0.
    Superpage {
        vaddr: u64,
        level: usize,
    },
    /// A non-leaf entry at level 0.
    TooDeep {
        vaddr: u64,
    },
    /// Writable without readable.
    ReservedFlags {
        vaddr: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Leaf {
    pub vaddr: u64,
    pub pte: Pte,
    /// Physical address of the entry itself.
    pub pte_addr: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TableScan {
    /// Every table page reached, root first.
    pub tables: Vec<u64>,
    /// Valid leaves in ascending virtual address order.
    pub leaves: Vec<Leaf>,
}

pub fn scan<S: PteSource>(src: &mut S, root: u64) -> Result<TableScan, ScanError<S::Error>> {
    let mut out = TableScan::default();
    scan_table(src, root, LEVELS - 1, 0, &mut out)?;
    Ok(out)
}

fn scan_table<S: PteSource>(
    src: &mut S,
    table: u64,
    level: usize,
    va_prefix: u64,
    out: &mut TableScan,
) -> Result<(), ScanError<S::Error>> {
    out.tables.push(table);
    for idx in 0..ENTRIES_PER_TABLE {
        let pte_addr = table + idx * 8;
        let pte = Pte(src.read_pte(pte_addr).map_err(ScanError::Read)?);
        if !pte.is_valid() {
            continue;
        }
        let vaddr = va_prefix | (idx << (12 + 9 * level));
        if pte.is_leaf() {
            if pte.has(PTE_W) && !pte.has(PTE_R) {
                return Err(ScanError::ReservedFlags { vaddr });
            }
            if level != 0 {
                return Err(ScanError::Superpage { vaddr, level });
            }
            out.leaves.push(Leaf { vaddr, pte, pte_addr });
        } else {
            if level == 0 {
                return Err(ScanError::TooDeep { vaddr });
            }
            scan_table(src, pte.target(), level - 1, vaddr, out)?;
        }
    }
    Ok(())
}

/// Walk to the level-0 entry for `vaddr`. `Ok(None)` when some level is
/// invalid.
pub fn walk<S: PteSource>(src: &mut S, root: u64, vaddr: u64) -> Result<Option<Leaf>, ScanError<S::Error>> {
    let mut table = root;
    for level in (0..LEVELS).rev() {
        let pte_addr = table + vpn(vaddr, level) * 8;
        let pte = Pte(src.read_pte(pte_addr).map_err(ScanError::Read)?);
        if !pte.is_valid() {
            return Ok(None);
        }
        if pte.is_leaf() {
            if level != 0 {
                return Err(ScanError::Superpage { vaddr: page_floor(vaddr), level });
            }
            return Ok(Some(Leaf { vaddr: page_floor(vaddr), pte, pte_addr }));
        }
        if level == 0 {
            return Err(ScanError::TooDeep { vaddr: page_floor(vaddr) });
        }
        table = pte.target();
    }
    unreachable!("loop returns at level 0")
}

/// One line per leaf: `V:<vaddr> -> P:<paddr> flags=<...>`.
pub fn dump<S: PteSource>(src: &mut S, root: u64) -> Result<String, ScanError<S::Error>> {
    let scan = scan(src, root)?;
    let mut out = String::new();
    for leaf in &scan.leaves {
        let _ =
            writeln!(out, "V:{:#x} -> P:{:#x} flags={}", leaf.vaddr, leaf.pte.target(), flag_string(leaf.pte.flags()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    #[derive(Default)]
    struct Sparse(HashMap<u64, u64>);

    impl PteSource for Sparse {
        type Error = ();
        fn read_pte(&mut self, addr: u64) -> Result<u64, ()> {
            Ok(self.0.get(&addr).copied().unwrap_or(0))
        }
    }

    fn map(mem: &mut Sparse, root: u64, l1: u64, l0: u64, vaddr: u64, target: u64, flags: u64) {
        mem.0.insert(root + vpn(vaddr, 2) * 8, Pte::table(l1).0);
        mem.0.insert(l1 + vpn(vaddr, 1) * 8, Pte::table(l0).0);
        mem.0.insert(l0 + vpn(vaddr, 0) * 8, Pte::new(target, flags).0);
    }

    #[test]
    fn pte_fields() {
        let p = Pte::new(0x8000_3000, PTE_V | PTE_R | PTE_U | PTE_A);
        assert_eq!(p.target(), 0x8000_3000);
        assert!(p.is_leaf() && p.is_valid());
        assert_eq!(p.measured_flags(), (PTE_V | PTE_R | PTE_U) as u8);
        assert_eq!(flag_string(p.flags()), "VR--U-A--");
    }

    #[test]
    fn walk_and_scan_agree() {
        let mut mem = Sparse::default();
        map(&mut mem, 0x1000, 0x2000, 0x3000, 0x40_0000, 0x9000, PTE_V | PTE_R | PTE_W | PTE_U);
        map(&mut mem, 0x1000, 0x2000, 0x3000, 0x40_1000, 0xa000, PTE_V | PTE_R | PTE_U);
        let leaf = walk(&mut mem, 0x1000, 0x40_1234).unwrap().unwrap();
        assert_eq!(leaf.pte.target(), 0xa000);
        assert_eq!(leaf.vaddr, 0x40_1000);
        assert_eq!(walk(&mut mem, 0x1000, 0x50_0000).unwrap(), None);
        let s = scan(&mut mem, 0x1000).unwrap();
        assert_eq!(s.tables, vec![0x1000, 0x2000, 0x3000]);
        let vas: Vec<u64> = s.leaves.iter().map(|l| l.vaddr).collect();
        assert_eq!(vas, vec![0x40_0000, 0x40_1000]);
        let text = dump(&mut mem, 0x1000).unwrap();
        assert_eq!(text.lines().next().unwrap(), "V:0x400000 -> P:0x9000 flags=VRW-U----");
    }

    #[test]
    fn superpages_are_reported() {
        let mut mem = Sparse::default();
        mem.0.insert(0x1000, Pte::new(0x4000_0000, PTE_V | PTE_R).0);
        assert_eq!(scan(&mut mem, 0x1000), Err(ScanError::Superpage { vaddr: 0, level: 2 }));
        assert!(walk(&mut mem, 0x1000, 0x10).is_err());
    }

    #[test]
    fn write_only_is_reserved() {
        let mut mem = Sparse::default();
        map(&mut mem, 0x1000, 0x2000, 0x3000, 0, 0x9000, PTE_V | PTE_W);
        assert_eq!(scan(&mut mem, 0x1000), Err(ScanError::ReservedFlags { vaddr: 0 }));
    }
}
