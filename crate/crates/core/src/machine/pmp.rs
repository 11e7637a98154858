//! Physical memory protection.
//!
//! Each hart owns a file of 16 prioritized entries. An entry pairs an
//! address-matching mode with r/w/x permissions for S- and U-mode. The
//! lowest-numbered entry that overlaps an access decides it; an access that
//! matches no entry is refused. M-mode is never checked.

use std::fmt;

use thiserror::Error;

use super::{AccessKind, PrivMode, Region};

/// Number of entries in a PMP file.
pub const PMP_ENTRIES: usize = 16;

/// `pmpaddr` holds bits 55:2 of a 56-bit physical address.
pub const PMPADDR_MASK: u64 = (1 << 54) - 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PmpError {
    #[error("region base {base:#x} or size {size:#x} is not 4-byte granular")]
    UnalignedRegion { base: u64, size: u64 },
    #[error("region is empty")]
    EmptyRegion,
}

/// Address-matching mode (the `A` field of `pmpcfg`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PmpMode {
    #[default]
    Off,
    /// Top of range: `[pmpaddr[i-1] << 2, pmpaddr[i] << 2)`.
    Tor,
    /// Naturally aligned four-byte region.
    Na4,
    /// Naturally aligned power-of-two region, at least eight bytes.
    Napot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PmpPerms {
    pub r: bool,
    pub w: bool,
    pub x: bool,
}

impl PmpPerms {
    pub const NONE: PmpPerms = PmpPerms { r: false, w: false, x: false };
    pub const RW: PmpPerms = PmpPerms { r: true, w: true, x: false };
    pub const RWX: PmpPerms = PmpPerms { r: true, w: true, x: true };

    pub fn allows(self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.r,
            AccessKind::Write => self.w,
            AccessKind::Execute => self.x,
        }
    }
}

impl fmt::Display for PmpPerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bit = |on, c| if on { c } else { '-' };
        write!(f, "{}{}{}", bit(self.r, 'r'), bit(self.w, 'w'), bit(self.x, 'x'))
    }
}

/// One `pmpcfg`/`pmpaddr` pair. Lock bits are not modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PmpEntry {
    pub mode: PmpMode,
    pub addr: u64,
    pub perms: PmpPerms,
}

impl PmpEntry {
    pub const OFF: PmpEntry = PmpEntry { mode: PmpMode::Off, addr: 0, perms: PmpPerms::NONE };

    pub fn new(mode: PmpMode, addr: u64, perms: PmpPerms) -> Self {
        PmpEntry { mode, addr: addr & PMPADDR_MASK, perms }
    }

    /// An entry matching every physical address.
    pub fn all_memory(perms: PmpPerms) -> Self {
        PmpEntry::new(PmpMode::Napot, PMPADDR_MASK, perms)
    }

    pub fn with_perms(self, perms: PmpPerms) -> Self {
        PmpEntry { perms, ..self }
    }

    /// Decode the region matched by this entry. `lower` is the `pmpaddr` of
    /// the preceding entry (zero for entry 0) and only matters for TOR.
    pub fn decode(&self, lower: u64) -> Option<Region> {
        let addr = self.addr & PMPADDR_MASK;
        match self.mode {
            PmpMode::Off => None,
            PmpMode::Na4 => Some(Region::new(addr << 2, 4)),
            PmpMode::Napot => {
                let ones = addr.trailing_ones();
                let size = 1u64 << (ones + 3);
                let base = (addr & !((1u64 << ones) - 1)) << 2;
                Some(Region::new(base, size))
            }
            PmpMode::Tor => {
                let lower = lower & PMPADDR_MASK;
                (lower < addr).then(|| Region::new(lower << 2, (addr - lower) << 2))
            }
        }
    }
}

/// Decode an entry in isolation; a TOR entry is taken to start at zero, as
/// it would in slot 0.
pub fn decode_entry(entry: &PmpEntry) -> Option<Region> {
    entry.decode(0)
}

/// Result of [`encode_region`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionEncoding {
    /// Fits a single NAPOT entry.
    Napot { addr: u64 },
    /// Exactly four bytes.
    Na4 { addr: u64 },
    /// Needs two consecutive entries: an `Off` companion holding `lower` and
    /// a TOR entry holding `upper`.
    Tor { lower: u64, upper: u64 },
}

impl RegionEncoding {
    /// Number of consecutive PMP slots this encoding occupies.
    pub fn slots(&self) -> usize {
        match self {
            RegionEncoding::Tor { .. } => 2,
            _ => 1,
        }
    }

    /// The entries to install, lowest index first.
    pub fn entries(&self, perms: PmpPerms) -> Vec<PmpEntry> {
        match *self {
            RegionEncoding::Napot { addr } => vec![PmpEntry::new(PmpMode::Napot, addr, perms)],
            RegionEncoding::Na4 { addr } => vec![PmpEntry::new(PmpMode::Na4, addr, perms)],
            RegionEncoding::Tor { lower, upper } => {
                vec![PmpEntry::new(PmpMode::Off, lower, PmpPerms::NONE), PmpEntry::new(PmpMode::Tor, upper, perms)]
            }
        }
    }
}

/// Choose the cheapest encoding for `[base, base + size)`.
pub fn encode_region(base: u64, size: u64) -> Result<RegionEncoding, PmpError> {
    if size == 0 {
        return Err(PmpError::EmptyRegion);
    }
    if !base.is_multiple_of(4) || !size.is_multiple_of(4) {
        return Err(PmpError::UnalignedRegion { base, size });
    }
    if size == 4 {
        return Ok(RegionEncoding::Na4 { addr: base >> 2 });
    }
    if size.is_power_of_two() && size >= 8 && base.is_multiple_of(size) {
        return Ok(RegionEncoding::Napot { addr: (base | (size / 2 - 1)) >> 2 });
    }
    Ok(RegionEncoding::Tor { lower: base >> 2, upper: (base + size) >> 2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmpDecision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PmpFile {
    entries: [PmpEntry; PMP_ENTRIES],
}

impl PmpFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entry(&self, index: usize) -> PmpEntry {
        self.entries[index]
    }

    pub fn entries(&self) -> &[PmpEntry; PMP_ENTRIES] {
        &self.entries
    }

    pub fn set(&mut self, index: usize, entry: PmpEntry) {
        self.entries[index] = PmpEntry { addr: entry.addr & PMPADDR_MASK, ..entry };
    }

    /// Region matched by slot `index`, taking the TOR lower bound from the
    /// preceding slot.
    pub fn region(&self, index: usize) -> Option<Region> {
        let lower = if index == 0 { 0 } else { self.entries[index - 1].addr };
        self.entries[index].decode(lower)
    }

    /// Lowest-numbered slot whose region overlaps `[addr, addr + len)`.
    pub fn matching_entry(&self, addr: u64, len: u64) -> Option<usize> {
        let access = Region::new(addr, len);
        (0..PMP_ENTRIES).find(|&i| self.region(i).is_some_and(|r| r.overlaps(&access)))
    }

    pub fn check(&self, addr: u64, len: u64, kind: AccessKind, privilege: PrivMode) -> PmpDecision {
        if privilege == PrivMode::M {
            return PmpDecision::Allow;
        }
        let Some(index) = self.matching_entry(addr, len) else {
            return PmpDecision::Deny;
        };
        let region = self.region(index).expect("matched entry decodes");
        // Straddling the boundary of the deciding entry is a fault.
        if region.contains_range(addr, len) && self.entries[index].perms.allows(kind) {
            PmpDecision::Allow
        } else {
            PmpDecision::Deny
        }
    }
}

impl fmt::Display for PmpFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..PMP_ENTRIES {
            let e = &self.entries[i];
            match self.region(i) {
                Some(r) => writeln!(f, "pmp{i:<2} {:?} {} {r}", e.mode, e.perms)?,
                None => writeln!(f, "pmp{i:<2} off")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn napot(base: u64, size: u64, perms: PmpPerms) -> PmpEntry {
        match encode_region(base, size).unwrap() {
            RegionEncoding::Napot { addr } => PmpEntry::new(PmpMode::Napot, addr, perms),
            other => panic!("not napot: {other:?}"),
        }
    }

    #[test]
    fn all_off_denies_user_reads() {
        let pmp = PmpFile::new();
        assert_eq!(pmp.check(0x1000, 1, AccessKind::Read, PrivMode::U), PmpDecision::Deny);
        assert_eq!(pmp.check(0x1000, 8, AccessKind::Write, PrivMode::S), PmpDecision::Deny);
    }

    #[test]
    fn machine_mode_bypasses() {
        let pmp = PmpFile::new();
        assert_eq!(pmp.check(0x7000, 4, AccessKind::Write, PrivMode::M), PmpDecision::Allow);
    }

    #[test]
    fn lower_entry_wins() {
        let mut pmp = PmpFile::new();
        pmp.set(0, napot(0x2000, 0x1000, PmpPerms::NONE));
        pmp.set(14, PmpEntry::OFF);
        pmp.set(15, PmpEntry::new(PmpMode::Tor, 0x10000 >> 2, PmpPerms::RWX));
        assert_eq!(pmp.check(0x2800, 1, AccessKind::Write, PrivMode::S), PmpDecision::Deny);
        assert_eq!(pmp.check(0x3800, 1, AccessKind::Write, PrivMode::S), PmpDecision::Allow);
    }

    #[test]
    fn straddling_access_is_denied() {
        let mut pmp = PmpFile::new();
        pmp.set(0, napot(0x2000, 0x1000, PmpPerms::RWX));
        pmp.set(1, PmpEntry::all_memory(PmpPerms::RWX));
        assert_eq!(pmp.check(0x2ffc, 8, AccessKind::Read, PrivMode::U), PmpDecision::Deny);
        assert_eq!(pmp.check(0x2ff8, 8, AccessKind::Read, PrivMode::U), PmpDecision::Allow);
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_region(0x8000, 0x1000), Ok(RegionEncoding::Napot { addr: 0x21ff }));
        assert_eq!(encode_region(0x1004, 4), Ok(RegionEncoding::Na4 { addr: 0x401 }));
        assert_eq!(encode_region(0x1000, 0x3000), Ok(RegionEncoding::Tor { lower: 0x400, upper: 0x1000 }));
        // Power of two but misaligned base also falls back to TOR.
        assert!(matches!(encode_region(0x1000, 0x2000), Ok(RegionEncoding::Tor { .. })));
        assert_eq!(encode_region(0x1002, 0x10), Err(PmpError::UnalignedRegion { base: 0x1002, size: 0x10 }));
        assert_eq!(encode_region(0x1000, 0), Err(PmpError::EmptyRegion));
    }

    #[test]
    fn decode_examples() {
        let e = PmpEntry::new(PmpMode::Napot, 0x21ff, PmpPerms::NONE);
        assert_eq!(decode_entry(&e), Some(Region::new(0x8000, 0x1000)));
        assert_eq!(decode_entry(&PmpEntry::OFF), None);
        let e = PmpEntry::new(PmpMode::Na4, 0x401, PmpPerms::NONE);
        assert_eq!(decode_entry(&e), Some(Region::new(0x1004, 4)));
    }

    #[test]
    fn tor_pair_decodes_through_file() {
        let mut pmp = PmpFile::new();
        let enc = encode_region(0x1000, 0x3000).unwrap();
        for (i, e) in enc.entries(PmpPerms::RW).into_iter().enumerate() {
            pmp.set(4 + i, e);
        }
        assert_eq!(pmp.region(4), None);
        assert_eq!(pmp.region(5), Some(Region::new(0x1000, 0x3000)));
    }

    #[test]
    fn tor_with_inverted_bounds_matches_nothing() {
        let mut pmp = PmpFile::new();
        pmp.set(0, PmpEntry::new(PmpMode::Off, 0x800, PmpPerms::NONE));
        pmp.set(1, PmpEntry::new(PmpMode::Tor, 0x400, PmpPerms::RWX));
        assert_eq!(pmp.region(1), None);
    }

    #[test]
    fn all_memory_entry_covers_everything() {
        let r = decode_entry(&PmpEntry::all_memory(PmpPerms::RWX)).unwrap();
        assert_eq!(r.base, 0);
        assert!(r.contains_range(0xffff_ffff_f000, 0x1000));
    }
}
