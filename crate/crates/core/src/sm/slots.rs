//! PMP slot bookkeeping.
//!
//! Slot 0 guards the monitor, slot 15 is the OS catch-all, slots 1..=14 are
//! handed out to enclave regions. A TOR region takes two consecutive slots:
//! an `Off` companion holding the lower bound and the TOR entry above it.
//!
//! The monitor keeps one table for all harts. What a hart actually holds in
//! a slot depends on its view: the host view, or the view of the enclave it
//! is executing.

use crate::machine::{EnclaveId, PmpEntry, PmpMode, PmpPerms, RegionEncoding, PMP_ENTRIES};

pub const SM_SLOT: usize = 0;
pub const CATCH_ALL_SLOT: usize = PMP_ENTRIES - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotOwner {
    Free,
    Sm,
    OsCatchAll,
    Epm(EnclaveId),
    Utm(EnclaveId),
    /// Reserved on-chip region not currently holding an enclave.
    Scratchpad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Host,
    Enclave(EnclaveId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    owner: SlotOwner,
    companion: bool,
    entry: PmpEntry,
}

const FREE: Slot = Slot { owner: SlotOwner::Free, companion: false, entry: PmpEntry::OFF };

#[derive(Debug, Clone)]
pub struct SlotTable {
    slots: [Slot; PMP_ENTRIES],
}

impl Default for SlotTable {
    fn default() -> Self {
        SlotTable { slots: [FREE; PMP_ENTRIES] }
    }
}

impl SlotTable {
    pub fn owner(&self, index: usize) -> SlotOwner {
        self.slots[index].owner
    }

    /// Place `encoding` for `owner`. Returns the indices written, companion
    /// first, or `None` when no suitable run of free slots exists.
    pub fn allocate(&mut self, encoding: &RegionEncoding, owner: SlotOwner) -> Option<Vec<usize>> {
        let entries = encoding.entries(PmpPerms::NONE);
        let n = entries.len();
        let start = (1..CATCH_ALL_SLOT)
            .find(|&i| i + n <= CATCH_ALL_SLOT && (i..i + n).all(|j| self.slots[j].owner == SlotOwner::Free))?;
        for (k, entry) in entries.into_iter().enumerate() {
            self.slots[start + k] = Slot { owner, companion: n == 2 && k == 0, entry };
        }
        Some((start..start + n).collect())
    }

    /// Install a fixed slot (monitor or catch-all).
    pub fn reserve(&mut self, index: usize, owner: SlotOwner, entry: PmpEntry) {
        self.slots[index] = Slot { owner, companion: false, entry };
    }

    pub fn free_count(&self) -> usize {
        self.slots.iter().filter(|s| s.owner == SlotOwner::Free).count()
    }

    /// Release every slot held by `owner`, returning the indices.
    pub fn release(&mut self, owner: SlotOwner) -> Vec<usize> {
        let mut freed = Vec::new();
        for (i, s) in self.slots.iter_mut().enumerate() {
            if s.owner == owner {
                *s = FREE;
                freed.push(i);
            }
        }
        freed
    }

    /// Re-label every slot held by `from` as `to`.
    pub fn transfer(&mut self, from: SlotOwner, to: SlotOwner) -> Vec<usize> {
        let mut moved = Vec::new();
        for (i, s) in self.slots.iter_mut().enumerate() {
            if s.owner == from {
                s.owner = to;
                moved.push(i);
            }
        }
        moved
    }

    pub fn indices_of(&self, owner: SlotOwner) -> Vec<usize> {
        (0..PMP_ENTRIES).filter(|&i| self.slots[i].owner == owner).collect()
    }

    /// The highest-index (deciding) slot for `owner`.
    pub fn main_index(&self, owner: SlotOwner) -> Option<usize> {
        (0..PMP_ENTRIES).rev().find(|&i| self.slots[i].owner == owner && !self.slots[i].companion)
    }

    /// What a hart in `view` holds in slot `index`.
    pub fn view_entry(&self, index: usize, view: View) -> PmpEntry {
        let slot = &self.slots[index];
        if slot.companion {
            return slot.entry;
        }
        let e = slot.entry;
        let off = PmpEntry::new(PmpMode::Off, e.addr, PmpPerms::NONE);
        match (slot.owner, view) {
            (SlotOwner::Free, _) => PmpEntry::OFF,
            (SlotOwner::Sm | SlotOwner::Scratchpad, _) => e.with_perms(PmpPerms::NONE),
            (SlotOwner::OsCatchAll, View::Host) => e.with_perms(PmpPerms::RWX),
            (SlotOwner::OsCatchAll, View::Enclave(_)) => e.with_perms(PmpPerms::NONE),
            (SlotOwner::Epm(o), View::Enclave(v)) if o == v => e.with_perms(PmpPerms::RWX),
            (SlotOwner::Epm(_), _) => e.with_perms(PmpPerms::NONE),
            // The shared buffer is reached through the catch-all while the
            // host runs; the entry only switches on inside its own enclave.
            (SlotOwner::Utm(o), View::Enclave(v)) if o == v => e.with_perms(PmpPerms::RW),
            (SlotOwner::Utm(_), _) => off,
        }
    }
}
