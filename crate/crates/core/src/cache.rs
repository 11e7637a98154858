//! Way-partitioned shared L2 with an observation interface.
//!
//! The model tracks tags only. Each access is classified as a hit or a miss
//! and appended to the accessing domain's observation trace, which is what a
//! cache-probing attacker can measure. When a partition is active, fills and
//! LRU updates of a domain are confined to the ways its mask permits, so the
//! enclave never perturbs the state the host can observe.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::machine::{Domain, EnclaveId};

pub const LINE_SIZE: u64 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("set count {0} is not a power of two")]
    BadSets(usize),
    #[error("way count {0} must be between 2 and 64")]
    BadWays(usize),
    #[error("partition of {partition} ways leaves no ways out of {ways} for the host")]
    BadPartition { partition: usize, ways: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    pub sets: usize,
    pub ways: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { sets: 64, ways: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Hit,
    Miss,
}

#[derive(Debug, Clone, Copy, Default)]
struct Line {
    valid: bool,
    tag: u64,
    domain: Domain,
    stamp: u64,
}

#[derive(Debug, Clone)]
struct Partition {
    mask: u64,
    owner: Option<EnclaveId>,
}

#[derive(Debug, Clone)]
pub struct Cache {
    config: CacheConfig,
    lines: Vec<Line>,
    clock: u64,
    partition: Option<Partition>,
    observations: BTreeMap<Domain, Vec<Outcome>>,
    fills: u64,
    mask_violations: u64,
}

impl Cache {
    pub fn new(config: CacheConfig) -> Result<Self, CacheError> {
        if !config.sets.is_power_of_two() {
            return Err(CacheError::BadSets(config.sets));
        }
        if !(2..=64).contains(&config.ways) {
            return Err(CacheError::BadWays(config.ways));
        }
        Ok(Cache {
            config,
            lines: vec![Line::default(); config.sets * config.ways],
            clock: 0,
            partition: None,
            observations: BTreeMap::new(),
            fills: 0,
            mask_violations: 0,
        })
    }

    pub fn config(&self) -> CacheConfig {
        self.config
    }

    fn all_ways(&self) -> u64 {
        if self.config.ways == 64 {
            u64::MAX
        } else {
            (1u64 << self.config.ways) - 1
        }
    }

    /// Reserve the top `ways` ways for whichever enclave is executing.
    pub fn enable_partition(&mut self, ways: usize) -> Result<(), CacheError> {
        if ways == 0 || ways >= self.config.ways {
            return Err(CacheError::BadPartition { partition: ways, ways: self.config.ways });
        }
        let mask = self.all_ways() & !((1u64 << (self.config.ways - ways)) - 1);
        self.partition = Some(Partition { mask, owner: None });
        Ok(())
    }

    pub fn partition_mask(&self) -> Option<u64> {
        self.partition.as_ref().map(|p| p.mask)
    }

    pub fn partition_owner(&self) -> Option<EnclaveId> {
        self.partition.as_ref().and_then(|p| p.owner)
    }

    /// Ways `domain` may fill right now.
    pub fn way_mask(&self, domain: Domain) -> u64 {
        match &self.partition {
            Some(Partition { mask, owner: Some(owner) }) => {
                if domain == Domain::Enclave(*owner) {
                    *mask
                } else {
                    self.all_ways() & !mask
                }
            }
            _ => self.all_ways(),
        }
    }

    fn index(&self, paddr: u64) -> (usize, u64) {
        let line = paddr / LINE_SIZE;
        let set = (line as usize) & (self.config.sets - 1);
        (set, line / self.config.sets as u64)
    }

    pub fn access(&mut self, domain: Domain, paddr: u64) -> Outcome {
        let (set, tag) = self.index(paddr);
        let mask = self.way_mask(domain);
        let ways = self.config.ways;
        self.clock += 1;
        let clock = self.clock;
        let row = &mut self.lines[set * ways..(set + 1) * ways];

        let outcome = if let Some(w) = row.iter().position(|l| l.valid && l.tag == tag) {
            if mask & (1 << w) != 0 {
                row[w].stamp = clock;
            }
            Outcome::Hit
        } else {
            let victim = (0..ways)
                .filter(|w| mask & (1 << w) != 0)
                .min_by_key(|&w| (row[w].valid, row[w].stamp))
                .expect("mask is never empty");
            row[victim] = Line { valid: true, tag, domain, stamp: clock };
            self.fills += 1;
            if self.way_mask(domain) & (1 << victim) == 0 {
                self.mask_violations += 1;
            }
            Outcome::Miss
        };
        self.observations.entry(domain).or_default().push(outcome);
        outcome
    }

    /// Context switch from `leaving` to `entering` on some hart. Returns the
    /// number of valid lines invalidated from the enclave partition.
    pub fn switch_partition(&mut self, leaving: Domain, entering: Domain) -> usize {
        let Some(part) = self.partition.as_ref() else {
            return 0;
        };
        let owner = part.owner;
        let flush = match (leaving, entering) {
            (_, Domain::Enclave(e)) if owner.is_none() => {
                self.partition.as_mut().expect("checked").owner = Some(e);
                true
            }
            (Domain::Enclave(e), _) if owner == Some(e) => {
                self.partition.as_mut().expect("checked").owner = None;
                true
            }
            _ => false,
        };
        if flush {
            self.flush_partition()
        } else {
            0
        }
    }

    fn flush_partition(&mut self) -> usize {
        let Some(mask) = self.partition_mask() else {
            return 0;
        };
        let ways = self.config.ways;
        let mut flushed = 0;
        for (i, line) in self.lines.iter_mut().enumerate() {
            if mask & (1 << (i % ways)) != 0 && line.valid {
                line.valid = false;
                flushed += 1;
            }
        }
        flushed
    }

    pub fn valid_lines_of(&self, domain: Domain) -> usize {
        self.lines.iter().filter(|l| l.valid && l.domain == domain).count()
    }

    pub fn valid_lines_in_partition(&self) -> usize {
        let Some(mask) = self.partition_mask() else {
            return 0;
        };
        let ways = self.config.ways;
        self.lines.iter().enumerate().filter(|(i, l)| l.valid && mask & (1 << (i % ways)) != 0).count()
    }

    /// Outcomes of `domain`'s own accesses, oldest first.
    pub fn observe(&self, domain: Domain) -> Vec<Outcome> {
        self.observations.get(&domain).cloned().unwrap_or_default()
    }

    pub fn clear_observations(&mut self) {
        self.observations.clear();
    }

    pub fn fill_count(&self) -> u64 {
        self.fills
    }

    /// Fills that landed outside the filling domain's mask. Always zero.
    pub fn mask_violations(&self) -> u64 {
        self.mask_violations
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const E: Domain = Domain::Enclave(EnclaveId(0));

    fn cache(partition: Option<usize>) -> Cache {
        let mut c = Cache::new(CacheConfig { sets: 4, ways: 4 }).unwrap();
        if let Some(w) = partition {
            c.enable_partition(w).unwrap();
        }
        c
    }

    /// Address of the `n`th distinct line mapping to `set`.
    fn line(set: u64, n: u64) -> u64 {
        (n * 4 + set) * LINE_SIZE
    }

    #[test]
    fn second_access_hits() {
        let mut c = cache(None);
        assert_eq!(c.access(Domain::Host, 0x1000), Outcome::Miss);
        assert_eq!(c.access(Domain::Host, 0x1008), Outcome::Hit);
    }

    #[test]
    fn lru_evicts_oldest() {
        let mut c = cache(None);
        for n in 0..4 {
            c.access(Domain::Host, line(1, n));
        }
        c.access(Domain::Host, line(1, 0));
        c.access(Domain::Host, line(1, 4));
        assert_eq!(c.access(Domain::Host, line(1, 0)), Outcome::Hit);
        assert_eq!(c.access(Domain::Host, line(1, 1)), Outcome::Miss);
    }

    #[test]
    fn host_fills_avoid_enclave_ways_while_running() {
        let mut c = cache(Some(2));
        c.switch_partition(Domain::Host, E);
        for n in 0..16 {
            c.access(Domain::Host, line(2, n));
        }
        let mask = c.partition_mask().unwrap();
        for (i, l) in c.lines.iter().enumerate() {
            if l.valid && l.domain == Domain::Host {
                assert_eq!(mask & (1 << (i % 4)), 0);
            }
        }
        assert_eq!(c.mask_violations(), 0);
    }

    #[test]
    fn flush_counts_partition_lines() {
        let mut c = cache(Some(2));
        assert_eq!(c.switch_partition(Domain::Host, E), 0);
        for n in 0..3 {
            c.access(E, line(0, n));
        }
        assert_eq!(c.valid_lines_in_partition(), 2);
        assert_eq!(c.switch_partition(E, Domain::Host), 2);
        assert_eq!(c.valid_lines_of(E), 0);
        // Paused enclave: host may use every way again.
        assert_eq!(c.way_mask(Domain::Host), 0b1111);
    }

    #[test]
    fn empty_probe_gives_empty_trace() {
        assert!(cache(None).observe(Domain::Host).is_empty());
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Cache::new(CacheConfig { sets: 3, ways: 4 }).is_err());
        assert!(Cache::new(CacheConfig { sets: 4, ways: 1 }).is_err());
        assert!(cache(None).enable_partition(4).is_err());
    }
}
