//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the code it checks except to drive it.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use teesim::crypto::{Device, Hasher, Measurement, Rng};
use teesim::host::image::EnclaveImage;
use teesim::host::{utm_pages_for, Action, ActionResult, CreateOptions, System, SystemConfig, SystemError};
use teesim::machine::{
    AccessKind, Domain, EnclaveId, HartId, Machine, PhysAddr, PmpDecision, PmpEntry, PmpMode, PmpPerms, PrivMode,
    Region, PAGE_SIZE, PMP_ENTRIES,
};
use teesim::paging::{RuntimeConfig, MMAP_BASE};
use teesim::sm::{CreateRequest, EnclaveState, SbiCall, SecurityMonitor, SmConfig, SmError, StopReason, MAX_ENCLAVES};

// ---------------------------------------------------------------------------
// PMP: byte-at-a-time matching straight from the pmpaddr encoding.

pub const PMP_SPACE: u64 = 1 << 16;

/// Does entry `i` match byte `y`? `prev` is the pmpaddr of entry `i - 1`.
pub fn byte_matches(e: &PmpEntry, prev: u64, y: u64) -> bool {
    let word = y >> 2;
    match e.mode {
        PmpMode::Off => false,
        PmpMode::Na4 => word == e.addr,
        PmpMode::Napot => {
            // t trailing ones select a 2^(t+3)-byte block; compare the rest.
            let t = e.addr.trailing_ones();
            let low = (1u64 << (t + 1)) - 1;
            (word | low) == (e.addr | low)
        }
        PmpMode::Tor => prev <= word && word < e.addr,
    }
}

/// For every byte of the address space, the lowest matching entry.
pub fn byte_owner_map(entries: &[PmpEntry; PMP_ENTRIES]) -> Vec<Option<u8>> {
    (0..PMP_SPACE)
        .map(|y| {
            (0..PMP_ENTRIES)
                .find(|&i| byte_matches(&entries[i], if i == 0 { 0 } else { entries[i - 1].addr }, y))
                .map(|i| i as u8)
        })
        .collect()
}

/// Allowed iff one entry is the lowest match for every byte and permits
/// the access. M-mode always passes.
pub fn brute_check(
    entries: &[PmpEntry; PMP_ENTRIES],
    owners: &[Option<u8>],
    addr: u64,
    len: u64,
    kind: AccessKind,
    privilege: PrivMode,
) -> bool {
    if privilege == PrivMode::M {
        return true;
    }
    // The lowest entry matching any byte decides.
    let decider = (addr..addr + len).filter_map(|y| owners[y as usize]).min();
    let Some(i) = decider else { return false };
    (addr..addr + len).all(|y| owners[y as usize] == Some(i)) && {
        let p = entries[i as usize].perms;
        match kind {
            AccessKind::Read => p.r,
            AccessKind::Write => p.w,
            AccessKind::Execute => p.x,
        }
    }
}

/// Up to four active entries in random slots of a 16-bit address space.
pub fn random_pmp_config(rng: &mut Rng) -> [PmpEntry; PMP_ENTRIES] {
    let mut entries = [PmpEntry::OFF; PMP_ENTRIES];
    let active = rng.below(5) as usize;
    for _ in 0..active {
        let slot = rng.below(PMP_ENTRIES as u64) as usize;
        let perms = PmpPerms { r: rng.below(2) == 1, w: rng.below(2) == 1, x: rng.below(2) == 1 };
        let word_space = PMP_SPACE >> 2;
        let (mode, addr) = match rng.below(3) {
            0 => (PmpMode::Na4, rng.below(word_space)),
            1 => {
                let t = rng.below(13) as u32;
                let base = rng.below(word_space) & !((1u64 << (t + 1)) - 1);
                (PmpMode::Napot, base | ((1u64 << t) - 1))
            }
            _ => {
                if slot > 0 && rng.below(2) == 0 {
                    entries[slot - 1].addr = rng.below(word_space);
                }
                (PmpMode::Tor, rng.below(word_space + 1))
            }
        };
        entries[slot] = PmpEntry { mode, addr, perms };
    }
    entries
}

/// Queries that stress the boundaries of every region plus random ones.
pub fn pmp_queries(entries: &[PmpEntry; PMP_ENTRIES], rng: &mut Rng, random: usize) -> Vec<(u64, u64)> {
    let mut edges = vec![0, PMP_SPACE];
    for (i, e) in entries.iter().enumerate() {
        edges.push(e.addr << 2);
        if i > 0 {
            edges.push(entries[i - 1].addr << 2);
        }
        if e.mode == PmpMode::Napot {
            let t = e.addr.trailing_ones();
            edges.push(((e.addr | ((1 << (t + 1)) - 1)) + 1) << 2);
        }
    }
    let mut out = Vec::new();
    for &edge in &edges {
        for delta in [-8i64, -4, -1, 0, 1, 3] {
            for len in [1u64, 2, 4, 8] {
                let a = edge as i64 + delta;
                if a >= 0 && (a as u64) + len <= PMP_SPACE {
                    out.push((a as u64, len));
                }
            }
        }
    }
    for _ in 0..random {
        let len = [1u64, 2, 4, 8][rng.below(4) as usize];
        out.push((rng.below(PMP_SPACE - len + 1), len));
    }
    out
}

/// Compare the machine's check against the brute force. Returns the first
/// disagreement.
pub fn pmp_agree(rng: &mut Rng, random_queries: usize) -> Result<usize, String> {
    let entries = random_pmp_config(rng);
    let mut machine = Machine::new(PMP_SPACE, 1).map_err(|e| e.to_string())?;
    for (i, e) in entries.iter().enumerate() {
        machine.set_local_pmp(0, i, *e).map_err(|e| e.to_string())?;
    }
    let owners = byte_owner_map(&entries);
    let queries = pmp_queries(&entries, rng, random_queries);
    let mut checked = 0;
    for &(addr, len) in &queries {
        for kind in [AccessKind::Read, AccessKind::Write, AccessKind::Execute] {
            for privilege in [PrivMode::U, PrivMode::S, PrivMode::M] {
                let got = machine.pmp_check(0, PhysAddr(addr), len, kind, privilege).map_err(|e| e.to_string())?
                    == PmpDecision::Allow;
                let want = brute_check(&entries, &owners, addr, len, kind, privilege);
                if got != want {
                    return Err(format!("{entries:?}\n{addr:#x}+{len} {kind:?} {privilege:?}: got {got}, want {want}"));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}

// ---------------------------------------------------------------------------
// Measurement straight from an image file, without loading it.

pub fn image_measurement(image: &EnclaveImage) -> Measurement {
    let mut h = Hasher::new();
    h.update(&image.eapp_entry.to_le_bytes()).update(&image.config).update(&image.rt_entry.to_le_bytes());
    let mut pages = Vec::new();
    for seg in &image.segments {
        for (i, chunk) in seg.data.chunks(PAGE_SIZE as usize).enumerate() {
            let mut page = chunk.to_vec();
            page.resize(PAGE_SIZE as usize, 0);
            pages.push((seg.vaddr + i as u64 * PAGE_SIZE, 1 | (seg.flags & 0x1e), page));
        }
    }
    pages.sort_by_key(|p| p.0);
    for (vaddr, flags, page) in pages {
        h.update(&vaddr.to_le_bytes()).update(&[flags]).update(&page);
    }
    h.finish()
}

// ---------------------------------------------------------------------------
// Lifecycle: a reference model of the enclave state machine driven by random
// SBI calls.

pub const FUZZ_HARTS: usize = 4;
const FUZZ_MEMORY: u64 = 4 << 20;
const FUZZ_SM: Region = Region::new(0, 0x40000);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Model {
    Created,
    Running(HartId),
    Stopped,
    Exited,
}

#[derive(Debug, Clone, Copy)]
struct ModelEnclave {
    state: Model,
    epm: Region,
    utm: Region,
}

/// PMP slots an independent encoder needs for a region.
fn slots_for(r: Region) -> usize {
    if r.size.is_power_of_two() && r.base.is_multiple_of(r.size) {
        1
    } else {
        2
    }
}

pub struct LifecycleFuzz {
    pub machine: Machine,
    pub sm: SecurityMonitor,
    rng: Rng,
    /// Live enclaves only; destroyed ids move to `destroyed`.
    model: BTreeMap<EnclaveId, ModelEnclave>,
    destroyed: BTreeSet<EnclaveId>,
    next: u32,
    pub calls: u64,
    pub accepted: u64,
}

impl LifecycleFuzz {
    pub fn new(seed: u64) -> Self {
        let mut machine = Machine::new(FUZZ_MEMORY, FUZZ_HARTS).expect("machine");
        let sm = SecurityMonitor::boot(
            &mut machine,
            &Device::from_id(seed),
            SmConfig::new(FUZZ_SM, b"fuzz-sm".to_vec(), seed),
        )
        .expect("boot");
        LifecycleFuzz {
            machine,
            sm,
            rng: Rng::new(seed),
            model: BTreeMap::new(),
            destroyed: BTreeSet::new(),
            next: 0,
            calls: 0,
            accepted: 0,
        }
    }

    fn running_on(&self, hart: HartId) -> Option<EnclaveId> {
        self.model.iter().find(|(_, m)| m.state == Model::Running(hart)).map(|(&e, _)| e)
    }

    fn live(&self) -> impl Iterator<Item = (&EnclaveId, &ModelEnclave)> {
        self.model.iter()
    }

    fn random_region(&mut self, max_pages: u64) -> Region {
        let pages = 1 + self.rng.below(max_pages);
        let base = self.rng.below(FUZZ_MEMORY / PAGE_SIZE + 2) * PAGE_SIZE;
        Region::pages(base, pages)
    }

    /// Mostly live enclaves, sometimes stale or unknown ids.
    fn random_eid(&mut self) -> EnclaveId {
        let live: Vec<EnclaveId> = self.live().map(|(&e, _)| e).collect();
        if !live.is_empty() && self.rng.below(5) != 0 {
            return live[self.rng.below(live.len() as u64) as usize];
        }
        EnclaveId(self.rng.below(u64::from(self.next) + 2) as u32)
    }

    fn free(&self, r: Region) -> bool {
        r.end() <= FUZZ_MEMORY
            && !r.overlaps(&FUZZ_SM)
            && self.live().all(|(_, m)| !m.epm.overlaps(&r) && !m.utm.overlaps(&r))
    }

    fn slots_used(&self) -> usize {
        self.live().map(|(_, m)| slots_for(m.epm) + slots_for(m.utm)).sum()
    }

    /// Issue one random call and compare the outcome with the model.
    pub fn step(&mut self) -> Result<(), String> {
        let hart = self.rng.below(FUZZ_HARTS as u64) as usize;
        let on_hart = self.running_on(hart);
        let host = on_hart.is_none();
        let call = match self.rng.below(10) {
            0 | 1 => {
                let epm = self.random_region(16);
                let utm = self.random_region(4);
                if epm.end() <= FUZZ_MEMORY && self.free(epm) {
                    // The host zeroes the table root it hands over.
                    self.machine.memory_mut().fill(epm.base, PAGE_SIZE, 0).map_err(|e| e.to_string())?;
                }
                SbiCall::Create(CreateRequest {
                    epm,
                    utm,
                    pt_root: epm.base,
                    entry_point: 0x1000,
                    config: vec![self.rng.below(256) as u8],
                    use_scratchpad: false,
                })
            }
            2 => SbiCall::Run(self.random_eid()),
            3 => SbiCall::Resume(self.random_eid()),
            4 => SbiCall::Destroy(self.random_eid()),
            5 => {
                let eid = self.random_eid();
                let pages = 1 + self.rng.below(4);
                let base = match self.model.get(&eid) {
                    Some(m) if self.rng.below(4) != 0 => m.epm.end(),
                    _ => self.rng.below(FUZZ_MEMORY / PAGE_SIZE) * PAGE_SIZE,
                };
                SbiCall::Extend(eid, Region::pages(base, pages))
            }
            6 => SbiCall::Stop(
                [StopReason::Yield, StopReason::EdgeCall, StopReason::Interrupt][self.rng.below(3) as usize],
            ),
            7 => SbiCall::Exit(self.rng.below(100)),
            8 => SbiCall::Attest(vec![7; self.rng.below(1100) as usize]),
            _ => SbiCall::Random,
        };
        self.calls += 1;
        let desc = format!("call {} hart {hart} {call:?}", self.calls);
        let result = self.sm.sbi_call(&mut self.machine, hart, call.clone());
        let mismatch = |why: &str| Err(format!("{desc}: {why}; got {result:?}"));

        match &call {
            SbiCall::Create(req) => {
                let pre = host
                    && self.live().count() < MAX_ENCLAVES
                    && req.epm.end() <= FUZZ_MEMORY
                    && req.utm.end() <= FUZZ_MEMORY
                    && !req.epm.overlaps(&req.utm)
                    && self.free(req.epm)
                    && self.free(req.utm);
                let need = slots_for(req.epm) + slots_for(req.utm);
                let room = PMP_ENTRIES - 2 - self.slots_used();
                match (&result, pre) {
                    (Ok(_), false) => return mismatch("accepted a create the model forbids"),
                    (Ok(teesim::sm::SbiReturn::Created(eid)), true) => {
                        if *eid != EnclaveId(self.next) {
                            return mismatch("unexpected enclave id");
                        }
                        if need > room {
                            return mismatch("more PMP slots than exist");
                        }
                        self.model.insert(*eid, ModelEnclave { state: Model::Created, epm: req.epm, utm: req.utm });
                        self.next += 1;
                    }
                    (Err(SmError::NoFreePmpEntry), true) if need > room || need > 2 => {}
                    (Err(_), true) => return mismatch("refused a valid create"),
                    _ => {}
                }
            }
            SbiCall::Run(e) | SbiCall::Resume(e) => {
                let want = if matches!(call, SbiCall::Run(_)) { Model::Created } else { Model::Stopped };
                // A created enclave that has run once cannot run again; the
                // model only reaches Created through create.
                let ok = host && self.model.get(e).is_some_and(|m| m.state == want);
                match (result.is_ok(), ok) {
                    (true, true) => self.model.get_mut(e).expect("exists").state = Model::Running(hart),
                    (false, false) => {}
                    _ => return mismatch("run/resume disagrees with the model"),
                }
            }
            SbiCall::Destroy(e) => {
                let ok = host
                    && self
                        .model
                        .get(e)
                        .is_some_and(|m| matches!(m.state, Model::Created | Model::Stopped | Model::Exited));
                match (result.is_ok(), ok) {
                    (true, true) => {
                        self.model.remove(e);
                        self.destroyed.insert(*e);
                    }
                    (false, false) => {}
                    _ => return mismatch("destroy disagrees with the model"),
                }
            }
            SbiCall::Extend(e, added) => {
                let m = self.model.get(e).copied();
                let pre =
                    host && m.is_some_and(|m| {
                        matches!(m.state, Model::Created | Model::Stopped) && added.base == m.epm.end()
                    }) && self.free(*added);
                match (&result, pre) {
                    (Ok(_), false) => return mismatch("accepted an extend the model forbids"),
                    (Ok(_), true) => {
                        let m = self.model.get_mut(e).expect("exists");
                        m.epm = Region::new(m.epm.base, m.epm.size + added.size);
                    }
                    (Err(SmError::NoFreePmpEntry), true) => {}
                    (Err(_), true) => return mismatch("refused a valid extend"),
                    _ => {}
                }
            }
            SbiCall::Stop(_) | SbiCall::Exit(_) => match (result.is_ok(), on_hart) {
                (true, Some(e)) => {
                    self.model.get_mut(&e).expect("exists").state =
                        if matches!(call, SbiCall::Exit(_)) { Model::Exited } else { Model::Stopped };
                }
                (false, None) => {}
                _ => return mismatch("stop/exit disagrees with the model"),
            },
            SbiCall::Attest(data) => {
                if result.is_ok() != (on_hart.is_some() && data.len() <= 1024) {
                    return mismatch("attest disagrees with the model");
                }
            }
            SbiCall::Random => {
                if result.is_ok() != on_hart.is_some() {
                    return mismatch("random disagrees with the model");
                }
            }
        }
        if result.is_ok() {
            self.accepted += 1;
        }
        self.check().map_err(|e| format!("{desc}: {e}"))
    }

    /// Disjointness, state agreement and PMP agreement, from the model.
    pub fn check(&mut self) -> Result<(), String> {
        let live: Vec<(EnclaveId, ModelEnclave)> = self.live().map(|(&e, &m)| (e, m)).collect();
        let mut regions = vec![FUZZ_SM];
        for (_, m) in &live {
            regions.push(m.epm);
            regions.push(m.utm);
        }
        for (i, a) in regions.iter().enumerate() {
            if let Some(b) = regions[i + 1..].iter().find(|b| a.overlaps(b)) {
                return Err(format!("{a} overlaps {b}"));
            }
        }
        if self.sm.live_enclaves() != self.model.len() {
            return Err(format!("monitor has {} live enclaves, model {}", self.sm.live_enclaves(), self.model.len()));
        }
        for (&e, m) in &self.model {
            let d = self.sm.enclave(e).ok_or_else(|| format!("monitor lost enclave {e}"))?;
            let ok = match (m.state, d.state) {
                (Model::Created, EnclaveState::Created) => true,
                (Model::Running(h), EnclaveState::Running(k)) => h == k,
                (Model::Stopped, EnclaveState::Stopped) => d.exit_value.is_none(),
                (Model::Exited, EnclaveState::Stopped) => d.exit_value.is_some(),
                _ => false,
            };
            if !ok || d.epm != m.epm || d.utm != m.utm {
                return Err(format!("enclave {e}: model {:?} {} vs monitor {} {}", m.state, m.epm, d.state, d.epm));
            }
        }
        // Destroyed descriptors only change on a bug, so sweep them less often.
        if self.calls.is_multiple_of(256) {
            if self.sm.enclaves().count() != self.model.len() + self.destroyed.len() {
                return Err("monitor and model disagree on the enclave count".into());
            }
            for &e in &self.destroyed {
                let state = self.sm.enclave(e).map(|d| d.state);
                if state != Some(EnclaveState::Destroyed) {
                    return Err(format!("destroyed enclave {e} is {state:?}"));
                }
            }
        }
        for hart in 0..FUZZ_HARTS {
            let running = self.running_on(hart);
            let domain = self.machine.hart(hart).map_err(|e| e.to_string())?.domain;
            if domain != running.map_or(Domain::Host, Domain::Enclave) {
                return Err(format!("hart {hart} in {domain:?}, model says {running:?}"));
            }
            let allowed = |addr: u64, kind| {
                self.machine.pmp_check(hart, PhysAddr(addr), 1, kind, PrivMode::S).map(|d| d == PmpDecision::Allow)
            };
            for probe in [FUZZ_SM.base, FUZZ_SM.end() - 1] {
                if allowed(probe, AccessKind::Read).map_err(|e| e.to_string())? {
                    return Err(format!("hart {hart} reads the monitor"));
                }
            }
            for (e, m) in &live {
                let own = running == Some(*e);
                let inner = m.epm.base + self.rng.below(m.epm.size);
                for probe in [m.epm.base, inner, m.epm.end() - 1] {
                    for kind in [AccessKind::Read, AccessKind::Write] {
                        if allowed(probe, kind).map_err(|e| e.to_string())? != own {
                            return Err(format!("hart {hart} {kind:?} of enclave {e} memory at {probe:#x}"));
                        }
                    }
                }
                let shared = running.is_none() || own;
                for probe in [m.utm.base, m.utm.end() - 1] {
                    if allowed(probe, AccessKind::Write).map_err(|e| e.to_string())? != shared {
                        return Err(format!("hart {hart} write of enclave {e} buffer at {probe:#x}"));
                    }
                }
            }
            // Memory nobody owns is the host's alone.
            let spot = self.rng.below(FUZZ_MEMORY);
            if regions.iter().all(|r| !r.contains(spot))
                && allowed(spot, AccessKind::Read).map_err(|e| e.to_string())? != running.is_none()
            {
                return Err(format!("hart {hart} free-memory access at {spot:#x}"));
            }
        }
        Ok(())
    }

    pub fn audit_text(&self) -> String {
        self.machine.audit().to_string()
    }
}

// ---------------------------------------------------------------------------
// Paging: random eapp memory traces checked against a plain page map.

pub const STORE_SLOTS: usize = 24;

/// A running enclave with the given paging setup.
pub fn paging_system(
    seed: u64,
    limit: Option<usize>,
    encrypt: bool,
) -> Result<(System, EnclaveId, EnclaveImage), SystemError> {
    let config = SystemConfig {
        seed,
        runtime: RuntimeConfig { paging_limit: limit, encrypt, dyn_resize: true, store_slots: STORE_SLOTS },
        ..SystemConfig::default()
    };
    let mut sys = System::new(config)?;
    let image = EnclaveImage::generate(seed, 3, b"trace");
    let hart = sys.idle_hart().expect("idle hart");
    let opts =
        CreateOptions { epm_pages: Some(40), utm_pages: utm_pages_for(PAGE_SIZE, STORE_SLOTS), ..Default::default() };
    let eid = sys.create_enclave(hart, &image, &opts)?;
    sys.run(eid, hart)?;
    Ok((sys, eid, image))
}

/// Expected eapp pages: the user segments of the image, zero padded.
pub fn image_pages(image: &EnclaveImage) -> BTreeMap<u64, Vec<u8>> {
    let mut out = BTreeMap::new();
    for seg in image.segments.iter().filter(|s| s.flags & 0x10 != 0) {
        for (i, chunk) in seg.data.chunks(PAGE_SIZE as usize).enumerate() {
            let mut page = chunk.to_vec();
            page.resize(PAGE_SIZE as usize, 0);
            out.insert(seg.vaddr + i as u64 * PAGE_SIZE, page);
        }
    }
    out
}

/// A random trace over the image's writable pages and one mmap window.
/// Starts with the mmap so addresses are known up front.
pub fn random_trace(rng: &mut Rng, image: &EnclaveImage, len: usize) -> Vec<Action> {
    let mmap_pages = 4 + rng.below(6);
    let writable: Vec<u64> = image
        .segments
        .iter()
        .filter(|s| s.flags & 0x10 != 0 && s.flags & 0x4 != 0)
        .flat_map(|s| (0..s.data.len() as u64).step_by(PAGE_SIZE as usize).map(move |o| s.vaddr + o))
        .chain((0..mmap_pages).map(|i| MMAP_BASE + i * PAGE_SIZE))
        .collect();
    let readable: Vec<u64> =
        image_pages(image).keys().copied().chain((0..mmap_pages).map(|i| MMAP_BASE + i * PAGE_SIZE)).collect();
    let mut trace = vec![Action::Mmap(mmap_pages * PAGE_SIZE)];
    for _ in 0..len {
        if rng.below(3) == 0 {
            let page = readable[rng.below(readable.len() as u64) as usize];
            let off = rng.below(PAGE_SIZE - 16);
            trace.push(Action::ReadV { vaddr: page + off, len: 1 + rng.below(16) as usize });
        } else {
            let page = writable[rng.below(writable.len() as u64) as usize];
            let len = 1 + rng.below(64);
            // Some writes straddle into the next page.
            let off = rng.below(PAGE_SIZE);
            let mut bytes = vec![0u8; len as usize];
            rng.fill_bytes(&mut bytes);
            let vaddr = page + off;
            let fits = writable.contains(&((vaddr + len - 1) & !(PAGE_SIZE - 1)));
            let vaddr = if fits { vaddr } else { page + PAGE_SIZE - len };
            trace.push(Action::WriteV { vaddr, bytes });
        }
    }
    trace
}

/// Run `trace`, checking every read against the model. Returns the
/// model's final memory, zero pages dropped.
pub fn run_trace(
    sys: &mut System,
    eid: EnclaveId,
    image: &EnclaveImage,
    trace: &[Action],
) -> Result<BTreeMap<u64, Vec<u8>>, String> {
    let mut model = image_pages(image);
    for (i, action) in trace.iter().enumerate() {
        let out = sys.eapp(eid, action).map_err(|e| format!("step {i}: {e}"))?;
        match (action, &out.result) {
            (Action::Mmap(len), ActionResult::Value(base)) => {
                for p in 0..len / PAGE_SIZE {
                    model.insert(base + p * PAGE_SIZE, vec![0; PAGE_SIZE as usize]);
                }
            }
            (Action::WriteV { vaddr, bytes }, ActionResult::Done) => {
                for (k, &b) in bytes.iter().enumerate() {
                    let a = vaddr + k as u64;
                    model.get_mut(&(a & !(PAGE_SIZE - 1))).ok_or(format!("step {i}: write outside the model"))?
                        [(a % PAGE_SIZE) as usize] = b;
                }
            }
            (Action::ReadV { vaddr, len }, ActionResult::Bytes(got)) => {
                let want: Vec<u8> = (0..*len as u64)
                    .map(|k| {
                        let a = vaddr + k;
                        model.get(&(a & !(PAGE_SIZE - 1))).map_or(0, |p| p[(a % PAGE_SIZE) as usize])
                    })
                    .collect();
                if *got != want {
                    return Err(format!("step {i}: read {vaddr:#x} got {} want {}", hex(got), hex(&want)));
                }
            }
            (a, r) => return Err(format!("step {i}: {a:?} gave {r:?}")),
        }
    }
    model.retain(|_, p| p.iter().any(|&b| b != 0));
    Ok(model)
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

/// Flip one bit in an occupied backing-store slot, then touch the page.
/// Returns the result kind the eapp saw.
pub fn tamper_store_trial(seed: u64) -> Result<String, String> {
    let mut rng = Rng::new(seed ^ 0x7a3);
    let (mut sys, eid, image) = paging_system(seed, Some(2), true).map_err(|e| e.to_string())?;
    let trace = random_trace(&mut rng, &image, 20);
    run_trace(&mut sys, eid, &image, &trace)?;
    let rt = sys.enclave(eid).and_then(|e| e.runtime.as_ref()).ok_or("no runtime")?;
    let in_use = rt.store_slots_in_use();
    let &(vaddr, slot) = in_use.get(rng.below(in_use.len() as u64) as usize).ok_or("nothing evicted")?;
    let at = rt.store_slot_addr(slot) + rng.below(teesim::crypto::SealedPage::LEN as u64);
    let attacker = sys.idle_hart().ok_or("no idle hart")?;
    let old = sys.host_read(attacker, at, 1).map_err(|e| e.to_string())?[0];
    sys.host_write(attacker, at, &[old ^ (1 << rng.below(8))]).map_err(|e| e.to_string())?;
    let out = sys.eapp(eid, &Action::ReadV { vaddr, len: 8 }).map_err(|e| e.to_string())?;
    Ok(match out.result {
        ActionResult::Fatal(k) => format!("Fatal({k})"),
        other => format!("{other:?}"),
    })
}

// ---------------------------------------------------------------------------
// Dynamic resizing: mmap past the free list and watch the region grow.

#[derive(Debug)]
pub struct ResizeTrial {
    pub free_before: usize,
    pub epm_before: Region,
    pub epm_after: Region,
    pub extends: u64,
    pub extend_events: usize,
    pub measured_before: Measurement,
    pub measured_after: Measurement,
    /// The measurement a fresh report carries after the extension.
    pub attested: Measurement,
    pub oracle: Measurement,
}

pub fn resize_trial(seed: u64) -> Result<ResizeTrial, String> {
    let e = |e: SystemError| e.to_string();
    let config = SystemConfig {
        seed,
        runtime: RuntimeConfig { dyn_resize: true, ..RuntimeConfig::default() },
        ..SystemConfig::default()
    };
    let mut sys = System::new(config).map_err(e)?;
    let image = EnclaveImage::generate(seed, 2 + seed % 3, b"resize");
    let (eid, _) = sys.launch(&image, 2).map_err(e)?;
    let desc = sys.sm.enclave(eid).ok_or("no descriptor")?;
    let (epm_before, measured_before) = (desc.epm, desc.measurement);
    let free_before = sys.enclave(eid).and_then(|h| h.runtime.as_ref()).ok_or("no runtime")?.free_pages();

    let pages = free_before as u64 + 3 + seed % 5;
    let base = match sys.eapp(eid, &Action::Mmap(pages * PAGE_SIZE)).map_err(e)?.result {
        ActionResult::Value(v) => v,
        other => return Err(format!("mmap gave {other:?}")),
    };
    for i in 0..pages {
        let bytes = (i as u32 + 1).to_le_bytes().to_vec();
        sys.eapp(eid, &Action::WriteV { vaddr: base + i * PAGE_SIZE, bytes: bytes.clone() }).map_err(e)?;
        let back = sys.eapp(eid, &Action::ReadV { vaddr: base + i * PAGE_SIZE, len: 4 }).map_err(e)?.result;
        if back != ActionResult::Bytes(bytes) {
            return Err(format!("page {i} read back {back:?}"));
        }
    }
    let attested = match sys.eapp(eid, &Action::Attest(b"after".to_vec())).map_err(e)?.result {
        ActionResult::Report(r) => r.enclave.measurement,
        other => return Err(format!("attest gave {other:?}")),
    };
    let desc = sys.sm.enclave(eid).ok_or("no descriptor")?;
    Ok(ResizeTrial {
        free_before,
        epm_before,
        epm_after: desc.epm,
        extends: sys.enclave(eid).and_then(|h| h.runtime.as_ref()).ok_or("no runtime")?.stats().extends,
        extend_events: sys.machine.audit().events("rt_extend").count(),
        measured_before,
        measured_after: desc.measurement,
        attested,
        oracle: image_measurement(&image),
    })
}

/// Same trace under a paging limit and without one: both match the plain
/// page map and each other, and residency stays under the limit.
pub fn paging_transparency(seed: u64, limit: usize, encrypt: bool, len: usize) -> Result<(), String> {
    let (mut sys, eid, image) = paging_system(seed, Some(limit), encrypt).map_err(|e| e.to_string())?;
    let (mut oracle, oeid, _) = paging_system(seed, None, encrypt).map_err(|e| e.to_string())?;
    let trace = random_trace(&mut Rng::new(seed), &image, len);
    let model = run_trace(&mut sys, eid, &image, &trace)?;
    let unpaged = run_trace(&mut oracle, oeid, &image, &trace)?;
    let paged_mem = sys.eapp_memory(eid).map_err(|e| e.to_string())?;
    let oracle_mem = oracle.eapp_memory(oeid).map_err(|e| e.to_string())?;
    if paged_mem != model || oracle_mem != unpaged || paged_mem != oracle_mem {
        return Err(format!("seed {seed} limit {limit}: final memory differs"));
    }
    let rt = sys.enclave(eid).and_then(|e| e.runtime.as_ref()).ok_or("no runtime")?;
    if rt.resident_pages() > limit {
        return Err(format!("{} pages resident over a limit of {limit}", rt.resident_pages()));
    }
    sys.audit_runtime(eid)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Measurement under relocation, scratchpad loading and mutation.

pub fn random_image(rng: &mut Rng) -> EnclaveImage {
    let mut config = vec![0u8; rng.below(24) as usize];
    rng.fill_bytes(&mut config);
    EnclaveImage::generate(rng.next_u64(), 2 + rng.below(4), &config)
}

/// Change one measured byte.
pub fn mutate_image(image: &EnclaveImage, rng: &mut Rng) -> EnclaveImage {
    let mut m = image.clone();
    let measured_bytes: usize = m.config.len() + m.segments.iter().map(|s| s.data.len()).sum::<usize>();
    let mut at = rng.below(measured_bytes as u64) as usize;
    let flip = 1 + rng.below(255) as u8;
    if at < m.config.len() {
        m.config[at] ^= flip;
        return m;
    }
    at -= m.config.len();
    for seg in &mut m.segments {
        if at < seg.data.len() {
            seg.data[at] ^= flip;
            return m;
        }
        at -= seg.data.len();
    }
    unreachable!()
}

/// Create `image` after `pad_pages` of unrelated allocations, optionally on
/// the scratchpad. Returns the monitor's digest and the physical base.
pub fn measure_loaded(image: &EnclaveImage, pad_pages: u64, scratchpad: bool) -> Result<(Measurement, u64), String> {
    let config = SystemConfig { scratchpad: scratchpad.then_some(64 * PAGE_SIZE), ..SystemConfig::default() };
    let mut sys = System::new(config).map_err(|e| e.to_string())?;
    if pad_pages > 0 {
        sys.os.alloc(pad_pages).map_err(|e| e.to_string())?;
    }
    let opts = CreateOptions {
        use_scratchpad: scratchpad,
        ..CreateOptions::new(teesim::host::os::pages_needed(image) + 4, 2)
    };
    let eid = sys.create_enclave(0, image, &opts).map_err(|e| e.to_string())?;
    let d = sys.sm.enclave(eid).ok_or("no descriptor")?;
    Ok((d.measurement, d.epm.base))
}
