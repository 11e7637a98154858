//! The security monitor: the M-mode component that owns the PMP, creates and
//! schedules enclaves, measures them, and signs attestation reports.
//!
//! Every entry point takes the machine and the calling hart. Who is calling
//! follows from the hart's current domain: host calls come from a hart in
//! [`Domain::Host`], runtime calls from a hart executing an enclave.

pub mod attest;
pub mod measure;
pub mod slots;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::crypto::{BootCertificate, Device, KeyPair, Measurement, PublicKey, Rng};
use crate::machine::{
    encode_region, AccessKind, Domain, EnclaveId, HartId, Machine, MachineError, PhysAddr, PmpDecision, PmpEntry,
    PmpError, PmpPerms, PrivMode, Region, RegionEncoding, PAGE_SIZE, PMP_ENTRIES,
};

pub use attest::{
    verify_report, AttestationReport, EnclaveReport, Expectations, Invalid, ReportParseError, ATTEST_DATA_MAX,
    REPORT_LEN,
};
pub use slots::{SlotOwner, SlotTable, View, CATCH_ALL_SLOT, SM_SLOT};

pub const DEFAULT_WATCHDOG_BUDGET: u64 = 10_000;
/// PMP entries left after the monitor and catch-all slots.
pub const MAX_ENCLAVES: usize = PMP_ENTRIES - 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmError {
    #[error("security monitor already booted on this machine")]
    AlreadyBooted,
    #[error("region {0} is empty or not page aligned")]
    Misaligned(Region),
    #[error("region {0} lies outside physical memory")]
    OutOfBounds(Region),
    #[error("region {region} overlaps {with}")]
    Overlap { region: Region, with: String },
    #[error("invalid mapping: {0}")]
    InvalidMapping(String),
    #[error("physical page {0:#x} mapped more than once")]
    DuplicatePhysicalPage(u64),
    #[error("no free PMP entry")]
    NoFreePmpEntry,
    #[error("enclave {eid} is {state}")]
    WrongState { eid: EnclaveId, state: EnclaveState },
    #[error("no enclave {0}")]
    NoSuchEnclave(EnclaveId),
    #[error("hart {0} is already executing an enclave")]
    HartBusy(HartId),
    #[error("{call} is not permitted from {caller}")]
    NotPermitted { call: &'static str, caller: String },
    #[error("attestation data is {0} bytes, limit is {ATTEST_DATA_MAX}")]
    DataTooLarge(usize),
    #[error("region {0} is not adjacent to the enclave")]
    NotAdjacent(Region),
    #[error("scratchpad of {have:#x} bytes cannot hold {need:#x}")]
    ScratchpadTooSmall { need: u64, have: u64 },
    #[error("scratchpad is missing or in use")]
    ScratchpadUnavailable,
    #[error("region cannot be expressed in PMP: {0}")]
    Pmp(#[from] PmpError),
    #[error("machine: {0}")]
    Machine(String),
}

impl From<MachineError> for SmError {
    fn from(e: MachineError) -> Self {
        SmError::Machine(e.to_string())
    }
}

impl SmError {
    /// Variant name, used by scenario expectations.
    pub fn kind(&self) -> &'static str {
        match self {
            SmError::AlreadyBooted => "AlreadyBooted",
            SmError::Misaligned(_) => "Misaligned",
            SmError::OutOfBounds(_) => "OutOfBounds",
            SmError::Overlap { .. } => "OverlapError",
            SmError::InvalidMapping(_) => "InvalidMapping",
            SmError::DuplicatePhysicalPage(_) => "DuplicatePhysicalPage",
            SmError::NoFreePmpEntry => "NoFreePmpEntry",
            SmError::WrongState { .. } => "WrongState",
            SmError::NoSuchEnclave(_) => "NoSuchEnclave",
            SmError::HartBusy(_) => "HartBusy",
            SmError::NotPermitted { .. } => "NotPermitted",
            SmError::DataTooLarge(_) => "DataTooLarge",
            SmError::NotAdjacent(_) => "NotAdjacent",
            SmError::ScratchpadTooSmall { .. } => "ScratchpadTooSmall",
            SmError::ScratchpadUnavailable => "ScratchpadUnavailable",
            SmError::Pmp(_) => "PmpEncoding",
            SmError::Machine(_) => "Machine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnclaveState {
    Created,
    Running(HartId),
    Stopped,
    Destroyed,
}

impl EnclaveState {
    pub fn is_live(self) -> bool {
        self != EnclaveState::Destroyed
    }
}

impl fmt::Display for EnclaveState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnclaveState::Created => f.write_str("Created"),
            EnclaveState::Running(h) => write!(f, "Running(hart {h})"),
            EnclaveState::Stopped => f.write_str("Stopped"),
            EnclaveState::Destroyed => f.write_str("Destroyed"),
        }
    }
}

/// Why an enclave left its hart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Yield,
    /// Outbound call waiting in the shared buffer.
    EdgeCall,
    /// The runtime asks the host for this many more pages.
    ExtendRequest(u64),
    Interrupt,
    Watchdog,
    Exit(u64),
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::Yield => f.write_str("yield"),
            StopReason::EdgeCall => f.write_str("edge_call"),
            StopReason::ExtendRequest(n) => write!(f, "extend_request:{n}"),
            StopReason::Interrupt => f.write_str("interrupt"),
            StopReason::Watchdog => f.write_str("watchdog"),
            StopReason::Exit(v) => write!(f, "exit:{v}"),
        }
    }
}

/// Delivered to the runtime in registers on the next resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Notice {
    Extended { added: Region },
}

#[derive(Debug, Clone)]
pub struct EnclaveDescriptor {
    pub id: EnclaveId,
    pub state: EnclaveState,
    pub epm: Region,
    pub utm: Region,
    pub pt_root: u64,
    pub entry_point: u64,
    pub measurement: Measurement,
    /// Resident in the on-chip scratchpad rather than DRAM.
    pub on_scratchpad: bool,
    pub last_stop: Option<StopReason>,
    pub exit_value: Option<u64>,
    pub budget: u64,
    started: bool,
    saved_context: Vec<u8>,
    host_context: Vec<u8>,
    notices: Vec<Notice>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CreateRequest {
    pub epm: Region,
    pub utm: Region,
    pub pt_root: u64,
    pub entry_point: u64,
    pub config: Vec<u8>,
    pub use_scratchpad: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmConfig {
    pub sm_region: Region,
    pub sm_image: Vec<u8>,
    pub seed: u64,
    pub watchdog_budget: u64,
    pub scratchpad: Option<Region>,
}

impl SmConfig {
    pub fn new(sm_region: Region, sm_image: Vec<u8>, seed: u64) -> Self {
        SmConfig { sm_region, sm_image, seed, watchdog_budget: DEFAULT_WATCHDOG_BUDGET, scratchpad: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trap {
    PageFault { vaddr: u64, kind: AccessKind },
    EappException(u64),
    ExternalInterrupt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrapRoute {
    Runtime,
    Os,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WatchdogVerdict {
    Continue,
    ForcedYield(EnclaveId),
}

/// The SBI surface, for callers that dispatch dynamically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SbiCall {
    Create(CreateRequest),
    Run(EnclaveId),
    Resume(EnclaveId),
    Destroy(EnclaveId),
    Extend(EnclaveId, Region),
    Stop(StopReason),
    Exit(u64),
    Attest(Vec<u8>),
    Random,
}

impl SbiCall {
    pub fn name(&self) -> &'static str {
        match self {
            SbiCall::Create(_) => "create",
            SbiCall::Run(_) => "run",
            SbiCall::Resume(_) => "resume",
            SbiCall::Destroy(_) => "destroy",
            SbiCall::Extend(..) => "extend",
            SbiCall::Stop(_) => "stop",
            SbiCall::Exit(_) => "exit",
            SbiCall::Attest(_) => "attest",
            SbiCall::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SbiReturn {
    Created(EnclaveId),
    Entered,
    Stopped,
    Destroyed,
    Extended(Region),
    Report(Box<AttestationReport>),
    Random(u64),
}

#[derive(Debug)]
pub struct SecurityMonitor {
    sm_region: Region,
    sm_measurement: Measurement,
    attest_key: KeyPair,
    certificate: BootCertificate,
    device_public: PublicKey,
    rng: Rng,
    slots: SlotTable,
    enclaves: BTreeMap<EnclaveId, EnclaveDescriptor>,
    next_id: u32,
    running: Vec<Option<EnclaveId>>,
    scratchpad: Option<Region>,
    watchdog_budget: u64,
}

fn check_region(machine: &Machine, r: Region) -> Result<(), SmError> {
    if r.is_empty() || !r.is_page_aligned() {
        return Err(SmError::Misaligned(r));
    }
    if !machine.memory().in_bounds(r.base, r.size) {
        return Err(SmError::OutOfBounds(r));
    }
    Ok(())
}

impl SecurityMonitor {
    /// Secure boot, then lock the monitor region on every hart and open the
    /// rest of memory to the OS.
    pub fn boot(machine: &mut Machine, device: &Device, config: SmConfig) -> Result<Self, SmError> {
        if machine.harts().iter().any(|h| h.pmp.entry(CATCH_ALL_SLOT) != PmpEntry::OFF) {
            return Err(SmError::AlreadyBooted);
        }
        let sm = config.sm_region;
        check_region(machine, sm)?;
        let sm_entry = match encode_region(sm.base, sm.size)? {
            RegionEncoding::Tor { lower: 0, upper } => {
                PmpEntry::new(crate::machine::PmpMode::Tor, upper, PmpPerms::NONE)
            }
            RegionEncoding::Tor { .. } => return Err(SmError::Misaligned(sm)),
            enc => enc.entries(PmpPerms::NONE)[0],
        };
        let boot = device.secure_boot(&config.sm_image, config.seed);
        let mut slots = SlotTable::default();
        slots.reserve(SM_SLOT, SlotOwner::Sm, sm_entry);
        slots.reserve(CATCH_ALL_SLOT, SlotOwner::OsCatchAll, PmpEntry::all_memory(PmpPerms::NONE));

        if let Some(sp) = config.scratchpad {
            check_region(machine, sp)?;
            if sp.overlaps(&sm) {
                return Err(SmError::Overlap { region: sp, with: "the monitor".into() });
            }
            let enc = encode_region(sp.base, sp.size)?;
            slots.allocate(&enc, SlotOwner::Scratchpad).ok_or(SmError::NoFreePmpEntry)?;
            machine.memory_mut().fill(sp.base, sp.size, 0)?;
        }

        let image = &config.sm_image[..config.sm_image.len().min(sm.size as usize)];
        machine.memory_mut().write(sm.base, image)?;

        let monitor = SecurityMonitor {
            sm_region: sm,
            sm_measurement: boot.sm_measurement,
            attest_key: boot.attest_key,
            certificate: boot.certificate,
            device_public: device.public_key(),
            rng: Rng::new(config.seed),
            slots,
            enclaves: BTreeMap::new(),
            next_id: 0,
            running: vec![None; machine.hart_count()],
            scratchpad: config.scratchpad,
            watchdog_budget: config.watchdog_budget.max(1),
        };
        let fixed: Vec<usize> = (0..PMP_ENTRIES).filter(|&i| monitor.slots.owner(i) != SlotOwner::Free).collect();
        monitor.broadcast(machine, 0, &fixed);
        machine.log(
            Some(0),
            "boot",
            &[
                ("sm", sm.to_string()),
                ("sm_measurement", monitor.sm_measurement.to_hex()),
                ("device", monitor.device_public.to_hex()),
            ],
        );
        Ok(monitor)
    }

    pub fn sm_region(&self) -> Region {
        self.sm_region
    }

    pub fn sm_measurement(&self) -> Measurement {
        self.sm_measurement
    }

    pub fn sm_public(&self) -> PublicKey {
        self.certificate.sm_public
    }

    pub fn device_public(&self) -> PublicKey {
        self.device_public
    }

    pub fn scratchpad(&self) -> Option<Region> {
        self.scratchpad
    }

    pub fn slots(&self) -> &SlotTable {
        &self.slots
    }

    pub fn watchdog_budget(&self) -> u64 {
        self.watchdog_budget
    }

    pub fn enclave(&self, eid: EnclaveId) -> Option<&EnclaveDescriptor> {
        self.enclaves.get(&eid)
    }

    pub fn enclaves(&self) -> impl Iterator<Item = &EnclaveDescriptor> {
        self.enclaves.values()
    }

    pub fn live_enclaves(&self) -> usize {
        self.enclaves.values().filter(|d| d.state.is_live()).count()
    }

    pub fn running_on(&self, hart: HartId) -> Option<EnclaveId> {
        self.running.get(hart).copied().flatten()
    }

    /// Notices queued for the runtime, cleared on read.
    pub fn take_notices(&mut self, eid: EnclaveId) -> Vec<Notice> {
        self.enclaves.get_mut(&eid).map(|d| std::mem::take(&mut d.notices)).unwrap_or_default()
    }

    fn descriptor(&self, eid: EnclaveId) -> Result<&EnclaveDescriptor, SmError> {
        self.enclaves.get(&eid).ok_or(SmError::NoSuchEnclave(eid))
    }

    fn descriptor_mut(&mut self, eid: EnclaveId) -> Result<&mut EnclaveDescriptor, SmError> {
        self.enclaves.get_mut(&eid).ok_or(SmError::NoSuchEnclave(eid))
    }

    fn require_host(&self, machine: &Machine, hart: HartId, call: &'static str) -> Result<(), SmError> {
        match machine.hart(hart)?.domain {
            Domain::Host => Ok(()),
            Domain::Enclave(e) => Err(SmError::NotPermitted { call, caller: format!("enclave {e}") }),
        }
    }

    fn require_enclave(&self, machine: &Machine, hart: HartId, call: &'static str) -> Result<EnclaveId, SmError> {
        match machine.hart(hart)?.domain {
            Domain::Enclave(e) if self.running_on(hart) == Some(e) => Ok(e),
            _ => Err(SmError::NotPermitted { call, caller: "host".into() }),
        }
    }

    fn broadcast(&self, machine: &mut Machine, origin: HartId, indices: &[usize]) {
        for &i in indices {
            machine.broadcast_pmp_update(origin, i, self.slots.view_entry(i, View::Host));
        }
    }

    fn install_view(&self, machine: &mut Machine, hart: HartId, view: View) -> Result<(), SmError> {
        for i in 0..PMP_ENTRIES {
            let want = self.slots.view_entry(i, view);
            if machine.hart(hart)?.pmp.entry(i) != want {
                machine.set_local_pmp(hart, i, want)?;
            }
        }
        Ok(())
    }

    /// Regions no new enclave memory may touch.
    fn reserved_regions(&self) -> Vec<(Region, String)> {
        let mut out = vec![(self.sm_region, "the monitor".to_string())];
        if let Some(sp) = self.scratchpad {
            out.push((sp, "the scratchpad".into()));
        }
        for d in self.enclaves.values().filter(|d| d.state.is_live()) {
            if !d.on_scratchpad {
                out.push((d.epm, format!("enclave {} memory", d.id)));
            }
            out.push((d.utm, format!("enclave {} shared buffer", d.id)));
        }
        out
    }

    fn check_free(&self, region: Region, skip: Option<EnclaveId>) -> Result<(), SmError> {
        let skip_label = skip.map(|e| format!("enclave {e} memory"));
        for (r, label) in self.reserved_regions() {
            if Some(&label) == skip_label.as_ref() {
                continue;
            }
            if r.overlaps(&region) {
                return Err(SmError::Overlap { region, with: label });
            }
        }
        Ok(())
    }

    pub fn create(&mut self, machine: &mut Machine, hart: HartId, req: CreateRequest) -> Result<EnclaveId, SmError> {
        self.require_host(machine, hart, "create")?;
        if self.live_enclaves() >= MAX_ENCLAVES {
            return Err(SmError::NoFreePmpEntry);
        }
        check_region(machine, req.epm)?;
        check_region(machine, req.utm)?;
        if req.epm.overlaps(&req.utm) {
            return Err(SmError::Overlap { region: req.utm, with: "its own enclave memory".into() });
        }
        self.check_free(req.epm, None)?;
        self.check_free(req.utm, None)?;

        let scan = measure::validate(machine.memory(), req.epm, req.utm, req.pt_root)?;

        let eid = EnclaveId(self.next_id);
        let mut slots = self.slots.clone();
        let scratch = if req.use_scratchpad {
            let sp = self.scratchpad.ok_or(SmError::ScratchpadUnavailable)?;
            if slots.indices_of(SlotOwner::Scratchpad).is_empty() {
                return Err(SmError::ScratchpadUnavailable);
            }
            if req.epm.size > sp.size {
                return Err(SmError::ScratchpadTooSmall { need: req.epm.size, have: sp.size });
            }
            slots.transfer(SlotOwner::Scratchpad, SlotOwner::Epm(eid));
            Some(sp)
        } else {
            let enc = encode_region(req.epm.base, req.epm.size)?;
            slots.allocate(&enc, SlotOwner::Epm(eid)).ok_or(SmError::NoFreePmpEntry)?;
            None
        };
        let utm_enc = encode_region(req.utm.base, req.utm.size)?;
        slots.allocate(&utm_enc, SlotOwner::Utm(eid)).ok_or(SmError::NoFreePmpEntry)?;

        let measurement = measure::measure_scan(machine.memory(), &scan, req.entry_point, &req.config);
        let (epm, pt_root) = match scratch {
            Some(sp) => {
                let target = Region::new(sp.base, req.epm.size);
                let root = measure::relocate(machine.memory_mut(), &scan, req.epm, target, req.pt_root);
                (sp, root)
            }
            None => (req.epm, req.pt_root),
        };

        self.slots = slots;
        let mut changed = self.slots.indices_of(SlotOwner::Epm(eid));
        changed.extend(self.slots.indices_of(SlotOwner::Utm(eid)));
        self.broadcast(machine, hart, &changed);
        self.next_id += 1;
        self.enclaves.insert(
            eid,
            EnclaveDescriptor {
                id: eid,
                state: EnclaveState::Created,
                epm,
                utm: req.utm,
                pt_root,
                entry_point: req.entry_point,
                measurement,
                on_scratchpad: scratch.is_some(),
                last_stop: None,
                exit_value: None,
                budget: self.watchdog_budget,
                started: false,
                saved_context: req.entry_point.to_le_bytes().to_vec(),
                host_context: Vec::new(),
                notices: Vec::new(),
            },
        );
        machine.log(
            Some(hart),
            "create",
            &[
                ("eid", eid.to_string()),
                ("epm", epm.to_string()),
                ("utm", req.utm.to_string()),
                ("measurement", measurement.to_hex()),
            ],
        );
        Ok(eid)
    }

    fn switch_in(&mut self, machine: &mut Machine, hart: HartId, eid: EnclaveId) -> Result<(), SmError> {
        if self.running_on(hart).is_some() {
            return Err(SmError::HartBusy(hart));
        }
        self.install_view(machine, hart, View::Enclave(eid))?;
        let budget = self.watchdog_budget;
        let d = self.enclaves.get_mut(&eid).expect("caller checked");
        let h = machine.hart_mut(hart)?;
        d.host_context = std::mem::replace(&mut h.context, std::mem::take(&mut d.saved_context));
        h.domain = Domain::Enclave(eid);
        h.privilege = PrivMode::S;
        d.started = true;
        d.budget = budget;
        d.state = EnclaveState::Running(hart);
        self.running[hart] = Some(eid);
        if let Some(cache) = machine.cache_mut() {
            cache.switch_partition(Domain::Host, Domain::Enclave(eid));
        }
        Ok(())
    }

    fn switch_out(&mut self, machine: &mut Machine, hart: HartId, reason: StopReason) -> Result<EnclaveId, SmError> {
        let eid = self.running_on(hart).expect("caller checked");
        self.install_view(machine, hart, View::Host)?;
        let d = self.enclaves.get_mut(&eid).expect("running enclave exists");
        let h = machine.hart_mut(hart)?;
        d.saved_context = std::mem::replace(&mut h.context, std::mem::take(&mut d.host_context));
        h.domain = Domain::Host;
        h.privilege = PrivMode::S;
        d.state = EnclaveState::Stopped;
        d.last_stop = Some(reason);
        if let StopReason::Exit(v) = reason {
            d.exit_value = Some(v);
        }
        self.running[hart] = None;
        if let Some(cache) = machine.cache_mut() {
            cache.switch_partition(Domain::Enclave(eid), Domain::Host);
        }
        machine.log(Some(hart), "stop", &[("eid", eid.to_string()), ("reason", reason.to_string())]);
        Ok(eid)
    }

    /// First entry into a freshly created enclave.
    pub fn run(&mut self, machine: &mut Machine, hart: HartId, eid: EnclaveId) -> Result<(), SmError> {
        self.require_host(machine, hart, "run")?;
        let d = self.descriptor(eid)?;
        if d.state != EnclaveState::Created || d.started {
            return Err(SmError::WrongState { eid, state: d.state });
        }
        self.switch_in(machine, hart, eid)?;
        machine.log(Some(hart), "run", &[("eid", eid.to_string())]);
        Ok(())
    }

    pub fn resume(&mut self, machine: &mut Machine, hart: HartId, eid: EnclaveId) -> Result<(), SmError> {
        self.require_host(machine, hart, "resume")?;
        let d = self.descriptor(eid)?;
        if d.state != EnclaveState::Stopped || d.exit_value.is_some() {
            return Err(SmError::WrongState { eid, state: d.state });
        }
        self.switch_in(machine, hart, eid)?;
        machine.log(Some(hart), "resume", &[("eid", eid.to_string())]);
        Ok(())
    }

    /// Runtime-initiated stop.
    pub fn stop(&mut self, machine: &mut Machine, hart: HartId, reason: StopReason) -> Result<EnclaveId, SmError> {
        self.require_enclave(machine, hart, "stop")?;
        self.switch_out(machine, hart, reason)
    }

    /// Runtime-initiated exit. The enclave can be destroyed but not resumed.
    pub fn exit(&mut self, machine: &mut Machine, hart: HartId, value: u64) -> Result<EnclaveId, SmError> {
        self.require_enclave(machine, hart, "exit")?;
        self.switch_out(machine, hart, StopReason::Exit(value))
    }

    pub fn destroy(&mut self, machine: &mut Machine, hart: HartId, eid: EnclaveId) -> Result<(), SmError> {
        self.require_host(machine, hart, "destroy")?;
        let d = self.descriptor(eid)?;
        if !matches!(d.state, EnclaveState::Created | EnclaveState::Stopped) {
            return Err(SmError::WrongState { eid, state: d.state });
        }
        let (epm, on_scratchpad) = (d.epm, d.on_scratchpad);
        machine.memory_mut().fill(epm.base, epm.size, 0)?;
        let mut changed = if on_scratchpad {
            self.slots.transfer(SlotOwner::Epm(eid), SlotOwner::Scratchpad)
        } else {
            self.slots.release(SlotOwner::Epm(eid))
        };
        changed.extend(self.slots.release(SlotOwner::Utm(eid)));
        self.broadcast(machine, hart, &changed);
        let d = self.descriptor_mut(eid)?;
        d.state = EnclaveState::Destroyed;
        d.saved_context.clear();
        machine.log(Some(hart), "destroy", &[("eid", eid.to_string()), ("epm", epm.to_string())]);
        Ok(())
    }

    /// Grow a stopped enclave by a region directly above its memory. The
    /// new pages arrive zeroed; the measurement is unchanged.
    pub fn extend(
        &mut self,
        machine: &mut Machine,
        hart: HartId,
        eid: EnclaveId,
        added: Region,
    ) -> Result<Region, SmError> {
        self.require_host(machine, hart, "extend")?;
        let d = self.descriptor(eid)?;
        if !matches!(d.state, EnclaveState::Created | EnclaveState::Stopped) || d.exit_value.is_some() {
            return Err(SmError::WrongState { eid, state: d.state });
        }
        if d.on_scratchpad || added.base != d.epm.end() {
            return Err(SmError::NotAdjacent(added));
        }
        check_region(machine, added)?;
        self.check_free(added, None)?;
        let grown = Region::new(d.epm.base, d.epm.size + added.size);
        let enc = encode_region(grown.base, grown.size)?;
        let mut slots = self.slots.clone();
        let mut changed = slots.release(SlotOwner::Epm(eid));
        slots.allocate(&enc, SlotOwner::Epm(eid)).ok_or(SmError::NoFreePmpEntry)?;
        self.slots = slots;
        changed.extend(self.slots.indices_of(SlotOwner::Epm(eid)));
        changed.sort_unstable();
        changed.dedup();
        machine.memory_mut().fill(added.base, added.size, 0)?;
        self.broadcast(machine, hart, &changed);
        let d = self.descriptor_mut(eid)?;
        d.epm = grown;
        d.notices.push(Notice::Extended { added });
        machine.log(Some(hart), "extend", &[("eid", eid.to_string()), ("epm", grown.to_string())]);
        Ok(grown)
    }

    pub fn attest(&mut self, machine: &mut Machine, hart: HartId, data: &[u8]) -> Result<AttestationReport, SmError> {
        let eid = self.require_enclave(machine, hart, "attest")?;
        if data.len() > ATTEST_DATA_MAX {
            return Err(SmError::DataTooLarge(data.len()));
        }
        let measurement = self.descriptor(eid)?.measurement;
        let enclave = EnclaveReport::sign(&self.attest_key, measurement, data);
        machine.log(Some(hart), "attest", &[("eid", eid.to_string()), ("data_len", data.len().to_string())]);
        Ok(AttestationReport { enclave, sm: self.certificate, device_public: self.device_public })
    }

    pub fn random(&mut self, machine: &mut Machine, hart: HartId) -> Result<u64, SmError> {
        self.require_enclave(machine, hart, "random")?;
        Ok(self.rng.next_u64())
    }

    /// One enclave step elapsed on `hart`. Forces a stop when the budget
    /// runs out.
    pub fn watchdog_tick(&mut self, machine: &mut Machine, hart: HartId) -> Result<WatchdogVerdict, SmError> {
        let Some(eid) = self.running_on(hart) else {
            return Ok(WatchdogVerdict::Continue);
        };
        let d = self.enclaves.get_mut(&eid).expect("running enclave exists");
        d.budget = d.budget.saturating_sub(1);
        if d.budget > 0 {
            return Ok(WatchdogVerdict::Continue);
        }
        self.switch_out(machine, hart, StopReason::Watchdog)?;
        machine.log(Some(hart), "watchdog", &[("eid", eid.to_string())]);
        Ok(WatchdogVerdict::ForcedYield(eid))
    }

    /// Route a trap taken while `hart` executes an enclave. Faults go to the
    /// runtime; interrupts stop the enclave and go to the OS.
    pub fn delegate_trap(&mut self, machine: &mut Machine, hart: HartId, trap: Trap) -> Result<TrapRoute, SmError> {
        if self.running_on(hart).is_none() {
            return Ok(TrapRoute::Os);
        }
        match trap {
            Trap::PageFault { .. } | Trap::EappException(_) => Ok(TrapRoute::Runtime),
            Trap::ExternalInterrupt => {
                self.switch_out(machine, hart, StopReason::Interrupt)?;
                Ok(TrapRoute::Os)
            }
        }
    }

    pub fn sbi_call(&mut self, machine: &mut Machine, hart: HartId, call: SbiCall) -> Result<SbiReturn, SmError> {
        match call {
            SbiCall::Create(req) => self.create(machine, hart, req).map(SbiReturn::Created),
            SbiCall::Run(e) => self.run(machine, hart, e).map(|_| SbiReturn::Entered),
            SbiCall::Resume(e) => self.resume(machine, hart, e).map(|_| SbiReturn::Entered),
            SbiCall::Destroy(e) => self.destroy(machine, hart, e).map(|_| SbiReturn::Destroyed),
            SbiCall::Extend(e, r) => self.extend(machine, hart, e, r).map(SbiReturn::Extended),
            SbiCall::Stop(reason) => self.stop(machine, hart, reason).map(|_| SbiReturn::Stopped),
            SbiCall::Exit(v) => self.exit(machine, hart, v).map(|_| SbiReturn::Stopped),
            SbiCall::Attest(data) => self.attest(machine, hart, &data).map(|r| SbiReturn::Report(Box::new(r))),
            SbiCall::Random => self.random(machine, hart).map(SbiReturn::Random),
        }
    }

    /// Check the isolation invariants against the live PMP state of every
    /// hart. Returns a description of the first violation.
    pub fn check_invariants(&self, machine: &Machine) -> Result<(), String> {
        let mut regions = self.reserved_regions();
        for d in self.enclaves.values().filter(|d| d.state.is_live() && d.on_scratchpad) {
            regions.retain(|(r, _)| *r != d.epm);
            regions.push((d.epm, format!("enclave {} memory", d.id)));
        }
        for (i, (a, la)) in regions.iter().enumerate() {
            for (b, lb) in &regions[i + 1..] {
                if a.overlaps(b) {
                    return Err(format!("{la} {a} overlaps {lb} {b}"));
                }
            }
        }
        let check = |hart: HartId, addr: u64, kind: AccessKind| {
            machine.pmp_check(hart, PhysAddr(addr), 1, kind, PrivMode::S).map(|d| d == PmpDecision::Allow)
        };
        for h in machine.harts() {
            let id = h.id;
            let running = self.running_on(id);
            let expect_domain = running.map_or(Domain::Host, Domain::Enclave);
            if h.domain != expect_domain {
                return Err(format!("hart {id} domain {:?} but monitor expects {expect_domain:?}", h.domain));
            }
            if check(id, self.sm_region.base, AccessKind::Read).map_err(|e| e.to_string())? {
                return Err(format!("hart {id} can read the monitor"));
            }
            for d in self.enclaves.values().filter(|d| d.state.is_live()) {
                let own = running == Some(d.id);
                if own != (d.state == EnclaveState::Running(id)) {
                    return Err(format!("hart {id} and enclave {} disagree on state {}", d.id, d.state));
                }
                for probe in [d.epm.base, d.epm.end() - 1] {
                    let allowed = check(id, probe, AccessKind::Read).map_err(|e| e.to_string())?;
                    if allowed != own {
                        return Err(format!(
                            "hart {id} access to enclave {} memory at {probe:#x} is {allowed}, expected {own}",
                            d.id
                        ));
                    }
                }
                let utm_allowed = check(id, d.utm.base, AccessKind::Write).map_err(|e| e.to_string())?;
                let utm_expected = running.is_none() || own;
                if utm_allowed != utm_expected {
                    return Err(format!("hart {id} shared-buffer access to enclave {} is {utm_allowed}", d.id));
                }
            }
            let catch_all = h.pmp.entry(CATCH_ALL_SLOT).perms;
            let expect = if running.is_some() { PmpPerms::NONE } else { PmpPerms::RWX };
            if catch_all != expect {
                return Err(format!("hart {id} catch-all is {catch_all}, expected {expect}"));
            }
        }
        for d in self.enclaves.values() {
            if let EnclaveState::Running(h) = d.state {
                if self.running_on(h) != Some(d.id) {
                    return Err(format!("enclave {} claims hart {h}", d.id));
                }
            }
        }
        Ok(())
    }
}

/// Smallest page-aligned region holding `bytes`.
pub fn pages_for(bytes: u64) -> u64 {
    bytes.div_ceil(PAGE_SIZE).max(1)
}
