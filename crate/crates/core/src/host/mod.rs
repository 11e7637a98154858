//! The untrusted side of the platform and the glue that drives a whole
//! system: OS allocator and loader, host application, scripted eapp
//! actions, scenarios, the attack corpus and the remote client.

pub mod attack;
pub mod image;
pub mod os;
pub mod remote;
pub mod scenario;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::cache::{Cache, CacheConfig};
use crate::crypto::{Device, PublicKey};
use crate::edge::{syscall_request, EdgeClient, EdgeError, HostEdge, SYSCALL_FID};
use crate::machine::{EnclaveId, HartId, Machine, MachineError, PhysAddr, PrivMode, Region, PAGE_SIZE};
use crate::paging::{FatalKind, RtError, Runtime, RuntimeConfig};
use crate::sm::{
    AttestationReport, CreateRequest, EnclaveState, SecurityMonitor, SmConfig, SmError, StopReason, Trap,
    WatchdogVerdict, DEFAULT_WATCHDOG_BUDGET,
};

use image::EnclaveImage;
use os::{Os, OsError, PtTweak};

/// Exit value the runtime reports when it kills its eapp.
pub const FATAL_EXIT: u64 = u64::MAX;
/// Pages the host grants per extension request.
pub const EXTEND_CHUNK: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SystemError {
    #[error(transparent)]
    Sm(#[from] SmError),
    #[error(transparent)]
    Os(#[from] OsError),
    #[error(transparent)]
    Runtime(#[from] RtError),
    #[error(transparent)]
    Edge(#[from] EdgeError),
    #[error("machine: {0}")]
    Machine(String),
    #[error("enclave {0} is not running")]
    NotRunning(EnclaveId),
    #[error("hart {0} is executing an enclave")]
    HartInEnclave(HartId),
    #[error("no enclave {0}")]
    UnknownEnclave(EnclaveId),
    #[error("configuration: {0}")]
    Config(String),
}

impl From<MachineError> for SystemError {
    fn from(e: MachineError) -> Self {
        SystemError::Machine(e.to_string())
    }
}

impl SystemError {
    /// Short name for scenario expectations.
    pub fn kind(&self) -> String {
        match self {
            SystemError::Sm(e) => e.kind().to_string(),
            SystemError::Os(OsError::OutOfPhysicalMemory(_)) => "OutOfPhysicalMemory".into(),
            SystemError::Os(OsError::ImageTooLarge { .. }) => "ImageTooLarge".into(),
            SystemError::Os(_) => "Os".into(),
            SystemError::Runtime(e) => rt_kind(e),
            SystemError::Edge(e) => edge_kind(e),
            SystemError::Machine(m) if m.starts_with("access fault") => "Denied".into(),
            SystemError::Machine(_) => "Machine".into(),
            SystemError::NotRunning(_) => "NotRunning".into(),
            SystemError::HartInEnclave(_) => "HartInEnclave".into(),
            SystemError::UnknownEnclave(_) => "NoSuchEnclave".into(),
            SystemError::Config(_) => "Config".into(),
        }
    }
}

pub fn rt_kind(e: &RtError) -> String {
    match e {
        RtError::Fatal(FatalKind::Integrity(_)) => "IntegrityError".into(),
        RtError::Fatal(FatalKind::Segfault(_)) => "Segfault".into(),
        RtError::Fatal(FatalKind::StoreFull) => "StoreFull".into(),
        RtError::Fatal(FatalKind::NoVictim) => "NoVictim".into(),
        RtError::MapCorruption(_) => "MapCorruption".into(),
        RtError::OutOfMemory => "OutOfMemory".into(),
        RtError::BadArgument(_) => "BadArgument".into(),
        RtError::Sm(e) => e.kind().into(),
        other => format!("{other:?}").split(['(', ' ', '{']).next().unwrap_or("Runtime").to_string(),
    }
}

pub fn edge_kind(e: &EdgeError) -> String {
    match e {
        EdgeError::PayloadTooLarge { .. } => "PayloadTooLarge".into(),
        EdgeError::UnknownFunction(_) => "UnknownFunction".into(),
        EdgeError::HostError(_) => "HostError".into(),
        EdgeError::Busy => "Busy".into(),
        EdgeError::NoReply => "NoReply".into(),
        EdgeError::Malformed(_) => "Malformed".into(),
        EdgeError::Runtime(e) => rt_kind(e),
        EdgeError::Machine(_) => "Machine".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemConfig {
    pub memory_size: u64,
    pub harts: usize,
    pub seed: u64,
    pub device_id: u64,
    pub sm_size: u64,
    pub sm_image: Vec<u8>,
    pub runtime: RuntimeConfig,
    /// Ways reserved for the executing enclave.
    pub cache_partition: Option<usize>,
    /// Attach the cache model even without partitioning.
    pub cache: bool,
    /// Bytes of on-chip scratchpad at the top of the address space.
    pub scratchpad: Option<u64>,
    pub watchdog_budget: u64,
    pub trace: bool,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            memory_size: 8 << 20,
            harts: 4,
            seed: 0,
            device_id: 1,
            sm_size: 0x4_0000,
            sm_image: b"teesim security monitor".to_vec(),
            runtime: RuntimeConfig::default(),
            cache_partition: None,
            cache: false,
            scratchpad: None,
            watchdog_budget: DEFAULT_WATCHDOG_BUDGET,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CreateOptions {
    /// Enclave memory in pages; defaults to the image plus a little slack.
    pub epm_pages: Option<u64>,
    pub utm_pages: u64,
    pub use_scratchpad: bool,
    pub tweak: PtTweak,
}

impl CreateOptions {
    pub fn new(epm_pages: u64, utm_pages: u64) -> Self {
        CreateOptions { epm_pages: Some(epm_pages), utm_pages, ..Default::default() }
    }
}

/// Host-side bookkeeping for one enclave.
#[derive(Debug)]
pub struct EnclaveHost {
    pub image: EnclaveImage,
    /// The OS allocation the image was loaded into.
    pub epm_alloc: Region,
    pub utm: Region,
    pub runtime: Option<Runtime>,
    pub edge: EdgeClient,
    pub last_report: Option<AttestationReport>,
    pub fatal: Option<RtError>,
}

/// One scripted eapp step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    ReadV {
        vaddr: u64,
        len: usize,
    },
    WriteV {
        vaddr: u64,
        bytes: Vec<u8>,
    },
    Mmap(u64),
    Brk(i64),
    GetRandom,
    ReadCycle,
    Syscall {
        nr: u32,
        args: Vec<u8>,
    },
    EdgeCall {
        fid: u32,
        payload: Vec<u8>,
    },
    Attest(Vec<u8>),
    /// Busy-loop for this many steps.
    Spin(u64),
    Yield,
    Exit(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionResult {
    Done,
    Value(u64),
    Bytes(Vec<u8>),
    Report(Box<AttestationReport>),
    /// The runtime failed the request and the eapp continues.
    Failed(String),
    /// The runtime killed the eapp.
    Fatal(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub result: ActionResult,
    /// Steps consumed.
    pub steps: u64,
    /// The enclave left its hart during or after the action.
    pub stopped: Option<StopReason>,
}

pub struct System {
    pub machine: Machine,
    pub sm: SecurityMonitor,
    pub os: Os,
    pub host: HostEdge,
    pub config: SystemConfig,
    device_public: PublicKey,
    enclaves: BTreeMap<EnclaveId, EnclaveHost>,
}

impl std::fmt::Debug for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("System").field("config", &self.config).field("enclaves", &self.enclaves.len()).finish()
    }
}

impl System {
    pub fn new(config: SystemConfig) -> Result<Self, SystemError> {
        let mut machine = Machine::new(config.memory_size, config.harts)?;
        if config.trace {
            machine.enable_trace();
        }
        if config.cache || config.cache_partition.is_some() {
            let mut cache = Cache::new(CacheConfig::default()).map_err(|e| SystemError::Config(e.to_string()))?;
            if let Some(w) = config.cache_partition {
                cache.enable_partition(w).map_err(|e| SystemError::Config(e.to_string()))?;
            }
            machine.attach_cache(cache);
        }
        let device = Device::from_id(config.device_id);
        let sm_region = Region::new(0, config.sm_size);
        let scratchpad = config.scratchpad.map(|s| Region::new(config.memory_size - s, s));
        let sm_config = SmConfig {
            sm_region,
            sm_image: config.sm_image.clone(),
            seed: config.seed,
            watchdog_budget: config.watchdog_budget,
            scratchpad,
        };
        let sm = SecurityMonitor::boot(&mut machine, &device, sm_config)?;
        let mut reserved = vec![sm_region];
        reserved.extend(scratchpad);
        Ok(System {
            os: Os::new(config.memory_size, reserved),
            machine,
            sm,
            host: HostEdge::default(),
            device_public: device.public_key(),
            config,
            enclaves: BTreeMap::new(),
        })
    }

    pub fn device_public(&self) -> PublicKey {
        self.device_public
    }

    pub fn enclave(&self, eid: EnclaveId) -> Option<&EnclaveHost> {
        self.enclaves.get(&eid)
    }

    pub fn enclave_mut(&mut self, eid: EnclaveId) -> Option<&mut EnclaveHost> {
        self.enclaves.get_mut(&eid)
    }

    pub fn state(&self, eid: EnclaveId) -> Option<EnclaveState> {
        self.sm.enclave(eid).map(|d| d.state)
    }

    /// Hart currently executing `eid`.
    pub fn hart_of(&self, eid: EnclaveId) -> Option<HartId> {
        match self.state(eid)? {
            EnclaveState::Running(h) => Some(h),
            _ => None,
        }
    }

    /// A hart not executing any enclave.
    pub fn idle_hart(&self) -> Option<HartId> {
        (0..self.machine.hart_count()).find(|&h| self.sm.running_on(h).is_none())
    }

    fn host_hart(&self, hart: HartId) -> Result<(), SystemError> {
        if self.sm.running_on(hart).is_some() {
            return Err(SystemError::HartInEnclave(hart));
        }
        Ok(())
    }

    /// Allocate, load and create. Allocations are returned on failure.
    pub fn create_enclave(
        &mut self,
        hart: HartId,
        image: &EnclaveImage,
        opts: &CreateOptions,
    ) -> Result<EnclaveId, SystemError> {
        self.host_hart(hart)?;
        let epm_pages = opts.epm_pages.unwrap_or(os::pages_needed(image) + 8);
        // The shared buffer goes first so enclave memory can grow upward.
        let utm = self.os.alloc(opts.utm_pages.max(1))?;
        let epm = match self.os.alloc(epm_pages) {
            Ok(r) => r,
            Err(e) => {
                self.os.free(utm)?;
                return Err(e.into());
            }
        };
        let result = os::build_initial_pt(&mut self.machine, hart, image, epm, opts.tweak)
            .map_err(SystemError::from)
            .and_then(|root| {
                let req = CreateRequest {
                    epm,
                    utm,
                    pt_root: root,
                    entry_point: image.rt_entry,
                    config: image.measured_config(),
                    use_scratchpad: opts.use_scratchpad,
                };
                self.sm.create(&mut self.machine, hart, req).map_err(SystemError::from)
            });
        let eid = match result {
            Ok(eid) => eid,
            Err(e) => {
                self.os.free(epm)?;
                self.os.free(utm)?;
                return Err(e);
            }
        };
        self.machine.log(Some(hart), "host_create", &[("eid", eid.to_string()), ("alloc", epm.to_string())]);
        let epm_alloc = if opts.use_scratchpad {
            // The monitor moved the enclave on chip and cleared the staging copy.
            self.os.free(epm)?;
            Region::new(0, 0)
        } else {
            epm
        };
        self.enclaves.insert(
            eid,
            EnclaveHost {
                image: image.clone(),
                epm_alloc,
                utm,
                runtime: None,
                edge: EdgeClient::default(),
                last_report: None,
                fatal: None,
            },
        );
        Ok(eid)
    }

    /// First entry; boots the runtime.
    pub fn run(&mut self, eid: EnclaveId, hart: HartId) -> Result<(), SystemError> {
        self.sm.run(&mut self.machine, hart, eid)?;
        let cfg = self.config.runtime;
        let boot = Runtime::boot(&mut self.machine, &mut self.sm, hart, cfg);
        let entry = self.enclaves.get_mut(&eid).ok_or(SystemError::UnknownEnclave(eid))?;
        match boot {
            Ok(rt) => {
                entry.runtime = Some(rt);
                Ok(())
            }
            Err(e) => {
                entry.fatal = Some(e.clone());
                self.sm.exit(&mut self.machine, hart, FATAL_EXIT)?;
                Err(e.into())
            }
        }
    }

    pub fn resume(&mut self, eid: EnclaveId, hart: HartId) -> Result<(), SystemError> {
        self.sm.resume(&mut self.machine, hart, eid)?;
        let entry = self.enclaves.get_mut(&eid).ok_or(SystemError::UnknownEnclave(eid))?;
        if let Some(rt) = entry.runtime.as_mut() {
            rt.set_hart(hart);
            rt.on_resume(&mut self.machine, &mut self.sm)?;
        }
        Ok(())
    }

    pub fn destroy(&mut self, eid: EnclaveId, hart: HartId) -> Result<(), SystemError> {
        self.sm.destroy(&mut self.machine, hart, eid)?;
        if let Some(entry) = self.enclaves.get_mut(&eid) {
            entry.runtime = None;
            if !entry.epm_alloc.is_empty() {
                let epm = self.sm.enclave(eid).map_or(entry.epm_alloc, |d| d.epm);
                self.os.merge(epm);
                self.os.free(epm)?;
            }
            self.os.free(entry.utm)?;
        }
        Ok(())
    }

    pub fn interrupt(&mut self, hart: HartId) -> Result<(), SystemError> {
        self.sm.delegate_trap(&mut self.machine, hart, Trap::ExternalInterrupt)?;
        Ok(())
    }

    pub fn host_read(&mut self, hart: HartId, addr: u64, len: usize) -> Result<Vec<u8>, SystemError> {
        self.host_hart(hart)?;
        Ok(self.machine.read(hart, PrivMode::S, PhysAddr(addr), len)?)
    }

    pub fn host_write(&mut self, hart: HartId, addr: u64, data: &[u8]) -> Result<(), SystemError> {
        self.host_hart(hart)?;
        Ok(self.machine.write(hart, PrivMode::S, PhysAddr(addr), data)?)
    }

    /// Stop for an extension, let the OS try to grow the region, resume.
    fn extend_round_trip(&mut self, eid: EnclaveId, hart: HartId, pages: u64) -> Result<(), SystemError> {
        self.sm.stop(&mut self.machine, hart, StopReason::ExtendRequest(pages))?;
        let epm = self.sm.enclave(eid).expect("enclave exists").epm;
        let want = Region::pages(epm.end(), pages.max(EXTEND_CHUNK));
        let granted = match self.os.alloc_at(want) {
            Some(r) => match self.sm.extend(&mut self.machine, hart, eid, r) {
                Ok(grown) => {
                    self.os.merge(grown);
                    true
                }
                Err(_) => {
                    self.os.free(r)?;
                    false
                }
            },
            None => false,
        };
        self.resume(eid, hart)?;
        if !granted {
            self.machine.log(Some(hart), "extend_refused", &[("eid", eid.to_string())]);
            if let Some(rt) = self.enclaves.get_mut(&eid).and_then(|e| e.runtime.as_mut()) {
                rt.extension_refused();
            }
        }
        Ok(())
    }

    /// Run a runtime operation, serving extension requests in between.
    fn with_extend<T>(
        &mut self,
        eid: EnclaveId,
        hart: HartId,
        mut op: impl FnMut(&mut Runtime, &mut Machine, &mut SecurityMonitor) -> Result<T, RtError>,
    ) -> Result<T, SystemError> {
        loop {
            let entry = self.enclaves.get_mut(&eid).ok_or(SystemError::UnknownEnclave(eid))?;
            let rt = entry.runtime.as_mut().ok_or(SystemError::NotRunning(eid))?;
            match op(rt, &mut self.machine, &mut self.sm) {
                Err(RtError::NeedExtend(n)) => self.extend_round_trip(eid, hart, n)?,
                other => return Ok(other?),
            }
        }
    }

    /// Copy the arguments into the shared buffer and mark the call pending.
    pub fn edge_begin(&mut self, eid: EnclaveId, fid: u32, payload: &[u8]) -> Result<(), SystemError> {
        let entry = self.enclaves.get_mut(&eid).ok_or(SystemError::UnknownEnclave(eid))?;
        let rt = entry.runtime.as_ref().ok_or(SystemError::NotRunning(eid))?;
        entry.edge.begin(rt, &mut self.machine, fid, payload)?;
        Ok(())
    }

    /// Copy the reply out and scrub the shared buffer.
    pub fn edge_finish(&mut self, eid: EnclaveId) -> Result<Vec<u8>, SystemError> {
        let entry = self.enclaves.get_mut(&eid).ok_or(SystemError::UnknownEnclave(eid))?;
        let rt = entry.runtime.as_ref().ok_or(SystemError::NotRunning(eid))?;
        Ok(entry.edge.finish(rt, &mut self.machine)?)
    }

    /// Copy in, stop, let the host serve, resume, copy out.
    pub fn edge_call(&mut self, eid: EnclaveId, fid: u32, payload: &[u8]) -> Result<Vec<u8>, SystemError> {
        let hart = self.hart_of(eid).ok_or(SystemError::NotRunning(eid))?;
        self.edge_begin(eid, fid, payload)?;
        let entry = &self.enclaves[&eid];
        let payload_end = entry.runtime.as_ref().expect("checked by edge_begin").edge_payload().1;
        let utm = entry.utm;
        self.sm.stop(&mut self.machine, hart, StopReason::EdgeCall)?;
        self.host.serve(&mut self.machine, hart, utm, payload_end)?;
        self.resume(eid, hart)?;
        self.edge_finish(eid)
    }

    fn run_action(&mut self, eid: EnclaveId, hart: HartId, action: &Action) -> Result<ActionResult, SystemError> {
        Ok(match action {
            Action::ReadV { vaddr, len } => {
                let (v, n) = (*vaddr, *len);
                ActionResult::Bytes(self.with_extend(eid, hart, |rt, m, sm| rt.eapp_read(m, sm, v, n))?)
            }
            Action::WriteV { vaddr, bytes } => {
                let v = *vaddr;
                self.with_extend(eid, hart, |rt, m, sm| rt.eapp_write(m, sm, v, bytes))?;
                ActionResult::Done
            }
            Action::Mmap(len) => ActionResult::Value(self.with_extend(eid, hart, |rt, m, _| rt.mmap(m, *len))?),
            Action::Brk(delta) => ActionResult::Value(self.with_extend(eid, hart, |rt, m, _| rt.sbrk(m, *delta))?),
            Action::GetRandom => ActionResult::Value(self.with_extend(eid, hart, |rt, m, sm| rt.getrandom(m, sm))?),
            Action::ReadCycle => ActionResult::Value(self.machine.hart(hart)?.cycles()),
            Action::Syscall { nr, args } => {
                ActionResult::Bytes(self.edge_call(eid, SYSCALL_FID, &syscall_request(*nr, args))?)
            }
            Action::EdgeCall { fid, payload } => ActionResult::Bytes(self.edge_call(eid, *fid, payload)?),
            Action::Attest(data) => {
                let report = self.sm.attest(&mut self.machine, hart, data)?;
                self.enclaves.get_mut(&eid).expect("exists").last_report = Some(report.clone());
                ActionResult::Report(Box::new(report))
            }
            Action::Spin(_) => ActionResult::Done,
            Action::Yield => {
                self.sm.stop(&mut self.machine, hart, StopReason::Yield)?;
                ActionResult::Done
            }
            Action::Exit(code) => {
                self.sm.exit(&mut self.machine, hart, *code)?;
                ActionResult::Value(*code)
            }
        })
    }

    /// Execute one eapp action on the hart running `eid`. Each step is
    /// charged to the hart and to the enclave's watchdog budget.
    pub fn eapp(&mut self, eid: EnclaveId, action: &Action) -> Result<Outcome, SystemError> {
        let hart = self.hart_of(eid).ok_or(SystemError::NotRunning(eid))?;
        if let Action::Spin(n) = action {
            let mut steps = 0;
            while steps < *n {
                self.machine.tick(hart)?;
                steps += 1;
                if let WatchdogVerdict::ForcedYield(_) = self.sm.watchdog_tick(&mut self.machine, hart)? {
                    return Ok(Outcome { result: ActionResult::Done, steps, stopped: Some(StopReason::Watchdog) });
                }
            }
            return Ok(Outcome { result: ActionResult::Done, steps, stopped: None });
        }
        let result = match self.run_action(eid, hart, action) {
            Ok(r) => r,
            Err(SystemError::Runtime(e)) if e.is_fatal() => {
                let kind = rt_kind(&e);
                self.machine.log(Some(hart), "rt_fatal", &[("eid", eid.to_string()), ("kind", kind.clone())]);
                self.enclaves.get_mut(&eid).expect("exists").fatal = Some(e);
                if self.hart_of(eid) == Some(hart) {
                    self.sm.exit(&mut self.machine, hart, FATAL_EXIT)?;
                }
                ActionResult::Fatal(kind)
            }
            Err(e @ (SystemError::Runtime(_) | SystemError::Edge(_))) => ActionResult::Failed(e.kind()),
            Err(e) => return Err(e),
        };
        self.machine.tick(hart)?;
        let mut stopped = None;
        if self.hart_of(eid) == Some(hart) {
            if let WatchdogVerdict::ForcedYield(_) = self.sm.watchdog_tick(&mut self.machine, hart)? {
                stopped = Some(StopReason::Watchdog);
            }
        } else {
            stopped = self.sm.enclave(eid).and_then(|d| d.last_stop);
        }
        Ok(Outcome { result, steps: 1, stopped })
    }

    /// Run the runtime's table audit for a running enclave.
    pub fn audit_runtime(&mut self, eid: EnclaveId) -> Result<(), String> {
        let entry = self.enclaves.get(&eid).ok_or("no such enclave")?;
        let rt = entry.runtime.as_ref().ok_or("runtime not booted")?;
        rt.audit(&mut self.machine)
    }

    /// Eapp-visible memory of a running enclave.
    pub fn eapp_memory(&mut self, eid: EnclaveId) -> Result<BTreeMap<u64, Vec<u8>>, SystemError> {
        let entry = self.enclaves.get(&eid).ok_or(SystemError::UnknownEnclave(eid))?;
        let rt = entry.runtime.as_ref().ok_or(SystemError::NotRunning(eid))?;
        Ok(rt.eapp_memory(&mut self.machine)?)
    }

    /// Convenience: create with default options and run on an idle hart.
    pub fn launch(&mut self, image: &EnclaveImage, utm_pages: u64) -> Result<(EnclaveId, HartId), SystemError> {
        let hart = self.idle_hart().ok_or(SystemError::Config("no idle hart".into()))?;
        let opts = CreateOptions { utm_pages, ..Default::default() };
        let eid = self.create_enclave(hart, image, &opts)?;
        self.run(eid, hart)?;
        Ok((eid, hart))
    }
}

/// Utm pages needed for an edge area of `edge_bytes` plus `slots` store slots.
pub fn utm_pages_for(edge_bytes: u64, slots: usize) -> u64 {
    let store = slots as u64 * crate::crypto::SealedPage::LEN as u64;
    (crate::paging::EDGE_HEADER_LEN + edge_bytes + store).div_ceil(PAGE_SIZE)
}
