//! The attacker harness. Each [`AttackKind`] uses only what a malicious OS,
//! host application or physical attacker on untrusted memory can do, and
//! runs against a freshly randomized victim. A success means the attacker
//! read enclave plaintext or changed enclave results without detection.

use std::fmt;

use crate::cache::Outcome as CacheOutcome;
use crate::crypto::{KeyPair, Rng, SealedPage};
use crate::edge::{EdgeHeader, Status, FID_WORDCOUNT};
use crate::machine::{Domain, EnclaveId, HartId, Machine, MachineError, PhysAddr, PrivMode, Region, PAGE_SIZE};
use crate::paging::pte::{self, Pte, PteSource, PTE_R, PTE_U, PTE_V, PTE_W};
use crate::paging::{RuntimeConfig, EAPP_BASE};
use crate::sm::{
    verify_report, AttestationReport, CreateRequest, EnclaveReport, Expectations, SbiCall, StopReason, Trap,
};

use super::image::EnclaveImage;
use super::os::PtTweak;
use super::{utm_pages_for, Action, ActionResult, CreateOptions, System, SystemConfig, SystemError};

/// Every attack in the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttackKind {
    /// Host load from enclave memory while the enclave runs elsewhere.
    HostReadRunning,
    /// Host load from enclave memory while the enclave is stopped.
    HostReadStopped,
    /// Host store into enclave memory.
    HostWriteEpm,
    HostReadSm,
    HostWriteSm,
    /// Host load from a fresh enclave on another hart right after create.
    HostReadAfterCreate,
    /// Host page table mapping a user page onto enclave memory.
    MapForeign,
    /// Create with enclave memory overlapping another enclave or the monitor.
    OverlapCreate,
    /// Initial page table with a leaf outside the enclave.
    PtMapOutside,
    /// Initial page table mapping one physical page twice.
    PtDuplicate,
    /// Load a modified image and hope the verifier accepts it.
    TamperImage,
    /// Answer a fresh challenge with an old report.
    ReplayReport,
    /// Alter a report and re-sign what the attacker can.
    ForgeReport,
    /// Flip a byte of an evicted page in the backing store.
    TamperStore,
    /// Read the backing store looking for plaintext.
    SnoopStore,
    /// Answer an edge call with a header pointing outside the payload area.
    TamperEdgeHeader,
    /// Never answer an edge call.
    DropEdgeReply,
    /// A malicious runtime loads host memory.
    EnclaveReadsHost,
    /// A malicious runtime loads another enclave's memory.
    CrossEnclave,
    /// Read enclave memory after destroy.
    ReadAfterDestroy,
    /// Enclave-only monitor calls issued from a host hart.
    SbiMisuse,
}

impl AttackKind {
    pub const ALL: [AttackKind; 21] = [
        AttackKind::HostReadRunning,
        AttackKind::HostReadStopped,
        AttackKind::HostWriteEpm,
        AttackKind::HostReadSm,
        AttackKind::HostWriteSm,
        AttackKind::HostReadAfterCreate,
        AttackKind::MapForeign,
        AttackKind::OverlapCreate,
        AttackKind::PtMapOutside,
        AttackKind::PtDuplicate,
        AttackKind::TamperImage,
        AttackKind::ReplayReport,
        AttackKind::ForgeReport,
        AttackKind::TamperStore,
        AttackKind::SnoopStore,
        AttackKind::TamperEdgeHeader,
        AttackKind::DropEdgeReply,
        AttackKind::EnclaveReadsHost,
        AttackKind::CrossEnclave,
        AttackKind::ReadAfterDestroy,
        AttackKind::SbiMisuse,
    ];

    /// Lowercase name used in scenarios.
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::HostReadRunning => "hostread-running",
            AttackKind::HostReadStopped => "hostread-stopped",
            AttackKind::HostWriteEpm => "hostwrite-epm",
            AttackKind::HostReadSm => "hostread-sm",
            AttackKind::HostWriteSm => "hostwrite-sm",
            AttackKind::HostReadAfterCreate => "hostread-after-create",
            AttackKind::MapForeign => "mapforeign",
            AttackKind::OverlapCreate => "overlap-create",
            AttackKind::PtMapOutside => "pt-map-outside",
            AttackKind::PtDuplicate => "pt-duplicate",
            AttackKind::TamperImage => "tamper-image",
            AttackKind::ReplayReport => "replay-report",
            AttackKind::ForgeReport => "forge-report",
            AttackKind::TamperStore => "tamper-store",
            AttackKind::SnoopStore => "snoop-store",
            AttackKind::TamperEdgeHeader => "tamper-edge-header",
            AttackKind::DropEdgeReply => "drop-edge-reply",
            AttackKind::EnclaveReadsHost => "enclave-reads-host",
            AttackKind::CrossEnclave => "cross-enclave",
            AttackKind::ReadAfterDestroy => "read-after-destroy",
            AttackKind::SbiMisuse => "sbi-misuse",
        }
    }

    pub fn from_name(name: &str) -> Option<AttackKind> {
        AttackKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Tally for one kind. `denied` counts PMP faults, `detected` counts
/// rejections by a software check (monitor, runtime, verifier).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttackReport {
    pub attempts: u64,
    pub denied: u64,
    pub detected: u64,
    pub successes: u64,
    /// PMP denials with no matching audit entry.
    pub unlogged: u64,
}

impl AttackReport {
    pub fn merge(&mut self, other: &AttackReport) {
        self.attempts += other.attempts;
        self.denied += other.denied;
        self.detected += other.detected;
        self.successes += other.successes;
        self.unlogged += other.unlogged;
    }
}

impl fmt::Display for AttackReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "attempts={} denied={} detected={} successes={} unlogged={}",
            self.attempts, self.denied, self.detected, self.successes, self.unlogged
        )
    }
}

/// A randomized victim: one running enclave with secrets spread over more
/// pages than its paging limit, so some live in the backing store.
pub struct Victim {
    pub sys: System,
    pub eid: EnclaveId,
    pub hart: HartId,
    /// A hart running nothing.
    pub attacker: HartId,
    pub image: EnclaveImage,
    /// Virtual address and content of each secret.
    pub secrets: Vec<(u64, Vec<u8>)>,
    pub rng: Rng,
}

pub const SECRET_PAGES: u64 = 6;
pub const STORE_SLOTS: usize = 16;

impl Victim {
    pub fn new(seed: u64) -> Result<Victim, SystemError> {
        let mut rng = Rng::new(seed ^ 0xA77A_C4E5);
        let runtime = RuntimeConfig {
            paging_limit: Some(3 + rng.below(3) as usize),
            encrypt: true,
            dyn_resize: false,
            store_slots: STORE_SLOTS,
        };
        let mut sys = System::new(SystemConfig { seed, runtime, ..Default::default() })?;
        // Shift the physical layout around between scenarios.
        let pad = rng.below(6);
        if pad > 0 {
            sys.os.alloc(pad)?;
        }
        let image = EnclaveImage::generate(rng.next_u64(), 2 + rng.below(3), b"victim");
        let hart = rng.below(sys.machine.hart_count() as u64) as HartId;
        let opts = CreateOptions {
            epm_pages: Some(super::os::pages_needed(&image) + 16 + rng.below(8)),
            utm_pages: victim_utm_pages(),
            ..Default::default()
        };
        let eid = sys.create_enclave(hart, &image, &opts)?;
        sys.run(eid, hart)?;
        let attacker = (0..sys.machine.hart_count()).find(|&h| h != hart).expect("at least two harts");

        let ActionResult::Value(base) = sys.eapp(eid, &Action::Mmap(SECRET_PAGES * PAGE_SIZE))?.result else {
            return Err(SystemError::Config("victim mmap failed".into()));
        };
        let mut secrets = Vec::new();
        for i in 0..SECRET_PAGES {
            let mut secret = vec![0u8; 32];
            rng.fill_bytes(&mut secret);
            let va = base + i * PAGE_SIZE + rng.below(PAGE_SIZE / 64) * 32;
            match sys.eapp(eid, &Action::WriteV { vaddr: va, bytes: secret.clone() })?.result {
                ActionResult::Done => secrets.push((va, secret)),
                other => return Err(SystemError::Config(format!("victim write failed: {other:?}"))),
            }
        }
        Ok(Victim { sys, eid, hart, attacker, image, secrets, rng })
    }

    pub fn epm(&self) -> Region {
        self.sys.sm.enclave(self.eid).expect("victim exists").epm
    }

    pub fn utm(&self) -> Region {
        self.sys.sm.enclave(self.eid).expect("victim exists").utm
    }

    /// Whether `bytes` contains any 16-byte window of any secret.
    pub fn leaks(&self, bytes: &[u8]) -> bool {
        self.secrets.iter().any(|(_, s)| s.windows(16).any(|w| bytes.windows(16).any(|b| b == w)))
    }

    fn random_addr(&mut self, r: Region) -> u64 {
        r.base + self.rng.below(r.size / 8) * 8
    }

    fn access_faults(&self) -> usize {
        self.sys.machine.audit().events("access_fault").count()
    }

    /// Run one physical access attempt and classify it.
    fn probe(&mut self, report: &mut AttackReport, f: impl FnOnce(&mut System) -> Result<Vec<u8>, SystemError>) {
        report.attempts += 1;
        let before = self.access_faults();
        match f(&mut self.sys) {
            Ok(_) => report.successes += 1,
            Err(SystemError::Machine(_)) | Err(SystemError::Sm(_)) if self.access_faults() > before => {
                report.denied += 1
            }
            Err(e) if e.kind() == "Denied" => {
                report.denied += 1;
                report.unlogged += 1;
            }
            Err(_) => report.detected += 1,
        }
    }

    fn verifier(&self, challenge: &[u8]) -> Expectations {
        Expectations {
            sm_measurement: Some(self.sys.sm.sm_measurement()),
            enclave_measurement: Some(self.sys.sm.enclave(self.eid).expect("victim exists").measurement),
            data_prefix: Some(challenge.to_vec()),
        }
    }

    fn attest(&mut self, challenge: &[u8]) -> Result<AttestationReport, SystemError> {
        match self.sys.eapp(self.eid, &Action::Attest(challenge.to_vec()))?.result {
            ActionResult::Report(r) => Ok(*r),
            other => Err(SystemError::Config(format!("attest failed: {other:?}"))),
        }
    }

    fn challenge(&mut self) -> Vec<u8> {
        let mut c = vec![0u8; 16];
        self.rng.fill_bytes(&mut c);
        c
    }
}

fn read_via(
    machine: &mut Machine,
    hart: HartId,
    privilege: PrivMode,
    addr: u64,
    len: usize,
) -> Result<Vec<u8>, SystemError> {
    Ok(machine.read(hart, privilege, PhysAddr(addr), len)?)
}

/// Host page-table walker reading through the attacker hart.
struct HostTables<'a> {
    machine: &'a mut Machine,
    hart: HartId,
}

impl PteSource for HostTables<'_> {
    type Error = MachineError;

    fn read_pte(&mut self, addr: u64) -> Result<u64, MachineError> {
        let b = self.machine.read(self.hart, PrivMode::S, PhysAddr(addr), 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

const ATTEMPTS: u64 = 8;

/// Run `kind` once against a victim derived from `seed`.
pub fn run_attack(kind: AttackKind, seed: u64) -> Result<AttackReport, SystemError> {
    let mut v = Victim::new(seed)?;
    let mut r = AttackReport::default();
    let attacker = v.attacker;
    match kind {
        AttackKind::HostReadRunning => {
            for _ in 0..ATTEMPTS {
                let addr = v.random_addr(v.epm());
                v.probe(&mut r, |s| s.host_read(attacker, addr, 8));
            }
        }
        AttackKind::HostReadStopped => {
            v.sys.interrupt(v.hart)?;
            for i in 0..ATTEMPTS {
                let addr = v.random_addr(v.epm());
                // Alternate between the hart the victim just left and another one.
                let h = if i % 2 == 0 { v.hart } else { attacker };
                v.probe(&mut r, |s| s.host_read(h, addr, 8));
            }
            v.sys.resume(v.eid, v.hart)?;
        }
        AttackKind::HostWriteEpm => {
            let before = v.sys.eapp_memory(v.eid)?;
            for _ in 0..ATTEMPTS {
                let addr = v.random_addr(v.epm());
                let byte = v.rng.below(256) as u8;
                v.probe(&mut r, |s| s.host_write(attacker, addr, &[byte ^ 0x5A]).map(|_| Vec::new()));
            }
            if v.sys.eapp_memory(v.eid)? != before {
                r.successes += 1;
            }
        }
        AttackKind::HostReadSm | AttackKind::HostWriteSm => {
            let sm = v.sys.sm.sm_region();
            for _ in 0..ATTEMPTS {
                let addr = v.random_addr(sm);
                if kind == AttackKind::HostReadSm {
                    v.probe(&mut r, |s| s.host_read(attacker, addr, 8));
                } else {
                    v.probe(&mut r, |s| s.host_write(attacker, addr, &[0xFF; 8]).map(|_| Vec::new()));
                }
            }
        }
        AttackKind::HostReadAfterCreate => {
            let creator = (0..v.sys.machine.hart_count()).find(|&h| h != v.hart && h != attacker).unwrap_or(attacker);
            let image = EnclaveImage::generate(v.rng.next_u64(), 2, b"second");
            let eid = v.sys.create_enclave(creator, &image, &CreateOptions::new(24, victim_utm_pages()))?;
            let epm = v.sys.sm.enclave(eid).expect("just created").epm;
            for _ in 0..ATTEMPTS {
                let addr = v.random_addr(epm);
                v.probe(&mut r, |s| s.host_read(attacker, addr, 8));
            }
        }
        AttackKind::MapForeign => {
            let tables = v.sys.os.alloc(3)?;
            let root = tables.base;
            let target_page = pte::page_floor(v.random_addr(v.epm()));
            let sm_page = pte::page_floor(v.random_addr(v.sys.sm.sm_region()));
            let va = 0x1000_0000u64;
            let l1 = tables.base + PAGE_SIZE;
            let l0 = tables.base + 2 * PAGE_SIZE;
            let w = |s: &mut System, at: u64, val: u64| s.host_write(attacker, at, &val.to_le_bytes());
            w(&mut v.sys, root + pte::vpn(va, 2) * 8, Pte::table(l1).0)?;
            w(&mut v.sys, l1 + pte::vpn(va, 1) * 8, Pte::table(l0).0)?;
            w(&mut v.sys, l0 + pte::vpn(va, 0) * 8, Pte::new(target_page, PTE_V | PTE_R | PTE_W | PTE_U).0)?;
            w(&mut v.sys, l0 + pte::vpn(va + PAGE_SIZE, 0) * 8, Pte::new(sm_page, PTE_V | PTE_R | PTE_U).0)?;
            for i in 0..ATTEMPTS {
                let vaddr = va + (i % 2) * PAGE_SIZE + v.rng.below(PAGE_SIZE / 8) * 8;
                let leaf = pte::walk(&mut HostTables { machine: &mut v.sys.machine, hart: attacker }, root, vaddr)
                    .map_err(|e| SystemError::Machine(format!("{e:?}")))?
                    .expect("mapped above");
                let paddr = leaf.pte.target() + (vaddr & (PAGE_SIZE - 1));
                v.probe(&mut r, |s| read_via(&mut s.machine, attacker, PrivMode::U, paddr, 8));
            }
        }
        AttackKind::OverlapCreate => {
            let image = EnclaveImage::generate(v.rng.next_u64(), 2, b"");
            for i in 0..ATTEMPTS {
                let target = if i % 3 == 2 { v.sys.sm.sm_region() } else { v.epm() };
                let base = pte::page_floor(v.random_addr(target));
                let epm = Region::pages(base, super::os::pages_needed(&image) + 4);
                let utm = v.sys.os.alloc(1)?;
                r.attempts += 1;
                let req = CreateRequest {
                    epm,
                    utm,
                    pt_root: epm.base,
                    entry_point: image.rt_entry,
                    config: image.measured_config(),
                    use_scratchpad: false,
                };
                match v.sys.sm.create(&mut v.sys.machine, attacker, req) {
                    Ok(_) => r.successes += 1,
                    Err(_) => r.detected += 1,
                }
                v.sys.os.free(utm)?;
            }
        }
        AttackKind::PtMapOutside | AttackKind::PtDuplicate => {
            for i in 0..ATTEMPTS {
                let image = EnclaveImage::generate(v.rng.next_u64(), 2, b"");
                let tweak = if kind == AttackKind::PtDuplicate {
                    PtTweak::Duplicate { vaddr: EAPP_BASE + (64 + i) * PAGE_SIZE }
                } else {
                    let paddr = match i % 3 {
                        0 => pte::page_floor(v.random_addr(v.epm())),
                        1 => pte::page_floor(v.random_addr(v.sys.sm.sm_region())),
                        _ => v.sys.os.alloc(1)?.base,
                    };
                    PtTweak::MapOutside { vaddr: EAPP_BASE + (64 + i) * PAGE_SIZE, paddr }
                };
                let opts =
                    CreateOptions { epm_pages: Some(24), utm_pages: victim_utm_pages(), use_scratchpad: false, tweak };
                r.attempts += 1;
                match v.sys.create_enclave(attacker, &image, &opts) {
                    Ok(eid) => {
                        r.successes += 1;
                        v.sys.destroy(eid, attacker)?;
                    }
                    Err(_) => r.detected += 1,
                }
            }
        }
        AttackKind::TamperImage => {
            // The verifier knows the genuine image's measurement from the victim.
            let challenge = v.challenge();
            let expect = v.verifier(&challenge);
            let mut image = v.image.clone();
            let seg = v.rng.below(image.segments.len() as u64) as usize;
            let at = v.rng.below(image.segments[seg].data.len() as u64) as usize;
            image.segments[seg].data[at] ^= 1 << v.rng.below(8);
            v.sys.interrupt(v.hart)?;
            r.attempts += 1;
            let opts = CreateOptions { utm_pages: victim_utm_pages(), ..Default::default() };
            match v.sys.create_enclave(v.hart, &image, &opts) {
                Ok(eid) => {
                    v.sys.run(eid, v.hart)?;
                    let report = match v.sys.eapp(eid, &Action::Attest(challenge))?.result {
                        ActionResult::Report(rep) => *rep,
                        other => return Err(SystemError::Config(format!("attest failed: {other:?}"))),
                    };
                    match verify_report(&report, &v.sys.device_public(), &expect) {
                        Ok(()) => r.successes += 1,
                        Err(_) => r.detected += 1,
                    }
                }
                Err(_) => r.detected += 1,
            }
        }
        AttackKind::ReplayReport => {
            let old = v.challenge();
            let report = v.attest(&old)?;
            for _ in 0..ATTEMPTS {
                let fresh = v.challenge();
                r.attempts += 1;
                match verify_report(&report, &v.sys.device_public(), &v.verifier(&fresh)) {
                    Ok(()) => r.successes += 1,
                    Err(_) => r.detected += 1,
                }
            }
        }
        AttackKind::ForgeReport => {
            let challenge = v.challenge();
            let genuine = v.attest(b"attacker-chosen")?;
            let expect = v.verifier(&challenge);
            let device = v.sys.device_public();
            let mut seed = [0u8; 32];
            v.rng.fill_bytes(&mut seed);
            let own = KeyPair::from_seed(seed);
            for i in 0..ATTEMPTS {
                let mut forged = genuine.clone();
                match i % 4 {
                    // Swap in the wanted data, keep the old signature.
                    0 => {
                        let sig = forged.enclave.signature;
                        forged.enclave = EnclaveReport::sign(&own, forged.enclave.measurement, &challenge);
                        forged.enclave.signature = sig;
                    }
                    // Sign with the attacker's own key.
                    1 => forged.enclave = EnclaveReport::sign(&own, forged.enclave.measurement, &challenge),
                    // Also claim the attacker's key is the monitor's.
                    2 => {
                        forged.enclave = EnclaveReport::sign(&own, forged.enclave.measurement, &challenge);
                        forged.sm.sm_public = own.public();
                    }
                    // And present the attacker's key as the device.
                    _ => {
                        forged.enclave = EnclaveReport::sign(&own, forged.enclave.measurement, &challenge);
                        forged.sm.sm_public = own.public();
                        forged.sm.device_signature = own.sign(&crate::crypto::BootCertificate::signed_bytes(
                            &forged.sm.sm_measurement,
                            &forged.sm.sm_public,
                        ));
                        forged.device_public = own.public();
                    }
                }
                r.attempts += 1;
                match verify_report(&forged, &device, &expect) {
                    Ok(()) => r.successes += 1,
                    Err(_) => r.detected += 1,
                }
            }
        }
        AttackKind::TamperStore => {
            let in_use = v.sys.enclave(v.eid).and_then(|e| e.runtime.as_ref()).map(|rt| rt.store_slots_in_use());
            let Some(&(va, slot)) = in_use.as_deref().and_then(|s| s.first()) else {
                return Err(SystemError::Config("no evicted page".into()));
            };
            let addr = v.sys.enclave(v.eid).and_then(|e| e.runtime.as_ref()).expect("booted").store_slot_addr(slot);
            let at = addr + v.rng.below(SealedPage::LEN as u64);
            let old = v.sys.host_read(attacker, at, 1)?[0];
            v.sys.host_write(attacker, at, &[old ^ (1 << v.rng.below(8))])?;
            r.attempts += 1;
            match v.sys.eapp(v.eid, &Action::ReadV { vaddr: va, len: 8 })?.result {
                ActionResult::Fatal(kind) if kind == "IntegrityError" => r.detected += 1,
                _ => r.successes += 1,
            }
        }
        AttackKind::SnoopStore => {
            let utm = v.utm();
            for _ in 0..ATTEMPTS {
                r.attempts += 1;
                let bytes = v.sys.host_read(attacker, utm.base, utm.size as usize)?;
                if v.leaks(&bytes) {
                    r.successes += 1;
                } else {
                    r.detected += 1;
                }
                // Touch another secret so the store contents change.
                let i = v.rng.below(v.secrets.len() as u64) as usize;
                let va = v.secrets[i].0;
                v.sys.eapp(v.eid, &Action::ReadV { vaddr: va, len: 8 })?;
            }
        }
        AttackKind::TamperEdgeHeader => {
            for _ in 0..ATTEMPTS {
                r.attempts += 1;
                let rt = v.sys.enclave(v.eid).and_then(|e| e.runtime.as_ref()).expect("booted");
                let (start, end) = rt.edge_payload();
                v.sys.edge_begin(v.eid, FID_WORDCOUNT, b"one two")?;
                v.sys.sm.stop(&mut v.sys.machine, v.hart, StopReason::EdgeCall)?;
                // Point the reply into the backing store or past the buffer.
                let ret_off = if v.rng.below(2) == 0 { end } else { start };
                let ret_len = (end - start) as u32 + 1 + v.rng.below(PAGE_SIZE) as u32;
                let header = EdgeHeader {
                    fid: FID_WORDCOUNT,
                    status: Status::Done,
                    args_off: start as u32,
                    args_len: 7,
                    ret_off: ret_off as u32,
                    ret_len,
                    error_code: 0,
                };
                let utm = v.utm();
                v.sys.host_write(v.hart, utm.base, &header.to_bytes())?;
                v.sys.resume(v.eid, v.hart)?;
                match v.sys.edge_finish(v.eid) {
                    Ok(bytes) if !v.leaks(&bytes) && bytes.len() < ret_len as usize => r.detected += 1,
                    Ok(_) => r.successes += 1,
                    Err(_) => r.detected += 1,
                }
            }
        }
        AttackKind::DropEdgeReply => {
            for _ in 0..ATTEMPTS {
                r.attempts += 1;
                v.sys.host.drop_next_reply = true;
                let call = Action::EdgeCall { fid: FID_WORDCOUNT, payload: b"a b c".to_vec() };
                match v.sys.eapp(v.eid, &call)?.result {
                    ActionResult::Failed(kind) if kind == "NoReply" => r.detected += 1,
                    _ => r.successes += 1,
                }
            }
        }
        AttackKind::EnclaveReadsHost => {
            let host_page = v.sys.os.alloc(1)?;
            v.sys.host_write(attacker, host_page.base, b"host secret")?;
            let h = v.hart;
            for i in 0..ATTEMPTS {
                let addr = v.random_addr(host_page);
                let p = if i % 2 == 0 { PrivMode::S } else { PrivMode::U };
                v.probe(&mut r, |s| read_via(&mut s.machine, h, p, addr, 8));
            }
        }
        AttackKind::CrossEnclave => {
            let image = EnclaveImage::generate(v.rng.next_u64(), 2, b"neighbour");
            let other = v.sys.create_enclave(attacker, &image, &CreateOptions::new(24, victim_utm_pages()))?;
            v.sys.run(other, attacker)?;
            let other_epm = v.sys.sm.enclave(other).expect("just created").epm;
            let victim_epm = v.epm();
            for i in 0..ATTEMPTS {
                // Each enclave's runtime tries the other's memory.
                let (h, target) = if i % 2 == 0 { (v.hart, other_epm) } else { (attacker, victim_epm) };
                let addr = v.random_addr(target);
                v.probe(&mut r, |s| read_via(&mut s.machine, h, PrivMode::S, addr, 8));
            }
        }
        AttackKind::ReadAfterDestroy => {
            let epm = v.epm();
            v.sys.eapp(v.eid, &Action::Exit(0))?;
            v.sys.destroy(v.eid, attacker)?;
            r.attempts += 1;
            let bytes = v.sys.host_read(attacker, epm.base, epm.size as usize)?;
            if bytes.iter().any(|&b| b != 0) {
                r.successes += 1;
            } else {
                r.detected += 1;
            }
        }
        AttackKind::SbiMisuse => {
            let calls = [
                SbiCall::Attest(b"host".to_vec()),
                SbiCall::Random,
                SbiCall::Stop(StopReason::Yield),
                SbiCall::Exit(0),
                SbiCall::Run(v.eid),
                SbiCall::Resume(v.eid),
                SbiCall::Destroy(v.eid),
            ];
            for call in calls {
                r.attempts += 1;
                match v.sys.sm.sbi_call(&mut v.sys.machine, attacker, call) {
                    Ok(_) => r.successes += 1,
                    Err(_) => r.detected += 1,
                }
            }
            // A trap routed while the hart runs no enclave goes to the OS.
            v.sys.sm.delegate_trap(&mut v.sys.machine, attacker, Trap::ExternalInterrupt)?;
        }
    }
    v.sys.sm.check_invariants(&v.sys.machine).map_err(SystemError::Config)?;
    Ok(r)
}

/// Per-kind totals over many randomized scenarios.
#[derive(Debug, Clone, Default)]
pub struct CorpusReport {
    pub scenarios: usize,
    pub per_kind: Vec<(AttackKind, AttackReport)>,
}

impl CorpusReport {
    pub fn total(&self) -> AttackReport {
        let mut t = AttackReport::default();
        for (_, r) in &self.per_kind {
            t.merge(r);
        }
        t
    }
}

/// Every kind against `scenarios` victims seeded from `seed`.
pub fn run_corpus(scenarios: usize, seed: u64) -> Result<CorpusReport, SystemError> {
    let mut per_kind: Vec<(AttackKind, AttackReport)> =
        AttackKind::ALL.iter().map(|&k| (k, AttackReport::default())).collect();
    let mut rng = Rng::new(seed);
    for _ in 0..scenarios {
        let s = rng.next_u64();
        for (kind, total) in &mut per_kind {
            total.merge(&run_attack(*kind, s)?);
        }
    }
    Ok(CorpusReport { scenarios, per_kind })
}

/// A host prime+probe run around one enclave access trace. The host fills
/// every way of every set with its own lines, the enclave touches `trace`
/// (byte offsets into its eapp data pages), then the host re-reads its
/// lines. Returns the host's probe outcomes.
pub fn prime_probe(partition: Option<usize>, probe: &[u64], trace: &[u64]) -> Result<Vec<CacheOutcome>, SystemError> {
    let config = SystemConfig { cache: true, cache_partition: partition, ..Default::default() };
    let mut sys = System::new(config)?;
    let image = EnclaveImage::generate(0xCAC4E, 8, b"probe");
    let (eid, hart) = sys.launch(&image, 2)?;
    let attacker = (0..sys.machine.hart_count()).find(|&h| h != hart).expect("two harts");
    let cache_cfg = sys.machine.cache().expect("attached").config();
    let host_buf = sys.os.alloc(cache_cfg.sets as u64 * cache_cfg.ways as u64 * crate::cache::LINE_SIZE / PAGE_SIZE)?;
    let line = |off: u64| host_buf.base + (off % (host_buf.size / crate::cache::LINE_SIZE)) * crate::cache::LINE_SIZE;

    for &p in probe {
        sys.host_read(attacker, line(p), 1)?;
    }
    let data_base = EAPP_BASE + PAGE_SIZE;
    for &t in trace {
        sys.eapp(eid, &Action::ReadV { vaddr: data_base + t % (6 * PAGE_SIZE), len: 1 })?;
    }
    sys.machine.cache_mut().expect("attached").clear_observations();
    for &p in probe {
        sys.host_read(attacker, line(p), 1)?;
    }
    Ok(sys.machine.cache().expect("attached").observe(Domain::Host))
}

/// The shipped prime+probe script: one line per (set, way) of host memory.
pub fn full_prime_script() -> Vec<u64> {
    let c = crate::cache::CacheConfig::default();
    (0..(c.sets * c.ways) as u64).collect()
}

/// Victim trace that hammers a single cache set.
pub fn set_hammer_trace(set: u64) -> Vec<u64> {
    let c = crate::cache::CacheConfig::default();
    (0..c.ways as u64).map(|i| (set + i * c.sets as u64) * crate::cache::LINE_SIZE).collect()
}

/// Shared-buffer pages every enclave in a victim system gets.
pub fn victim_utm_pages() -> u64 {
    utm_pages_for(PAGE_SIZE, STORE_SLOTS)
}
