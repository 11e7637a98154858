//! Line-oriented scenario scripts. The whole file is parsed before anything
//! runs, so a malformed line never leaves a half-executed system behind.
//! Each command sets the "last result" that the following `expect` lines
//! judge.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::crypto::Measurement;
use crate::edge::{FID_FETCH, FID_SEND, FID_WORDCOUNT, SYS_CLOSE, SYS_OPEN, SYS_READ, SYS_WRITE};
use crate::machine::{AuditLog, EnclaveId, HartId, PAGE_SIZE};
use crate::paging::RuntimeConfig;
use crate::sm::{verify_report, AttestationReport, EnclaveState, Expectations, Invalid, StopReason};

use super::attack::{run_attack, run_corpus, AttackKind, AttackReport};
use super::image::EnclaveImage;
use super::os::PtTweak;
use super::remote::{remote_wordcount, RemoteClient};
use super::{utm_pages_for, Action, ActionResult, CreateOptions, Outcome, System, SystemConfig, SystemError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Io(String),
}

/// Command-line settings that win over the script's `boot` line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paging_limit: Option<usize>,
    pub encrypt: bool,
    pub cache_partition: Option<usize>,
    pub scratchpad: Option<u64>,
    pub dyn_resize: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub line: usize,
    pub expect: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug)]
pub struct ScenarioResult {
    pub audit: AuditLog,
    pub verdicts: Vec<Verdict>,
    pub final_state: Vec<(EnclaveId, String)>,
    /// One line per executed command.
    pub transcript: Vec<String>,
    /// The system as the script left it.
    pub system: Option<System>,
}

impl ScenarioResult {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }
}

/// An address operand, resolved once the system exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Addr {
    Abs(u64),
    Epm(u32, u64),
    Utm(u32, u64),
    Sm(u64),
    Scratchpad(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ImageSource {
    Gen { seed: u64, pages: u64, config: Vec<u8> },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Expect {
    Ok,
    Error(String),
    Denied,
    Allowed,
    Value(u64),
    Bytes(Vec<u8>),
    Zero,
    State(u32, String),
    Fatal(String),
    Failed(String),
    Stopped(String),
    Steps(u64),
    Valid,
    Invalid(String),
    Successes(u64),
    Reply(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Command {
    Machine { mem: u64, harts: usize },
    Boot(BootOpts),
    Image { name: String, source: ImageSource },
    File { path: String, contents: Vec<u8> },
    Create { image: String, epm: Option<u64>, utm: u64, hart: Option<HartId>, scratchpad: bool, tweak: TweakSpec },
    Run { eid: u32, hart: Option<HartId> },
    Resume { eid: u32, hart: Option<HartId> },
    Destroy { eid: u32, hart: Option<HartId> },
    Interrupt { eid: u32 },
    Eapp { eid: u32, action: Action },
    HostRead { addr: Addr, len: usize, hart: Option<HartId> },
    HostWrite { addr: Addr, bytes: Vec<u8>, hart: Option<HartId> },
    Attack { kind: AttackKind, seed: u64 },
    Corpus { scenarios: usize, seed: u64 },
    ReportSave(PathBuf),
    ReportLoad(PathBuf),
    ReportVerify { enclave: Option<u32>, measurement: Option<Measurement> },
    Remote { eid: u32, request: Vec<u8>, seed: u64 },
    Audit,
    Expect(Expect),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TweakSpec {
    None,
    Outside { vaddr: u64, paddr: Addr },
    Duplicate { vaddr: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
struct BootOpts {
    seed: Option<u64>,
    device: Option<u64>,
    budget: Option<u64>,
    scratchpad: Option<u64>,
    partition: Option<usize>,
    cache: bool,
    paging: Option<usize>,
    encrypt: bool,
    dyn_resize: bool,
    store: Option<usize>,
    trace: bool,
}

/// Split a line into tokens; double quotes group, `#` starts a comment.
fn tokenize(line: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_quote = false;
    let mut quoted = false;
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        match c {
            '"' => {
                in_quote = !in_quote;
                quoted = true;
            }
            '\\' if in_quote => cur.push(chars.next().ok_or("dangling escape")?),
            '#' if !in_quote => break,
            c if c.is_whitespace() && !in_quote => {
                if !cur.is_empty() || quoted {
                    out.push(std::mem::take(&mut cur));
                    quoted = false;
                }
            }
            c => cur.push(c),
        }
    }
    if in_quote {
        return Err("unterminated quote".into());
    }
    if !cur.is_empty() || quoted {
        out.push(cur);
    }
    Ok(out)
}

fn num(s: &str) -> Result<u64, String> {
    let s = s.replace('_', "");
    let r = match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|_| format!("bad number `{s}`"))
}

/// `16p` pages, `4K`, `1M`, or plain bytes.
fn size(s: &str) -> Result<u64, String> {
    let (n, mul) = match s.chars().last() {
        Some('p') => (&s[..s.len() - 1], PAGE_SIZE),
        Some('K') | Some('k') => (&s[..s.len() - 1], 1 << 10),
        Some('M') | Some('m') => (&s[..s.len() - 1], 1 << 20),
        _ => (s, 1),
    };
    Ok(num(n)? * mul)
}

fn pages(s: &str) -> Result<u64, String> {
    let bytes = size(s)?;
    if s.ends_with('p') {
        Ok(bytes / PAGE_SIZE)
    } else {
        Ok(bytes.div_ceil(PAGE_SIZE))
    }
}

fn addr(s: &str) -> Result<Addr, String> {
    let (head, off) = match s.split_once('+') {
        Some((h, o)) => (h, num(o)?),
        None => (s, 0),
    };
    if let Some(e) = head.strip_prefix("epm:") {
        return Ok(Addr::Epm(num(e)? as u32, off));
    }
    if let Some(e) = head.strip_prefix("utm:") {
        return Ok(Addr::Utm(num(e)? as u32, off));
    }
    match head {
        "sm" => Ok(Addr::Sm(off)),
        "sp" => Ok(Addr::Scratchpad(off)),
        _ => Ok(Addr::Abs(num(head)? + off)),
    }
}

/// Byte operands: `0xAB 0xCD`, `hex:abcd`, or any other text taken literally.
fn bytes(tokens: &[String]) -> Result<Vec<u8>, String> {
    if tokens.len() == 1 {
        if let Some(h) = tokens[0].strip_prefix("hex:") {
            return hex::decode(h).map_err(|e| format!("bad hex: {e}"));
        }
    }
    if !tokens.is_empty() && tokens.iter().all(|t| t.starts_with("0x") && t.len() <= 4) {
        return tokens.iter().map(|t| num(t).map(|v| v as u8)).collect();
    }
    Ok(tokens.join(" ").into_bytes())
}

struct Args<'a> {
    positional: Vec<&'a str>,
    keyed: BTreeMap<&'a str, &'a str>,
    flags: Vec<&'a str>,
}

fn split_args(tokens: &[String]) -> Args<'_> {
    let mut a = Args { positional: Vec::new(), keyed: BTreeMap::new(), flags: Vec::new() };
    for t in tokens {
        match t.split_once('=') {
            Some((k, v)) if !k.is_empty() && !k.contains(':') => {
                a.keyed.insert(k, v);
            }
            _ if t.chars().all(|c| c.is_ascii_lowercase() || c == '-') && !t.is_empty() => a.flags.push(t),
            _ => a.positional.push(t),
        }
    }
    a
}

impl Args<'_> {
    fn get<T>(&self, k: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, String> {
        self.keyed.get(k).map(|v| f(v)).transpose()
    }

    fn check(&self, keys: &[&str], flags: &[&str]) -> Result<(), String> {
        if let Some(k) = self.keyed.keys().find(|k| !keys.contains(k)) {
            return Err(format!("unknown option `{k}`"));
        }
        if let Some(f) = self.flags.iter().find(|f| !flags.contains(f)) {
            return Err(format!("unknown flag `{f}`"));
        }
        Ok(())
    }
}

fn eid(s: Option<&String>) -> Result<u32, String> {
    let s = s.ok_or("missing enclave id")?;
    Ok(num(s)? as u32)
}

fn hart_opt(tokens: &[String]) -> Result<(Vec<String>, Option<HartId>), String> {
    let mut rest = Vec::new();
    let mut hart = None;
    for t in tokens {
        match t.strip_prefix("hart=") {
            Some(h) => hart = Some(num(h)? as HartId),
            None => rest.push(t.clone()),
        }
    }
    Ok((rest, hart))
}

fn parse_eapp(t: &[String]) -> Result<Action, String> {
    let op = t.first().ok_or("missing eapp operation")?.as_str();
    let arg = |i: usize| t.get(i).map(String::as_str).ok_or_else(|| format!("`{op}` needs more operands"));
    Ok(match op {
        "readv" => {
            Action::ReadV { vaddr: num(arg(1)?)?, len: t.get(2).map(|s| num(s)).transpose()?.unwrap_or(1) as usize }
        }
        "writev" => Action::WriteV { vaddr: num(arg(1)?)?, bytes: bytes(&t[2..])? },
        "mmap" => Action::Mmap(size(arg(1)?)?),
        "brk" => Action::Brk(arg(1)?.parse::<i64>().map_err(|_| "bad brk delta".to_string())?),
        "getrandom" => Action::GetRandom,
        "cycle" => Action::ReadCycle,
        "yield" => Action::Yield,
        "exit" => Action::Exit(t.get(1).map(|s| num(s)).transpose()?.unwrap_or(0)),
        "spin" => Action::Spin(if arg(1)? == "forever" { u64::MAX } else { num(arg(1)?)? }),
        "attest" => Action::Attest(bytes(&t[1..])?),
        "syscall" => {
            let (nr, args) = match arg(1)? {
                "open" => (SYS_OPEN, arg(2)?.as_bytes().to_vec()),
                "close" => (SYS_CLOSE, (num(arg(2)?)? as u32).to_le_bytes().to_vec()),
                "read" => {
                    let mut a = (num(arg(2)?)? as u32).to_le_bytes().to_vec();
                    a.extend_from_slice(&(num(arg(3)?)? as u32).to_le_bytes());
                    (SYS_READ, a)
                }
                "write" => {
                    let mut a = (num(arg(2)?)? as u32).to_le_bytes().to_vec();
                    a.extend_from_slice(&bytes(&t[3..])?);
                    (SYS_WRITE, a)
                }
                other => return Err(format!("unknown syscall `{other}`")),
            };
            Action::Syscall { nr, args }
        }
        "edge" => {
            let fid = match arg(1)? {
                "wordcount" => FID_WORDCOUNT,
                "fetch" => FID_FETCH,
                "send" => FID_SEND,
                n => num(n)? as u32,
            };
            Action::EdgeCall { fid, payload: bytes(&t[2..])? }
        }
        other => return Err(format!("unknown eapp operation `{other}`")),
    })
}

fn parse_expect(t: &[String]) -> Result<Expect, String> {
    let what = t.first().ok_or("empty expect")?.as_str();
    let arg = |i: usize| t.get(i).cloned().ok_or_else(|| format!("`expect {what}` needs an operand"));
    Ok(match what {
        "ok" => Expect::Ok,
        "error" => Expect::Error(arg(1)?),
        "denied" => Expect::Denied,
        "allowed" => Expect::Allowed,
        "value" => Expect::Value(num(&arg(1)?)?),
        "bytes" => Expect::Bytes(bytes(&t[1..])?),
        "text" | "reply" => {
            let b = t[1..].join(" ").into_bytes();
            if what == "text" {
                Expect::Bytes(b)
            } else {
                Expect::Reply(b)
            }
        }
        "zero" => Expect::Zero,
        "state" => Expect::State(num(&arg(1)?)? as u32, arg(2)?.to_lowercase()),
        "fatal" => Expect::Fatal(arg(1)?),
        "failed" => Expect::Failed(arg(1)?),
        "stopped" => Expect::Stopped(arg(1)?.to_lowercase()),
        "steps" => Expect::Steps(num(&arg(1)?)?),
        "valid" => Expect::Valid,
        "invalid" => Expect::Invalid(arg(1)?.to_lowercase()),
        "successes" => Expect::Successes(num(&arg(1)?)?),
        other => return Err(format!("unknown expectation `{other}`")),
    })
}

fn parse_line(tokens: &[String], base: &Path) -> Result<Command, String> {
    let cmd = tokens[0].as_str();
    let rest = &tokens[1..];
    Ok(match cmd {
        "machine" => {
            let a = split_args(rest);
            a.check(&["mem", "harts"], &[])?;
            Command::Machine {
                mem: a.get("mem", size)?.unwrap_or(8 << 20),
                harts: a.get("harts", num)?.unwrap_or(4) as usize,
            }
        }
        "boot" => {
            let a = split_args(rest);
            a.check(
                &["seed", "device", "budget", "scratchpad", "partition", "paging", "store"],
                &["cache", "encrypt", "dyn-resize", "trace"],
            )?;
            Command::Boot(BootOpts {
                seed: a.get("seed", num)?,
                device: a.get("device", num)?,
                budget: a.get("budget", num)?,
                scratchpad: a.get("scratchpad", size)?,
                partition: a.get("partition", num)?.map(|v| v as usize),
                cache: a.flags.contains(&"cache"),
                paging: a.get("paging", num)?.map(|v| v as usize),
                encrypt: a.flags.contains(&"encrypt"),
                dyn_resize: a.flags.contains(&"dyn-resize"),
                store: a.get("store", num)?.map(|v| v as usize),
                trace: a.flags.contains(&"trace"),
            })
        }
        "image" => {
            let name = rest.first().ok_or("image needs a name")?.clone();
            let a = split_args(&rest[1..]);
            let source = if let Some(f) = a.keyed.get("file") {
                a.check(&["file"], &[])?;
                ImageSource::File(base.join(f))
            } else if a.flags.first() == Some(&"gen") {
                a.check(&["seed", "pages", "config"], &["gen"])?;
                ImageSource::Gen {
                    seed: a.get("seed", num)?.unwrap_or(0),
                    pages: a.get("pages", num)?.unwrap_or(2),
                    config: a.keyed.get("config").map(|c| c.as_bytes().to_vec()).unwrap_or_default(),
                }
            } else {
                return Err("image needs `gen` or `file=PATH`".into());
            };
            Command::Image { name, source }
        }
        "file" => {
            Command::File { path: rest.first().ok_or("file needs a path")?.clone(), contents: bytes(&rest[1..])? }
        }
        "create" => {
            let a = split_args(rest);
            a.check(&["image", "epm", "utm", "hart", "tweak"], &["scratchpad"])?;
            let tweak = match a.keyed.get("tweak") {
                None => TweakSpec::None,
                Some(t) => {
                    let parts: Vec<&str> = t.split(':').collect();
                    match parts.as_slice() {
                        ["dup", va] => TweakSpec::Duplicate { vaddr: num(va)? },
                        ["outside", va, pa @ ..] if !pa.is_empty() => {
                            TweakSpec::Outside { vaddr: num(va)?, paddr: addr(&pa.join(":"))? }
                        }
                        _ => return Err(format!("bad tweak `{t}`")),
                    }
                }
            };
            Command::Create {
                image: a.keyed.get("image").ok_or("create needs image=")?.to_string(),
                epm: a.get("epm", pages)?,
                utm: a.get("utm", pages)?.unwrap_or(2),
                hart: a.get("hart", num)?.map(|h| h as HartId),
                scratchpad: a.flags.contains(&"scratchpad"),
                tweak,
            }
        }
        "run" | "resume" | "destroy" => {
            let (rest, hart) = hart_opt(rest)?;
            let eid = eid(rest.first())?;
            match cmd {
                "run" => Command::Run { eid, hart },
                "resume" => Command::Resume { eid, hart },
                _ => Command::Destroy { eid, hart },
            }
        }
        "interrupt" => Command::Interrupt { eid: eid(rest.first())? },
        "eapp" => Command::Eapp { eid: eid(rest.first())?, action: parse_eapp(&rest[1..])? },
        "host" => {
            let (rest, hart) = hart_opt(rest)?;
            match rest.first().map(String::as_str) {
                Some("read") => Command::HostRead {
                    addr: addr(rest.get(1).ok_or("host read needs an address")?)?,
                    len: rest.get(2).map(|s| size(s)).transpose()?.unwrap_or(8) as usize,
                    hart,
                },
                Some("write") => Command::HostWrite {
                    addr: addr(rest.get(1).ok_or("host write needs an address")?)?,
                    bytes: bytes(&rest[2..])?,
                    hart,
                },
                _ => return Err("host needs `read` or `write`".into()),
            }
        }
        "attack" => {
            let (rest, hart) = hart_opt(rest)?;
            let kind = rest.first().ok_or("attack needs a kind")?.as_str();
            let a = split_args(&rest[1..]);
            match kind {
                "hostread" => {
                    Command::HostRead { addr: addr(rest.get(1).ok_or("hostread needs an address")?)?, len: 8, hart }
                }
                "hostwrite" => Command::HostWrite {
                    addr: addr(rest.get(1).ok_or("hostwrite needs an address")?)?,
                    bytes: bytes(&rest[2..])?,
                    hart,
                },
                "corpus" => {
                    a.check(&["scenarios", "seed"], &[])?;
                    Command::Corpus {
                        scenarios: a.get("scenarios", num)?.unwrap_or(1) as usize,
                        seed: a.get("seed", num)?.unwrap_or(0),
                    }
                }
                k => {
                    a.check(&["seed"], &[])?;
                    Command::Attack {
                        kind: AttackKind::from_name(k).ok_or_else(|| format!("unknown attack `{k}`"))?,
                        seed: a.get("seed", num)?.unwrap_or(0),
                    }
                }
            }
        }
        "report" => match rest.first().map(String::as_str) {
            Some("save") => Command::ReportSave(base.join(rest.get(1).ok_or("report save needs a path")?)),
            Some("load") => Command::ReportLoad(base.join(rest.get(1).ok_or("report load needs a path")?)),
            Some("verify") => {
                let a = split_args(&rest[1..]);
                a.check(&["enclave", "measurement"], &[])?;
                Command::ReportVerify {
                    enclave: a.get("enclave", num)?.map(|e| e as u32),
                    measurement: a
                        .get("measurement", |h| Measurement::from_hex(h).ok_or(format!("bad measurement `{h}`")))?,
                }
            }
            _ => return Err("report needs `save`, `load` or `verify`".into()),
        },
        "remote" => {
            if rest.first().map(String::as_str) != Some("wordcount") {
                return Err("remote supports `wordcount` only".into());
            }
            let (rest, _) = hart_opt(&rest[1..])?;
            let a = split_args(&rest);
            Command::Remote {
                eid: eid(rest.first())?,
                request: a.positional.iter().skip(1).copied().collect::<Vec<_>>().join(" ").into_bytes(),
                seed: a.get("seed", num)?.unwrap_or(1),
            }
        }
        "audit" => Command::Audit,
        "expect" => Command::Expect(parse_expect(rest)?),
        other => return Err(format!("unknown command `{other}`")),
    })
}

/// Parse a whole script. `base` resolves relative file paths.
fn parse(text: &str, base: &Path) -> Result<Vec<(usize, Command)>, ScenarioError> {
    let mut out = Vec::new();
    let mut booted = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| ScenarioError::Parse { line, msg };
        let tokens = tokenize(raw).map_err(err)?;
        if tokens.is_empty() {
            continue;
        }
        let cmd = parse_line(&tokens, base).map_err(err)?;
        match &cmd {
            Command::Machine { .. } if booted => return Err(err("`machine` must come before `boot`".into())),
            Command::Boot(_) if booted => return Err(err("second `boot`".into())),
            Command::Boot(_) => booted = true,
            Command::Machine { .. } | Command::Image { .. } | Command::Expect(_) | Command::File { .. } => {}
            Command::Attack { .. } | Command::Corpus { .. } | Command::ReportLoad(_) => {}
            _ if !booted => return Err(err("command before `boot`".into())),
            _ => {}
        }
        out.push((line, cmd));
    }
    Ok(out)
}

/// Check a script without running it.
pub fn check(text: &str) -> Result<(), ScenarioError> {
    parse(text, Path::new(".")).map(|_| ())
}

#[derive(Debug, Clone)]
enum Last {
    Nothing,
    Ok,
    Err { kind: String, denied: bool },
    Value(u64),
    Bytes(Vec<u8>),
    Outcome(Outcome),
    Verify(Result<(), Invalid>),
    Attack(AttackReport),
    Reply(Vec<u8>),
}

impl fmt::Display for Last {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Last::Nothing => f.write_str("nothing"),
            Last::Ok => f.write_str("ok"),
            Last::Err { kind, .. } => write!(f, "error {kind}"),
            Last::Value(v) => write!(f, "value {v:#x}"),
            Last::Bytes(b) => write!(f, "bytes {}", hex::encode(b)),
            Last::Outcome(o) => {
                let r = match &o.result {
                    ActionResult::Done => "done".to_string(),
                    ActionResult::Value(v) => format!("value {v:#x}"),
                    ActionResult::Bytes(b) => format!("bytes {}", hex::encode(b)),
                    ActionResult::Report(r) => format!("report {}", r.enclave.measurement.to_hex()),
                    ActionResult::Failed(k) => format!("failed {k}"),
                    ActionResult::Fatal(k) => format!("fatal {k}"),
                };
                write!(f, "{r} steps={}", o.steps)?;
                if let Some(s) = o.stopped {
                    write!(f, " stopped={s}")?;
                }
                Ok(())
            }
            Last::Verify(Ok(())) => f.write_str("valid"),
            Last::Verify(Err(e)) => write!(f, "invalid {}", invalid_name(e)),
            Last::Attack(r) => write!(f, "{r}"),
            Last::Reply(b) => write!(f, "reply {}", String::from_utf8_lossy(b)),
        }
    }
}

pub fn invalid_name(e: &Invalid) -> &'static str {
    match e {
        Invalid::Chain => "chain",
        Invalid::EnclaveSignature => "signature",
        Invalid::SmMeasurement => "sm-measurement",
        Invalid::Measurement => "measurement",
        Invalid::Data => "data",
    }
}

fn stop_name(s: StopReason) -> &'static str {
    match s {
        StopReason::Yield => "yield",
        StopReason::EdgeCall => "edge",
        StopReason::ExtendRequest(_) => "extend",
        StopReason::Interrupt => "interrupt",
        StopReason::Watchdog => "watchdog",
        StopReason::Exit(_) => "exit",
    }
}

fn state_name(sys: &System, eid: EnclaveId) -> String {
    let Some(d) = sys.sm.enclave(eid) else {
        return "unknown".into();
    };
    match d.state {
        EnclaveState::Stopped if d.exit_value.is_some() => "exited".into(),
        s => format!("{s:?}").split('(').next().unwrap_or_default().to_lowercase(),
    }
}

struct Runner {
    base_config: SystemConfig,
    overrides: Overrides,
    sys: Option<System>,
    images: BTreeMap<String, EnclaveImage>,
    pending_files: Vec<(String, Vec<u8>)>,
    report: Option<AttestationReport>,
    last: Last,
    verdicts: Vec<Verdict>,
    transcript: Vec<String>,
}

fn err_last(e: &SystemError) -> Last {
    Last::Err { kind: e.kind(), denied: e.kind() == "Denied" }
}

impl Runner {
    fn sys(&mut self) -> &mut System {
        self.sys.as_mut().expect("parse guarantees boot came first")
    }

    fn resolve(&mut self, a: Addr) -> Result<u64, String> {
        let sys = self.sys();
        let enclave = |e: u32| sys.sm.enclave(EnclaveId(e)).ok_or(format!("no enclave {e}"));
        Ok(match a {
            Addr::Abs(v) => v,
            Addr::Epm(e, off) => enclave(e)?.epm.base + off,
            Addr::Utm(e, off) => enclave(e)?.utm.base + off,
            Addr::Sm(off) => sys.sm.sm_region().base + off,
            Addr::Scratchpad(off) => sys.sm.scratchpad().ok_or("no scratchpad")?.base + off,
        })
    }

    fn host_hart(&mut self, hart: Option<HartId>) -> HartId {
        hart.or_else(|| self.sys().idle_hart()).unwrap_or(0)
    }

    fn image(&mut self, name: &str) -> Result<EnclaveImage, String> {
        if let Some(img) = self.images.get(name) {
            return Ok(img.clone());
        }
        let bytes = std::fs::read(name).map_err(|e| format!("{name}: {e}"))?;
        EnclaveImage::from_bytes(&bytes).map_err(|e| format!("{name}: {e}"))
    }

    fn boot(&mut self, opts: &BootOpts) -> Result<(), SystemError> {
        let o = &self.overrides;
        let mut cfg = self.base_config.clone();
        cfg.seed = o.seed.or(opts.seed).unwrap_or(0);
        cfg.device_id = opts.device.unwrap_or(cfg.device_id);
        cfg.watchdog_budget = opts.budget.unwrap_or(cfg.watchdog_budget);
        cfg.scratchpad = o.scratchpad.or(opts.scratchpad);
        cfg.cache_partition = o.cache_partition.or(opts.partition);
        cfg.cache = opts.cache;
        cfg.trace = opts.trace;
        let paging_limit = o.paging_limit.or(opts.paging);
        let encrypt = o.encrypt || opts.encrypt;
        cfg.runtime = RuntimeConfig {
            paging_limit,
            encrypt,
            dyn_resize: o.dyn_resize || opts.dyn_resize,
            store_slots: opts.store.unwrap_or(if paging_limit.is_some() { 16 } else { 0 }),
        };
        let mut sys = System::new(cfg)?;
        for (path, contents) in self.pending_files.drain(..) {
            sys.host.fs.put(&path, &contents);
        }
        self.sys = Some(sys);
        Ok(())
    }

    fn exec(&mut self, cmd: &Command) -> Result<Last, String> {
        let sys_result = |r: Result<(), SystemError>| match r {
            Ok(()) => Last::Ok,
            Err(e) => err_last(&e),
        };
        Ok(match cmd {
            Command::Machine { mem, harts } => {
                self.base_config.memory_size = *mem;
                self.base_config.harts = *harts;
                Last::Ok
            }
            Command::Boot(opts) => sys_result(self.boot(opts)),
            Command::Image { name, source } => {
                let img = match source {
                    ImageSource::Gen { seed, pages, config } => EnclaveImage::generate(*seed, *pages, config),
                    ImageSource::File(p) => {
                        let bytes = std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
                        EnclaveImage::from_bytes(&bytes).map_err(|e| format!("{}: {e}", p.display()))?
                    }
                };
                self.images.insert(name.clone(), img);
                Last::Ok
            }
            Command::File { path, contents } => {
                match self.sys.as_mut() {
                    Some(sys) => sys.host.fs.put(path, contents),
                    None => self.pending_files.push((path.clone(), contents.clone())),
                }
                Last::Ok
            }
            Command::Create { image, epm, utm, hart, scratchpad, tweak } => {
                let img = self.image(image)?;
                let tweak = match *tweak {
                    TweakSpec::None => PtTweak::None,
                    TweakSpec::Duplicate { vaddr } => PtTweak::Duplicate { vaddr },
                    TweakSpec::Outside { vaddr, paddr } => PtTweak::MapOutside { vaddr, paddr: self.resolve(paddr)? },
                };
                let hart = self.host_hart(*hart);
                // A paging runtime keeps its store in the shared buffer.
                let slots = self.sys().config.runtime.store_slots;
                let utm = if slots > 0 { (*utm).max(utm_pages_for(PAGE_SIZE, slots)) } else { *utm };
                let opts = CreateOptions { epm_pages: *epm, utm_pages: utm, use_scratchpad: *scratchpad, tweak };
                match self.sys().create_enclave(hart, &img, &opts) {
                    Ok(e) => Last::Value(u64::from(e.0)),
                    Err(e) => err_last(&e),
                }
            }
            Command::Run { eid, hart } => {
                let h = self.host_hart(*hart);
                sys_result(self.sys().run(EnclaveId(*eid), h))
            }
            Command::Resume { eid, hart } => {
                let h = self.host_hart(*hart);
                sys_result(self.sys().resume(EnclaveId(*eid), h))
            }
            Command::Destroy { eid, hart } => {
                let h = self.host_hart(*hart);
                sys_result(self.sys().destroy(EnclaveId(*eid), h))
            }
            Command::Interrupt { eid } => {
                let sys = self.sys();
                match sys.hart_of(EnclaveId(*eid)) {
                    Some(h) => sys_result(sys.interrupt(h)),
                    None => err_last(&SystemError::NotRunning(EnclaveId(*eid))),
                }
            }
            Command::Eapp { eid, action } => match self.sys().eapp(EnclaveId(*eid), action) {
                Ok(o) => {
                    if let ActionResult::Report(r) = &o.result {
                        self.report = Some((**r).clone());
                    }
                    Last::Outcome(o)
                }
                Err(e) => err_last(&e),
            },
            Command::HostRead { addr, len, hart } => {
                let a = self.resolve(*addr)?;
                let h = self.host_hart(*hart);
                match self.sys().host_read(h, a, *len) {
                    Ok(b) => Last::Bytes(b),
                    Err(e) => err_last(&e),
                }
            }
            Command::HostWrite { addr, bytes, hart } => {
                let a = self.resolve(*addr)?;
                let h = self.host_hart(*hart);
                sys_result(self.sys().host_write(h, a, bytes))
            }
            Command::Attack { kind, seed } => match run_attack(*kind, *seed) {
                Ok(r) => Last::Attack(r),
                Err(e) => err_last(&e),
            },
            Command::Corpus { scenarios, seed } => match run_corpus(*scenarios, *seed) {
                Ok(r) => {
                    for (k, rep) in &r.per_kind {
                        self.transcript.push(format!("  {k}: {rep}"));
                    }
                    Last::Attack(r.total())
                }
                Err(e) => err_last(&e),
            },
            Command::ReportSave(path) => {
                let r = self.report.as_ref().ok_or("no report to save")?;
                std::fs::write(path, r.to_bytes()).map_err(|e| format!("{}: {e}", path.display()))?;
                Last::Ok
            }
            Command::ReportLoad(path) => {
                let b = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
                self.report = Some(AttestationReport::from_bytes(&b).map_err(|e| e.to_string())?);
                Last::Ok
            }
            Command::ReportVerify { enclave, measurement } => {
                let report = self.report.clone().ok_or("no report to verify")?;
                let sys = self.sys();
                let enclave_measurement = match (measurement, enclave) {
                    (Some(m), _) => Some(*m),
                    (None, Some(e)) => {
                        Some(sys.sm.enclave(EnclaveId(*e)).ok_or(format!("no enclave {e}"))?.measurement)
                    }
                    (None, None) => None,
                };
                let expect = Expectations {
                    sm_measurement: Some(sys.sm.sm_measurement()),
                    enclave_measurement,
                    data_prefix: None,
                };
                Last::Verify(verify_report(&report, &sys.device_public(), &expect))
            }
            Command::Remote { eid, request, seed } => {
                let sys = self.sys();
                let e = EnclaveId(*eid);
                let measurement = sys.sm.enclave(e).ok_or(format!("no enclave {eid}"))?.measurement;
                let expect = Expectations {
                    sm_measurement: Some(sys.sm.sm_measurement()),
                    enclave_measurement: Some(measurement),
                    data_prefix: None,
                };
                let mut client = RemoteClient::new(*seed, sys.device_public(), expect);
                match remote_wordcount(sys, e, &mut client, request) {
                    Ok(out) => {
                        self.report = Some(out.report);
                        Last::Reply(out.reply)
                    }
                    Err(e) => Last::Err { kind: format!("{e}"), denied: false },
                }
            }
            Command::Audit => {
                let sys = self.sys();
                let mut res = sys.sm.check_invariants(&sys.machine);
                let live: Vec<EnclaveId> = sys.sm.enclaves().filter(|d| d.state.is_live()).map(|d| d.id).collect();
                for e in live {
                    if res.is_ok() && sys.enclave(e).is_some_and(|h| h.runtime.is_some()) {
                        res = sys.audit_runtime(e);
                    }
                }
                match res {
                    Ok(()) => Last::Ok,
                    Err(m) => Last::Err { kind: format!("Audit: {m}"), denied: false },
                }
            }
            Command::Expect(_) => unreachable!("handled by the caller"),
        })
    }

    fn judge(&mut self, e: &Expect) -> Result<(), String> {
        let last = self.last.clone();
        let outcome = match &last {
            Last::Outcome(o) => Some(o),
            _ => None,
        };
        let result = outcome.map(|o| &o.result);
        let fail = || Err(format!("got {last}"));
        match e {
            Expect::Ok | Expect::Allowed => match (&last, result) {
                (Last::Ok | Last::Value(_) | Last::Bytes(_) | Last::Reply(_), _) => Ok(()),
                (_, Some(r)) if !matches!(r, ActionResult::Failed(_) | ActionResult::Fatal(_)) => Ok(()),
                _ => fail(),
            },
            Expect::Error(k) => match (&last, result) {
                (Last::Err { kind, .. }, _) if kind == k || kind.starts_with(&format!("{k}:")) => Ok(()),
                (_, Some(ActionResult::Failed(kind) | ActionResult::Fatal(kind))) if kind == k => Ok(()),
                _ => fail(),
            },
            Expect::Denied => match last {
                Last::Err { denied: true, .. } => Ok(()),
                _ => fail(),
            },
            Expect::Value(v) => match (&last, result) {
                (Last::Value(x), _) | (_, Some(ActionResult::Value(x))) if x == v => Ok(()),
                _ => fail(),
            },
            Expect::Bytes(b) => match (&last, result) {
                (Last::Bytes(x), _) | (_, Some(ActionResult::Bytes(x))) if x == b => Ok(()),
                _ => fail(),
            },
            Expect::Zero => match (&last, result) {
                (Last::Bytes(x), _) | (_, Some(ActionResult::Bytes(x))) if x.iter().all(|&b| b == 0) => Ok(()),
                _ => fail(),
            },
            Expect::State(eid, want) => {
                let got = state_name(self.sys(), EnclaveId(*eid));
                if &got == want {
                    Ok(())
                } else {
                    Err(format!("enclave {eid} is {got}"))
                }
            }
            Expect::Fatal(k) => match result {
                Some(ActionResult::Fatal(kind)) if kind == k => Ok(()),
                _ => fail(),
            },
            Expect::Failed(k) => match result {
                Some(ActionResult::Failed(kind)) if kind == k => Ok(()),
                _ => fail(),
            },
            Expect::Stopped(r) => match outcome.and_then(|o| o.stopped) {
                Some(s) if stop_name(s) == r => Ok(()),
                _ => fail(),
            },
            Expect::Steps(n) => match outcome {
                Some(o) if o.steps == *n => Ok(()),
                _ => fail(),
            },
            Expect::Valid => match last {
                Last::Verify(Ok(())) => Ok(()),
                _ => fail(),
            },
            Expect::Invalid(r) => match &last {
                Last::Verify(Err(e)) if invalid_name(e) == r => Ok(()),
                _ => fail(),
            },
            Expect::Successes(n) => match &last {
                Last::Attack(rep) if rep.successes == *n && rep.unlogged == 0 => Ok(()),
                _ => fail(),
            },
            Expect::Reply(b) => match &last {
                Last::Reply(x) if x == b => Ok(()),
                _ => fail(),
            },
        }
    }
}

/// Parse and execute `text`. Only malformed scripts and unreadable files
/// are errors; everything else is reported through the verdicts.
pub fn run_scenario(text: &str, base: &Path, overrides: &Overrides) -> Result<ScenarioResult, ScenarioError> {
    let commands = parse(text, base)?;
    let mut r = Runner {
        base_config: SystemConfig::default(),
        overrides: overrides.clone(),
        sys: None,
        images: BTreeMap::new(),
        pending_files: Vec::new(),
        report: None,
        last: Last::Nothing,
        verdicts: Vec::new(),
        transcript: Vec::new(),
    };
    for (line, cmd) in &commands {
        let src = text.lines().nth(line - 1).unwrap_or_default().trim();
        if let Command::Expect(e) = cmd {
            let res = r.judge(e);
            let pass = res.is_ok();
            r.transcript.push(format!("{line}: {src} -> {}", if pass { "pass" } else { "FAIL" }));
            r.verdicts.push(Verdict {
                line: *line,
                expect: src.to_string(),
                pass,
                detail: res.err().unwrap_or_default(),
            });
            continue;
        }
        // Commands that need a running system are skipped if boot failed.
        if r.sys.is_none()
            && !matches!(
                cmd,
                Command::Machine { .. }
                    | Command::Boot(_)
                    | Command::Image { .. }
                    | Command::File { .. }
                    | Command::Attack { .. }
                    | Command::Corpus { .. }
                    | Command::ReportLoad(_)
            )
        {
            r.last = Last::Err { kind: "NotBooted".into(), denied: false };
        } else {
            r.last = r.exec(cmd).map_err(|msg| ScenarioError::Io(format!("line {line}: {msg}")))?;
        }
        r.transcript.push(format!("{line}: {src} -> {}", r.last));
    }
    let (audit, final_state) = match &r.sys {
        Some(sys) => (sys.machine.audit().clone(), sys.sm.enclaves().map(|d| (d.id, state_name(sys, d.id))).collect()),
        None => (AuditLog::default(), Vec::new()),
    };
    Ok(ScenarioResult { audit, verdicts: r.verdicts, final_state, transcript: r.transcript, system: r.sys })
}

/// Read and run a scenario file.
pub fn run_scenario_file(path: &Path, overrides: &Overrides) -> Result<ScenarioResult, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    run_scenario(&text, base, overrides)
}
