//! `teesim`: run scenarios, measure images offline, verify attestation
//! reports and pretty-print audit logs.
//!
//! Exit codes: 0 success, 1 a verdict failed, 2 usage, parse or I/O error.

mod measure;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use teesim::crypto::{Device, Measurement, PublicKey};
use teesim::host::scenario::{invalid_name, run_scenario_file, Overrides, ScenarioError};
use teesim::machine::AuditEntry;
use teesim::sm::{verify_report, AttestationReport, Expectations};
use thiserror::Error;

#[derive(Parser, Debug)]
#[command(name = "teesim", version, about = "Enclave isolation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario script and judge its expectations.
    Run {
        file: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Maximum resident eapp pages; enables self-paging.
        #[arg(long)]
        paging_limit: Option<usize>,
        /// Encrypt and authenticate evicted pages.
        #[arg(long)]
        encrypt: bool,
        /// Cache ways reserved for the executing enclave.
        #[arg(long)]
        cache_partition: Option<usize>,
        /// On-chip scratchpad size: bytes, or with a K, M or p (pages) suffix.
        #[arg(long, value_parser = parse_size)]
        scratchpad: Option<u64>,
        /// Let the runtime ask the host for more memory.
        #[arg(long)]
        dyn_resize: bool,
        /// Write the audit log here instead of stdout.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print the measurement the monitor would compute for an image.
    Measure {
        image: PathBuf,
        /// Physical base of enclave memory; the digest does not depend on it.
        #[arg(long, value_parser = parse_u64, default_value = "0x100000")]
        epm_base: u64,
        /// Replace the image's configuration bytes.
        #[arg(long, value_parser = parse_hex)]
        config: Option<Hex>,
    },
    /// Check an attestation report against a trusted device key.
    Verify {
        report: PathBuf,
        #[arg(long, value_parser = parse_hex)]
        device_key: Hex,
        /// Expected enclave measurement.
        #[arg(long, value_parser = parse_hex)]
        expect: Option<Hex>,
        /// Expected monitor measurement.
        #[arg(long, value_parser = parse_hex)]
        expect_sm: Option<Hex>,
    },
    /// Print the public key of a simulated device.
    DeviceKey {
        #[arg(long, default_value_t = 1)]
        device: u64,
    },
    /// Pretty-print an audit log.
    Log {
        file: PathBuf,
        /// Only show these events.
        #[arg(long)]
        event: Vec<String>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Measure(#[from] measure::MeasureError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn parse_u64(s: &str) -> Result<u64, String> {
    let r = match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|e| format!("`{s}`: {e}"))
}

fn parse_size(s: &str) -> Result<u64, String> {
    let (digits, mul) = match s.as_bytes().last() {
        Some(b'K' | b'k') => (&s[..s.len() - 1], 1 << 10),
        Some(b'M' | b'm') => (&s[..s.len() - 1], 1 << 20),
        Some(b'p') => (&s[..s.len() - 1], teesim::machine::PAGE_SIZE),
        _ => (s, 1),
    };
    Ok(parse_u64(digits)? * mul)
}

/// A hex-encoded byte string argument.
#[derive(Debug, Clone)]
struct Hex(Vec<u8>);

fn parse_hex(s: &str) -> Result<Hex, String> {
    hex::decode(s.strip_prefix("0x").unwrap_or(s)).map(Hex).map_err(|e| format!("`{s}`: {e}"))
}

fn fixed<const N: usize>(bytes: &[u8], what: &str) -> Result<[u8; N], CliError> {
    bytes.try_into().map_err(|_| CliError::Usage(format!("{what} must be {N} bytes, got {}", bytes.len())))
}

/// Returns whether every verdict passed.
fn cmd_run(file: &Path, overrides: &Overrides, log: Option<&Path>) -> Result<bool, CliError> {
    let res = run_scenario_file(file, overrides)?;
    for line in &res.transcript {
        println!("{line}");
    }
    for v in res.verdicts.iter().filter(|v| !v.pass) {
        println!("FAIL line {}: {} ({})", v.line, v.expect, v.detail);
    }
    let passed = res.verdicts.iter().filter(|v| v.pass).count();
    println!("{passed}/{} expectations passed", res.verdicts.len());
    for (eid, state) in &res.final_state {
        println!("enclave {eid}: {state}");
    }
    let audit = res.audit.to_string();
    match log {
        Some(path) => std::fs::write(path, audit).map_err(io(path))?,
        None => print!("--- audit log ---\n{audit}"),
    }
    Ok(res.passed())
}

fn cmd_verify(
    report: &Path,
    device_key: &[u8],
    expect: Option<&[u8]>,
    expect_sm: Option<&[u8]>,
) -> Result<bool, CliError> {
    let device = PublicKey(fixed(device_key, "device key")?);
    let bytes = std::fs::read(report).map_err(io(report))?;
    let report =
        AttestationReport::from_bytes(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", report.display())))?;
    let measurement = |b: Option<&[u8]>, what| b.map(|b| fixed(b, what).map(Measurement)).transpose();
    let expect = Expectations {
        sm_measurement: measurement(expect_sm, "monitor measurement")?,
        enclave_measurement: measurement(expect, "enclave measurement")?,
        data_prefix: None,
    };
    match verify_report(&report, &device, &expect) {
        Ok(()) => {
            println!("Valid");
            println!("measurement {}", report.enclave.measurement.to_hex());
            println!("sm_measurement {}", report.sm.sm_measurement.to_hex());
            println!("data {}", hex::encode(report.enclave.data()));
            Ok(true)
        }
        Err(e) => {
            println!("Invalid({})", invalid_name(&e));
            Ok(false)
        }
    }
}

fn cmd_log(file: &Path, events: &[String]) -> Result<(), CliError> {
    let text = std::fs::read_to_string(file).map_err(io(file))?;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let entry = AuditEntry::parse(line)
            .ok_or_else(|| CliError::Usage(format!("{}: line {}: not an audit entry", file.display(), n + 1)))?;
        if !events.is_empty() && !events.contains(&entry.event) {
            continue;
        }
        let hart = entry.hart.map_or("-".to_string(), |h| h.to_string());
        let args: Vec<String> = entry.args.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{:>8}  hart {:>2}  {:<14} {}", entry.step, hart, entry.event, args.join(" "));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Run { file, seed, paging_limit, encrypt, cache_partition, scratchpad, dyn_resize, log } => {
            let overrides = Overrides { seed, paging_limit, encrypt, cache_partition, scratchpad, dyn_resize };
            cmd_run(&file, &overrides, log.as_deref())
        }
        Command::Measure { image, epm_base, config } => {
            let bytes = std::fs::read(&image).map_err(io(&image))?;
            let digest = measure::measure_image(&bytes, epm_base, config.as_ref().map(|c| c.0.as_slice()))?;
            println!("{}", hex::encode(digest));
            Ok(true)
        }
        Command::Verify { report, device_key, expect, expect_sm } => {
            let bytes = |h: &Option<Hex>| h.as_ref().map(|h| h.0.clone());
            cmd_verify(&report, &device_key.0, bytes(&expect).as_deref(), bytes(&expect_sm).as_deref())
        }
        Command::DeviceKey { device } => {
            println!("{}", hex::encode(Device::from_id(device).public_key().0));
            Ok(true)
        }
        Command::Log { file, event } => cmd_log(&file, &event).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
