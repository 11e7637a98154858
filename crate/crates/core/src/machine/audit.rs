use std::fmt::{self, Write as _};

/// Append-only event log. Every line reads
/// `step=<n> hart=<h> event=<name> args=<k=v,...>`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditLog {
    lines: Vec<String>,
}

impl AuditLog {
    pub fn record(&mut self, step: u64, hart: Option<usize>, event: &str, args: &[(&str, String)]) {
        let mut line = String::with_capacity(64);
        let _ = write!(line, "step={step} hart=");
        match hart {
            Some(h) => {
                let _ = write!(line, "{h}");
            }
            None => line.push('-'),
        }
        let _ = write!(line, " event={event} args=");
        for (i, (k, v)) in args.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            let _ = write!(line, "{k}={v}");
        }
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn events<'a>(&'a self, event: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        let needle = format!(" event={event} ");
        self.lines.iter().filter(move |l| l.contains(&needle))
    }
}

impl fmt::Display for AuditLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

/// A parsed audit line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub step: u64,
    pub hart: Option<usize>,
    pub event: String,
    pub args: Vec<(String, String)>,
}

impl AuditEntry {
    pub fn parse(line: &str) -> Option<AuditEntry> {
        let rest = line.strip_prefix("step=")?;
        let (step, rest) = rest.split_once(" hart=")?;
        let (hart, rest) = rest.split_once(" event=")?;
        let (event, args) = rest.split_once(" args=")?;
        let hart = if hart == "-" { None } else { Some(hart.parse().ok()?) };
        let args = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|kv| {
                    let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
                    (k.to_string(), v.to_string())
                })
                .collect()
        };
        Some(AuditEntry { step: step.parse().ok()?, hart, event: event.to_string(), args })
    }

    pub fn arg(&self, key: &str) -> Option<&str> {
        self.args.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format_round_trips() {
        let mut log = AuditLog::default();
        log.record(3, Some(1), "create", &[("eid", "0".into()), ("epm", "0x40000+0x4000".into())]);
        log.record(4, None, "boot", &[]);
        assert_eq!(log.lines()[0], "step=3 hart=1 event=create args=eid=0,epm=0x40000+0x4000");
        assert_eq!(log.lines()[1], "step=4 hart=- event=boot args=");
        let e = AuditEntry::parse(&log.lines()[0]).unwrap();
        assert_eq!(e.step, 3);
        assert_eq!(e.hart, Some(1));
        assert_eq!(e.arg("epm"), Some("0x40000+0x4000"));
        assert_eq!(log.events("create").count(), 1);
    }
}
