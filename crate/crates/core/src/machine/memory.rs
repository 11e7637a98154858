use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::{MachineError, PAGE_SIZE};

/// Flat physical memory. Accesses here are unchecked; callers that model a
/// hart go through [`super::Machine::mem_access`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhysicalMemory {
    bytes: Vec<u8>,
}

impl PhysicalMemory {
    pub fn new(size: u64) -> Result<Self, MachineError> {
        if size == 0 || !size.is_multiple_of(PAGE_SIZE) {
            return Err(MachineError::BadMemorySize(size));
        }
        Ok(PhysicalMemory { bytes: vec![0; size as usize] })
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, MachineError> {
        let size = bytes.len() as u64;
        if size == 0 || !size.is_multiple_of(PAGE_SIZE) {
            return Err(MachineError::BadMemorySize(size));
        }
        Ok(PhysicalMemory { bytes })
    }

    pub fn size(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn in_bounds(&self, addr: u64, len: u64) -> bool {
        addr.checked_add(len).is_some_and(|end| end <= self.size())
    }

    fn bounds(&self, addr: u64, len: u64) -> Result<std::ops::Range<usize>, MachineError> {
        if !self.in_bounds(addr, len) {
            return Err(MachineError::OutOfBounds { addr, len });
        }
        Ok(addr as usize..(addr + len) as usize)
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<&[u8], MachineError> {
        let r = self.bounds(addr, len)?;
        Ok(&self.bytes[r])
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), MachineError> {
        let r = self.bounds(addr, data.len() as u64)?;
        self.bytes[r].copy_from_slice(data);
        Ok(())
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, MachineError> {
        let b = self.read(addr, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    pub fn write_u64(&mut self, addr: u64, value: u64) -> Result<(), MachineError> {
        self.write(addr, &value.to_le_bytes())
    }

    pub fn fill(&mut self, addr: u64, len: u64, value: u8) -> Result<(), MachineError> {
        let r = self.bounds(addr, len)?;
        self.bytes[r].fill(value);
        Ok(())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

/// Snapshot sidecar: `<image>.manifest`, holding `memory_size=` and `harts=`.
pub fn manifest_path(image: &Path) -> PathBuf {
    let mut name = image.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

pub(super) fn write_snapshot(path: &Path, memory: &PhysicalMemory, harts: usize) -> io::Result<()> {
    fs::write(path, memory.as_bytes())?;
    fs::write(manifest_path(path), format!("memory_size={}\nharts={}\n", memory.size(), harts))
}

pub(super) fn read_snapshot(path: &Path) -> Result<(PhysicalMemory, usize), MachineError> {
    let manifest = fs::read_to_string(manifest_path(path))?;
    let mut size = None;
    let mut harts = None;
    for line in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) =
            line.split_once('=').ok_or_else(|| MachineError::Snapshot(format!("bad manifest line `{line}`")))?;
        let parsed: u64 =
            value.trim().parse().map_err(|_| MachineError::Snapshot(format!("bad number in `{line}`")))?;
        match key.trim() {
            "memory_size" => size = Some(parsed),
            "harts" => harts = Some(parsed as usize),
            other => return Err(MachineError::Snapshot(format!("unknown key `{other}`"))),
        }
    }
    let size = size.ok_or_else(|| MachineError::Snapshot("missing memory_size".into()))?;
    let harts = harts.ok_or_else(|| MachineError::Snapshot("missing harts".into()))?;
    let bytes = fs::read(path)?;
    if bytes.len() as u64 != size {
        return Err(MachineError::Snapshot(format!("image is {} bytes, manifest says {size}", bytes.len())));
    }
    Ok((PhysicalMemory::from_bytes(bytes)?, harts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unaligned_size() {
        assert!(PhysicalMemory::new(4095).is_err());
        assert!(PhysicalMemory::new(0).is_err());
    }

    #[test]
    fn out_of_bounds_is_reported() {
        let mut m = PhysicalMemory::new(PAGE_SIZE).unwrap();
        assert!(m.read(PAGE_SIZE - 4, 8).is_err());
        assert!(m.write(u64::MAX, &[1]).is_err());
        m.write_u64(8, 0xdead_beef).unwrap();
        assert_eq!(m.read_u64(8).unwrap(), 0xdead_beef);
    }
}
