//! Enclave image files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic[8] = "KSIM1\0\0\0"
//! rt_entry u64 | eapp_entry u64 | config_len u32 | seg_count u32
//! config[config_len]
//! seg_count x { vaddr u64 | flags u8 | pad[3] | len u32 | bytes[len] }
//! ```
//!
//! Segment flags use the page-table bit positions (R=2, W=4, X=8, U=16).
//! Segments with U set belong to the eapp, the rest to the runtime.

use thiserror::Error;

use crate::crypto::Rng;
use crate::machine::PAGE_SIZE;
use crate::paging::pte::{PTE_R, PTE_U, PTE_W, PTE_X};
use crate::paging::{EAPP_BASE, RT_BASE};

pub const IMAGE_MAGIC: [u8; 8] = *b"KSIM1\0\0\0";
/// Flag bits a segment may carry.
pub const SEGMENT_FLAG_MASK: u8 = (PTE_R | PTE_W | PTE_X | PTE_U) as u8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("bad magic")]
    BadMagic,
    #[error("image truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last segment")]
    Trailing(usize),
    #[error("segment at {0:#x} is not page aligned")]
    Unaligned(u64),
    #[error("segment at {0:#x} is empty")]
    Empty(u64),
    #[error("segment at {0:#x} has invalid flags {1:#x}")]
    BadFlags(u64, u8),
    #[error("segments at {0:#x} and {1:#x} overlap")]
    Overlap(u64, u64),
    #[error("segment at {0:#x} leaves the 39-bit address space")]
    OutOfRange(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub vaddr: u64,
    pub flags: u8,
    pub data: Vec<u8>,
}

impl Segment {
    pub fn pages(&self) -> u64 {
        (self.data.len() as u64).div_ceil(PAGE_SIZE)
    }

    pub fn end(&self) -> u64 {
        self.vaddr + self.pages() * PAGE_SIZE
    }

    pub fn is_eapp(&self) -> bool {
        u64::from(self.flags) & PTE_U != 0
    }

    /// Page `i` of the segment, zero padded.
    pub fn page(&self, i: u64) -> Vec<u8> {
        let start = (i * PAGE_SIZE) as usize;
        let end = (start + PAGE_SIZE as usize).min(self.data.len());
        let mut page = self.data[start..end].to_vec();
        page.resize(PAGE_SIZE as usize, 0);
        page
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveImage {
    pub rt_entry: u64,
    pub eapp_entry: u64,
    pub config: Vec<u8>,
    pub segments: Vec<Segment>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ImageError> {
        let s = self.bytes.get(self.at..self.at + n).ok_or(ImageError::Truncated(self.at))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ImageError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ImageError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl EnclaveImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = IMAGE_MAGIC.to_vec();
        out.extend_from_slice(&self.rt_entry.to_le_bytes());
        out.extend_from_slice(&self.eapp_entry.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.config);
        for s in &self.segments {
            out.extend_from_slice(&s.vaddr.to_le_bytes());
            out.push(s.flags);
            out.extend_from_slice(&[0; 3]);
            out.extend_from_slice(&(s.data.len() as u32).to_le_bytes());
            out.extend_from_slice(&s.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut c = Cursor { bytes, at: 0 };
        if c.take(8)? != IMAGE_MAGIC {
            return Err(ImageError::BadMagic);
        }
        let rt_entry = c.u64()?;
        let eapp_entry = c.u64()?;
        let config_len = c.u32()? as usize;
        let seg_count = c.u32()? as usize;
        let config = c.take(config_len)?.to_vec();
        let mut segments = Vec::new();
        for _ in 0..seg_count {
            let vaddr = c.u64()?;
            let flags = c.take(4)?[0];
            let len = c.u32()? as usize;
            segments.push(Segment { vaddr, flags, data: c.take(len)?.to_vec() });
        }
        if c.at != bytes.len() {
            return Err(ImageError::Trailing(bytes.len() - c.at));
        }
        let image = EnclaveImage { rt_entry, eapp_entry, config, segments };
        image.validate()?;
        Ok(image)
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        for s in &self.segments {
            if s.vaddr % PAGE_SIZE != 0 {
                return Err(ImageError::Unaligned(s.vaddr));
            }
            if s.data.is_empty() {
                return Err(ImageError::Empty(s.vaddr));
            }
            if s.flags & !SEGMENT_FLAG_MASK != 0 || u64::from(s.flags) & (PTE_R | PTE_X) == 0 {
                return Err(ImageError::BadFlags(s.vaddr, s.flags));
            }
            if u64::from(s.flags) & PTE_W != 0 && u64::from(s.flags) & PTE_R == 0 {
                return Err(ImageError::BadFlags(s.vaddr, s.flags));
            }
            if s.end() > 1 << crate::paging::pte::VA_BITS {
                return Err(ImageError::OutOfRange(s.vaddr));
            }
        }
        for (i, a) in self.segments.iter().enumerate() {
            for b in &self.segments[i + 1..] {
                if a.vaddr < b.end() && b.vaddr < a.end() {
                    return Err(ImageError::Overlap(a.vaddr, b.vaddr));
                }
            }
        }
        Ok(())
    }

    pub fn payload_pages(&self) -> u64 {
        self.segments.iter().map(Segment::pages).sum()
    }

    /// Upper bound on table pages the builder needs.
    pub fn table_pages(&self) -> u64 {
        let mut l1 = std::collections::BTreeSet::new();
        let mut l0 = std::collections::BTreeSet::new();
        for s in &self.segments {
            for p in 0..s.pages() {
                let va = s.vaddr + p * PAGE_SIZE;
                l1.insert(va >> 30);
                l0.insert(va >> 21);
            }
        }
        1 + l1.len() as u64 + l0.len() as u64
    }

    /// Configuration bytes the monitor measures: `eapp_entry_le || config`.
    pub fn measured_config(&self) -> Vec<u8> {
        let mut out = self.eapp_entry.to_le_bytes().to_vec();
        out.extend_from_slice(&self.config);
        out
    }

    /// A small runtime plus an eapp of `eapp_pages` pages with contents drawn
    /// from `seed`.
    pub fn generate(seed: u64, eapp_pages: u64, config: &[u8]) -> Self {
        let mut rng = Rng::new(seed);
        let mut bytes = |n: u64| {
            let mut v = vec![0u8; n as usize];
            rng.fill_bytes(&mut v);
            v
        };
        let rt_code = bytes(PAGE_SIZE);
        let rt_data = bytes(PAGE_SIZE / 2);
        let eapp_code = bytes(PAGE_SIZE);
        let eapp_data = bytes((eapp_pages.max(2) - 1) * PAGE_SIZE - 100);
        EnclaveImage {
            rt_entry: RT_BASE,
            eapp_entry: EAPP_BASE,
            config: config.to_vec(),
            segments: vec![
                Segment { vaddr: RT_BASE, flags: (PTE_R | PTE_X) as u8, data: rt_code },
                Segment { vaddr: RT_BASE + PAGE_SIZE, flags: (PTE_R | PTE_W) as u8, data: rt_data },
                Segment { vaddr: EAPP_BASE, flags: (PTE_R | PTE_X | PTE_U) as u8, data: eapp_code },
                Segment { vaddr: EAPP_BASE + PAGE_SIZE, flags: (PTE_R | PTE_W | PTE_U) as u8, data: eapp_data },
            ],
        }
    }
}
