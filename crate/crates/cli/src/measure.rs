//! Offline measurement. Reads the image file and serializes the canonical
//! form itself, sharing no code with the monitor, so the two can be checked
//! against each other.
//!
//! Canonical form, hashed with SHA3-256:
//!
//! ```text
//! eapp_entry_le || config || rt_entry_le
//! for each mapped page in ascending virtual order:
//!     vaddr_le || (V | R | W | X | U bits) || 4096 page bytes, zero padded
//! ```

use sha3::{Digest, Sha3_256};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"KSIM1\0\0\0";
const PAGE: usize = 4096;
const PTE_V: u8 = 1;
/// R, W, X and U.
const LEAF_BITS: u8 = 0x1e;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MeasureError {
    #[error("not an enclave image")]
    BadMagic,
    #[error("image truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last segment")]
    Trailing(usize),
    #[error("segment at {0:#x} is not page aligned")]
    Unaligned(u64),
    #[error("segment at {0:#x} is empty")]
    Empty(u64),
    #[error("segments at {0:#x} and {1:#x} overlap")]
    Overlap(u64, u64),
    #[error("enclave memory base {0:#x} is not page aligned")]
    EpmBase(u64),
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MeasureError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(MeasureError::Truncated(self.at))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, MeasureError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, MeasureError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Digest of `image` loaded at `epm_base`. `config` replaces the image's
/// own configuration bytes.
pub fn measure_image(image: &[u8], epm_base: u64, config: Option<&[u8]>) -> Result<[u8; 32], MeasureError> {
    if !epm_base.is_multiple_of(PAGE as u64) {
        return Err(MeasureError::EpmBase(epm_base));
    }
    let mut r = Reader { bytes: image, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(MeasureError::BadMagic);
    }
    let rt_entry = r.u64()?;
    let eapp_entry = r.u64()?;
    let config_len = r.u32()? as usize;
    let segments = r.u32()?;
    let own_config = r.take(config_len)?;

    let mut pages: Vec<(u64, u8, &[u8])> = Vec::new();
    let mut spans: Vec<(u64, u64)> = Vec::new();
    for _ in 0..segments {
        let vaddr = r.u64()?;
        let flags = r.take(4)?[0];
        let len = r.u32()? as usize;
        let data = r.take(len)?;
        if vaddr % PAGE as u64 != 0 {
            return Err(MeasureError::Unaligned(vaddr));
        }
        if data.is_empty() {
            return Err(MeasureError::Empty(vaddr));
        }
        let end = vaddr + data.len().div_ceil(PAGE) as u64 * PAGE as u64;
        if let Some(&(other, _)) = spans.iter().find(|&&(b, e)| vaddr < e && b < end) {
            return Err(MeasureError::Overlap(other, vaddr));
        }
        spans.push((vaddr, end));
        for (i, chunk) in data.chunks(PAGE).enumerate() {
            pages.push((vaddr + (i * PAGE) as u64, PTE_V | (flags & LEAF_BITS), chunk));
        }
    }
    if r.at != image.len() {
        return Err(MeasureError::Trailing(image.len() - r.at));
    }
    pages.sort_by_key(|p| p.0);

    let mut h = Sha3_256::new();
    h.update(eapp_entry.to_le_bytes());
    h.update(config.unwrap_or(own_config));
    h.update(rt_entry.to_le_bytes());
    let zeros = [0u8; PAGE];
    for (vaddr, flags, chunk) in pages {
        h.update(vaddr.to_le_bytes());
        h.update([flags]);
        h.update(chunk);
        h.update(&zeros[chunk.len()..]);
    }
    Ok(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(config: &[u8], segments: &[(u64, u8, Vec<u8>)]) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&0x3fc0000000u64.to_le_bytes());
        out.extend_from_slice(&0x400000u64.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&(segments.len() as u32).to_le_bytes());
        out.extend_from_slice(config);
        for (vaddr, flags, data) in segments {
            out.extend_from_slice(&vaddr.to_le_bytes());
            out.extend_from_slice(&[*flags, 0, 0, 0]);
            out.extend_from_slice(&(data.len() as u32).to_le_bytes());
            out.extend_from_slice(data);
        }
        out
    }

    #[test]
    fn layout_independent_and_content_sensitive() {
        let img = image(b"c", &[(0x400000, 0x1a, vec![1; 5000]), (0x3fc0000000, 0x0a, vec![2; 10])]);
        let a = measure_image(&img, 0x100000, None).unwrap();
        assert_eq!(a, measure_image(&img, 0x7f000, None).unwrap());
        assert_ne!(a, measure_image(&img, 0x100000, Some(b"d")).unwrap());
        let mut changed = img.clone();
        *changed.last_mut().unwrap() ^= 1;
        assert_ne!(a, measure_image(&changed, 0x100000, None).unwrap());
        // Segment order in the file does not matter.
        let swapped = image(b"c", &[(0x3fc0000000, 0x0a, vec![2; 10]), (0x400000, 0x1a, vec![1; 5000])]);
        assert_eq!(a, measure_image(&swapped, 0x100000, None).unwrap());
    }

    #[test]
    fn rejects_malformed_images() {
        assert_eq!(measure_image(b"nope", 0, None), Err(MeasureError::Truncated(0)));
        assert_eq!(measure_image(&[0; 32], 0, None), Err(MeasureError::BadMagic));
        let img = image(b"", &[(0x400010, 0x1a, vec![1])]);
        assert_eq!(measure_image(&img, 0, None), Err(MeasureError::Unaligned(0x400010)));
        let img = image(b"", &[(0x400000, 0x1a, vec![1; 5000]), (0x401000, 0x1a, vec![1])]);
        assert_eq!(measure_image(&img, 0, None), Err(MeasureError::Overlap(0x400000, 0x401000)));
        let mut img = image(b"", &[(0x400000, 0x1a, vec![1])]);
        img.push(0);
        assert_eq!(measure_image(&img, 0, None), Err(MeasureError::Trailing(1)));
        assert_eq!(measure_image(&image(b"", &[]), 0x10, None), Err(MeasureError::EpmBase(0x10)));
    }
}
