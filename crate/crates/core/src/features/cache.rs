//! On-disk feature cache.
//!
//! Layout (little-endian): magic, u32 version, u32 scene count; per scene
//! u32 H, u32 W, u32 M, then per model u32 C followed by H·W·C f32 values,
//! then H·W u8 mask labels. A CRC32 of everything before it closes the file.
//! Scene ids are positional; domain ids are not stored.

use std::path::Path;

use super::{FeatureGrid, Scene};
use crate::{Error, Result};

pub const CACHE_MAGIC: &[u8] = b"FORLACHE";
pub const FEATURE_MAGIC: &[u8] = b"FORLAFEAT";
const VERSION: u32 = 1;

pub fn encode_cache(magic: &[u8], scenes: &[Scene]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(scenes.len() as u32).to_le_bytes());
    for s in scenes {
        let (h, w) = (s.height(), s.width());
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        out.extend_from_slice(&(s.features.len() as u32).to_le_bytes());
        for f in &s.features {
            out.extend_from_slice(&(f.channels as u32).to_le_bytes());
            for v in &f.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&s.gt_mask);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Truncated("feature cache"));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_cache(magic: &'static [u8], bytes: &[u8]) -> Result<Vec<Scene>> {
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(Error::BadMagic {
            expected: std::str::from_utf8(magic).unwrap_or("?"),
        });
    }
    if bytes.len() < magic.len() + 12 {
        return Err(Error::Truncated("feature cache"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Reader {
        buf: body,
        pos: magic.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let count = r.u32()? as usize;
    let mut scenes = Vec::with_capacity(count.min(1 << 16));
    for id in 0..count {
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let m = r.u32()? as usize;
        let mut features = Vec::with_capacity(m.min(64));
        for _ in 0..m {
            let c = r.u32()? as usize;
            let n = h
                .checked_mul(w)
                .and_then(|x| x.checked_mul(c))
                .and_then(|x| x.checked_mul(4))
                .ok_or(Error::Truncated("feature cache"))?;
            let raw = r.take(n)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            features.push(FeatureGrid {
                height: h,
                width: w,
                channels: c,
                data,
            });
        }
        let gt_mask = r.take(h * w)?.to_vec();
        scenes.push(Scene {
            scene_id: id as u64,
            domain_id: 0,
            features,
            gt_mask,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Invalid("trailing bytes in feature cache".into()));
    }
    Ok(scenes)
}

pub fn write_cache(path: &Path, magic: &[u8], scenes: &[Scene]) -> Result<()> {
    std::fs::write(path, encode_cache(magic, scenes))?;
    Ok(())
}

pub fn read_cache(path: &Path, magic: &'static [u8]) -> Result<Vec<Scene>> {
    decode_cache(magic, &std::fs::read(path)?)
}
