//! Dataset directory layout.
//!
//! `manifest.msd` (little-endian):
//!
//! ```text
//! "MSCM" | u32 version = 1
//! u32 num_identities | u32 samples_per_id_per_modality | u32 image_h | u32 image_w
//! u32 cams_per_modality | f64 modality_gap | f64 noise_std | u64 seed
//! u64 record_count
//! record_count x { u32 identity | u8 modality (0 = V, 1 = T) | u32 camera | u64 offset | u64 length }
//! ```
//!
//! `data.bin` is the concatenation of every record's interleaved pixel block,
//! each immediately followed by the u32 CRC32 of that block.

use std::fs;
use std::path::Path;

use super::{Dataset, GenParams, Modality, SampleRecord};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.msd";
pub const DATA_FILE: &str = "data.bin";
pub const MANIFEST_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MSCM";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(MANIFEST_FILE, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn describe(i: usize, identity: u32, modality: Modality, camera: u32) -> String {
    format!("record {i} (identity {identity}, {}, camera {camera})", modality.tag())
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = &dataset.params;
    let mut manifest = Vec::new();
    manifest.extend_from_slice(MAGIC);
    manifest.extend_from_slice(&MANIFEST_VERSION.to_le_bytes());
    for v in [p.num_identities, p.samples_per_id_per_modality, p.image_h, p.image_w, p.cams_per_modality] {
        manifest.extend_from_slice(&v.to_le_bytes());
    }
    manifest.extend_from_slice(&p.modality_gap.to_le_bytes());
    manifest.extend_from_slice(&p.noise_std.to_le_bytes());
    manifest.extend_from_slice(&p.seed.to_le_bytes());
    manifest.extend_from_slice(&(dataset.records.len() as u64).to_le_bytes());

    let mut data = Vec::new();
    for r in &dataset.records {
        let offset = data.len() as u64;
        data.extend_from_slice(&r.pixels);
        data.extend_from_slice(&crc32fast::hash(&r.pixels).to_le_bytes());
        manifest.extend_from_slice(&r.identity.to_le_bytes());
        manifest.push(r.modality.code());
        manifest.extend_from_slice(&r.camera.to_le_bytes());
        manifest.extend_from_slice(&offset.to_le_bytes());
        manifest.extend_from_slice(&(r.pixels.len() as u64).to_le_bytes());
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let dpath = dir.join(DATA_FILE);
    fs::write(&dpath, data).map_err(|e| Error::io(&dpath, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.is_file() {
        return Err(Error::ManifestMissing {
            what: "dataset",
            dir: dir.to_path_buf(),
        });
    }
    let manifest = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut rd = Reader { buf: &manifest, pos: 0 };
    if rd.take(4)? != MAGIC {
        return Err(Error::format(MANIFEST_FILE, "bad magic"));
    }
    let version = rd.u32()?;
    if version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            what: "dataset manifest",
            found: version,
            expected: MANIFEST_VERSION,
        });
    }
    let params = GenParams {
        num_identities: rd.u32()?,
        samples_per_id_per_modality: rd.u32()?,
        image_h: rd.u32()?,
        image_w: rd.u32()?,
        cams_per_modality: rd.u32()?,
        modality_gap: rd.f64()?,
        noise_std: rd.f64()?,
        seed: rd.u64()?,
    };
    let count = rd.u64()? as usize;
    if count != params.num_records() {
        return Err(Error::format(
            MANIFEST_FILE,
            format!("{count} records, expected {}", params.num_records()),
        ));
    }
    let dpath = dir.join(DATA_FILE);
    let data = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
    let plane = params.image_h as usize * params.image_w as usize;
    let mut records = Vec::with_capacity(count);
    let mut next_free = 0u64;
    for i in 0..count {
        let identity = rd.u32()?;
        let code = rd.u8()?;
        let camera = rd.u32()?;
        let offset = rd.u64()?;
        let length = rd.u64()?;
        let modality = Modality::from_code(code)
            .ok_or_else(|| Error::format(MANIFEST_FILE, format!("record {i}: modality code {code}")))?;
        let what = describe(i, identity, modality, camera);
        if length as usize != plane * modality.channels() {
            return Err(Error::format(DATA_FILE, format!("{what}: length {length} does not match image size")));
        }
        if offset < next_free {
            return Err(Error::format(DATA_FILE, format!("{what}: overlaps the previous record")));
        }
        next_free = offset + length + 4;
        let (start, end) = (offset as usize, (offset + length) as usize);
        if end + 4 > data.len() {
            return Err(Error::format(DATA_FILE, format!("{what}: truncated")));
        }
        let pixels = &data[start..end];
        let stored = u32::from_le_bytes(data[end..end + 4].try_into().unwrap());
        if crc32fast::hash(pixels) != stored {
            return Err(Error::Checksum { what });
        }
        records.push(SampleRecord {
            identity,
            modality,
            camera,
            height: params.image_h,
            width: params.image_w,
            pixels: pixels.to_vec(),
        });
    }
    if rd.pos != manifest.len() {
        return Err(Error::format(MANIFEST_FILE, "trailing bytes after record table"));
    }
    Ok(Dataset { params, records })
}
