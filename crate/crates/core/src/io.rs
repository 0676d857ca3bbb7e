//! Binary volume and checkpoint files, and dataset manifests.
//!
//! Volume (`EVDV`) layout, little-endian:
//!
//! | offset | size | field                               |
//! |--------|------|-------------------------------------|
//! | 0      | 4    | magic `EVDV`                        |
//! | 4      | 4    | version (u32, currently 1)          |
//! | 8      | 16   | extents C, D, H, W (u32 each)       |
//! | 24     | 4·n  | f32 payload, row-major              |
//!
//! Checkpoint (`EVDW`) layout: magic, version u32, config length u32, the
//! network config as TOML text, then every parameter tensor as f32 in
//! declaration order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::phantom::{Dataset, PatientCase, Split};
use crate::tensor::{Grid, Shape};
use crate::unet::{NetConfig, Network};

pub const VOLUME_MAGIC: &[u8; 4] = b"EVDV";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EVDW";
pub const FORMAT_VERSION: u32 = 1;
pub const VOLUME_HEADER_BYTES: usize = 24;

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Cursor over a byte buffer that reports offsets in its errors.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Reader { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated {what} at offset {}: expected {n} bytes, got {available}",
                    self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(Error::format(
                self.path,
                format!(
                    "bad magic at offset 0: expected {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(found)
                ),
            ));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos;
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::format(
                self.path,
                format!("unsupported version {v} at offset {at} (expected {FORMAT_VERSION})"),
            ));
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.path, format!("{what} size overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!(
                    "{} trailing bytes after offset {}",
                    self.bytes.len() - self.pos,
                    self.pos
                ),
            ));
        }
        Ok(())
    }
}

fn push_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_volume(grid: &Grid) -> Result<Vec<u8>> {
    if !grid.all_finite() {
        return Err(Error::InvalidArgument("volume contains non-finite values".into()));
    }
    let mut out = Vec::with_capacity(VOLUME_HEADER_BYTES + 4 * grid.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for e in grid.shape().0 {
        let e = u32::try_from(e)
            .map_err(|_| Error::InvalidArgument(format!("extent {e} does not fit in u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    push_f32s(&mut out, grid.data());
    Ok(out)
}

/// Parses an `EVDV` buffer; `path` only labels errors.
pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Grid> {
    let mut r = Reader::new(path, bytes);
    r.magic(VOLUME_MAGIC)?;
    r.version()?;
    let mut extents = [0usize; 4];
    for e in &mut extents {
        *e = r.u32("extent")? as usize;
    }
    let shape = Shape(extents);
    let data = r.f32s(shape.len(), "payload")?;
    r.finish()?;
    Ok(Grid::from_vec(shape, data)?)
}

pub fn write_volume(path: &Path, grid: &Grid) -> Result<()> {
    write_bytes(path, &encode_volume(grid)?)
}

pub fn read_volume(path: &Path) -> Result<Grid> {
    decode_volume(&read_bytes(path)?, path)
}

pub fn encode_checkpoint(net: &Network) -> Result<Vec<u8>> {
    let config = toml::to_string(net.config())
        .map_err(|e| Error::Config(format!("cannot serialize network config: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for p in net.parameters() {
        push_f32s(&mut out, p.data());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Network> {
    let mut r = Reader::new(path, bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|e| Error::format(path, format!("config is not UTF-8: {e}")))?;
    let config: NetConfig =
        toml::from_str(text).map_err(|e| Error::format(path, format!("config: {e}")))?;
    let template = Network::build(config.clone())?;
    let params = template
        .parameters()
        .iter()
        .map(|p| Ok(Grid::from_vec(p.shape(), r.f32s(p.len(), "parameters")?)?))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Network::from_parameters(config, params)
}

pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    write_bytes(path, &encode_checkpoint(net)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    decode_checkpoint(&read_bytes(path)?, path)
}

/// File name of a split's manifest inside a dataset directory.
pub fn manifest_name(split: Split) -> String {
    format!("{}.manifest", split.as_str())
}

const MANIFEST_HEADER: &str = "# id ct rois dose valid";

/// Writes each case as four volumes plus one manifest per split. Paths in
/// the manifest are relative to `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    for split in Split::ALL {
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        for case in dataset.split(split) {
            let parts = [
                ("ct", &case.ct),
                ("rois", &case.rois),
                ("dose", &case.dose),
                ("valid", &case.valid),
            ];
            manifest.push_str(&case.id);
            for (kind, grid) in parts {
                let rel = format!("{}/{}_{kind}.evdv", split.as_str(), case.id);
                write_volume(&dir.join(&rel), grid)?;
                manifest.push(' ');
                manifest.push_str(&rel);
            }
            manifest.push('\n');
        }
        write_bytes(&dir.join(manifest_name(split)), manifest.as_bytes())?;
    }
    Ok(())
}

/// Reads the cases listed in one manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<PatientCase>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut cases = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::format(
                path,
                format!("line {}: expected 5 fields, found {}", n + 1, fields.len()),
            ));
        }
        let vol = |i: usize| -> Result<Grid> {
            let p: PathBuf = base.join(fields[i]);
            read_volume(&p)
        };
        let case = PatientCase {
            id: fields[0].to_string(),
            ct: vol(1)?,
            rois: vol(2)?,
            dose: vol(3)?,
            valid: vol(4)?,
        };
        case.validate()?;
        cases.push(case);
    }
    Ok(cases)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let load = |split| read_manifest(&dir.join(manifest_name(split)));
    Ok(Dataset {
        train: load(Split::Train)?,
        val: load(Split::Val)?,
        test: load(Split::Test)?,
    })
}
