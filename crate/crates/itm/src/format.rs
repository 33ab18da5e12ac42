//! ITMF feature files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ITMF" | version u16 = 1 | D u32 | item count u32
//! per item:
//!   id len u16 | id UTF-8
//!   modality u8 (0 visual, 1 textual)
//!   paired image id len u16 | id UTF-8 (empty for visual items)
//!   N u32 | N * D f32
//! ```
//!
//! Split membership lives in a JSON sidecar next to the file
//! (`name.itmf` -> `name.meta.json`). Without a sidecar every image is a
//! test image.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use itm_core::features::{Caption, FeatureSet, Modality, PairedDataset, Splits};
use itm_core::Matrix;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"ITMF";
pub const VERSION: u16 = 1;

/// Split membership by image id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSidecar {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn format_err(msg: impl Into<String>) -> CliError {
    CliError::Format(msg.into())
}

pub fn encode_dataset(ds: &PairedDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let items = ds.images.len() + ds.captions.len();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(ds.dim).map_err(|_| format_err("dimension exceeds u32"))?.to_le_bytes());
    out.extend_from_slice(&u32::try_from(items).map_err(|_| format_err("item count exceeds u32"))?.to_le_bytes());
    let put_str = |out: &mut Vec<u8>, s: &str| -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| format_err(format!("id '{s}' longer than 65535 bytes")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(s.as_bytes());
        Ok(())
    };
    let items = ds.images.iter().map(|fs| (fs, "")).chain(ds.captions.iter().map(|c| (&c.features, ds.images[c.image].item_id.as_str())));
    for (fs, paired) in items {
        put_str(&mut out, &fs.item_id)?;
        out.push(match fs.modality {
            Modality::Visual => 0,
            Modality::Textual => 1,
        });
        put_str(&mut out, paired)?;
        out.extend_from_slice(&(fs.count() as u32).to_le_bytes());
        for &x in fs.features.as_slice() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| format_err(format!("{what} is not UTF-8")))
    }
}

/// Parses ITMF bytes. Every image gets assigned to the test split; use
/// [`apply_sidecar`] to set real splits.
pub fn decode_dataset(bytes: &[u8]) -> Result<PairedDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(format_err("bad magic, expected ITMF"));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let dim = cur.u32("dimension")? as usize;
    if dim == 0 {
        return Err(format_err("dimension is zero"));
    }
    let count = cur.u32("item count")?;

    let mut images = Vec::new();
    let mut pending = Vec::new();
    for item in 0..count {
        let id = cur.string("item id")?;
        let modality = match cur.u8("modality")? {
            0 => Modality::Visual,
            1 => Modality::Textual,
            m => return Err(format_err(format!("item {item}: unknown modality byte {m}"))),
        };
        let paired = cur.string("paired image id")?;
        let n = cur.u32("feature count")? as usize;
        let floats = n.checked_mul(dim).ok_or_else(|| format_err(format!("item {item}: feature block too large")))?;
        let raw = cur.take(floats.checked_mul(4).ok_or_else(|| format_err("feature block too large"))?, "features")?;
        let data: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let fs = FeatureSet::new(id, modality, Matrix::from_vec(n, dim, data)?)?;
        match modality {
            Modality::Visual if !paired.is_empty() => {
                return Err(format_err(format!("visual item '{}' names a paired image", fs.item_id)))
            }
            Modality::Visual => images.push(fs),
            Modality::Textual => pending.push((fs, paired)),
        }
    }
    if cur.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    let index: HashMap<&str, usize> = images.iter().enumerate().map(|(i, fs)| (fs.item_id.as_str(), i)).collect();
    let captions = pending
        .into_iter()
        .map(|(features, paired)| match index.get(paired.as_str()) {
            Some(&image) => Ok(Caption { features, image }),
            None => Err(itm_core::Error::Validation(format!("caption '{}' pairs with unknown image '{paired}'", features.item_id)).into()),
        })
        .collect::<Result<Vec<_>>>()?;
    let splits = Splits { test: (0..images.len()).collect(), ..Default::default() };
    Ok(PairedDataset::new(dim, images, captions, splits)?)
}

pub fn sidecar_of(ds: &PairedDataset) -> SplitSidecar {
    let ids = |v: &[usize]| v.iter().map(|&i| ds.images[i].item_id.clone()).collect();
    SplitSidecar { train: ids(&ds.splits.train), val: ids(&ds.splits.val), test: ids(&ds.splits.test) }
}

pub fn apply_sidecar(ds: &mut PairedDataset, meta: &SplitSidecar) -> Result<()> {
    let index: HashMap<&str, usize> = ds.images.iter().enumerate().map(|(i, fs)| (fs.item_id.as_str(), i)).collect();
    let resolve = |ids: &[String]| {
        ids.iter()
            .map(|id| index.get(id.as_str()).copied().ok_or_else(|| itm_core::Error::Validation(format!("split lists unknown image '{id}'"))))
            .collect::<std::result::Result<Vec<_>, _>>()
    };
    let splits = Splits { train: resolve(&meta.train)?, val: resolve(&meta.val)?, test: resolve(&meta.test)? };
    let previous = std::mem::replace(&mut ds.splits, splits);
    if let Err(e) = ds.validate() {
        ds.splits = previous;
        return Err(e.into());
    }
    Ok(())
}

pub fn save_dataset(ds: &PairedDataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(CliError::io(path))?;
    let meta = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar_of(ds)).expect("sidecar serializes");
    fs::write(&meta, json + "\n").map_err(CliError::io(meta))
}

pub fn load_dataset(path: &Path) -> Result<PairedDataset> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    let mut ds = decode_dataset(&bytes)?;
    let meta = sidecar_path(path);
    match fs::read_to_string(&meta) {
        Ok(text) => {
            let sidecar: SplitSidecar = serde_json::from_str(&text).map_err(|source| CliError::Json { path: meta, source })?;
            apply_sidecar(&mut ds, &sidecar)?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            log::warn!("no split sidecar at {}; treating every image as test", meta.display());
        }
        Err(e) => return Err(CliError::io(meta)(e)),
    }
    Ok(ds)
}
