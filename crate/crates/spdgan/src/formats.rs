//! On-disk formats: checkpoints, feature maps, PNG images and CSV tables.
//!
//! Checkpoint (`.spdg`), all integers little-endian:
//!
//! ```text
//! "SPDG"  u32 version
//! u32 len, utf-8 config text
//! u32 record count, then per record:
//!   u32 store tag, u32 len + utf-8 name, u8 dtype (0 = f32, 1 = f64),
//!   u32 rank, u64 × rank dims, raw values
//! ```
//!
//! Stiefel weights additionally store their double-precision master copy as
//! a record named `<name>#master`.
//!
//! Feature map (`.fmap`): `"FMAP"`, u32 rank, u64 × rank dims, raw f32.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use spdgan_core::colormetrics::RgbImage8;
use spdgan_core::params::ParamStore;
use spdgan_core::params::StoreTag;
use spdgan_core::tensor::Tensor;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPDG";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
const MASTER_SUFFIX: &str = "#master";

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Values {
    fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub store: StoreTag,
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Values,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new(config: String) -> Self {
        Checkpoint { config, records: Vec::new() }
    }

    /// Appends every parameter of `store`, buffers included.
    pub fn add_store(&mut self, store: &ParamStore<f32>) {
        for (_, p) in store.iter() {
            self.records.push(Record {
                store: store.tag(),
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: Values::F32(p.value.data().to_vec()),
            });
            if let Some(m) = &p.master {
                self.records.push(Record {
                    store: store.tag(),
                    name: format!("{}{MASTER_SUFFIX}", p.name),
                    shape: p.value.shape().to_vec(),
                    values: Values::F64(m.clone()),
                });
            }
        }
    }

    /// Overwrites every parameter of `store` from the records with its tag.
    /// Every parameter must be present with a matching shape, and no record
    /// of that tag may be left over.
    pub fn restore_store(&self, store: &mut ParamStore<f32>, path: &Path) -> Result<()> {
        let tag = store.tag();
        let mut used = 0;
        for p in store.iter_mut() {
            let find = |name: &str| self.records.iter().find(|r| r.store == tag && r.name == name);
            let Some(rec) = find(&p.name) else {
                return Err(Error::format(path, format!("missing parameter {}", p.name)));
            };
            if rec.shape != p.value.shape() {
                return Err(Error::format(path, format!("{}: shape {:?}, expected {:?}", p.name, rec.shape, p.value.shape())));
            }
            let Values::F32(v) = &rec.values else {
                return Err(Error::format(path, format!("{}: expected f32 values", p.name)));
            };
            p.value.data_mut().copy_from_slice(v);
            used += 1;
            if p.master.is_some() {
                match find(&format!("{}{MASTER_SUFFIX}", p.name)).map(|r| &r.values) {
                    Some(Values::F64(m)) if m.len() == v.len() => p.master = Some(m.clone()),
                    _ => return Err(Error::format(path, format!("{}: missing master copy", p.name))),
                }
                used += 1;
            }
        }
        let total = self.records.iter().filter(|r| r.store == tag).count();
        if used != total {
            return Err(Error::format(path, format!("{} unexpected records for store {tag}", total - used)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.store.to_le_bytes());
            put_str(&mut out, &r.name);
            out.push(match r.values {
                Values::F32(_) => 0,
                Values::F64(_) => 1,
            });
            put_dims(&mut out, &r.shape);
            match &r.values {
                Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0, path };
        if c.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let config = c.string()?;
        let n = c.u32()? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let store = c.u32()?;
            let name = c.string()?;
            let dtype = c.take(1)?[0];
            let shape = c.dims()?;
            let count: usize = shape.iter().product();
            let values = match dtype {
                0 => Values::F32(c.take(4 * count)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
                1 => Values::F64(c.take(8 * count)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
                d => return Err(Error::format(path, format!("{name}: unknown dtype {d}"))),
            };
            debug_assert_eq!(values.len(), count);
            records.push(Record { store, name, shape, values });
        }
        if c.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after the last record"));
        }
        Ok(Checkpoint { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_dims(out: &mut Vec<u8>, shape: &[usize]) {
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid utf-8 string"))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::format(self.path, format!("implausible rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        if dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).is_none() {
            return Err(Error::format(self.path, "dimension product overflows"));
        }
        Ok(dims)
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn write_fmap(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 4 * t.len());
    out.extend_from_slice(FMAP_MAGIC);
    put_dims(&mut out, t.shape());
    t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    write_bytes(path, &out)
}

pub fn read_fmap(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    if c.take(4)? != FMAP_MAGIC {
        return Err(Error::format(path, "not a feature map (bad magic)"));
    }
    let shape = c.dims()?;
    let n: usize = shape.iter().product();
    let data = c.take(4 * n)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after feature data"));
    }
    Ok(Tensor::new(&shape, data)?)
}

pub fn read_png(path: &Path) -> Result<RgbImage8> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage8::new(w as usize, h as usize, img.into_raw())?)
}

/// Reads a PNG and resizes it to `size × size` if needed.
pub fn read_png_resized(path: &Path, size: usize) -> Result<RgbImage8> {
    let img = read_png(path)?;
    if img.width == size && img.height == size {
        return Ok(img);
    }
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data).expect("consistent buffer");
    let r = image::imageops::resize(&buf, size as u32, size as u32, image::imageops::FilterType::Triangle);
    Ok(RgbImage8::new(size, size, r.into_raw())?)
}

pub fn write_png(path: &Path, img: &RgbImage8) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer(path, &img.data, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// `.png` files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Comma-separated table with a fixed header.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_text(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        for r in std::iter::once(&self.header).chain(&self.rows) {
            w.write_record(r).expect("writing to memory");
        }
        String::from_utf8(w.into_inner().expect("writing to memory")).expect("fields are UTF-8")
    }

    /// Lenient: malformed records are skipped.
    pub fn parse(text: &str) -> Self {
        let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
        let mut records = r.records().filter_map(|rec| rec.ok()).map(|rec| rec.iter().map(str::to_string).collect::<Vec<String>>());
        let header = records.next().unwrap_or_default();
        Csv { header, rows: records.collect() }
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }
}

/// Shortest text that parses back to the same `f64`; `inf` for +∞ and an
/// empty field for a missing value.
pub fn num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}
