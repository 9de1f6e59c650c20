//! Binary tensor and bundle files.
//!
//! Tensor file (`TORQ`), all integers little-endian:
//!
//! ```text
//! magic "TORQ" | version u32 | dtype u32 (0 = f32, 1 = f64) | T u64 | d u64 | T*d values, row-major
//! ```
//!
//! Bundle file (`TORB`):
//!
//! ```text
//! magic "TORB" | version u32 | B u64 | K u64 | format u32
//! | r_inter B*B f64 | r_intra K*K f64 | scales B f64   (row-major)
//! | meta length u64 | meta UTF-8 JSON
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::block::{BlockShape, BlockTensor};
use crate::error::{Result, TorqError};
use crate::format::FormatKind;
use crate::intra::ScaleVector;
use crate::pipeline::{CalibMeta, RotationBundle};

pub const TENSOR_MAGIC: &[u8; 4] = b"TORQ";
pub const BUNDLE_MAGIC: &[u8; 4] = b"TORB";
pub const TENSOR_VERSION: u32 = 1;
pub const BUNDLE_VERSION: u32 = 1;
pub const TENSOR_HEADER_LEN: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            t => Err(TorqError::Malformed(format!("unknown dtype tag {t}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A dense `T x d` matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub rows: usize,
    pub cols: usize,
    pub dtype: DType,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn into_blocks(self, shape: BlockShape) -> Result<BlockTensor> {
        if self.cols != shape.dim() {
            return Err(TorqError::Shape(format!(
                "tensor has {} columns but shape {}x{} needs {}",
                self.cols,
                shape.blocks(),
                shape.lanes(),
                shape.dim()
            )));
        }
        BlockTensor::from_flat(self.data, shape)
    }
}

pub fn encode_tensor(rows: usize, cols: usize, data: &[f64], dtype: DType) -> Result<Vec<u8>> {
    if data.len() != rows * cols {
        return Err(TorqError::Shape(format!(
            "{} values for a {rows}x{cols} tensor",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + data.len() * dtype.width());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.tag().to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for &v in data {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TorqError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| TorqError::Malformed("size overflow".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| TorqError::Malformed("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != expected {
            return Err(TorqError::Malformed(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(TorqError::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<RawTensor> {
    let mut r = Reader::new(bytes);
    r.magic(TENSOR_MAGIC)?;
    let version = r.u32()?;
    if version != TENSOR_VERSION {
        return Err(TorqError::Malformed(format!("unsupported tensor version {version}")));
    }
    let dtype = DType::from_tag(r.u32()?)?;
    let rows = r.usize()?;
    let cols = r.usize()?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| TorqError::Malformed("size overflow".into()))?;
    let data = match dtype {
        DType::F32 => r
            .take(n.checked_mul(4).ok_or_else(|| TorqError::Malformed("size overflow".into()))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        DType::F64 => r.f64s(n)?,
    };
    r.finish()?;
    if data.iter().any(|v: &f64| !v.is_finite()) {
        return Err(TorqError::InvalidInput("tensor contains non-finite values".into()));
    }
    Ok(RawTensor {
        rows,
        cols,
        dtype,
        data,
    })
}

pub fn encode_bundle(bundle: &RotationBundle) -> Result<Vec<u8>> {
    let (b, k) = (bundle.shape.blocks(), bundle.shape.lanes());
    let meta = serde_json::to_vec(&bundle.meta)
        .map_err(|e| TorqError::InvalidInput(format!("metadata serialization failed: {e}")))?;
    let mut out = Vec::with_capacity(32 + 8 * bundle.parameter_count() + meta.len());
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(b as u64).to_le_bytes());
    out.extend_from_slice(&(k as u64).to_le_bytes());
    out.extend_from_slice(&bundle.format.tag().to_le_bytes());
    for m in [&bundle.r_inter, &bundle.r_intra] {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
    }
    for s in bundle.scales.as_slice() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<RotationBundle> {
    let mut r = Reader::new(bytes);
    r.magic(BUNDLE_MAGIC)?;
    let version = r.u32()?;
    if version != BUNDLE_VERSION {
        return Err(TorqError::Malformed(format!("unsupported bundle version {version}")));
    }
    let shape = BlockShape::new(r.usize()?, r.usize()?)?;
    let format = FormatKind::from_tag(r.u32()?)?;
    let (b, k) = (shape.blocks(), shape.lanes());
    let r_inter = DMatrix::from_row_slice(b, b, &r.f64s(b * b)?);
    let r_intra = DMatrix::from_row_slice(k, k, &r.f64s(k * k)?);
    let scales = ScaleVector::new(r.f64s(b)?)?;
    let len = r.usize()?;
    let meta: CalibMeta = serde_json::from_slice(r.take(len)?)
        .map_err(|e| TorqError::Malformed(format!("bundle metadata: {e}")))?;
    r.finish()?;
    let bundle = RotationBundle {
        shape,
        r_inter,
        r_intra,
        scales,
        format,
        meta,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| TorqError::InvalidInput(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(TorqError::io(path, e));
    }
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| TorqError::io(path, e))
}

pub fn write_tensor(path: &Path, tensor: &BlockTensor, dtype: DType) -> Result<()> {
    let bytes = encode_tensor(tensor.tokens(), tensor.shape().dim(), tensor.flatten(), dtype)?;
    write_atomic(path, &bytes)
}

pub fn read_tensor(path: &Path) -> Result<RawTensor> {
    decode_tensor(&read_bytes(path)?)
}

pub fn write_bundle(path: &Path, bundle: &RotationBundle) -> Result<()> {
    write_atomic(path, &encode_bundle(bundle)?)
}

pub fn read_bundle(path: &Path) -> Result<RotationBundle> {
    decode_bundle(&read_bytes(path)?)
}
