//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "MIMOGNN\0"
//! version  u32
//! dims     5 x u32  nu, nh1, nh2, rounds, m
//! meta     u32 length + UTF-8 JSON
//! count    u32
//! tensors  count x (u32 name length, name, u32 rows, u32 cols, rows*cols f64)
//! ```
//!
//! All integers and floats are little-endian; tensors are row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{GnnDims, GnnParams, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MIMOGNN\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes(params: &GnnParams, meta: &Value) -> Result<Vec<u8>> {
    let d = params.dims;
    let meta = serde_json::to_string(meta)?;
    let mut out = Vec::with_capacity(64 + meta.len() + 8 * params.len() + 32 * Tensor::ALL.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [d.nu, d.nh1, d.nh2, d.rounds, d.m] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(Tensor::ALL.len() as u32).to_le_bytes());
    for t in Tensor::ALL {
        let name = t.name().as_bytes();
        let (r, c) = t.shape(&d);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for x in params.get(t) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what.into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<(GnnParams, Value)> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < MAGIC.len() {
        return Err(Error::Truncated("magic".into()));
    }
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut dims = [0usize; 5];
    for v in &mut dims {
        *v = r.u32("header dimensions")? as usize;
    }
    let dims = GnnDims {
        nu: dims[0],
        nh1: dims[1],
        nh2: dims[2],
        rounds: dims[3],
        m: dims[4],
    };
    let meta_len = r.u32("metadata length")? as usize;
    let meta: Value = serde_json::from_slice(r.take(meta_len, "metadata")?)?;

    let mut params = GnnParams::zeros(dims);
    let count = r.u32("tensor count")? as usize;
    let mut seen = vec![false; Tensor::ALL.len()];
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let t = Tensor::from_name(&name).ok_or_else(|| Error::Malformed(format!("unknown tensor `{name}`")))?;
        let rows = r.u32(&name)? as usize;
        let cols = r.u32(&name)? as usize;
        let (er, ec) = t.shape(&dims);
        if rows != er {
            return Err(Error::DimensionMismatch {
                what: format!("{name} rows"),
                found: rows,
                expected: er,
            });
        }
        if cols != ec {
            return Err(Error::DimensionMismatch {
                what: format!("{name} columns"),
                found: cols,
                expected: ec,
            });
        }
        let raw = r.take(8 * rows * cols, &name)?;
        for (dst, chunk) in params.get_mut(t).iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        seen[t as usize] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Malformed(format!("missing tensor `{}`", Tensor::ALL[i].name())));
    }
    if r.pos != buf.len() {
        return Err(Error::Malformed("trailing bytes".into()));
    }
    Ok((params, meta))
}

/// Sidecar JSON path next to a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the checkpoint and a JSON sidecar with the sizes and `meta`.
pub fn save_checkpoint(path: &Path, params: &GnnParams, meta: &Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, to_bytes(params, meta)?)?;
    let sidecar = serde_json::json!({
        "format_version": CHECKPOINT_VERSION,
        "dims": params.dims,
        "parameters": params.len(),
        "metadata": meta,
    });
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(GnnParams, Value)> {
    let buf = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    from_bytes(&buf)
}

pub fn save_params(params: &GnnParams, path: &Path) -> Result<()> {
    save_checkpoint(path, params, &Value::Object(Default::default()))
}

/// Loads parameters and rejects a checkpoint whose sizes differ from `expected`.
pub fn load_params(path: &Path, expected: &GnnDims) -> Result<GnnParams> {
    let (params, _) = load_checkpoint(path)?;
    check_dims(&params.dims, expected)?;
    Ok(params)
}

pub fn check_dims(found: &GnnDims, expected: &GnnDims) -> Result<()> {
    let pairs = [
        ("nu", found.nu, expected.nu),
        ("nh1", found.nh1, expected.nh1),
        ("nh2", found.nh2, expected.nh2),
        ("rounds", found.rounds, expected.rounds),
        ("constellation size", found.m, expected.m),
    ];
    for (what, f, e) in pairs {
        if f != e {
            return Err(Error::DimensionMismatch {
                what: what.into(),
                found: f,
                expected: e,
            });
        }
    }
    Ok(())
}
