//! Volume files: single-file NIfTI-1 (`.nii`, `.nii.gz`) and a raw float32
//! payload with a JSON sidecar (`name.raw` + `name.raw.json`).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::volume::{Mask, Shape, Volume};

const NIFTI_HEADER: usize = 348;
const NIFTI_DATA_OFFSET: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Nifti,
    NiftiGz,
    Raw,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self, CoreError> {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".nii.gz") {
            Ok(Format::NiftiGz)
        } else if name.ends_with(".nii") {
            Ok(Format::Nifti)
        } else if name.ends_with(".raw") {
            Ok(Format::Raw)
        } else {
            Err(CoreError::Format(format!("{}: expected .nii, .nii.gz or .raw", path.display())))
        }
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, CoreError> {
    let path = path.as_ref();
    match Format::from_path(path)? {
        Format::Nifti | Format::NiftiGz => {
            let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
            let bytes = if bytes.starts_with(&[0x1f, 0x8b]) {
                let mut out = Vec::new();
                GzDecoder::new(bytes.as_slice()).read_to_end(&mut out).map_err(|e| CoreError::io(path, e))?;
                out
            } else {
                bytes
            };
            parse_nifti(&bytes).map_err(|e| match e {
                CoreError::Format(m) => CoreError::Format(format!("{}: {m}", path.display())),
                other => other,
            })
        }
        Format::Raw => read_raw(path),
    }
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<(), CoreError> {
    let path = path.as_ref();
    match Format::from_path(path)? {
        Format::Nifti => fs::write(path, encode_nifti(v)).map_err(|e| CoreError::io(path, e)),
        Format::NiftiGz => {
            let mut enc = GzEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&encode_nifti(v)).and_then(|_| enc.finish()).and_then(|b| fs::write(path, b)).map_err(|e| CoreError::io(path, e))
        }
        Format::Raw => write_raw(v, path),
    }
}

/// Masks are stored as 0/1 volumes; anything above 0.5 reads as foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask, CoreError> {
    Ok(Mask::from_volume(&read_volume(path)?))
}

pub fn write_mask(m: &Mask, like: &Volume, path: impl AsRef<Path>) -> Result<(), CoreError> {
    write_volume(&m.to_volume(like), path)
}

fn le_i16(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn parse_nifti(b: &[u8]) -> Result<Volume, CoreError> {
    if b.len() < NIFTI_HEADER {
        return Err(CoreError::Format("file shorter than a NIfTI-1 header".into()));
    }
    let sizeof_hdr = i32::from_le_bytes(b[0..4].try_into().unwrap());
    if sizeof_hdr != NIFTI_HEADER as i32 {
        if i32::from_be_bytes(b[0..4].try_into().unwrap()) == NIFTI_HEADER as i32 {
            return Err(CoreError::Format("big-endian NIfTI is not supported".into()));
        }
        return Err(CoreError::Format("not a NIfTI-1 file".into()));
    }
    if &b[344..347] != b"n+1" {
        return Err(CoreError::Format("only single-file NIfTI-1 (magic n+1) is supported".into()));
    }
    let ndim = le_i16(b, 40);
    if ndim != 3 {
        return Err(CoreError::Format(format!("dimension count is {ndim}, expected 3")));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let n = le_i16(b, 42 + 2 * a);
        if n <= 0 {
            return Err(CoreError::Format(format!("non-positive extent {n} on axis {a}")));
        }
        *d = n as usize;
    }
    let shape = Shape(dims);
    let datatype = le_i16(b, 70);
    let spacing = [1, 2, 3].map(|a| le_f32(b, 76 + 4 * a) as f64);
    let spacing = spacing.map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 });
    let vox_offset = le_f32(b, 108);
    if vox_offset < NIFTI_HEADER as f32 || vox_offset.fract() != 0.0 {
        return Err(CoreError::Format(format!("invalid vox_offset {vox_offset}")));
    }
    let slope = le_f32(b, 112);
    let inter = le_f32(b, 116);
    let qform = le_i16(b, 252);
    let sform = le_i16(b, 254);
    let origin = if sform > 0 {
        [le_f32(b, 280 + 12), le_f32(b, 296 + 12), le_f32(b, 312 + 12)].map(|v| v as f64)
    } else if qform > 0 {
        [le_f32(b, 268), le_f32(b, 272), le_f32(b, 276)].map(|v| v as f64)
    } else {
        [0.0; 3]
    };
    let (width, decode): (usize, fn(&[u8]) -> f64) = match datatype {
        2 => (1, |c| c[0] as f64),
        4 => (2, |c| i16::from_le_bytes([c[0], c[1]]) as f64),
        8 => (4, |c| i32::from_le_bytes(c.try_into().unwrap()) as f64),
        16 => (4, |c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
        64 => (8, |c| f64::from_le_bytes(c.try_into().unwrap())),
        other => return Err(CoreError::Format(format!("unsupported datatype {other}"))),
    };
    let start = vox_offset as usize;
    let end = start + shape.len() * width;
    if b.len() < end {
        return Err(CoreError::Format(format!("payload truncated: need {end} bytes, have {}", b.len())));
    }
    let scaled = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let data = b[start..end]
        .chunks_exact(width)
        .map(|c| {
            let v = decode(c);
            if scaled {
                (v * slope as f64 + inter as f64) as f32
            } else {
                v as f32
            }
        })
        .collect();
    Volume::new(shape, spacing, origin, data)
}

pub fn encode_nifti(v: &Volume) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_DATA_OFFSET];
    let put_i16 = |h: &mut [u8], at: usize, x: i16| h[at..at + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, x: f32| h[at..at + 4].copy_from_slice(&x.to_le_bytes());
    h[0..4].copy_from_slice(&(NIFTI_HEADER as i32).to_le_bytes());
    put_i16(&mut h, 40, 3);
    for a in 0..3 {
        put_i16(&mut h, 42 + 2 * a, v.shape().0[a] as i16);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, 16);
    put_i16(&mut h, 72, 32);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, v.spacing[a] as f32);
    }
    put_f32(&mut h, 108, NIFTI_DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    // xyzt_units: mm
    h[123] = 2;
    put_i16(&mut h, 252, 1);
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, v.origin[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(v.data().len() * 4);
    for &x in v.data() {
        h.extend_from_slice(&x.to_le_bytes());
    }
    h
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawHeader {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: String,
    order: String,
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    let mut s = raw.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_raw(path: &Path) -> Result<Volume, CoreError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| CoreError::io(&side, e))?;
    let hdr: RawHeader =
        serde_json::from_str(&text).map_err(|e| CoreError::Format(format!("{}: bad sidecar: {e}", side.display())))?;
    if hdr.dtype != "float32" {
        return Err(CoreError::Format(format!("{}: unsupported dtype {}", side.display(), hdr.dtype)));
    }
    if hdr.order != "x-fastest" {
        return Err(CoreError::Format(format!("{}: unsupported order {}", side.display(), hdr.order)));
    }
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let shape = Shape(hdr.shape);
    if bytes.len() != shape.len() * 4 {
        return Err(CoreError::Format(format!(
            "{}: payload has {} bytes, shape {shape} needs {}",
            path.display(),
            bytes.len(),
            shape.len() * 4
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Volume::new(shape, hdr.spacing, hdr.origin, data)
}

fn write_raw(v: &Volume, path: &Path) -> Result<(), CoreError> {
    let hdr = RawHeader {
        shape: v.shape().0,
        spacing: v.spacing,
        origin: v.origin,
        dtype: "float32".into(),
        order: "x-fastest".into(),
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&hdr).expect("header serialises");
    fs::write(&side, text).map_err(|e| CoreError::io(&side, e))?;
    let mut bytes = Vec::with_capacity(v.data().len() * 4);
    for &x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}
