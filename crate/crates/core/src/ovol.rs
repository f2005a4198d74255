//! OVOL container I/O.
//!
//! Layout (all little-endian):
//! ```text
//! bytes 0-3   magic "OVOL"
//! byte  4     version = 1
//! byte  5     modality (0=OCT, 1=OCTA, 2=VRI mask, 3=lesion mask)
//! bytes 6-7   reserved = 0
//! 3 x u32     Z, X, Y
//! 3 x f32     spacings (axial / lateral-x / lateral-y, um per px)
//! Z*X*Y x f32 payload, index order (y*X + x)*Z + z
//! ```
//! The payload index order matches [`Volume`]'s in-memory layout, so reads
//! and writes are a header plus one straight pass over the voxel data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::volume::{Modality, Spacing, Volume};

const MAGIC: &[u8; 4] = b"OVOL";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 12 + 12;

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + v.data().len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(v.modality().to_byte());
    buf.extend_from_slice(&[0, 0]);
    for d in [v.nz(), v.nx(), v.ny()] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let sp = v.spacing();
    for s in [sp.axial_um, sp.x_um, sp.y_um] {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    for &f in v.data() {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_volume(&bytes).map_err(|e| match e {
        Error::Format(m) => format_err!("{}: {m}", path.display()),
        other => other,
    })
}

pub fn parse_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err!("file shorter than header ({} bytes)", bytes.len()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err!("bad magic {:?}", &bytes[0..4]));
    }
    if bytes[4] != VERSION {
        return Err(format_err!("unsupported version {}", bytes[4]));
    }
    let modality = Modality::from_byte(bytes[5])?;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(format_err!("reserved bytes must be zero"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let f32_at = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let (nz, nx, ny) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    if nz == 0 || nx == 0 || ny == 0 {
        return Err(format_err!("non-positive dims ({nz}, {nx}, {ny})"));
    }
    let (sa, sx, sy) = (f32_at(20), f32_at(24), f32_at(28));
    if !(sa > 0.0 && sx > 0.0 && sy > 0.0) {
        return Err(format_err!("non-positive spacing ({sa}, {sx}, {sy})"));
    }
    let n = nz * nx * ny;
    let want = HEADER_LEN + n * 4;
    if bytes.len() < want {
        return Err(format_err!(
            "truncated payload: want {want} bytes total, file has {}",
            bytes.len()
        ));
    }
    if bytes.len() > want {
        return Err(format_err!(
            "trailing bytes after payload: want {want}, file has {}",
            bytes.len()
        ));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        data.push(f32_at(HEADER_LEN + i * 4));
    }
    let spacing =
        Spacing::new(sa, sx, sy).map_err(|_| format_err!("non-positive spacing ({sa}, {sx}, {sy})"))?;
    Volume::from_vec(nz, nx, ny, spacing, modality, data)
}
