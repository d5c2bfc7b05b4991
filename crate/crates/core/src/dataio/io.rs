use std::path::{Path, PathBuf};

use super::{BandStats, ImageCube, Sequence};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TECR";
pub const HEADER_LEN: usize = 16;

/// Serializes a sequence: 16-byte header then frame-major, band-major u16 LE samples.
pub fn write_cube(seq: &Sequence) -> Result<Vec<u8>> {
    let (h, w, c) = seq.dims();
    if seq.len() > 255 || c > 255 || h > 65535 || w > 65535 {
        return Err(Error::Invalid(format!("{}x{c}x{h}x{w} does not fit the raw header", seq.len())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + seq.len() * h * w * c * 2);
    out.extend_from_slice(MAGIC);
    out.push(1);
    out.push(0);
    out.push(seq.len() as u8);
    out.push(c as u8);
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    for f in &seq.frames {
        for &v in &f.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_cube(bytes: &[u8]) -> Result<Sequence> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: *MAGIC,
            found: bytes[..4].try_into().unwrap(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if bytes[4] != 1 {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    if bytes[5] != 0 {
        return Err(Error::UnsupportedDtype(bytes[5]));
    }
    let t = bytes[6] as usize;
    let c = bytes[7] as usize;
    let h = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let w = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let per = h * w * c;
    let need = HEADER_LEN + t * per * 2;
    if bytes.len() < need {
        return Err(Error::Truncated(format!("{} bytes, expected {need}", bytes.len())));
    }
    let frames = (0..t)
        .map(|i| {
            let base = HEADER_LEN + i * per * 2;
            let data = bytes[base..base + per * 2]
                .chunks_exact(2)
                .map(|p| u16::from_le_bytes([p[0], p[1]]))
                .collect();
            ImageCube::new(h, w, c, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Sequence::new(frames, (0..t as i64).collect())
}

pub fn save_cube(path: &Path, seq: &Sequence) -> Result<()> {
    std::fs::write(path, write_cube(seq)?)?;
    Ok(())
}

/// Timestamps are not stored in the raw format; loaded frames get `0..T`.
pub fn load_cube(path: &Path) -> Result<Sequence> {
    read_cube(&std::fs::read(path)?)
}

/// `<path>.stats.json`
pub fn stats_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".stats.json");
    PathBuf::from(s)
}

pub fn save_stats(path: &Path, stats: &BandStats) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(stats)?)?;
    Ok(())
}

pub fn load_stats(path: &Path) -> Result<BandStats> {
    let s: BandStats = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    BandStats::new(s.mean, s.std)
}
