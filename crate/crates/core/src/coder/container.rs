//! "TECB" bitstream container.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TECB";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;
/// Budget byte meaning "all tokens kept".
pub const K_ALL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Fp,
    Elic,
    Tt,
    Flex,
}

impl Family {
    pub fn code(self) -> u8 {
        match self {
            Family::Fp => 0,
            Family::Elic => 1,
            Family::Tt => 2,
            Family::Flex => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Family::Fp,
            1 => Family::Elic,
            2 => Family::Tt,
            3 => Family::Flex,
            _ => return Err(Error::Invalid(format!("unknown model family {c}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Fp => "FP",
            Family::Elic => "ELIC",
            Family::Tt => "TT",
            Family::Flex => "FLEX",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp" => Ok(Family::Fp),
            "elic" => Ok(Family::Elic),
            "tt" => Ok(Family::Tt),
            "flex" => Ok(Family::Flex),
            _ => Err(Error::Invalid(format!("unknown model family {s:?}"))),
        }
    }
}

/// How dropped flexible-rate tokens are filled at decode time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillMode {
    #[default]
    Mean,
    Mask,
}

/// Flag bits: 0–1 context count, 2 fill mode (1 = mask vector),
/// 3 single past frame is repeated rather than paired with the dummy context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub context: u8,
    pub fill: FillMode,
    pub repeat_single: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self { context: 2, fill: FillMode::Mean, repeat_single: true }
    }
}

impl Flags {
    pub fn to_byte(self) -> u8 {
        (self.context & 3) | (u8::from(self.fill == FillMode::Mask) << 2) | (u8::from(self.repeat_single) << 3)
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        if b >> 4 != 0 || b & 3 == 3 {
            return Err(Error::Invalid(format!("unsupported flags {b:#04x}")));
        }
        Ok(Self {
            context: b & 3,
            fill: if b & 4 != 0 { FillMode::Mask } else { FillMode::Mean },
            repeat_single: b & 8 != 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub family: Family,
    pub flags: Flags,
    /// Token budget; [`K_ALL`] keeps every token.
    pub budget: u8,
    pub h: u16,
    pub w: u16,
    pub c: u8,
    pub frames: u8,
    pub d_lat: u16,
    pub lambda_preset: u8,
}

impl Header {
    /// Budget as a token count, given `t` tokens per block.
    pub fn tokens_kept(&self, t: usize) -> Result<usize> {
        match self.budget {
            K_ALL => Ok(t),
            k if (k as usize) <= t => Ok(k as usize),
            k => Err(Error::Invalid(format!("budget {k} exceeds {t} tokens"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub header: Header,
    pub segments: Vec<Vec<u8>>,
}

impl Container {
    pub fn payload_bytes(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }

    /// Payload bits of every segment (headers and length fields excluded).
    pub fn payload_bits(&self) -> u64 {
        self.payload_bytes() as u64 * 8
    }
}

pub fn pack_container(c: &Container) -> Result<Vec<u8>> {
    let h = &c.header;
    if c.segments.len() != h.frames as usize {
        return Err(Error::SegmentLength(format!("{} segments for {} frames", c.segments.len(), h.frames)));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + c.payload_bytes() + 4 * c.segments.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(h.family.code());
    out.push(h.flags.to_byte());
    out.push(h.budget);
    out.extend_from_slice(&h.h.to_le_bytes());
    out.extend_from_slice(&h.w.to_le_bytes());
    out.push(h.c);
    out.push(h.frames);
    out.extend_from_slice(&h.d_lat.to_le_bytes());
    out.push(h.lambda_preset);
    out.extend_from_slice(&[0; 7]);
    debug_assert_eq!(out.len(), HEADER_LEN);
    for s in &c.segments {
        let len = u32::try_from(s.len()).map_err(|_| Error::SegmentLength("segment longer than 4 GiB".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(s);
    }
    Ok(out)
}

pub fn unpack_container(b: &[u8]) -> Result<Container> {
    if b.len() >= 4 && &b[..4] != MAGIC {
        return Err(Error::BadMagic { expected: *MAGIC, found: b[..4].try_into().unwrap() });
    }
    if b.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", b.len())));
    }
    if b[4] != VERSION {
        return Err(Error::UnsupportedVersion(b[4]));
    }
    let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
    let header = Header {
        family: Family::from_code(b[5])?,
        flags: Flags::from_byte(b[6])?,
        budget: b[7],
        h: u16_at(8),
        w: u16_at(10),
        c: b[12],
        frames: b[13],
        d_lat: u16_at(14),
        lambda_preset: b[16],
    };
    let mut pos = HEADER_LEN;
    let mut segments = Vec::with_capacity(header.frames as usize);
    for i in 0..header.frames {
        let Some(lb) = b.get(pos..pos + 4) else {
            return Err(Error::SegmentLength(format!("segment {i} length field missing at byte {pos}")));
        };
        let len = u32::from_le_bytes(lb.try_into().unwrap()) as usize;
        pos += 4;
        let Some(seg) = b.get(pos..pos.saturating_add(len)) else {
            return Err(Error::SegmentLength(format!("segment {i} declares {len} bytes, {} remain", b.len() - pos)));
        };
        segments.push(seg.to_vec());
        pos += len;
    }
    if pos != b.len() {
        return Err(Error::SegmentLength(format!("{} trailing bytes after last segment", b.len() - pos)));
    }
    Ok(Container { header, segments })
}
