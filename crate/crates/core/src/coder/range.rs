//! Carry-less 32-bit range coder with 16-bit frequency precision.

use crate::error::{Error, Result};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

#[derive(Debug)]
pub struct Encoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of [`TOTAL`].
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL);
        self.range >>= PRECISION;
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Uniform 16-bit value.
    pub fn encode_bits16(&mut self, v: u32) {
        self.encode(v & 0xffff, 1);
    }

    pub fn bytes_so_far(&self) -> usize {
        self.out.len()
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.out.extend_from_slice(&self.low.to_be_bytes());
        self.out
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            low: 0,
            range: u32::MAX,
            code: 0,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.byte()? as u32;
        }
        Ok(d)
    }

    fn byte(&mut self) -> Result<u8> {
        let b = *self.input.get(self.pos).ok_or(Error::StreamExhausted)?;
        self.pos += 1;
        Ok(b)
    }

    /// Cumulative frequency the next symbol falls into.
    pub fn peek(&mut self) -> u32 {
        self.range >>= PRECISION;
        (self.code.wrapping_sub(self.low) / self.range).min(TOTAL - 1)
    }

    /// Consumes the interval chosen after [`Self::peek`].
    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.byte()? as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_bits16(&mut self) -> Result<u32> {
        let v = self.peek();
        self.consume(v, 1)?;
        Ok(v)
    }

    /// Bytes not yet read.
    pub fn remaining(&self) -> usize {
        self.input.len() - self.pos
    }
}
