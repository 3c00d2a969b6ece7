//! `.sdac` container: a little-endian header followed by fixed-width code
//! indices packed MSB-first, frame-major.
//!
//! Header layout: magic `SDAC`, version `u8 = 1`, `sample_rate: u32`,
//! `n_frames: u32`, `pad_samples: u16`, `n_quantizers: u8`, then one `u16`
//! codebook size per quantizer (semantic first).

use crate::error::{Error, Result};
use crate::quantization::{bitrate_kbps, bits_per_frame, TokenGrid};

pub const SDAC_MAGIC: &[u8; 4] = b"SDAC";
pub const SDAC_VERSION: u8 = 1;
const FIXED_HEADER_LEN: usize = 4 + 1 + 4 + 4 + 2 + 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub sample_rate: u32,
    pub n_frames: u32,
    pub pad_samples: u16,
    pub codebook_sizes: Vec<u16>,
}

impl BitstreamHeader {
    pub fn n_quantizers(&self) -> usize {
        self.codebook_sizes.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.codebook_sizes.iter().map(|&s| s as usize).collect()
    }

    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER_LEN + 2 * self.codebook_sizes.len()
    }

    fn validate(&self) -> Result<()> {
        if self.codebook_sizes.is_empty() || self.codebook_sizes.len() > u8::MAX as usize {
            return Err(Error::Format(format!("{} quantizers; need 1 to 255", self.codebook_sizes.len())));
        }
        if let Some(&s) = self.codebook_sizes.iter().find(|&&s| s < 2) {
            return Err(Error::Format(format!("codebook size {s} is below 2")));
        }
        if self.sample_rate == 0 {
            return Err(Error::Format("sample rate 0".into()));
        }
        Ok(())
    }

    /// Bytes needed for the payload.
    pub fn payload_len(&self) -> Result<usize> {
        let bits = self.n_frames as u64 * bits_per_frame(&self.sizes())? as u64;
        Ok(bits.div_ceil(8) as usize)
    }
}

fn code_width(size: usize) -> u32 {
    usize::BITS - (size - 1).leading_zeros()
}

struct BitWriter {
    bytes: Vec<u8>,
    used: u64,
}

impl BitWriter {
    fn push(&mut self, value: u32, width: u32) {
        for i in (0..width).rev() {
            if self.used % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> i) & 1 == 1 {
                let last = self.bytes.last_mut().expect("byte pushed above");
                *last |= 0x80 >> (self.used % 8);
            }
            self.used += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl BitReader<'_> {
    fn take(&mut self, width: u32) -> u32 {
        let mut v = 0u32;
        for _ in 0..width {
            let bit = (self.bytes[(self.pos / 8) as usize] >> (7 - self.pos % 8)) & 1;
            v = (v << 1) | bit as u32;
            self.pos += 1;
        }
        v
    }
}

pub fn pack(header: &BitstreamHeader, grid: &TokenGrid) -> Result<Vec<u8>> {
    header.validate()?;
    if grid.codebook_sizes != header.sizes() {
        return Err(Error::Shape(format!("grid sizes {:?} vs header sizes {:?}", grid.codebook_sizes, header.codebook_sizes)));
    }
    if grid.n_frames() != header.n_frames as usize {
        return Err(Error::Shape(format!("grid has {} frames, header {}", grid.n_frames(), header.n_frames)));
    }
    let mut out = Vec::with_capacity(header.encoded_len() + header.payload_len()?);
    out.extend_from_slice(SDAC_MAGIC);
    out.push(SDAC_VERSION);
    out.extend_from_slice(&header.sample_rate.to_le_bytes());
    out.extend_from_slice(&header.n_frames.to_le_bytes());
    out.extend_from_slice(&header.pad_samples.to_le_bytes());
    out.push(header.codebook_sizes.len() as u8);
    for s in &header.codebook_sizes {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let widths: Vec<u32> = grid.codebook_sizes.iter().map(|&s| code_width(s)).collect();
    let mut w = BitWriter { bytes: out, used: 0 };
    // Header bytes are whole; continue bit counting from a byte boundary.
    w.used = 8 * w.bytes.len() as u64;
    for t in 0..grid.n_frames() {
        for (q, row) in grid.codes.iter().enumerate() {
            let code = row[t];
            if code as usize >= grid.codebook_sizes[q] {
                return Err(Error::Range(format!("code {code} at ({q}, {t}) exceeds size {}", grid.codebook_sizes[q])));
            }
            w.push(code, widths[q]);
        }
    }
    Ok(w.bytes)
}

fn parse_header(bytes: &[u8]) -> Result<BitstreamHeader> {
    if bytes.len() < 5 || &bytes[..4] != SDAC_MAGIC {
        return Err(Error::Format("not an .sdac stream".into()));
    }
    if bytes[4] != SDAC_VERSION {
        return Err(Error::Format(format!("unsupported .sdac version {}", bytes[4])));
    }
    if bytes.len() < FIXED_HEADER_LEN {
        return Err(Error::Length(format!("header truncated at {} bytes", bytes.len())));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let nq = bytes[15] as usize;
    let end = FIXED_HEADER_LEN + 2 * nq;
    if bytes.len() < end {
        return Err(Error::Length(format!("codebook table truncated at {} bytes", bytes.len())));
    }
    let header = BitstreamHeader {
        sample_rate: u32_at(5),
        n_frames: u32_at(9),
        pad_samples: u16::from_le_bytes([bytes[13], bytes[14]]),
        codebook_sizes: (0..nq).map(|q| u16::from_le_bytes([bytes[16 + 2 * q], bytes[17 + 2 * q]])).collect(),
    };
    header.validate()?;
    Ok(header)
}

pub fn unpack(bytes: &[u8]) -> Result<(BitstreamHeader, TokenGrid)> {
    let header = parse_header(bytes)?;
    let payload = &bytes[header.encoded_len()..];
    let need = header.payload_len()?;
    if payload.len() < need {
        return Err(Error::Length(format!("payload has {} bytes, header implies {need}", payload.len())));
    }
    if payload.len() > need {
        return Err(Error::Length(format!("{} trailing bytes after the payload", payload.len() - need)));
    }
    let sizes = header.sizes();
    let widths: Vec<u32> = sizes.iter().map(|&s| code_width(s)).collect();
    let frames = header.n_frames as usize;
    let mut codes = vec![Vec::with_capacity(frames); sizes.len()];
    let mut r = BitReader { bytes: payload, pos: 0 };
    for t in 0..frames {
        for (q, row) in codes.iter_mut().enumerate() {
            let code = r.take(widths[q]);
            if code as usize >= sizes[q] {
                return Err(Error::Corrupt(format!("code {code} at ({q}, {t}) exceeds size {}", sizes[q])));
            }
            row.push(code);
        }
    }
    let used = r.pos;
    if used % 8 != 0 && payload[need - 1] & (0xff >> (used % 8)) != 0 {
        return Err(Error::Corrupt("nonzero padding bits".into()));
    }
    Ok((header, TokenGrid::new(codes, sizes)?))
}

/// Nominal bitrate of the header's codebooks and the bitrate the stream
/// actually spends on its payload over the unpadded duration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FileBitrate {
    pub nominal_kbps: f64,
    pub actual_kbps: f64,
    pub payload_bits: u64,
}

/// `byte_count` is the total stream size; only the payload bits that carry
/// codes are counted.
pub fn file_bitrate(header: &BitstreamHeader, byte_count: usize) -> Result<FileBitrate> {
    if header.n_frames == 0 {
        return Err(Error::InvalidInput("bitrate of an empty stream".into()));
    }
    let hop = crate::model::HOP_LENGTH as u64;
    let frame_rate = header.sample_rate as f64 / hop as f64;
    let payload_bits = header.n_frames as u64 * bits_per_frame(&header.sizes())? as u64;
    if byte_count < header.encoded_len() + payload_bits.div_ceil(8) as usize {
        return Err(Error::Length(format!("{byte_count} bytes cannot hold the declared payload")));
    }
    let samples = (header.n_frames as u64 * hop).saturating_sub(header.pad_samples as u64);
    if samples == 0 {
        return Err(Error::InvalidInput("stream covers no samples".into()));
    }
    let duration = samples as f64 / header.sample_rate as f64;
    Ok(FileBitrate {
        nominal_kbps: bitrate_kbps(&header.sizes(), frame_rate)?,
        actual_kbps: payload_bits as f64 / duration / 1000.0,
        payload_bits,
    })
}
