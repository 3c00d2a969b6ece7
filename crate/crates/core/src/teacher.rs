//! Frame-level semantic teacher features: SEMF file import and a seeded mock.
//!
//! SEMF layout (little-endian): magic `SEMF`, version `u8 = 1`, `dim: u32`,
//! `n_frames: u32`, then `n_frames × dim` `f32` values, frame-major.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const SEMF_MAGIC: &[u8; 4] = b"SEMF";
pub const SEMF_VERSION: u8 = 1;
const HEADER_LEN: usize = 13;
pub const DEFAULT_TEACHER_DIM: usize = 768;
/// Largest frame-count difference [`align_frames`] will absorb.
pub const ALIGN_TOLERANCE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatures {
    /// `dim × n_frames`.
    pub values: Matrix,
    pub frame_rate: f64,
}

impl TeacherFeatures {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::InvalidInput("teacher features must be finite".into()));
        }
        Ok(Self { values, frame_rate: 50.0 })
    }

    pub fn dim(&self) -> usize {
        self.values.rows
    }

    pub fn n_frames(&self) -> usize {
        self.values.cols
    }

    pub fn to_semf(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.data.len());
        out.extend_from_slice(SEMF_MAGIC);
        out.push(SEMF_VERSION);
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_frames() as u32).to_le_bytes());
        for t in 0..self.n_frames() {
            for r in 0..self.dim() {
                out.extend_from_slice(&self.values.get(r, t).to_le_bytes());
            }
        }
        out
    }

    /// Parses a SEMF buffer and keeps frames `[start, start + n)`; `None`
    /// keeps everything from `start` on.
    pub fn from_semf(bytes: &[u8], start: usize, n: Option<usize>) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != SEMF_MAGIC {
            return Err(Error::Format("not a SEMF teacher-feature file".into()));
        }
        if bytes[4] != SEMF_VERSION {
            return Err(Error::Format(format!("unsupported SEMF version {}", bytes[4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice")) as usize;
        let (dim, frames) = (word(5), word(9));
        let expected = dim
            .checked_mul(frames)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Format("SEMF dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!("SEMF body is {} bytes, header implies {expected}", bytes.len())));
        }
        let n = n.unwrap_or(frames.saturating_sub(start));
        if start.checked_add(n).is_none_or(|end| end > frames) {
            return Err(Error::Range(format!("frames [{start}, {}) outside file with {frames} frames", start.saturating_add(n))));
        }
        let body = &bytes[HEADER_LEN..];
        let values = Matrix::from_fn(dim, n, |r, t| {
            let i = 4 * ((start + t) * dim + r);
            f32::from_le_bytes(body[i..i + 4].try_into().expect("4-byte slice"))
        });
        Self::new(values)
    }
}

pub fn write_teacher_features(path: impl AsRef<Path>, features: &TeacherFeatures) -> Result<()> {
    std::fs::write(path.as_ref(), features.to_semf()).map_err(Error::io(path.as_ref()))
}

/// Reads `n_frames` frames starting at `start_frame`.
pub fn load_teacher_features(path: impl AsRef<Path>, start_frame: usize, n_frames: usize) -> Result<TeacherFeatures> {
    let bytes = std::fs::read(path.as_ref()).map_err(Error::io(path.as_ref()))?;
    TeacherFeatures::from_semf(&bytes, start_frame, Some(n_frames))
}

pub fn load_all_teacher_features(path: impl AsRef<Path>) -> Result<TeacherFeatures> {
    let bytes = std::fs::read(path.as_ref()).map_err(Error::io(path.as_ref()))?;
    TeacherFeatures::from_semf(&bytes, 0, None)
}

fn frame_seed(clip_hash: u64, frame: usize) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = clip_hash ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stand-in features: each frame is an independent normal
/// vector with standard deviation `1 / sqrt(dim)` seeded by `(clip_hash, frame)`.
pub fn mock_teacher(clip_hash: u64, n_frames: usize, dim: usize) -> TeacherFeatures {
    let std = 1.0 / (dim.max(1) as f32).sqrt();
    let columns: Vec<Vec<f32>> = (0..n_frames)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(clip_hash, t));
            (0..dim).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal) * std).collect()
        })
        .collect();
    TeacherFeatures { values: Matrix::from_columns(dim, &columns), frame_rate: 50.0 }
}

/// Nearest-index resampling of the frame axis to `n_codec_frames`.
pub fn align_frames(features: &TeacherFeatures, n_codec_frames: usize) -> Result<TeacherFeatures> {
    let src = features.n_frames();
    if src.abs_diff(n_codec_frames) > ALIGN_TOLERANCE || (src == 0 && n_codec_frames > 0) {
        return Err(Error::Alignment { teacher: src, codec: n_codec_frames });
    }
    if src == n_codec_frames {
        return Ok(features.clone());
    }
    let map = |t: usize| ((2 * t * src + n_codec_frames) / (2 * n_codec_frames)).min(src - 1);
    let values = Matrix::from_fn(features.dim(), n_codec_frames, |r, t| features.values.get(r, map(t)));
    Ok(TeacherFeatures { values, frame_rate: features.frame_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(dim: usize, frames: usize) -> TeacherFeatures {
        TeacherFeatures::new(Matrix::from_fn(dim, frames, |_, t| t as f32)).unwrap()
    }

    #[test]
    fn round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.semf");
        let f = mock_teacher(9, 7, 12);
        write_teacher_features(&path, &f).unwrap();
        let back = load_all_teacher_features(&path).unwrap();
        assert_eq!(back.values.shape(), (12, 7));
        let bits = |m: &Matrix| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.values), bits(&f.values));
    }

    #[test]
    fn header_layout() {
        let bytes = ramp(3, 2).to_semf();
        assert_eq!(&bytes[..4], b"SEMF");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &3u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 13 + 3 * 2 * 4);
        // Frame-major: the second frame's values follow the first frame's.
        assert_eq!(&bytes[13 + 12..13 + 16], &1.0f32.to_le_bytes());
    }

    #[test]
    fn slice_picks_constant_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.semf");
        write_teacher_features(&path, &ramp(5, 6)).unwrap();
        let s = load_teacher_features(&path, 2, 1).unwrap();
        assert_eq!(s.values.shape(), (5, 1));
        assert!(s.values.data.iter().all(|&v| v == 2.0));
        assert!(matches!(load_teacher_features(&path, 5, 2), Err(Error::Range(_))));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = ramp(2, 2).to_semf();
        assert!(matches!(TeacherFeatures::from_semf(&bytes[..20], 0, None), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(TeacherFeatures::from_semf(&bytes, 0, None), Err(Error::Format(_))));
        assert!(matches!(load_all_teacher_features("/nonexistent/x.semf"), Err(Error::Io { .. })));
    }

    #[test]
    fn mock_is_pure_and_seed_sensitive() {
        assert_eq!(mock_teacher(1, 4, 16), mock_teacher(1, 4, 16));
        assert_eq!(mock_teacher(5, 0, 768).values.shape(), (768, 0));
        let mut differing = 0usize;
        let mut total = 0usize;
        let base = mock_teacher(0, 2, 32);
        for h in 1..1000u64 {
            let other = mock_teacher(h, 2, 32);
            differing += base.values.data.iter().zip(&other.values.data).filter(|(a, b)| a != b).count();
            total += base.values.data.len();
        }
        assert!(differing as f64 >= 0.99 * total as f64);
    }

    #[test]
    fn mock_prefix_is_stable() {
        let long = mock_teacher(3, 10, 8);
        let short = mock_teacher(3, 4, 8);
        assert_eq!(long.values.columns(0, 4), short.values);
    }

    #[test]
    fn align_examples() {
        let f = ramp(3, 20);
        let a = align_frames(&f, 19).unwrap();
        assert_eq!(a.n_frames(), 19);
        assert_eq!(a.values.get(0, 0), 0.0);
        let picked: Vec<f32> = (0..19).map(|t| a.values.get(0, t)).collect();
        let expected: Vec<f32> = (0..19).map(|t| ((t as f64 * 20.0 / 19.0).round()) as f32).collect();
        assert_eq!(picked, expected);
        assert_eq!(align_frames(&ramp(3, 19), 19).unwrap(), ramp(3, 19));
        assert!(matches!(align_frames(&ramp(3, 25), 19), Err(Error::Alignment { teacher: 25, codec: 19 })));
        assert_eq!(align_frames(&ramp(3, 17), 19).unwrap().n_frames(), 19);
    }

    proptest! {
        #[test]
        fn semf_round_trip_bit_exact(dim in 1usize..20, frames in 0usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::from_fn(dim, frames, |_, _| 0.0);
            let data = m.data.iter().map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect();
            let f = TeacherFeatures::new(Matrix::from_vec(dim, frames, data).unwrap()).unwrap();
            let back = TeacherFeatures::from_semf(&f.to_semf(), 0, None).unwrap();
            prop_assert_eq!(back.values.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            f.values.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn align_is_idempotent(frames in 1usize..40, delta in 0usize..=2, up in any::<bool>()) {
            let target = if up { frames + delta } else { frames.saturating_sub(delta).max(1) };
            let once = align_frames(&ramp(2, frames), target).unwrap();
            let twice = align_frames(&once, target).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
