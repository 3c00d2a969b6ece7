//! Seeded synthetic speech-like clips for desk-scale training and tests.
//!
//! Each clip is a band-limited harmonic source with a gliding pitch, shaped
//! by three resonators whose centre frequencies move between two vowel
//! targets, under a syllabic envelope, with an optional fricative burst.

use crate::audio_io::{write_wav, AudioClip, CODEC_SAMPLE_RATE};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

pub const DESK_CORPUS_CLIPS: usize = 16;
pub const DESK_CLIP_SAMPLES: usize = 6080;

/// Two-pole resonator with unit peak gain, retuned per sample.
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bandwidth: f64, sr: f64) -> f64 {
        let r = (-PI * bandwidth / sr).exp();
        let a1 = 2.0 * r * (TAU * freq / sr).cos();
        let a2 = -r * r;
        let y = (1.0 - r) * x + a1 * self.y1 + a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// One clip of `n_samples` at 16 kHz, peak-normalized to 0.5.
pub fn synth_clip(seed: u64, n_samples: usize) -> AudioClip {
    let sr = CODEC_SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0_start = rng.random_range(95.0..230.0);
    let f0_end = f0_start * rng.random_range(0.8..1.25);
    let vowel = |rng: &mut ChaCha8Rng| [rng.random_range(300.0..850.0), rng.random_range(900.0..2300.0), rng.random_range(2400.0..3200.0)];
    let (va, vb) = (vowel(&mut rng), vowel(&mut rng));
    let syllable_rate = rng.random_range(3.0..6.0);
    let syllable_phase = rng.random_range(0.0..TAU);
    let fricative = rng.random_bool(0.5).then(|| {
        let start = rng.random_range(0..n_samples.max(1));
        (start, rng.random_range(400..1200))
    });
    let mut res = [Resonator { y1: 0.0, y2: 0.0 }, Resonator { y1: 0.0, y2: 0.0 }, Resonator { y1: 0.0, y2: 0.0 }];
    let bandwidths = [80.0, 110.0, 160.0];
    let mut phase = 0.0f64;
    let mut prev_noise = 0.0f64;
    let mut out = Vec::with_capacity(n_samples);
    for n in 0..n_samples {
        let t = n as f64 / n_samples.max(1) as f64;
        let f0 = lerp(f0_start, f0_end, t);
        phase = (phase + TAU * f0 / sr) % TAU;
        let harmonics = (4000.0 / f0) as usize;
        let source: f64 = (1..=harmonics).map(|k| (k as f64 * phase).sin() / k as f64).sum();
        let shape = 0.5 - 0.5 * (PI * t).cos();
        let mut voiced = 0.0;
        for (i, r) in res.iter_mut().enumerate() {
            voiced += r.step(source, lerp(va[i], vb[i], shape), bandwidths[i], sr) / (i + 1) as f64;
        }
        let envelope = 0.55 + 0.45 * (TAU * syllable_rate * n as f64 / sr + syllable_phase).sin();
        let mut s = voiced * envelope;
        if let Some((start, len)) = fricative {
            if (start..start + len).contains(&n) {
                let w = rng.random_range(-1.0..1.0);
                let hiss = w - prev_noise;
                prev_noise = w;
                let ramp = (PI * (n - start) as f64 / len as f64).sin();
                s += 0.6 * hiss * ramp;
            }
        }
        out.push(s);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let samples = out.into_iter().map(|v| (0.5 * v / peak) as f32).collect();
    AudioClip { samples, sample_rate: CODEC_SAMPLE_RATE }
}

/// Writes `n_clips` clips named `clip_00.wav`, `clip_01.wav`, ... into `dir`.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, n_clips: usize, n_samples: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if n_clips == 0 || n_samples == 0 {
        return Err(Error::InvalidInput("synthetic corpus needs at least one nonempty clip".into()));
    }
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    (0..n_clips)
        .map(|i| {
            let path = dir.join(format!("clip_{i:02}.wav"));
            write_wav(&path, &synth_clip(seed.wrapping_mul(1000).wrapping_add(i as u64), n_samples))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::stft;

    #[test]
    fn deterministic_and_distinct() {
        assert_eq!(synth_clip(3, 6080), synth_clip(3, 6080));
        assert_ne!(synth_clip(3, 6080), synth_clip(4, 6080));
        let c = synth_clip(3, 6080);
        assert_eq!(c.len(), DESK_CLIP_SAMPLES);
        let peak = c.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-6);
    }

    #[test]
    fn energy_sits_in_the_speech_band() {
        let c = synth_clip(11, 6080);
        let s = stft(&c, 512, 128).unwrap();
        let (mut low, mut total) = (0.0, 0.0);
        for b in 0..s.bins {
            for f in 0..s.frames {
                let e = s.at(b, f).norm_sqr();
                total += e;
                if b as f64 * 16000.0 / 512.0 <= 4000.0 {
                    low += e;
                }
            }
        }
        assert!(low / total > 0.8, "{}", low / total);
    }

    #[test]
    fn corpus_files() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_synthetic_corpus(dir.path(), 3, 640, 1).unwrap();
        assert_eq!(paths.len(), 3);
        let back = crate::audio_io::load_wav(&paths[2]).unwrap();
        assert_eq!(back.len(), 640);
        assert!(write_synthetic_corpus(dir.path(), 0, 640, 1).is_err());
    }
}
