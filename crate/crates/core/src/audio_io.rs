//! Waveform loading, loudness measurement and normalization, excerpting and
//! hop-alignment padding.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Sample rate every codec path expects.
pub const CODEC_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn require_rate(&self, rate: u32) -> Result<()> {
        if self.sample_rate != rate {
            return Err(Error::InvalidInput(format!("expected {rate} Hz audio, got {} Hz", self.sample_rate)));
        }
        Ok(())
    }

    /// Copy with the first `len` samples.
    pub fn truncated(&self, len: usize) -> Self {
        Self { samples: self.samples[..len.min(self.len())].to_vec(), sample_rate: self.sample_rate }
    }

    /// Stable 64-bit FNV-1a hash of the sample bits, used to key teacher features.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.samples.iter().flat_map(|s| s.to_bits().to_le_bytes()).chain(self.sample_rate.to_le_bytes()) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Training excerpt geometry and loudness target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcerptSpec {
    pub duration_s: f64,
    pub target_lufs: f64,
}

impl Default for ExcerptSpec {
    fn default() -> Self {
        Self { duration_s: 0.38, target_lufs: -24.0 }
    }
}

impl ExcerptSpec {
    /// Excerpt length in samples, rounded down.
    pub fn n_samples(&self, sample_rate: u32) -> usize {
        // Guard against 0.38 * 16000 landing a hair under the integer.
        (self.duration_s * sample_rate as f64 + 1e-9).floor() as usize
    }
}

/// Reads a PCM WAV file (16-bit integer or 32-bit float) and averages its channels.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::Io { path: path.to_path_buf(), source: io },
        hound::Error::Unsupported => Error::Unsupported(format!("{}: unsupported WAV encoding", path.display())),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!("{}: {bits}-bit {fmt:?} samples", path.display())));
        }
    };
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().map(|&s| s as f64).sum::<f64>() / channels as f64) as f32)
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV, clamping to full scale.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io { path: path.to_path_buf(), source: io },
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &clip.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)
}

/// Direct-form-I biquad with `a0 = 1`.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                (x2, x1, y2, y1) = (x1, x0, y1, y0);
                y0
            })
            .collect()
    }
}

/// The two K-weighting stages (high shelf, then RLB high-pass), derived for
/// an arbitrary sample rate from the analog prototype.
fn k_weighting(sample_rate: u32) -> [Biquad; 2] {
    use std::f64::consts::PI;
    let fs = sample_rate as f64;

    let (gain_db, q, fc) = (3.999_843_853_973_347, 0.707_175_236_955_419_6, 1_681.974_450_955_533);
    let k = (PI * fc / fs).tan();
    let vh = 10f64.powf(gain_db / 20.0);
    let vb = vh.powf(0.499_666_774_154_541_6);
    let a0 = 1.0 + k / q + k * k;
    let shelf = Biquad {
        b: [(vh + vb * k / q + k * k) / a0, 2.0 * (k * k - vh) / a0, (vh - vb * k / q + k * k) / a0],
        a: [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
    };

    let (q, fc) = (0.500_327_037_323_877_3, 38.135_470_876_024_44);
    let k = (PI * fc / fs).tan();
    let a0 = 1.0 + k / q + k * k;
    let highpass = Biquad { b: [1.0, -2.0, 1.0], a: [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0] };

    [shelf, highpass]
}

fn power_to_lufs(power: f64) -> f64 {
    if power > 0.0 {
        -0.691 + 10.0 * power.log10()
    } else {
        f64::NEG_INFINITY
    }
}

const GATE_BLOCK_S: f64 = 0.4;
const ABSOLUTE_GATE_LUFS: f64 = -70.0;
const RELATIVE_GATE_LU: f64 = -10.0;

/// Integrated K-weighted loudness in LUFS.
///
/// Clips shorter than one 400 ms gating block are measured ungated over their
/// full length. Digital silence yields `f64::NEG_INFINITY`.
pub fn measure_lufs(clip: &AudioClip) -> Result<f64> {
    if clip.is_empty() {
        return Err(Error::InvalidInput("cannot measure loudness of an empty clip".into()));
    }
    let [shelf, highpass] = k_weighting(clip.sample_rate);
    let x: Vec<f64> = clip.samples.iter().map(|&s| s as f64).collect();
    let y = highpass.run(&shelf.run(&x));
    let sq: Vec<f64> = y.iter().map(|v| v * v).collect();

    let block = (GATE_BLOCK_S * clip.sample_rate as f64).round() as usize;
    if sq.len() < block {
        return Ok(power_to_lufs(sq.iter().sum::<f64>() / sq.len() as f64));
    }

    let step = block / 4;
    let n_blocks = (sq.len() - block) / step + 1;
    let powers: Vec<f64> =
        (0..n_blocks).map(|j| sq[j * step..j * step + block].iter().sum::<f64>() / block as f64).collect();
    let above_abs: Vec<f64> = powers.iter().copied().filter(|&p| power_to_lufs(p) > ABSOLUTE_GATE_LUFS).collect();
    if above_abs.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    let relative = power_to_lufs(above_abs.iter().sum::<f64>() / above_abs.len() as f64) + RELATIVE_GATE_LU;
    let gated: Vec<f64> = above_abs.into_iter().filter(|&p| power_to_lufs(p) > relative).collect();
    Ok(power_to_lufs(gated.iter().sum::<f64>() / gated.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub clip: AudioClip,
    /// Applied gain in dB.
    pub gain_db: f64,
    /// Set when at least one sample had to be clamped to ±1.
    pub clipped: bool,
}

/// Scales `clip` so its loudness equals `target_lufs`, hard-clamping overs.
pub fn normalize_lufs(clip: &AudioClip, target_lufs: f64) -> Result<Normalized> {
    let measured = measure_lufs(clip)?;
    if !measured.is_finite() {
        return Err(Error::Silent);
    }
    let gain_db = target_lufs - measured;
    let gain = 10f64.powf(gain_db / 20.0);
    let mut clipped = false;
    let samples = clip
        .samples
        .iter()
        .map(|&s| {
            let v = s as f64 * gain;
            if v.abs() > 1.0 {
                clipped = true;
            }
            v.clamp(-1.0, 1.0) as f32
        })
        .collect();
    if clipped {
        log::warn!("loudness normalization to {target_lufs} LUFS clamped samples");
    }
    Ok(Normalized { clip: AudioClip { samples, sample_rate: clip.sample_rate }, gain_db, clipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Excerpt {
    pub clip: AudioClip,
    pub offset: usize,
    /// Set when the source was shorter than the excerpt and was zero-padded.
    pub padded: bool,
}

/// Draws a fixed-length excerpt at a uniform offset using `rng`.
pub fn excerpt_with<R: Rng>(clip: &AudioClip, n_samples: usize, rng: &mut R) -> Excerpt {
    if clip.len() < n_samples {
        let mut samples = clip.samples.clone();
        samples.resize(n_samples, 0.0);
        return Excerpt { clip: AudioClip { samples, sample_rate: clip.sample_rate }, offset: 0, padded: true };
    }
    let offset = rng.random_range(0..=clip.len() - n_samples);
    Excerpt {
        clip: AudioClip { samples: clip.samples[offset..offset + n_samples].to_vec(), sample_rate: clip.sample_rate },
        offset,
        padded: false,
    }
}

/// Seeded, deterministic version of [`excerpt_with`] sized by `spec`.
pub fn random_excerpt(clip: &AudioClip, spec: &ExcerptSpec, rng_seed: u64) -> Excerpt {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    excerpt_with(clip, spec.n_samples(clip.sample_rate), &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Padded {
    pub clip: AudioClip,
    /// Zeros appended at the end.
    pub pad_samples: usize,
}

/// Right-pads with zeros to the next multiple of `hop_total`.
pub fn pad_to_hop(clip: &AudioClip, hop_total: usize) -> Result<Padded> {
    if hop_total == 0 {
        return Err(Error::InvalidInput("hop must be positive".into()));
    }
    let pad_samples = (hop_total - clip.len() % hop_total) % hop_total;
    let mut samples = clip.samples.clone();
    samples.resize(clip.len() + pad_samples, 0.0);
    Ok(Padded { clip: AudioClip { samples, sample_rate: clip.sample_rate }, pad_samples })
}
