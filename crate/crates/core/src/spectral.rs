//! STFT, mel filterbanks and log-mel features at the seven loss scales.

use crate::audio_io::AudioClip;
use crate::error::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Window sizes of the multi-scale mel loss, paired index-wise with [`MEL_BINS`].
pub const MEL_WINDOWS: [usize; 7] = [32, 64, 128, 256, 512, 1024, 2048];
pub const MEL_BINS: [usize; 7] = [5, 10, 20, 40, 80, 160, 320];
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub window_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl MelConfig {
    /// Config with hop = window / 4, full band and the default log floor.
    pub fn new(window_length: usize, n_mels: usize, sample_rate: u32) -> Result<Self> {
        let cfg = Self {
            window_length,
            hop_length: window_length / 4,
            n_mels,
            sample_rate,
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
            log_floor: LOG_FLOOR,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length < 4 || self.hop_length * 4 != self.window_length {
            return Err(Error::InvalidInput(format!(
                "window {} must be a positive multiple of 4 with hop = window / 4 (hop {})",
                self.window_length, self.hop_length
            )));
        }
        if self.n_mels == 0 || self.n_mels > self.n_bins() {
            return Err(Error::InvalidInput(format!(
                "{} mel bands do not fit {} frequency bins",
                self.n_mels,
                self.n_bins()
            )));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::InvalidInput(format!("bad band [{}, {}]", self.fmin, self.fmax)));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::InvalidInput("log floor must be positive".into()));
        }
        Ok(())
    }
}

/// The seven (window, mel-bin) pairs of the reconstruction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MelScaleSet {
    pub configs: Vec<MelConfig>,
}

impl MelScaleSet {
    pub fn standard(sample_rate: u32) -> Self {
        let configs = MEL_WINDOWS
            .iter()
            .zip(MEL_BINS)
            .map(|(&w, m)| MelConfig::new(w, m, sample_rate).expect("standard mel scales are valid"))
            .collect();
        Self { configs }
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// Index into a length-`len` signal reflected about its end samples
/// (no edge repetition), folding as many times as needed.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// One-sided complex spectrogram stored bin-major: `data[bin * frames + frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> Complex<f64> {
        self.data[bin * self.frames + frame]
    }
}

/// Centered STFT with a periodic Hann window and reflect padding of
/// `window_length / 2`; yields `len / hop + 1` frames.
pub fn stft(clip: &AudioClip, window_length: usize, hop_length: usize) -> Result<Spectrogram> {
    if clip.is_empty() {
        return Err(Error::InvalidInput("stft of an empty clip".into()));
    }
    if window_length < 2 || hop_length == 0 {
        return Err(Error::InvalidInput(format!("bad stft geometry {window_length}/{hop_length}")));
    }
    let len = clip.len();
    let bins = window_length / 2 + 1;
    let frames = len / hop_length + 1;
    let pad = (window_length / 2) as isize;
    let window = hann_window(window_length);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_length);
    let mut buf = vec![Complex::new(0.0, 0.0); window_length];
    let mut data = vec![Complex::new(0.0, 0.0); bins * frames];
    for f in 0..frames {
        let start = (f * hop_length) as isize - pad;
        for (j, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(window[j] * clip.samples[reflect_index(start + j as isize, len)] as f64, 0.0);
        }
        fft.process(&mut buf);
        for (k, c) in buf.iter().take(bins).enumerate() {
            data[k * frames + f] = *c;
        }
    }
    Ok(Spectrogram { bins, frames, data })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters, `weights[mel * n_bins + bin]`, peak value 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..][..self.n_bins]
    }

    /// Center frequency (Hz) of each filter.
    pub fn centers(config: &MelConfig) -> Vec<f64> {
        edges_hz(config)[1..=config.n_mels].to_vec()
    }
}

fn edges_hz(config: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(config.fmin), hz_to_mel(config.fmax));
    (0..config.n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64)).collect()
}

pub fn mel_filterbank(config: &MelConfig) -> Result<MelFilterbank> {
    config.validate()?;
    let n_bins = config.n_bins();
    let edges = edges_hz(config);
    let bin_hz = config.sample_rate as f64 / config.window_length as f64;
    let mut weights = vec![0.0; config.n_mels * n_bins];
    for m in 0..config.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            weights[m * n_bins + k] = rising.min(falling).max(0.0);
        }
    }
    Ok(MelFilterbank { n_mels: config.n_mels, n_bins, weights })
}

/// Natural-log mel energies `log(max(filterbank · |stft|, floor))`, mel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMel {
    pub n_mels: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl LogMel {
    pub fn at(&self, mel: usize, frame: usize) -> f64 {
        self.data[mel * self.frames + frame]
    }
}

pub fn log_mel(clip: &AudioClip, config: &MelConfig) -> Result<LogMel> {
    let fb = mel_filterbank(config)?;
    log_mel_with(clip, config, &fb)
}

pub(crate) fn log_mel_with(clip: &AudioClip, config: &MelConfig, fb: &MelFilterbank) -> Result<LogMel> {
    let spec = stft(clip, config.window_length, config.hop_length)?;
    let frames = spec.frames;
    let mag: Vec<f64> = spec.data.iter().map(|c| c.norm()).collect();
    let mut data = vec![0.0; fb.n_mels * frames];
    for m in 0..fb.n_mels {
        let row = fb.row(m);
        for f in 0..frames {
            let e: f64 = row.iter().enumerate().map(|(k, w)| w * mag[k * frames + f]).sum();
            data[m * frames + f] = e.max(config.log_floor).ln();
        }
    }
    Ok(LogMel { n_mels: fb.n_mels, frames, data })
}
