//! Objective quality metrics and corpus evaluation.

use crate::audio_io::{load_wav, normalize_lufs, AudioClip};
use crate::error::{Error, Result};
use crate::losses::multiscale_mel_loss;
use crate::spectral::MelScaleSet;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const SI_SNR_EPS: f64 = 1e-8;
pub const SI_SNR_CAP_DB: f64 = 60.0;
pub const EVAL_CSV_HEADER: &str = "clip_id,bitrate_kbps,si_snr_db,mel_distance";

/// Scale-invariant SNR in dB after removing both means, clamped to ±60 dB.
pub fn si_snr(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    let widen = |x: &[f32]| x.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    si_snr_samples(&widen(&reference.samples), &widen(&estimate.samples))
}

/// [`si_snr`] on raw `f64` sequences.
pub fn si_snr_samples(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Shape(format!("si-snr on lengths {} and {}", reference.len(), estimate.len())));
    }
    let centered = |x: &[f64]| {
        let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
        x.iter().map(|v| v - mean).collect::<Vec<f64>>()
    };
    let r = centered(reference);
    let e = centered(estimate);
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::InvalidInput("si-snr reference is all zero after mean removal".into()));
    }
    let scale = r.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (a, b) in r.iter().zip(&e) {
        let s = scale * a;
        target += s * s;
        noise += (b - s) * (b - s);
    }
    let db = 10.0 * ((target + SI_SNR_EPS) / (noise + SI_SNR_EPS)).log10();
    Ok(db.clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB))
}

/// Multi-scale log-mel L1 distance, identical to the reconstruction loss.
pub fn mel_distance(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    multiscale_mel_loss(reference, estimate, &MelScaleSet::standard(reference.sample_rate))
}

/// Anything that turns a clip into a reconstruction of the same length.
pub trait Codec {
    fn reconstruct(&self, clip: &AudioClip) -> Result<AudioClip>;
    fn nominal_bitrate_kbps(&self) -> f64;
}

/// Returns its input unchanged.
pub struct Passthrough;

impl Codec for Passthrough {
    fn reconstruct(&self, clip: &AudioClip) -> Result<AudioClip> {
        Ok(clip.clone())
    }

    fn nominal_bitrate_kbps(&self) -> f64 {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub clip_id: String,
    pub nominal_bitrate_kbps: f64,
    pub si_snr_db: f64,
    pub mel_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(Self { mean: v.iter().sum::<f64>() / n as f64, median })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEval {
    pub reports: Vec<EvalReport>,
    /// Clips that could not be read or processed, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    pub si_snr: Aggregate,
    pub mel_distance: Aggregate,
}

impl CorpusEval {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_CSV_HEADER}\n");
        for r in &self.reports {
            s.push_str(&format!("{},{},{},{}\n", r.clip_id, r.nominal_bitrate_kbps, r.si_snr_db, r.mel_distance));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
        f.write_all(self.to_csv().as_bytes()).map_err(Error::io(path))
    }
}

/// Sorted `.wav` files directly inside `dir`.
pub fn list_wavs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads and loudness-normalizes one corpus clip the same way training does.
pub fn prepare_clip(path: &Path, target_lufs: f64) -> Result<AudioClip> {
    Ok(normalize_lufs(&load_wav(path)?, target_lufs)?.clip)
}

/// Runs `codec` over every WAV in `corpus_dir`; unreadable clips are skipped
/// with a warning and listed in the result.
pub fn eval_corpus(codec: &dyn Codec, corpus_dir: impl AsRef<Path>, target_lufs: f64) -> Result<CorpusEval> {
    let paths = list_wavs(&corpus_dir)?;
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!("no .wav files in {}", corpus_dir.as_ref().display())));
    }
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for path in paths {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let result = prepare_clip(&path, target_lufs).and_then(|reference| {
            let est = codec.reconstruct(&reference)?;
            Ok(EvalReport {
                clip_id: id.clone(),
                nominal_bitrate_kbps: codec.nominal_bitrate_kbps(),
                si_snr_db: si_snr(&reference, &est)?,
                mel_distance: mel_distance(&reference, &est)?,
            })
        });
        match result {
            Ok(r) => reports.push(r),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push((path, e.to_string()));
            }
        }
    }
    let snr: Vec<f64> = reports.iter().map(|r| r.si_snr_db).collect();
    let mel: Vec<f64> = reports.iter().map(|r| r.mel_distance).collect();
    let (Some(si_snr), Some(mel_distance)) = (Aggregate::of(&snr), Aggregate::of(&mel)) else {
        return Err(Error::InvalidInput("no clip in the corpus could be evaluated".into()));
    };
    Ok(CorpusEval { reports, skipped, si_snr, mel_distance })
}
