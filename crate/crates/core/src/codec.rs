//! File-level codec: waveform → `.sdac` bytes → waveform with a trained model.

use crate::audio_io::{pad_to_hop, AudioClip, CODEC_SAMPLE_RATE};
use crate::bitstream::{file_bitrate, pack, unpack, BitstreamHeader, FileBitrate};
use crate::error::{Error, Result};
use crate::metrics::Codec;
use crate::model::{Film, SemDac, FRAME_RATE};
use crate::quantization::{bitrate_kbps, TokenGrid};
use crate::training::Checkpoint;
use candle_core::{Device, Tensor};
use std::path::Path;

/// A trained model used for inference with every quantizer stage active.
pub struct NeuralCodec {
    pub model: SemDac,
}

/// Result of encoding one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub header: BitstreamHeader,
    pub tokens: TokenGrid,
    pub bytes: Vec<u8>,
}

impl NeuralCodec {
    pub fn new(model: SemDac) -> Self {
        Self { model }
    }

    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(Checkpoint::read(path)?.model()?))
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.model.config.rvq.sizes()
    }

    /// Pads to the hop, quantizes with all stages and packs the codes.
    pub fn encode(&self, clip: &AudioClip) -> Result<Encoded> {
        clip.require_rate(CODEC_SAMPLE_RATE)?;
        if clip.is_empty() {
            return Err(Error::InvalidInput("cannot encode an empty clip".into()));
        }
        let padded = pad_to_hop(clip, self.model.hop_length())?;
        let pad_samples = u16::try_from(padded.pad_samples).map_err(|_| Error::Range("padding exceeds 16 bits".into()))?;
        let x = Tensor::from_slice(&padded.clip.samples, (1, 1, padded.clip.len()), &Device::Cpu)?;
        let z = self.model.encoder.forward(&x)?;
        let out = self.model.quantizer.forward(&z, self.model.config.rvq.n_acoustic)?;
        let sizes = self.sizes();
        let tokens = TokenGrid::new(out.codes, sizes.clone())?;
        let header = BitstreamHeader {
            sample_rate: clip.sample_rate,
            n_frames: tokens.n_frames() as u32,
            pad_samples,
            codebook_sizes: sizes.iter().map(|&s| s as u16).collect(),
        };
        let bytes = pack(&header, &tokens)?;
        Ok(Encoded { header, tokens, bytes })
    }

    /// Unpacks, looks up the codes and decodes, dropping the recorded padding.
    pub fn decode(&self, bytes: &[u8]) -> Result<AudioClip> {
        let (header, tokens) = unpack(bytes)?;
        if header.sample_rate != CODEC_SAMPLE_RATE {
            return Err(Error::Unsupported(format!("stream sample rate {} Hz", header.sample_rate)));
        }
        if tokens.codebook_sizes != self.sizes() {
            return Err(Error::Shape(format!("stream codebooks {:?} do not match the model's {:?}", tokens.codebook_sizes, self.sizes())));
        }
        let frames = tokens.n_frames();
        if frames == 0 {
            return Ok(AudioClip::silence(0, header.sample_rate));
        }
        let (semantic, acoustic) = self.model.quantizer.dequantize(&tokens.codes, 1, frames)?;
        let films = self.model.film_generate(&semantic)?;
        let y = self.model.decoder.forward(&semantic, &acoustic, Film::Params(&films))?;
        let samples: Vec<f32> = y.flatten_all()?.to_vec1()?;
        let keep = samples.len().checked_sub(header.pad_samples as usize).ok_or_else(|| Error::Corrupt("padding longer than the stream".into()))?;
        AudioClip::new(samples[..keep].to_vec(), header.sample_rate)
    }

    pub fn bitrate(&self, encoded: &Encoded) -> Result<FileBitrate> {
        file_bitrate(&encoded.header, encoded.bytes.len())
    }
}

impl Codec for NeuralCodec {
    fn reconstruct(&self, clip: &AudioClip) -> Result<AudioClip> {
        self.decode(&self.encode(clip)?.bytes)
    }

    fn nominal_bitrate_kbps(&self) -> f64 {
        bitrate_kbps(&self.sizes(), FRAME_RATE).unwrap_or(f64::NAN)
    }
}
