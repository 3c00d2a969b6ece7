//! Encoder, FiLM-conditioned decoder, FiLM generators and the semantic
//! projection head.

use crate::audio_io::{AudioClip, CODEC_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::ops::leaky_relu;
use crate::nn::{Conv1d, ParamStore, ResidualUnit, Snake, Upsample1d};
use crate::quantization::{RVQConfig, ResidualVq, RvqOutput};
use crate::teacher::DEFAULT_TEACHER_DIM;
use candle_core::{Device, Tensor};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

pub const ENCODER_STRIDES: [usize; 4] = [2, 4, 5, 8];
pub const DECODER_RATES: [usize; 4] = [8, 5, 4, 2];
/// Samples per latent frame (product of the encoder strides).
pub const HOP_LENGTH: usize = 320;
pub const FRAME_RATE: f64 = CODEC_SAMPLE_RATE as f64 / HOP_LENGTH as f64;
const DILATIONS: [usize; 3] = [1, 3, 9];
const FILM_SLOPE: f64 = 0.1;

/// Decoder location of a FiLM layer: `F0` sits between the input
/// convolution and the first block, `Fi` right before block `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FilmPlacement {
    F0,
    F1,
    F2,
    F3,
}

impl FilmPlacement {
    pub const ALL: [FilmPlacement; 4] = [Self::F0, Self::F1, Self::F2, Self::F3];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Upsampling factor applied to the latent frames before this point.
    pub fn cumulative_rate(self, rates: &[usize]) -> usize {
        rates[..self.index()].iter().product()
    }
}

impl fmt::Display for FilmPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F{}", self.index())
    }
}

impl FromStr for FilmPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "F0" => Ok(Self::F0),
            "F1" => Ok(Self::F1),
            "F2" => Ok(Self::F2),
            "F3" => Ok(Self::F3),
            other => Err(Error::config("film_placements", format!("unknown placement `{other}`"))),
        }
    }
}

/// Formats placements as `F0+F2`, or `none` for the empty set.
pub fn format_placements(set: &BTreeSet<FilmPlacement>) -> String {
    if set.is_empty() {
        "none".into()
    } else {
        set.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("+")
    }
}

pub fn parse_placements(s: &str) -> Result<BTreeSet<FilmPlacement>> {
    let s = s.trim();
    if s == "none" || s.is_empty() {
        return Ok(BTreeSet::new());
    }
    s.split('+').map(FilmPlacement::from_str).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub strides: Vec<usize>,
    pub base_channels: usize,
    pub latent_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub rates: Vec<usize>,
    /// Width after the input convolution; halves in every block.
    pub channels: usize,
    pub film_placements: BTreeSet<FilmPlacement>,
    /// Width of the FiLM generator's hidden layers.
    pub film_hidden: usize,
}

impl DecoderConfig {
    /// Feature-map channels entering block `i`.
    pub fn channels_at(&self, i: usize) -> usize {
        self.channels >> i
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub rvq: RVQConfig,
    pub teacher_dim: usize,
}

impl ModelConfig {
    /// Small configuration for single-core training runs.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig { strides: ENCODER_STRIDES.to_vec(), base_channels: 4, latent_dim: 64 },
            decoder: DecoderConfig {
                rates: DECODER_RATES.to_vec(),
                channels: 64,
                film_placements: BTreeSet::from([FilmPlacement::F0]),
                film_hidden: 32,
            },
            rvq: RVQConfig { semantic_size: 512, n_acoustic: 1, acoustic_size: 1024, latent_dim: 64, quantizer_dropout: false },
            teacher_dim: DEFAULT_TEACHER_DIM,
        }
    }

    /// Widths of the 16 kHz reference codec this design extends.
    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig { strides: ENCODER_STRIDES.to_vec(), base_channels: 64, latent_dim: 1024 },
            decoder: DecoderConfig {
                rates: DECODER_RATES.to_vec(),
                channels: 1536,
                film_placements: BTreeSet::from([FilmPlacement::F0]),
                film_hidden: 512,
            },
            rvq: RVQConfig { semantic_size: 512, n_acoustic: 1, acoustic_size: 1024, latent_dim: 1024, quantizer_dropout: false },
            teacher_dim: DEFAULT_TEACHER_DIM,
        }
    }

    pub fn hop_length(&self) -> usize {
        self.encoder.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        if e.strides.is_empty() || e.strides.iter().any(|&s| s == 0) {
            return Err(Error::config("strides", "must be nonempty and positive"));
        }
        if d.rates.iter().rev().ne(e.strides.iter()) {
            return Err(Error::config("rates", "decoder rates must reverse the encoder strides"));
        }
        if e.base_channels == 0 || e.latent_dim == 0 {
            return Err(Error::config("base_channels", "channel counts must be positive"));
        }
        if e.latent_dim != self.rvq.latent_dim {
            return Err(Error::config("latent_dim", "encoder and quantizer latent dims differ"));
        }
        let blocks = d.rates.len();
        if d.channels == 0 || d.channels % (1 << blocks) != 0 {
            return Err(Error::config("decoder_channels", format!("must be a positive multiple of {}", 1 << blocks)));
        }
        if d.film_hidden == 0 || self.teacher_dim == 0 {
            return Err(Error::config("film_hidden", "must be positive"));
        }
        if d.film_placements.iter().any(|p| p.index() >= blocks) {
            return Err(Error::config("film_placements", "placement beyond the last decoder block"));
        }
        self.rvq.validate()
    }
}

/// Encoder output for one clip: `latent_dim × n_frames` at 50 Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub values: Matrix,
    pub frame_rate: f64,
}

impl LatentSequence {
    pub fn new(values: Matrix) -> Self {
        Self { values, frame_rate: FRAME_RATE }
    }

    pub fn n_frames(&self) -> usize {
        self.values.cols
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values.data, (1, self.values.rows, self.values.cols), &Device::Cpu)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (b, d, n) = t.dims3()?;
        if b != 1 {
            return Err(Error::Shape(format!("expected a single sequence, got batch {b}")));
        }
        Ok(Self::new(Matrix::from_vec(d, n, t.flatten_all()?.to_vec1()?)?))
    }
}

/// Per-channel, per-step modulation `(batch, channels, steps)` for one placement.
#[derive(Debug, Clone)]
pub struct FilmParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub placement: FilmPlacement,
}

impl FilmParams {
    /// Unit scale and zero shift.
    pub fn identity(placement: FilmPlacement, shape: &[usize]) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones(shape, candle_core::DType::F32, &Device::Cpu)?,
            beta: Tensor::zeros(shape, candle_core::DType::F32, &Device::Cpu)?,
            placement,
        })
    }
}

/// `gamma ⊙ x + beta`.
pub fn film_apply(x: &Tensor, params: &FilmParams) -> Result<Tensor> {
    if x.dims() != params.gamma.dims() || x.dims() != params.beta.dims() {
        return Err(Error::Shape(format!(
            "feature map {:?} vs gamma {:?} / beta {:?} at {}",
            x.dims(),
            params.gamma.dims(),
            params.beta.dims(),
            params.placement
        )));
    }
    Ok(((x * &params.gamma)? + &params.beta)?)
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    units: Vec<ResidualUnit>,
    act: Snake,
    down: Conv1d,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    conv_in: Conv1d,
    blocks: Vec<EncoderBlock>,
    act_out: Snake,
    conv_out: Conv1d,
    hop: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        let mut c = cfg.base_channels;
        let conv_in = Conv1d::same(store, "encoder.conv_in", 1, c, 7, 1)?;
        let mut blocks = Vec::new();
        for (i, &s) in cfg.strides.iter().enumerate() {
            let name = format!("encoder.block{i}");
            let units = DILATIONS
                .iter()
                .enumerate()
                .map(|(j, &d)| ResidualUnit::new(store, &format!("{name}.res{j}"), c, d))
                .collect::<candle_core::Result<Vec<_>>>()?;
            let act = Snake::new(store, &format!("{name}.act"), c)?;
            let down = Conv1d::new(store, &format!("{name}.down"), c, 2 * c, 2 * s, s, s.div_ceil(2), 1)?;
            blocks.push(EncoderBlock { units, act, down });
            c *= 2;
        }
        let act_out = Snake::new(store, "encoder.act_out", c)?;
        let conv_out = Conv1d::same(store, "encoder.conv_out", c, cfg.latent_dim, 3, 1)?;
        Ok(Self { conv_in, blocks, act_out, conv_out, hop: cfg.strides.iter().product() })
    }

    /// `(batch, 1, len)` → `(batch, latent_dim, len / hop)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, ch, len) = x.dims3()?;
        if ch != 1 || len % self.hop != 0 || len == 0 {
            return Err(Error::Shape(format!("encoder input (_, {ch}, {len}) must be mono with length a positive multiple of {}", self.hop)));
        }
        let mut h = self.conv_in.forward(x)?;
        for b in &self.blocks {
            for u in &b.units {
                h = u.forward(&h)?;
            }
            h = b.down.forward(&b.act.forward(&h)?)?;
        }
        Ok(self.conv_out.forward(&self.act_out.forward(&h)?)?)
    }
}

/// Projects semantic latents and upsamples them to one placement's resolution.
#[derive(Debug, Clone)]
pub struct FilmGenerator {
    placement: FilmPlacement,
    conv_a: Conv1d,
    conv_b: Conv1d,
    ups: Vec<Upsample1d>,
    out: Conv1d,
    channels: usize,
}

impl FilmGenerator {
    pub fn new(store: &mut ParamStore, placement: FilmPlacement, latent_dim: usize, cfg: &DecoderConfig) -> Result<Self> {
        let name = format!("film.{placement}");
        let h = cfg.film_hidden;
        let channels = cfg.channels_at(placement.index());
        let conv_a = Conv1d::same(store, &format!("{name}.conv_a"), latent_dim, h, 3, 1)?;
        let conv_b = Conv1d::same(store, &format!("{name}.conv_b"), h, h, 3, 1)?;
        let ups = cfg.rates[..placement.index()]
            .iter()
            .enumerate()
            .map(|(i, &r)| Upsample1d::new(store, &format!("{name}.up{i}"), h, h, r))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let out = Conv1d::same(store, &format!("{name}.out"), h, 2 * channels, 1, 1)?.scale_weight(0.01)?;
        let bias: Vec<f32> = (0..2 * channels).map(|i| if i < channels { 1.0 } else { 0.0 }).collect();
        out.set_bias(&bias)?;
        Ok(Self { placement, conv_a, conv_b, ups, out, channels })
    }

    pub fn placement(&self) -> FilmPlacement {
        self.placement
    }

    /// `(batch, latent_dim, frames)` → γ, β of shape `(batch, channels, frames × rate)`.
    pub fn forward(&self, semantic_q: &Tensor) -> Result<FilmParams> {
        let mut h = self.conv_a.forward(semantic_q)?;
        h = self.conv_b.forward(&leaky_relu(&h, FILM_SLOPE)?)?;
        for up in &self.ups {
            h = up.forward(&leaky_relu(&h, FILM_SLOPE)?)?;
        }
        let y = self.out.forward(&h)?;
        Ok(FilmParams {
            gamma: y.narrow(1, 0, self.channels)?,
            beta: y.narrow(1, self.channels, self.channels)?,
            placement: self.placement,
        })
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    act: Snake,
    up: Upsample1d,
    units: Vec<ResidualUnit>,
}

/// How the decoder treats its FiLM placements.
#[derive(Debug, Clone, Copy)]
pub enum Film<'a> {
    /// Use the supplied parameters, one per configured placement.
    Params(&'a [FilmParams]),
    /// Run without modulation.
    Skip,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    conv_in: Conv1d,
    blocks: Vec<DecoderBlock>,
    act_out: Snake,
    conv_out: Conv1d,
    placements: BTreeSet<FilmPlacement>,
    hop: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, latent_dim: usize) -> Result<Self> {
        let conv_in = Conv1d::same(store, "decoder.conv_in", 2 * latent_dim, cfg.channels, 7, 1)?;
        let mut blocks = Vec::new();
        for (i, &r) in cfg.rates.iter().enumerate() {
            let name = format!("decoder.block{i}");
            let (c_in, c_out) = (cfg.channels_at(i), cfg.channels_at(i + 1));
            let act = Snake::new(store, &format!("{name}.act"), c_in)?;
            let up = Upsample1d::new(store, &format!("{name}.up"), c_in, c_out, r)?;
            let units = DILATIONS
                .iter()
                .enumerate()
                .map(|(j, &d)| ResidualUnit::new(store, &format!("{name}.res{j}"), c_out, d))
                .collect::<candle_core::Result<Vec<_>>>()?;
            blocks.push(DecoderBlock { act, up, units });
        }
        let c_last = cfg.channels_at(cfg.rates.len());
        let act_out = Snake::new(store, "decoder.act_out", c_last)?;
        let conv_out = Conv1d::same(store, "decoder.conv_out", c_last, 1, 7, 1)?;
        Ok(Self { conv_in, blocks, act_out, conv_out, placements: cfg.film_placements.clone(), hop: cfg.rates.iter().product() })
    }

    /// Decodes `(batch, latent_dim, frames)` semantic and acoustic latents to `(batch, 1, frames × hop)`.
    pub fn forward(&self, semantic_q: &Tensor, acoustic_sum: &Tensor, film: Film<'_>) -> Result<Tensor> {
        if semantic_q.dims() != acoustic_sum.dims() {
            return Err(Error::Shape(format!("semantic {:?} vs acoustic {:?}", semantic_q.dims(), acoustic_sum.dims())));
        }
        if let Film::Params(ps) = film {
            let given: BTreeSet<_> = ps.iter().map(|p| p.placement).collect();
            if given != self.placements || ps.len() != given.len() {
                return Err(Error::Shape(format!(
                    "FiLM parameters for {} but decoder configured for {}",
                    format_placements(&given),
                    format_placements(&self.placements)
                )));
            }
        }
        let x = Tensor::cat(&[semantic_q, acoustic_sum], 1)?;
        let mut h = self.conv_in.forward(&x)?;
        for (i, b) in self.blocks.iter().enumerate() {
            if let Film::Params(ps) = film {
                if let Some(p) = ps.iter().find(|p| p.placement.index() == i) {
                    h = film_apply(&h, p)?;
                }
            }
            h = b.up.forward(&b.act.forward(&h)?)?;
            for u in &b.units {
                h = u.forward(&h)?;
            }
        }
        let y = self.conv_out.forward(&self.act_out.forward(&h)?)?.tanh()?;
        debug_assert_eq!(y.dim(2)?, semantic_q.dim(2)? * self.hop);
        Ok(y)
    }
}

/// Affine per-frame map from latents to the teacher feature space.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    conv: Conv1d,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, latent_dim: usize, teacher_dim: usize) -> Result<Self> {
        Ok(Self { conv: Conv1d::same(store, name, latent_dim, teacher_dim, 1, 1)? })
    }

    pub fn forward(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(latents)?)
    }
}

/// `teacher_dim × frames` projection of one latent sequence.
pub fn project_semantic(latents: &LatentSequence, head: &ProjectionHead) -> Result<Matrix> {
    let y = head.forward(&latents.to_tensor()?)?;
    Ok(LatentSequence::from_tensor(&y)?.values)
}

/// Everything one training forward pass produces.
pub struct ForwardOutput {
    pub audio: Tensor,
    pub latents: Tensor,
    pub rvq: RvqOutput,
    pub projected: Tensor,
}

/// The complete codec: encoder, semantic-first RVQ, FiLM generators,
/// decoder and projection head.
#[derive(Debug, Clone)]
pub struct SemDac {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub quantizer: ResidualVq,
    pub films: Vec<FilmGenerator>,
    pub decoder: Decoder,
    pub projection: ProjectionHead,
}

impl SemDac {
    pub fn new(store: &mut ParamStore, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let latent = config.encoder.latent_dim;
        let encoder = Encoder::new(store, &config.encoder)?;
        let quantizer = ResidualVq::new(store, "quantizer", config.rvq)?;
        let films = config
            .decoder
            .film_placements
            .iter()
            .map(|&p| FilmGenerator::new(store, p, latent, &config.decoder))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::new(store, &config.decoder, latent)?;
        let projection = ProjectionHead::new(store, "projection", latent, config.teacher_dim)?;
        Ok(Self { config, encoder, quantizer, films, decoder, projection })
    }

    pub fn hop_length(&self) -> usize {
        self.config.hop_length()
    }

    pub fn film_generate(&self, semantic_q: &Tensor) -> Result<Vec<FilmParams>> {
        self.films.iter().map(|g| g.forward(semantic_q)).collect()
    }

    pub fn film_generator(&self, placement: FilmPlacement) -> Result<&FilmGenerator> {
        self.films
            .iter()
            .find(|g| g.placement == placement)
            .ok_or_else(|| Error::config("film_placements", format!("{placement} is not configured")))
    }

    /// Semantic latents and acoustic sum → audio with generated FiLM.
    pub fn decode_latents(&self, semantic_q: &Tensor, acoustic_sum: &Tensor) -> Result<Tensor> {
        let films = self.film_generate(semantic_q)?;
        self.decoder.forward(semantic_q, acoustic_sum, Film::Params(&films))
    }

    /// Full pass on `(batch, 1, len)` audio using the semantic stage and
    /// `n_acoustic` acoustic stages.
    pub fn forward(&self, x: &Tensor, n_acoustic: usize) -> Result<ForwardOutput> {
        let latents = self.encoder.forward(x)?;
        let rvq = self.quantizer.forward(&latents, n_acoustic)?;
        let audio = self.decode_latents(&rvq.semantic_q, &rvq.acoustic_sum)?;
        let projected = self.projection.forward(&rvq.semantic_q)?;
        Ok(ForwardOutput { audio, latents, rvq, projected })
    }

    /// Encodes one hop-aligned 16 kHz clip.
    pub fn encode(&self, clip: &AudioClip) -> Result<LatentSequence> {
        clip.require_rate(CODEC_SAMPLE_RATE)?;
        if clip.len() % self.hop_length() != 0 {
            return Err(Error::InvalidInput(format!("clip length {} is not a multiple of {}", clip.len(), self.hop_length())));
        }
        let x = Tensor::from_slice(&clip.samples, (1, 1, clip.len()), &Device::Cpu)?;
        LatentSequence::from_tensor(&self.encoder.forward(&x)?)
    }

    /// Decodes one sequence pair to audio.
    pub fn decode(&self, semantic_q: &LatentSequence, acoustic_sum: &LatentSequence) -> Result<AudioClip> {
        if semantic_q.n_frames() != acoustic_sum.n_frames() {
            return Err(Error::Shape(format!("{} semantic vs {} acoustic frames", semantic_q.n_frames(), acoustic_sum.n_frames())));
        }
        let y = self.decode_latents(&semantic_q.to_tensor()?, &acoustic_sum.to_tensor()?)?;
        AudioClip::new(y.flatten_all()?.to_vec1()?, CODEC_SAMPLE_RATE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use proptest::prelude::*;

    fn small(placements: &[FilmPlacement]) -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.encoder.base_channels = 2;
        cfg.encoder.latent_dim = 8;
        cfg.rvq.latent_dim = 8;
        cfg.rvq.semantic_size = 16;
        cfg.rvq.acoustic_size = 16;
        cfg.decoder.channels = 32;
        cfg.decoder.film_hidden = 8;
        cfg.decoder.film_placements = placements.iter().copied().collect();
        cfg.teacher_dim = 6;
        cfg
    }

    fn model(cfg: ModelConfig) -> SemDac {
        SemDac::new(&mut ParamStore::new(11), cfg).unwrap()
    }

    fn t(v: &[f32], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    fn values(x: &Tensor) -> Vec<f32> {
        x.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn encode_frame_counts() {
        let m = model(small(&[FilmPlacement::F0]));
        for (len, frames) in [(6080, 19), (320, 1), (6400, 20)] {
            let clip = AudioClip::new(vec![0.1; len], CODEC_SAMPLE_RATE).unwrap();
            let z = m.encode(&clip).unwrap();
            assert_eq!(z.n_frames(), frames);
            assert_eq!(z.frame_rate, 50.0);
            assert_eq!(z.values.rows, 8);
        }
        assert!(m.encode(&AudioClip::new(vec![0.1; 640], 8000).unwrap()).is_err());
        assert!(m.encode(&AudioClip::new(vec![0.1; 650], CODEC_SAMPLE_RATE).unwrap()).is_err());
    }

    #[test]
    fn decode_lengths_and_mismatch() {
        let m = model(small(&[FilmPlacement::F0]));
        for frames in [19, 1] {
            let z = LatentSequence::new(Matrix::from_fn(8, frames, |r, c| ((r + c) as f32 * 0.1).sin()));
            assert_eq!(m.decode(&z, &z).unwrap().len(), frames * 320);
        }
        let a = LatentSequence::new(Matrix::zeros(8, 3));
        let b = LatentSequence::new(Matrix::zeros(8, 4));
        assert!(matches!(m.decode(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn film_apply_examples() {
        let p = |g: &[f32], b: &[f32]| FilmParams { gamma: t(g, &[1, 2, 1]), beta: t(b, &[1, 2, 1]), placement: FilmPlacement::F0 };
        let x = t(&[1.0, 2.0], &[1, 2, 1]);
        assert_eq!(values(&film_apply(&x, &p(&[2.0, 0.5], &[-1.0, 1.0])).unwrap()), [1.0, 2.0]);
        assert_eq!(values(&film_apply(&x, &p(&[0.0, 0.0], &[0.7, 0.7])).unwrap()), [0.7, 0.7]);
        assert_eq!(values(&film_apply(&x, &p(&[1.0, 1.0], &[0.0, 0.0])).unwrap()), [1.0, 2.0]);
        let wrong = FilmParams { gamma: t(&[1.0], &[1, 1, 1]), beta: t(&[0.0], &[1, 1, 1]), placement: FilmPlacement::F1 };
        assert!(matches!(film_apply(&x, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_film_is_bit_identical_to_skipping() {
        let cfg = small(&FilmPlacement::ALL);
        let m = model(cfg.clone());
        let frames = 5;
        let sem = Tensor::rand(-1.0f32, 1.0, (2, 8, frames), &Device::Cpu).unwrap();
        let ac = Tensor::rand(-1.0f32, 1.0, (2, 8, frames), &Device::Cpu).unwrap();
        let ids: Vec<FilmParams> = FilmPlacement::ALL
            .iter()
            .map(|&p| {
                let shape = [2, cfg.decoder.channels_at(p.index()), frames * p.cumulative_rate(&cfg.decoder.rates)];
                FilmParams::identity(p, &shape).unwrap()
            })
            .collect();
        let with = m.decoder.forward(&sem, &ac, Film::Params(&ids)).unwrap();
        let without = m.decoder.forward(&sem, &ac, Film::Skip).unwrap();
        let bits = |x: &Tensor| values(x).into_iter().map(f32::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&with), bits(&without));
        assert_eq!(with.dims(), [2, 1, frames * 320]);
    }

    #[test]
    fn decoder_rejects_wrong_film_set() {
        let m = model(small(&[FilmPlacement::F0, FilmPlacement::F2]));
        let z = Tensor::zeros((1, 8, 2), DType::F32, &Device::Cpu).unwrap();
        let only_f0 = [FilmParams::identity(FilmPlacement::F0, &[1, 32, 2]).unwrap()];
        assert!(m.decoder.forward(&z, &z, Film::Params(&only_f0)).is_err());
        assert!(m.film_generator(FilmPlacement::F1).is_err());
    }

    #[test]
    fn film_generator_starts_near_identity() {
        let m = model(small(&[FilmPlacement::F0]));
        let sem = Tensor::rand(-1.0f32, 1.0, (1, 8, 4), &Device::Cpu).unwrap();
        let p = m.film_generator(FilmPlacement::F0).unwrap().forward(&sem).unwrap();
        assert!(values(&p.gamma).iter().all(|g| (g - 1.0).abs() < 0.1));
        assert!(values(&p.beta).iter().all(|b| b.abs() < 0.1));
    }

    #[test]
    fn placement_lengths_for_1_to_40_frames() {
        let cfg = small(&FilmPlacement::ALL);
        let m = model(cfg.clone());
        let rates = [1, 8, 40, 160];
        for frames in 1..=40 {
            let sem = Tensor::zeros((1, 8, frames), DType::F32, &Device::Cpu).unwrap();
            for (p, rate) in FilmPlacement::ALL.iter().zip(rates) {
                assert_eq!(p.cumulative_rate(&cfg.decoder.rates), rate);
                let out = m.film_generator(*p).unwrap().forward(&sem).unwrap();
                assert_eq!(out.gamma.dims(), [1, cfg.decoder.channels_at(p.index()), frames * rate], "{p} at {frames}");
                assert_eq!(out.beta.dims(), out.gamma.dims());
            }
        }
    }

    #[test]
    fn projection_examples() {
        let mut store = ParamStore::new(0);
        let head = ProjectionHead::new(&mut store, "proj", 2, 1).unwrap();
        store.assign("proj.weight", &[1.0, 1.0]).unwrap();
        store.assign("proj.bias", &[0.5]).unwrap();
        let z = LatentSequence::new(Matrix::from_vec(2, 1, vec![2.0, 3.0]).unwrap());
        assert_eq!(project_semantic(&z, &head).unwrap().data, [5.5]);

        let mut store = ParamStore::new(0);
        let head = ProjectionHead::new(&mut store, "proj", 3, 3).unwrap();
        let z = LatentSequence::new(Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f32 - 5.0));
        store.assign("proj.weight", &[0.0; 9]).unwrap();
        assert!(project_semantic(&z, &head).unwrap().data.iter().all(|&v| v == 0.0));
        store.assign("proj.weight", &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(project_semantic(&z, &head).unwrap(), z.values);
    }

    #[test]
    fn every_encoder_parameter_gets_gradient() {
        let mut store = ParamStore::new(5);
        let m = SemDac::new(&mut store, small(&[FilmPlacement::F0])).unwrap();
        let x = Tensor::rand(-0.5f32, 0.5, (2, 1, 640), &Device::Cpu).unwrap();
        let out = m.forward(&x, 1).unwrap();
        let loss = (out.audio - &x).unwrap().sqr().unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut checked = 0;
        for (name, var) in store.iter().filter(|(n, _)| n.starts_with("encoder.")) {
            let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(values(g).iter().any(|&v| v != 0.0), "zero gradient for {name}");
            checked += 1;
        }
        assert!(checked > 40);
    }

    #[test]
    fn presets_validate_and_round_trip_shapes() {
        for cfg in [ModelConfig::desk(), ModelConfig::full()] {
            cfg.validate().unwrap();
            assert_eq!(cfg.hop_length(), HOP_LENGTH);
        }
        assert_eq!(FRAME_RATE, 50.0);
        let mut bad = ModelConfig::desk();
        bad.decoder.rates = vec![8, 5, 2, 4];
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::desk();
        bad.decoder.channels = 40;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn placement_text() {
        assert_eq!(parse_placements("none").unwrap(), BTreeSet::new());
        let s = parse_placements("F0+F3").unwrap();
        assert_eq!(format_placements(&s), "F0+F3");
        assert!(parse_placements("F0+F9").is_err());
    }

    proptest! {
        #[test]
        fn film_identity_on_any_map(v in prop::collection::vec(-1e3f32..1e3, 12)) {
            let x = t(&v, &[1, 3, 4]);
            let id = FilmParams::identity(FilmPlacement::F2, &[1, 3, 4]).unwrap();
            prop_assert_eq!(values(&film_apply(&x, &id).unwrap()), v);
        }
    }
}
