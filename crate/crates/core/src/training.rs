//! GAN training: presets, seeding, AdamW, the two-phase step, checkpoints
//! and the logged training loop.

use crate::audio_io::{excerpt_with, normalize_lufs, AudioClip, ExcerptSpec, CODEC_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss, distillation_loss_tensor, feature_matching_loss, generator_adversarial_loss, total_generator_loss,
    weighted_total, LossBundle, LossParts, LossWeights, MelLoss, Mpd,
};
use crate::matrix::Matrix;
use crate::metrics::list_wavs;
use crate::model::{ModelConfig, SemDac};
use crate::nn::ParamStore;
use crate::spectral::MelScaleSet;
use crate::teacher::{align_frames, load_all_teacher_features, mock_teacher, TeacherFeatures};
use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const LOSS_CSV_HEADER: &str = "step,mel,fm,adv,cb,commit,sem,total,d_loss";
pub const LOSS_CSV_NAME: &str = "loss.csv";
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Use seeded stand-in teacher features instead of `.semf` files.
    pub mock_teacher: bool,
    pub excerpt: ExcerptSpec,
    pub model: ModelConfig,
    /// Widths of the discriminator convolution stack.
    pub disc_channels: Vec<usize>,
    pub weights: LossWeights,
}

impl TrainConfig {
    /// Single-core overfitting preset.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            batch_size: 8,
            learning_rate: 1e-4,
            beta1: 0.8,
            beta2: 0.9,
            weight_decay: 0.0,
            checkpoint_every: 500,
            mock_teacher: true,
            excerpt: ExcerptSpec::default(),
            model: ModelConfig::desk(),
            disc_channels: vec![8, 16, 32, 32],
            weights: LossWeights::default(),
        }
    }

    pub fn full() -> Self {
        Self {
            iterations: 250_000,
            batch_size: 48,
            checkpoint_every: 10_000,
            mock_teacher: false,
            model: ModelConfig::full(),
            disc_channels: vec![32, 128, 512, 1024, 1024],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (key, v) in [("learning_rate", self.learning_rate), ("excerpt_duration_s", self.excerpt.duration_s)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive and finite"));
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if !self.excerpt.target_lufs.is_finite() {
            return Err(Error::config("target_lufs", "must be finite"));
        }
        if self.disc_channels.is_empty() || self.disc_channels.contains(&0) {
            return Err(Error::config("disc_channels", "need at least one positive width"));
        }
        let n = self.excerpt_samples();
        if n == 0 || n % self.model.hop_length() != 0 {
            return Err(Error::config("excerpt_duration_s", format!("{n} samples is not a positive multiple of the hop")));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    pub fn excerpt_samples(&self) -> usize {
        self.excerpt.n_samples(CODEC_SAMPLE_RATE)
    }

    pub fn excerpt_frames(&self) -> usize {
        self.excerpt_samples() / self.model.hop_length()
    }
}

/// Independent seeds for every stochastic component of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub generator: u64,
    pub discriminator: u64,
    pub data: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives all seeds (initialization, excerpt offsets, batch order) from one value.
pub fn set_seed(seed: u64) -> Seeds {
    let a = splitmix(seed);
    let b = splitmix(a);
    let c = splitmix(b);
    Seeds { generator: a, discriminator: b, data: c }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

/// AdamW with decoupled weight decay and per-parameter step counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, AdamState>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { lr, beta1, beta2, weight_decay, state: BTreeMap::new() }
    }

    /// Updates every parameter of `store` that has a gradient and returns
    /// the names whose gradient had at least one nonzero entry.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, iteration: u64) -> Result<Vec<String>> {
        let mut touched = Vec::new();
        for (name, var) in store.iter_sorted() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g: Vec<f32> = g.flatten_all()?.to_vec1()?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { term: format!("gradient of {name}"), iteration });
            }
            if g.iter().any(|&v| v != 0.0) {
                touched.push(name.to_string());
            }
            let mut p: Vec<f32> = var.flatten_all()?.to_vec1()?;
            let st = self.state.entry(name.to_string()).or_insert_with(|| AdamState { m: vec![0.0; p.len()], v: vec![0.0; p.len()], t: 0 });
            st.t += 1;
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            let c1 = (1.0 - self.beta1.powi(st.t as i32)) as f32;
            let c2 = (1.0 - self.beta2.powi(st.t as i32)) as f32;
            let (lr, decay) = (self.lr as f32, (self.lr * self.weight_decay) as f32);
            let eps = ADAM_EPS as f32;
            for i in 0..p.len() {
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
                let step = (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
                p[i] -= decay * p[i] + lr * step;
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { term: format!("parameter {name}"), iteration });
            }
            var.set(&Tensor::from_vec(p, var.shape(), var.device())?)?;
        }
        Ok(touched)
    }
}

/// One clip prepared for training: loudness-normalized audio and teacher
/// features covering the hop-padded clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingClip {
    pub id: String,
    pub audio: AudioClip,
    pub teacher: TeacherFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCorpus {
    pub clips: Vec<TrainingClip>,
}

/// A batch of excerpts `(batch, 1, samples)` with aligned teacher features
/// `(batch, teacher_dim, frames)`.
pub struct Batch {
    pub audio: Tensor,
    pub teacher: Tensor,
}

impl TrainingCorpus {
    /// Normalizes each clip and attaches teacher features: mock features
    /// seeded by the raw clip's content hash, or `<stem>.semf` next to the WAV.
    pub fn from_clips(clips: Vec<(String, AudioClip, Option<TeacherFeatures>)>, cfg: &TrainConfig) -> Result<Self> {
        let hop = cfg.model.hop_length();
        let dim = cfg.model.teacher_dim;
        let mut out = Vec::new();
        for (id, raw, teacher) in clips {
            raw.require_rate(CODEC_SAMPLE_RATE)?;
            let audio = match normalize_lufs(&raw, cfg.excerpt.target_lufs) {
                Ok(n) => n.clip,
                Err(Error::Silent) => {
                    log::warn!("skipping silent clip {id}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            let frames = audio.len().div_ceil(hop);
            let teacher = match teacher {
                Some(t) if t.dim() != dim => {
                    return Err(Error::Shape(format!("teacher for {id} has dim {}, config expects {dim}", t.dim())));
                }
                Some(t) => align_frames(&t, frames)?,
                None if cfg.mock_teacher => mock_teacher(raw.content_hash(), frames, dim),
                None => {
                    log::warn!("no teacher features for {id}; skipping");
                    continue;
                }
            };
            out.push(TrainingClip { id, audio, teacher });
        }
        if out.is_empty() {
            return Err(Error::InvalidInput("no usable training clips".into()));
        }
        Ok(Self { clips: out })
    }

    pub fn load(dir: impl AsRef<Path>, cfg: &TrainConfig) -> Result<Self> {
        let paths = list_wavs(&dir)?;
        if paths.is_empty() {
            return Err(Error::InvalidInput(format!("corpus {} has no .wav files", dir.as_ref().display())));
        }
        let mut clips = Vec::new();
        for p in paths {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let audio = crate::audio_io::load_wav(&p)?;
            let teacher = if cfg.mock_teacher {
                None
            } else {
                let semf = p.with_extension("semf");
                if semf.exists() {
                    Some(load_all_teacher_features(&semf)?)
                } else {
                    None
                }
            };
            clips.push((id, audio, teacher));
        }
        Self::from_clips(clips, cfg)
    }

    /// Draws `batch_size` clips uniformly with replacement and one uniform
    /// excerpt from each.
    pub fn sample_batch(&self, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let n = cfg.excerpt_samples();
        let hop = cfg.model.hop_length();
        let frames = n / hop;
        let dim = cfg.model.teacher_dim;
        let mut audio = Vec::with_capacity(cfg.batch_size * n);
        let mut teacher = Vec::with_capacity(cfg.batch_size * dim * frames);
        for _ in 0..cfg.batch_size {
            let clip = &self.clips[rng.random_range(0..self.clips.len())];
            let ex = excerpt_with(&clip.audio, n, rng);
            audio.extend_from_slice(&ex.clip.samples);
            let t = excerpt_teacher(&clip.teacher.values, ex.offset, hop, frames);
            teacher.extend_from_slice(&t.data);
        }
        Ok(Batch {
            audio: Tensor::from_vec(audio, (cfg.batch_size, 1, n), &Device::Cpu)?,
            teacher: Tensor::from_vec(teacher, (cfg.batch_size, dim, frames), &Device::Cpu)?,
        })
    }
}

/// Teacher frames for an excerpt starting at sample `offset`: the nearest
/// frame start, clamped to the clip, with the last frame repeated when the
/// clip is shorter than the excerpt.
fn excerpt_teacher(values: &Matrix, offset: usize, hop: usize, frames: usize) -> Matrix {
    let available = values.cols;
    let start = ((offset + hop / 2) / hop).min(available.saturating_sub(frames));
    Matrix::from_fn(values.rows, frames, |r, t| values.get(r, (start + t).min(available - 1)))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Complete mutable state of a run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: SemDac,
    pub generator_params: ParamStore,
    pub discriminator: Mpd,
    pub discriminator_params: ParamStore,
    opt_g: AdamW,
    opt_d: AdamW,
    rng: ChaCha8Rng,
    iteration: u64,
    mel: MelLoss,
    never_graded: BTreeSet<String>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let seeds = set_seed(config.seed);
        let mut generator_params = ParamStore::new(seeds.generator);
        let model = SemDac::new(&mut generator_params, config.model.clone())?;
        let mut discriminator_params = ParamStore::new(seeds.discriminator);
        let discriminator = Mpd::new(&mut discriminator_params, &config.disc_channels)?;
        let adam = || AdamW::new(config.learning_rate, config.beta1, config.beta2, config.weight_decay);
        let never_graded = generator_params
            .iter_sorted()
            .chain(discriminator_params.iter_sorted())
            .map(|(n, _)| n.to_string())
            .collect();
        Ok(Self {
            opt_g: adam(),
            opt_d: adam(),
            rng: ChaCha8Rng::seed_from_u64(seeds.data),
            iteration: 0,
            mel: MelLoss::new(&MelScaleSet::standard(CODEC_SAMPLE_RATE), DType::F32)?,
            never_graded,
            config,
            model,
            generator_params,
            discriminator,
            discriminator_params,
        })
    }

    /// Completed steps.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Parameters that have not yet received a nonzero gradient.
    pub fn never_graded(&self) -> &BTreeSet<String> {
        &self.never_graded
    }

    pub fn next_batch(&mut self, corpus: &TrainingCorpus) -> Result<Batch> {
        corpus.sample_batch(&self.config, &mut self.rng)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBundle> {
        let it = self.iteration + 1;
        let rvq = self.config.model.rvq;
        let n_acoustic = if rvq.quantizer_dropout { self.rng.random_range(0..=rvq.n_acoustic) } else { rvq.n_acoustic };
        let out = self.model.forward(&batch.audio, n_acoustic)?;
        let x = batch.audio.squeeze(1)?;
        let y = out.audio.squeeze(1)?;
        let logits = |o: &[crate::losses::DiscOutput]| o.iter().map(|d| d.logits.clone()).collect::<Vec<_>>();
        let features = |o: &[crate::losses::DiscOutput]| o.iter().map(|d| d.features.clone()).collect::<Vec<_>>();

        let real = self.discriminator.forward(&x)?;
        let fake = self.discriminator.forward(&y.detach())?;
        let d_loss = discriminator_loss(&logits(&real), &logits(&fake))?;
        let d_value = scalar(&d_loss)?;
        if !d_value.is_finite() {
            return Err(Error::NonFinite { term: "d_loss".into(), iteration: it });
        }
        let grads = d_loss.backward()?;
        let touched = self.opt_d.step(&self.discriminator_params, &grads, it)?;
        self.mark_graded(touched);

        let fake = self.discriminator.forward(&y)?;
        let real = self.discriminator.forward(&x)?;
        let adv = generator_adversarial_loss(&logits(&fake))?;
        let fm = feature_matching_loss(&features(&real), &features(&fake))?;
        let mel = self.mel.forward(&x, &y)?;
        let sem = distillation_loss_tensor(&out.projected, &batch.teacher)?;
        let parts = LossParts {
            mel: scalar(&mel)?,
            feature_match: scalar(&fm)?,
            adversarial: scalar(&adv)?,
            codebook: scalar(&out.rvq.codebook_loss)?,
            commitment: scalar(&out.rvq.commitment_loss)?,
            semantic: scalar(&sem)?,
        };
        let mut bundle = total_generator_loss(parts, &self.config.weights).map_err(|e| match e {
            Error::NonFinite { term, .. } => Error::NonFinite { term, iteration: it },
            other => other,
        })?;
        bundle.d_loss = d_value;
        let w = &self.config.weights;
        let total = weighted_total(&[
            (&mel, w.mel),
            (&fm, w.feature_match),
            (&adv, w.adversarial),
            (&out.rvq.codebook_loss, w.codebook),
            (&out.rvq.commitment_loss, w.commitment),
            (&sem, w.semantic),
        ])?;
        let grads = total.backward()?;
        let touched = self.opt_g.step(&self.generator_params, &grads, it)?;
        self.mark_graded(touched);
        self.iteration = it;
        Ok(bundle)
    }

    fn mark_graded(&mut self, names: Vec<String>) {
        for n in names {
            self.never_graded.remove(&n);
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint { config_text: self.config.to_text(), iteration: self.iteration, ..Default::default() };
        let tensor = |store: &ParamStore, name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
            let v = store.get(name).expect("name from store");
            Ok((v.dims().to_vec(), store.values(name)?))
        };
        for (name, _) in self.generator_params.iter_sorted() {
            c.tensors.insert(format!("gen/{name}"), tensor(&self.generator_params, name)?);
        }
        for (name, _) in self.discriminator_params.iter_sorted() {
            c.tensors.insert(format!("disc/{name}"), tensor(&self.discriminator_params, name)?);
        }
        for (tag, opt) in [("adam_g", &self.opt_g), ("adam_d", &self.opt_d)] {
            for (name, st) in &opt.state {
                c.tensors.insert(format!("{tag}.m/{name}"), (vec![st.m.len()], st.m.clone()));
                c.tensors.insert(format!("{tag}.v/{name}"), (vec![st.v.len()], st.v.clone()));
                c.counters.insert(format!("{tag}.t/{name}"), st.t);
            }
        }
        let mut rng = Vec::with_capacity(56);
        rng.extend_from_slice(&self.rng.get_seed());
        rng.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        rng.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        c.blobs.insert("rng.data".into(), rng);
        let graded: Vec<u8> = self.never_graded.iter().flat_map(|n| n.bytes().chain(std::iter::once(b'\n'))).collect();
        c.blobs.insert("never_graded".into(), graded);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_text(&c.config_text)?;
        let mut t = Self::new(config)?;
        t.iteration = c.iteration;
        let expected: BTreeSet<String> = t
            .generator_params
            .iter_sorted()
            .map(|(n, _)| format!("gen/{n}"))
            .chain(t.discriminator_params.iter_sorted().map(|(n, _)| format!("disc/{n}")))
            .collect();
        let stored: BTreeSet<String> =
            c.tensors.keys().filter(|k| k.starts_with("gen/") || k.starts_with("disc/")).cloned().collect();
        if expected != stored {
            return Err(Error::Format("checkpoint parameters do not match its config".into()));
        }
        for (key, (_, values)) in &c.tensors {
            if let Some(name) = key.strip_prefix("gen/") {
                t.generator_params.assign(name, values)?;
            } else if let Some(name) = key.strip_prefix("disc/") {
                t.discriminator_params.assign(name, values)?;
            }
        }
        for (tag, opt) in [("adam_g", &mut t.opt_g), ("adam_d", &mut t.opt_d)] {
            for (key, &steps) in &c.counters {
                let Some(name) = key.strip_prefix(&format!("{tag}.t/")) else { continue };
                let get = |kind: &str| {
                    c.tensors
                        .get(&format!("{tag}.{kind}/{name}"))
                        .map(|(_, v)| v.clone())
                        .ok_or_else(|| Error::Format(format!("missing {tag}.{kind} state for {name}")))
                };
                opt.state.insert(name.to_string(), AdamState { m: get("m")?, v: get("v")?, t: steps });
            }
        }
        let rng = c.blobs.get("rng.data").ok_or_else(|| Error::Format("checkpoint lacks rng state".into()))?;
        if rng.len() != 56 {
            return Err(Error::Format("rng state has the wrong size".into()));
        }
        let mut r = ChaCha8Rng::from_seed(rng[..32].try_into().expect("32 bytes"));
        r.set_stream(u64::from_le_bytes(rng[32..40].try_into().expect("8 bytes")));
        r.set_word_pos(u128::from_le_bytes(rng[40..56].try_into().expect("16 bytes")));
        t.rng = r;
        if let Some(g) = c.blobs.get("never_graded") {
            let text = String::from_utf8(g.clone()).map_err(|_| Error::Format("bad parameter list".into()))?;
            t.never_graded = text.lines().map(str::to_string).collect();
        }
        Ok(t)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint()?.to_bytes()).map_err(Error::io(path))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Self-describing training snapshot: the config text, the iteration, named
/// `f32` tensors, named counters and named byte blobs. Entries are stored
/// sorted by name, so equal states serialize to equal bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub iteration: u64,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub counters: BTreeMap<String, u64>,
    pub blobs: BTreeMap<String, Vec<u8>>,
}

const KIND_TENSOR: u8 = 1;
const KIND_COUNTER: u8 = 2;
const KIND_BLOB: u8 = 3;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        let n = self.tensors.len() + self.counters.len() + self.blobs.len();
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for (name, (shape, data)) in &self.tensors {
            out.push(KIND_TENSOR);
            put_str(&mut out, name);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (name, v) in &self.counters {
            out.push(KIND_COUNTER);
            put_str(&mut out, name);
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (name, b) in &self.blobs {
            out.push(KIND_BLOB);
            put_str(&mut out, name);
            out.extend_from_slice(&(b.len() as u32).to_le_bytes());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = c.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint { config_text: c.string()?, iteration: c.u64()?, ..Default::default() };
        let n = c.u32()?;
        for _ in 0..n {
            let kind = c.u8()?;
            let name = c.string()?;
            match kind {
                KIND_TENSOR => {
                    let rank = c.u8()? as usize;
                    let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                    let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                    let raw = c.take(len.and_then(|l| l.checked_mul(4)).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
                    let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
                    ck.tensors.insert(name, (shape, data));
                }
                KIND_COUNTER => {
                    ck.counters.insert(name, c.u64()?);
                }
                KIND_BLOB => {
                    let len = c.u32()? as usize;
                    ck.blobs.insert(name, c.take(len)?.to_vec());
                }
                k => return Err(Error::Format(format!("unknown checkpoint entry kind {k}"))),
            }
        }
        if c.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint entries".into()));
        }
        Ok(ck)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(Error::io(path.as_ref()))?;
        Self::from_bytes(&bytes)
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_text(&self.config_text)
    }

    /// Rebuilds only the generator (codec) from the snapshot.
    pub fn model(&self) -> Result<SemDac> {
        let cfg = self.config()?;
        let mut store = ParamStore::new(0);
        let model = SemDac::new(&mut store, cfg.model)?;
        let names: Vec<String> = store.iter_sorted().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let Some((_, values)) = self.tensors.get(&format!("gen/{name}")) else {
                return Err(Error::Format(format!("checkpoint lacks parameter {name}")));
            };
            store.assign(&name, values)?;
        }
        Ok(model)
    }
}

pub fn checkpoint_path(dir: impl AsRef<Path>, iteration: u64) -> PathBuf {
    dir.as_ref().join(format!("checkpoint_{iteration:07}.sdck"))
}

pub fn loss_csv_row(step: u64, b: &LossBundle) -> String {
    let p = &b.parts;
    format!(
        "{step},{},{},{},{},{},{},{},{}",
        p.mel, p.feature_match, p.adversarial, p.codebook, p.commitment, p.semantic, b.total, b.d_loss
    )
}

/// Opens the loss log for appending after `iteration`, dropping any rows of
/// later steps left over from an interrupted run.
fn open_loss_log(path: &Path, iteration: u64) -> Result<std::fs::File> {
    let mut kept = format!("{LOSS_CSV_HEADER}\n");
    if iteration > 0 && path.exists() {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        for line in text.lines().skip(1) {
            let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if step <= iteration {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    std::fs::write(path, kept).map_err(Error::io(path))?;
    std::fs::OpenOptions::new().append(true).open(path).map_err(Error::io(path))
}

/// Trains until `trainer.config.iterations`, logging one CSV row per step to
/// `out_dir/loss.csv` and writing periodic and final checkpoints. `observe`
/// runs after every step.
pub fn run_training(
    trainer: &mut Trainer,
    corpus: &TrainingCorpus,
    out_dir: impl AsRef<Path>,
    observe: &mut dyn FnMut(&Trainer, &LossBundle) -> Result<()>,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let csv_path = out_dir.join(LOSS_CSV_NAME);
    let mut log = open_loss_log(&csv_path, trainer.iteration())?;
    let every = trainer.config.checkpoint_every;
    let total = trainer.config.iterations;
    while trainer.iteration() < total {
        let batch = trainer.next_batch(corpus)?;
        let bundle = trainer.train_step(&batch)?;
        let step = trainer.iteration();
        writeln!(log, "{}", loss_csv_row(step, &bundle)).map_err(Error::io(&csv_path))?;
        if step % 50 == 0 || step == 1 {
            log::info!("step {step}: mel {:.4} total {:.4} d {:.4}", bundle.parts.mel, bundle.total, bundle.d_loss);
        }
        observe(trainer, &bundle)?;
        if every > 0 && step % every == 0 && step < total {
            trainer.save_checkpoint(checkpoint_path(out_dir, step))?;
        }
    }
    let last = checkpoint_path(out_dir, trainer.iteration());
    trainer.save_checkpoint(&last)?;
    Ok(last)
}

/// Loads the corpus, starts fresh or resumes from `resume`, and trains.
pub fn train_loop(config: TrainConfig, corpus_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>, resume: Option<&Path>) -> Result<PathBuf> {
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::load_checkpoint(p)?;
            t.config.iterations = config.iterations;
            t.config.checkpoint_every = config.checkpoint_every;
            t
        }
        None => Trainer::new(config)?,
    };
    let corpus = TrainingCorpus::load(corpus_dir, &trainer.config)?;
    run_training(&mut trainer, &corpus, out_dir, &mut |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::desk();
        c.batch_size = 2;
        c.iterations = 3;
        c.model.encoder.base_channels = 2;
        c.model.decoder.channels = 16;
        c.model.decoder.film_hidden = 8;
        c.model.encoder.latent_dim = 8;
        c.model.rvq.latent_dim = 8;
        c.model.rvq.semantic_size = 16;
        c.model.rvq.acoustic_size = 16;
        c.model.teacher_dim = 12;
        c.disc_channels = vec![4, 4];
        c.excerpt.duration_s = 0.04;
        c
    }

    fn tone_corpus(cfg: &TrainConfig, n: usize) -> TrainingCorpus {
        let clips = (0..n)
            .map(|i| {
                let f = 200.0 + 90.0 * i as f32;
                let s = (0..1600).map(|k| 0.3 * (k as f32 * f * std::f32::consts::TAU / 16000.0).sin()).collect();
                (format!("c{i}"), AudioClip::new(s, 16000).unwrap(), None)
            })
            .collect();
        TrainingCorpus::from_clips(clips, cfg).unwrap()
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        let mut store = ParamStore::new(0);
        let w = store.from_values("w", &[2], vec![1.0, -2.0]).unwrap();
        let mut opt = AdamW::new(0.1, 0.8, 0.9, 0.01);
        let (mut m, mut v, mut p) = ([0.0f64; 2], [0.0f64; 2], [1.0f64, -2.0]);
        for t in 1..=5 {
            // Loss Σ w² has gradient 2w.
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&store, &grads, t).unwrap();
            for i in 0..2 {
                let g = 2.0 * p[i];
                m[i] = 0.8 * m[i] + 0.2 * g;
                v[i] = 0.9 * v[i] + 0.1 * g * g;
                let mh = m[i] / (1.0 - 0.8f64.powi(t as i32));
                let vh = v[i] / (1.0 - 0.9f64.powi(t as i32));
                p[i] -= 0.1 * 0.01 * p[i] + 0.1 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got = store.values("w").unwrap();
        for i in 0..2 {
            assert!((got[i] as f64 - p[i]).abs() < 1e-5, "{got:?} vs {p:?}");
        }
    }

    #[test]
    fn adamw_skips_parameters_without_gradient() {
        let mut store = ParamStore::new(0);
        let a = store.from_values("a", &[1], vec![1.0]).unwrap();
        let _b = store.from_values("b", &[1], vec![5.0]).unwrap();
        let grads = a.as_tensor().sum_all().unwrap().backward().unwrap();
        let touched = AdamW::new(0.1, 0.8, 0.9, 0.0).step(&store, &grads, 1).unwrap();
        assert_eq!(touched, vec!["a".to_string()]);
        assert_eq!(store.values("b").unwrap(), vec![5.0]);
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let s = set_seed(1);
        assert_eq!(s, set_seed(1));
        assert_ne!(s, set_seed(2));
        assert!(s.generator != s.discriminator && s.discriminator != s.data);
        let a = Trainer::new(TrainConfig { seed: 1, ..tiny_config() }).unwrap();
        let b = Trainer::new(TrainConfig { seed: 2, ..tiny_config() }).unwrap();
        assert_ne!(a.model.quantizer.codebook(0).unwrap(), b.model.quantizer.codebook(0).unwrap());
    }

    #[test]
    fn first_batch_is_seed_determined() {
        let cfg = tiny_config();
        let corpus = tone_corpus(&cfg, 3);
        let batch = |seed| {
            let mut t = Trainer::new(TrainConfig { seed, ..cfg.clone() }).unwrap();
            t.next_batch(&corpus).unwrap().audio.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(batch(4), batch(4));
        assert_ne!(batch(4), batch(5));
    }

    #[test]
    fn excerpt_teacher_alignment() {
        let m = Matrix::from_fn(1, 10, |_, t| t as f32);
        assert_eq!(excerpt_teacher(&m, 0, 320, 4).data, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(excerpt_teacher(&m, 3 * 320 + 100, 320, 4).data, vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(excerpt_teacher(&m, 3 * 320 + 200, 320, 4).data, vec![4.0, 5.0, 6.0, 7.0]);
        assert_eq!(excerpt_teacher(&m, 9 * 320, 320, 4).data, vec![6.0, 7.0, 8.0, 9.0]);
        assert_eq!(excerpt_teacher(&m.columns(0, 2), 0, 320, 4).data, vec![0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn corpus_skips_silence_and_requires_teacher() {
        let mut cfg = tiny_config();
        let tone = AudioClip::new((0..800).map(|k| (k as f32 * 0.1).sin() * 0.2).collect(), 16000).unwrap();
        let silent = AudioClip::silence(800, 16000);
        let c = TrainingCorpus::from_clips(vec![("a".into(), tone.clone(), None), ("s".into(), silent, None)], &cfg).unwrap();
        assert_eq!(c.clips.len(), 1);
        assert_eq!(c.clips[0].teacher.n_frames(), 3);
        cfg.mock_teacher = false;
        assert!(TrainingCorpus::from_clips(vec![("a".into(), tone.clone(), None)], &cfg).is_err());
        let t = mock_teacher(1, 3, 12);
        assert!(TrainingCorpus::from_clips(vec![("a".into(), tone, Some(t))], &cfg).is_ok());
    }

    #[test]
    fn zeroed_discriminator_gives_finite_losses() {
        let cfg = tiny_config();
        let corpus = tone_corpus(&cfg, 2);
        let mut t = Trainer::new(cfg).unwrap();
        let names: Vec<(String, usize)> = t.discriminator_params.iter_sorted().map(|(n, v)| (n.to_string(), v.elem_count())).collect();
        for (n, len) in names {
            t.discriminator_params.assign(&n, &vec![0.0; len]).unwrap();
        }
        let batch = t.next_batch(&corpus).unwrap();
        let b = t.train_step(&batch).unwrap();
        assert!(b.d_loss.is_finite() && b.total.is_finite());
        assert_eq!(b.d_loss, 1.0 * 5.0);
        assert_eq!(t.iteration(), 1);
    }

    #[test]
    fn non_finite_input_is_reported_with_iteration() {
        let cfg = tiny_config();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let n = cfg.excerpt_samples();
        let batch = Batch {
            audio: Tensor::from_vec(vec![f32::NAN; 2 * n], (2, 1, n), &Device::Cpu).unwrap(),
            teacher: Tensor::zeros((2, 12, cfg.excerpt_frames()), DType::F32, &Device::Cpu).unwrap(),
        };
        match t.train_step(&batch) {
            Err(Error::NonFinite { iteration, .. }) => assert_eq!(iteration, 1),
            Err(other) => {
                // NaN latents may already fail the nearest-code search.
                assert!(matches!(other, Error::InvalidInput(_)), "{other}");
            }
            Ok(_) => panic!("NaN batch trained"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = tiny_config();
        let corpus = tone_corpus(&cfg, 2);
        let mut t = Trainer::new(cfg).unwrap();
        let batch = t.next_batch(&corpus).unwrap();
        t.train_step(&batch).unwrap();
        let first = t.to_checkpoint().unwrap().to_bytes();
        let back = Trainer::from_checkpoint(&Checkpoint::from_bytes(&first).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().unwrap().to_bytes(), first);
        assert_eq!(back.iteration(), 1);
        assert!(Checkpoint::from_bytes(&first[..first.len() - 3]).is_err());
        let mut bad = first.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn resume_continues_the_same_trace() {
        let cfg = tiny_config();
        let corpus = tone_corpus(&cfg, 3);
        let mut a = Trainer::new(cfg).unwrap();
        let mut trace = Vec::new();
        let mut snapshot = None;
        for _ in 0..3 {
            let b = a.next_batch(&corpus).unwrap();
            trace.push(a.train_step(&b).unwrap());
            snapshot.get_or_insert_with(|| a.to_checkpoint().unwrap().to_bytes());
        }
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&snapshot.unwrap()).unwrap()).unwrap();
        let tail: Vec<LossBundle> = (0..2)
            .map(|_| {
                let b = resumed.next_batch(&corpus).unwrap();
                resumed.train_step(&b).unwrap()
            })
            .collect();
        assert_eq!(trace[1..], tail[..]);
    }

    #[test]
    fn loop_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        std::fs::create_dir(&corpus_dir).unwrap();
        for (i, clip) in tone_corpus(&tiny_config(), 2).clips.iter().enumerate() {
            crate::audio_io::write_wav(corpus_dir.join(format!("c{i}.wav")), &clip.audio).unwrap();
        }
        let out = dir.path().join("run");
        let mut cfg = TrainConfig { checkpoint_every: 2, ..tiny_config() };
        let last = train_loop(cfg.clone(), &corpus_dir, &out, None).unwrap();
        assert_eq!(last, checkpoint_path(&out, 3));
        assert!(checkpoint_path(&out, 2).exists());
        let csv = std::fs::read_to_string(out.join(LOSS_CSV_NAME)).unwrap();
        assert_eq!(csv.lines().next(), Some(LOSS_CSV_HEADER));
        assert_eq!(csv.lines().count(), 1 + 3);

        cfg.iterations = 0;
        let zero = dir.path().join("zero");
        let only = train_loop(cfg, &corpus_dir, &zero, None).unwrap();
        assert_eq!(only, checkpoint_path(&zero, 0));
        assert_eq!(std::fs::read_dir(&zero).unwrap().count(), 2);
        assert_eq!(std::fs::read_to_string(zero.join(LOSS_CSV_NAME)).unwrap().lines().count(), 1);
    }

    #[test]
    fn model_from_checkpoint_matches_trainer() {
        let t = Trainer::new(tiny_config()).unwrap();
        let m = t.to_checkpoint().unwrap().model().unwrap();
        let x = Tensor::rand(-0.5f32, 0.5, (1, 1, 640), &Device::Cpu).unwrap();
        let a = t.model.forward(&x, 1).unwrap().audio.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = m.forward(&x, 1).unwrap().audio.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
