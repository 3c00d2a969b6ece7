//! Vector quantization, the semantic-first residual chain and bitrate accounting.
//!
//! Plain-matrix functions (`vq_forward`, `rvq_forward`) define the reference
//! behavior; [`ResidualVq`] is the trainable tensor version used by the
//! model and shares the same nearest-code search.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::ops::straight_through;
use crate::nn::ParamStore;
use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub size: usize,
    pub dim: usize,
    /// `size × dim`, row-major.
    pub entries: Vec<f32>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, entries: Vec<f32>) -> Result<Self> {
        if entries.len() != size * dim {
            return Err(Error::Shape(format!("codebook {size}x{dim} given {} values", entries.len())));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("codebook entries must be finite".into()));
        }
        Ok(Self { size, dim, entries })
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }
}

/// Entries i.i.d. normal with standard deviation `1 / sqrt(dim)`.
pub fn init_codebook(size: usize, dim: usize, seed: u64) -> Result<Codebook> {
    if size < 2 || dim == 0 {
        return Err(Error::InvalidInput(format!("codebook needs size >= 2 and dim >= 1, got {size}x{dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (dim as f32).sqrt();
    let entries = (0..size * dim).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal) * std).collect();
    Codebook::new(size, dim, entries)
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// Index of the entry with the smallest squared distance in a flat
/// `size × dim` table; ties go to the lowest index.
fn nearest_in(v: &[f32], entries: &[f32], dim: usize) -> Result<usize> {
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidInput("NaN in vector to quantize".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (k, e) in entries.chunks_exact(dim).enumerate() {
        let d = squared_distance(v, e);
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best.0)
}

pub fn nearest_code(vector: &[f32], codebook: &Codebook) -> Result<usize> {
    if vector.len() != codebook.dim {
        return Err(Error::Shape(format!("vector dim {} vs codebook dim {}", vector.len(), codebook.dim)));
    }
    nearest_in(vector, &codebook.entries, codebook.dim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VQResult {
    pub indices: Vec<u32>,
    /// `dim × frames`; each column is a codebook entry.
    pub quantized: Matrix,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

/// Quantizes each column of `latents` (`dim × frames`). Both losses are the
/// mean over frames of the squared distance to the chosen entry; they differ
/// only in which side is held constant during training.
pub fn vq_forward(latents: &Matrix, codebook: &Codebook) -> Result<VQResult> {
    if latents.rows != codebook.dim {
        return Err(Error::Shape(format!("latent dim {} vs codebook dim {}", latents.rows, codebook.dim)));
    }
    let frames = latents.cols;
    let mut indices = Vec::with_capacity(frames);
    let mut quantized = Matrix::zeros(codebook.dim, frames);
    let mut total = 0.0;
    for t in 0..frames {
        let z = latents.column(t);
        let k = nearest_code(&z, codebook)?;
        total += squared_distance(&z, codebook.entry(k));
        for (r, v) in codebook.entry(k).iter().enumerate() {
            quantized.set(r, t, *v);
        }
        indices.push(k as u32);
    }
    let loss = if frames == 0 { 0.0 } else { total / frames as f64 };
    Ok(VQResult { indices, quantized, codebook_loss: loss, commitment_loss: loss })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RVQConfig {
    pub semantic_size: usize,
    pub n_acoustic: usize,
    pub acoustic_size: usize,
    pub latent_dim: usize,
    /// Randomly truncates the acoustic stack during training.
    pub quantizer_dropout: bool,
}

impl Default for RVQConfig {
    fn default() -> Self {
        Self { semantic_size: 512, n_acoustic: 1, acoustic_size: 1024, latent_dim: 64, quantizer_dropout: false }
    }
}

impl RVQConfig {
    pub fn n_quantizers(&self) -> usize {
        1 + self.n_acoustic
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.semantic_size).chain(std::iter::repeat_n(self.acoustic_size, self.n_acoustic)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.semantic_size < 2 || self.acoustic_size < 2 {
            return Err(Error::config("rvq", "codebook sizes must be at least 2"));
        }
        if self.semantic_size > u16::MAX as usize || self.acoustic_size > u16::MAX as usize {
            return Err(Error::config("rvq", "codebook sizes must fit in 16 bits"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be positive"));
        }
        if self.n_acoustic > 254 {
            return Err(Error::config("n_acoustic", "at most 254 acoustic quantizers"));
        }
        Ok(())
    }
}

/// `n_quantizers × n_frames` code indices; row 0 is the semantic row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub codes: Vec<Vec<u32>>,
    pub codebook_sizes: Vec<usize>,
}

impl TokenGrid {
    pub fn new(codes: Vec<Vec<u32>>, codebook_sizes: Vec<usize>) -> Result<Self> {
        if codes.len() != codebook_sizes.len() {
            return Err(Error::Shape(format!("{} code rows for {} codebooks", codes.len(), codebook_sizes.len())));
        }
        let frames = codes.first().map_or(0, Vec::len);
        for (q, (row, &size)) in codes.iter().zip(&codebook_sizes).enumerate() {
            if row.len() != frames {
                return Err(Error::Shape(format!("code row {q} has {} frames, expected {frames}", row.len())));
            }
            if let Some(&bad) = row.iter().find(|&&c| c as usize >= size) {
                return Err(Error::Range(format!("code {bad} in row {q} exceeds codebook size {size}")));
            }
        }
        Ok(Self { codes, codebook_sizes })
    }

    pub fn n_quantizers(&self) -> usize {
        self.codes.len()
    }

    pub fn n_frames(&self) -> usize {
        self.codes.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RvqResult {
    pub tokens: TokenGrid,
    pub semantic_quantized: Matrix,
    pub acoustic_sum: Matrix,
    pub stages: Vec<VQResult>,
    /// What remains after the last stage.
    pub residual: Matrix,
}

pub fn rvq_forward(latents: &Matrix, config: &RVQConfig, codebooks: &[Codebook]) -> Result<RvqResult> {
    if codebooks.len() != config.n_quantizers() {
        return Err(Error::Shape(format!("{} codebooks for {} quantizers", codebooks.len(), config.n_quantizers())));
    }
    let mut residual = latents.clone();
    let mut acoustic_sum = Matrix::zeros(latents.rows, latents.cols);
    let mut stages = Vec::with_capacity(codebooks.len());
    for (k, cb) in codebooks.iter().enumerate() {
        let res = vq_forward(&residual, cb)?;
        for (r, q) in residual.data.iter_mut().zip(&res.quantized.data) {
            *r -= q;
        }
        if k > 0 {
            for (a, q) in acoustic_sum.data.iter_mut().zip(&res.quantized.data) {
                *a += q;
            }
        }
        stages.push(res);
    }
    let tokens = TokenGrid::new(
        stages.iter().map(|s| s.indices.clone()).collect(),
        codebooks.iter().map(|c| c.size).collect(),
    )?;
    Ok(RvqResult { tokens, semantic_quantized: stages[0].quantized.clone(), acoustic_sum, stages, residual })
}

/// Fixed-width code bits for one frame: `Σ ceil(log2(size))`.
pub fn bits_per_frame(sizes: &[usize]) -> Result<u32> {
    if sizes.is_empty() {
        return Err(Error::InvalidInput("no codebooks".into()));
    }
    sizes
        .iter()
        .map(|&s| {
            if s < 2 {
                Err(Error::InvalidInput(format!("codebook size {s} < 2")))
            } else {
                Ok(usize::BITS - (s - 1).leading_zeros())
            }
        })
        .sum()
}

pub fn bitrate_kbps(sizes: &[usize], frame_rate: f64) -> Result<f64> {
    if !(frame_rate > 0.0) {
        return Err(Error::InvalidInput(format!("frame rate {frame_rate} must be positive")));
    }
    Ok(bits_per_frame(sizes)? as f64 * frame_rate / 1000.0)
}

/// A named quantizer stack whose nominal bitrate is reported by the CLI.
#[derive(Debug, Clone, PartialEq)]
pub struct BitratePreset {
    pub family: &'static str,
    pub name: String,
    pub sizes: Vec<usize>,
}

/// Semantic-first stacks at three bitrates, plain 1024-entry RVQ baselines,
/// and the semantic codebook-size ablation over one semantic plus three
/// acoustic stages.
pub fn shipped_bitrate_presets() -> Vec<BitratePreset> {
    let acoustic = |n: usize| std::iter::repeat_n(1024, n);
    let mut out = Vec::new();
    for n_acoustic in [1, 3, 5] {
        out.push(BitratePreset {
            family: "semdac",
            name: format!("semantic512+{n_acoustic}x1024"),
            sizes: std::iter::once(512).chain(acoustic(n_acoustic)).collect(),
        });
    }
    for n in [2, 4, 5, 6] {
        out.push(BitratePreset { family: "rvq-baseline", name: format!("{n}x1024"), sizes: acoustic(n).collect() });
    }
    for sem in [1024, 512, 256, 128] {
        out.push(BitratePreset {
            family: "semantic-size",
            name: format!("semantic{sem}+3x1024"),
            sizes: std::iter::once(sem).chain(acoustic(3)).collect(),
        });
    }
    out
}

/// Tensor output of [`ResidualVq::forward`] for a `(batch, dim, frames)` input.
pub struct RvqOutput {
    /// Per stage, codes in `(batch, frame)` row-major order.
    pub codes: Vec<Vec<u32>>,
    pub semantic_q: Tensor,
    pub acoustic_sum: Tensor,
    /// Mean over active stages.
    pub codebook_loss: Tensor,
    pub commitment_loss: Tensor,
}

/// Trainable semantic-first residual quantizer.
#[derive(Debug, Clone)]
pub struct ResidualVq {
    pub config: RVQConfig,
    codebooks: Vec<Var>,
}

impl ResidualVq {
    pub fn new(store: &mut ParamStore, name: &str, config: RVQConfig) -> Result<Self> {
        config.validate()?;
        let mut codebooks = Vec::new();
        for (k, size) in config.sizes().into_iter().enumerate() {
            let cb = init_codebook(size, config.latent_dim, store.next_seed())?;
            let label = if k == 0 { "semantic".to_string() } else { format!("acoustic{k}") };
            codebooks.push(store.from_values(&format!("{name}.{label}"), &[size, config.latent_dim], cb.entries)?);
        }
        Ok(Self { config, codebooks })
    }

    pub fn codebook(&self, k: usize) -> Result<Codebook> {
        let v = &self.codebooks[k];
        Codebook::new(v.dims()[0], v.dims()[1], v.flatten_all()?.to_vec1()?)
    }

    /// Quantizes with the semantic stage plus the first `n_acoustic` acoustic stages.
    pub fn forward(&self, z: &Tensor, n_acoustic: usize) -> Result<RvqOutput> {
        let (_, dim, _) = z.dims3()?;
        if dim != self.config.latent_dim {
            return Err(Error::Shape(format!("latent dim {dim} vs quantizer dim {}", self.config.latent_dim)));
        }
        let n_acoustic = n_acoustic.min(self.config.n_acoustic);
        let mut residual = z.clone();
        let mut codes = Vec::new();
        let mut semantic_q = None;
        let mut acoustic_sum = z.zeros_like()?;
        let mut cb_loss = Tensor::zeros((), DType::F32, z.device())?;
        let mut commit_loss = cb_loss.clone();
        for (k, cb) in self.codebooks.iter().take(1 + n_acoustic).enumerate() {
            let stage = vq_tensor(&residual, cb.as_tensor())?;
            residual = (&residual - &stage.st)?;
            cb_loss = (cb_loss + stage.codebook_loss)?;
            commit_loss = (commit_loss + stage.commitment_loss)?;
            if k == 0 {
                semantic_q = Some(stage.st);
            } else {
                acoustic_sum = (acoustic_sum + stage.st)?;
            }
            codes.push(stage.indices);
        }
        let stages = (1 + n_acoustic) as f64;
        Ok(RvqOutput {
            codes,
            semantic_q: semantic_q.expect("semantic stage always runs"),
            acoustic_sum,
            codebook_loss: (cb_loss / stages)?,
            commitment_loss: (commit_loss / stages)?,
        })
    }

    /// Looks up codes (per stage, `(batch, frame)` order) and returns the
    /// semantic latents and the sum of the acoustic latents.
    pub fn dequantize(&self, codes: &[Vec<u32>], batch: usize, frames: usize) -> Result<(Tensor, Tensor)> {
        if codes.is_empty() || codes.len() > self.codebooks.len() {
            return Err(Error::Shape(format!("{} code rows for {} codebooks", codes.len(), self.codebooks.len())));
        }
        let dim = self.config.latent_dim;
        let lookup = |k: usize, row: &[u32]| -> Result<Tensor> {
            let size = self.codebooks[k].dims()[0];
            if row.len() != batch * frames {
                return Err(Error::Shape(format!("code row {k} has {} entries, expected {}", row.len(), batch * frames)));
            }
            if let Some(&bad) = row.iter().find(|&&c| c as usize >= size) {
                return Err(Error::Range(format!("code {bad} exceeds codebook {k} size {size}")));
            }
            let idx = Tensor::from_slice(row, row.len(), self.codebooks[k].device())?;
            Ok(self.codebooks[k].as_tensor().index_select(&idx, 0)?.reshape((batch, frames, dim))?.transpose(1, 2)?.contiguous()?)
        };
        let semantic = lookup(0, &codes[0])?;
        let mut acoustic = Tensor::zeros((batch, dim, frames), DType::F32, semantic.device())?;
        for (k, row) in codes.iter().enumerate().skip(1) {
            acoustic = (acoustic + lookup(k, row)?)?;
        }
        Ok((semantic, acoustic))
    }
}

struct TensorVq {
    indices: Vec<u32>,
    st: Tensor,
    codebook_loss: Tensor,
    commitment_loss: Tensor,
}

/// Quantizes a `(batch, dim, frames)` tensor against a `(size, dim)` codebook.
fn vq_tensor(z: &Tensor, codebook: &Tensor) -> Result<TensorVq> {
    let (batch, dim, frames) = z.dims3()?;
    let n = batch * frames;
    let zt = z.detach().transpose(1, 2)?.contiguous()?;
    let flat: Vec<f32> = zt.flatten_all()?.to_vec1()?;
    let entries: Vec<f32> = codebook.flatten_all()?.to_vec1()?;
    let indices = flat.chunks_exact(dim.max(1)).map(|v| nearest_in(v, &entries, dim).map(|k| k as u32)).collect::<Result<Vec<_>>>()?;
    let idx = Tensor::from_slice(&indices, n, z.device())?;
    let q = codebook.index_select(&idx, 0)?.reshape((batch, frames, dim))?.transpose(1, 2)?.contiguous()?;
    let per_frame = n.max(1) as f64;
    let codebook_loss = ((z.detach() - &q)?.sqr()?.sum_all()? / per_frame)?;
    let commitment_loss = ((z - q.detach())?.sqr()?.sum_all()? / per_frame)?;
    let st = straight_through(z, &q)?;
    Ok(TensorVq { indices, st, codebook_loss, commitment_loss })
}
