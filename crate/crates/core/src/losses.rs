//! Training objectives: multi-scale mel reconstruction, multi-period
//! discriminator with least-squares adversarial and feature-matching terms,
//! semantic distillation, and the weighted generator total.

use crate::audio_io::AudioClip;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::ops::{leaky_relu, stft_magnitude};
use crate::nn::{Conv1d, ParamStore};
use crate::spectral::{log_mel_with, mel_filterbank, MelFilterbank, MelScaleSet};
use crate::teacher::TeacherFeatures;
use candle_core::{DType, Device, Tensor};

pub const MPD_PERIODS: [usize; 5] = [2, 3, 5, 7, 11];
const MPD_SLOPE: f64 = 0.1;

/// Sum over scales of the mean absolute log-mel difference.
pub fn multiscale_mel_loss(reference: &AudioClip, generated: &AudioClip, scales: &MelScaleSet) -> Result<f64> {
    if reference.len() != generated.len() {
        return Err(Error::Shape(format!("mel loss on lengths {} and {}", reference.len(), generated.len())));
    }
    let mut total = 0.0;
    for cfg in &scales.configs {
        let fb = mel_filterbank(cfg)?;
        let a = log_mel_with(reference, cfg, &fb)?;
        let b = log_mel_with(generated, cfg, &fb)?;
        total += a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
    }
    Ok(total)
}

/// Differentiable multi-scale mel loss over batches of signals.
#[derive(Debug, Clone)]
pub struct MelLoss {
    scales: Vec<(usize, usize, f64, Tensor)>,
}

impl MelLoss {
    /// Builds filterbank tensors of the requested float type (`F32` for
    /// training, `F64` for gradient checks).
    pub fn new(scales: &MelScaleSet, dtype: DType) -> Result<Self> {
        let scales = scales
            .configs
            .iter()
            .map(|cfg| {
                let MelFilterbank { n_mels, n_bins, weights } = mel_filterbank(cfg)?;
                let fb = Tensor::from_vec(weights, (n_mels, n_bins), &Device::Cpu)?.to_dtype(dtype)?;
                Ok((cfg.window_length, cfg.hop_length, cfg.log_floor, fb))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scales })
    }

    /// Log-mel spectrogram `(batch, n_mels, frames)` of `(batch, len)` signals at scale `i`.
    fn log_mel(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let (w, hop, floor, fb) = &self.scales[i];
        let mag = stft_magnitude(x, *w, *hop)?;
        let mel = fb.broadcast_matmul(&mag)?;
        Ok(mel.maximum(*floor)?.log()?)
    }

    /// `reference` and `generated` are `(batch, len)`; gradients flow only into `generated`.
    pub fn forward(&self, reference: &Tensor, generated: &Tensor) -> Result<Tensor> {
        if reference.dims() != generated.dims() {
            return Err(Error::Shape(format!("mel loss on {:?} and {:?}", reference.dims(), generated.dims())));
        }
        let reference = reference.detach();
        let mut total = Tensor::zeros((), generated.dtype(), generated.device())?;
        for i in 0..self.scales.len() {
            let a = self.log_mel(i, &reference)?;
            let b = self.log_mel(i, generated)?;
            total = (total + (a - b)?.abs()?.mean_all()?)?;
        }
        Ok(total)
    }
}

/// Folds a clip into `period × ceil(len / period)`; column `j` holds
/// samples `j·period .. j·period + period`, zero-padded at the end.
pub fn mpd_reshape(clip: &AudioClip, period: usize) -> Result<Matrix> {
    if period == 0 {
        return Err(Error::InvalidInput("period must be at least 1".into()));
    }
    let cols = clip.len().div_ceil(period);
    Ok(Matrix::from_fn(period, cols, |r, c| clip.samples.get(c * period + r).copied().unwrap_or(0.0)))
}

/// Outputs of one sub-discriminator: final scores and intermediate activations.
pub struct DiscOutput {
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

/// One period branch. Each fold phase is an independent column, so the
/// `(k, 1)` 2-D kernels act as 1-D convolutions over columns batched as
/// `(batch · period, channels, len / period)`.
#[derive(Debug, Clone)]
pub struct PeriodDiscriminator {
    period: usize,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl PeriodDiscriminator {
    pub fn new(store: &mut ParamStore, period: usize, channels: &[usize]) -> Result<Self> {
        let name = format!("mpd.p{period}");
        let mut convs = Vec::new();
        let mut c_in = 1;
        let last = channels.len().saturating_sub(1);
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i == last { 1 } else { 3 };
            convs.push(Conv1d::new(store, &format!("{name}.conv{i}"), c_in, c, 5, stride, 2, 1)?);
            c_in = c;
        }
        let post = Conv1d::same(store, &format!("{name}.post"), c_in, 1, 3, 1)?;
        Ok(Self { period, convs, post })
    }

    pub fn period(&self) -> usize {
        self.period
    }

    /// `x` is `(batch, len)`.
    pub fn forward(&self, x: &Tensor) -> Result<DiscOutput> {
        let (b, len) = x.dims2()?;
        let p = self.period;
        let padded_len = len.div_ceil(p) * p;
        let x = if padded_len > len { x.pad_with_zeros(1, 0, padded_len - len)? } else { x.clone() };
        let mut h = x.reshape((b, padded_len / p, p))?.transpose(1, 2)?.contiguous()?.reshape((b * p, 1, padded_len / p))?;
        let mut features = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, MPD_SLOPE)?;
            features.push(h.clone());
        }
        Ok(DiscOutput { logits: self.post.forward(&h)?, features })
    }
}

/// Multi-period discriminator over periods 2, 3, 5, 7 and 11.
#[derive(Debug, Clone)]
pub struct Mpd {
    pub subs: Vec<PeriodDiscriminator>,
}

impl Mpd {
    pub fn new(store: &mut ParamStore, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(Error::config("disc_channels", "need at least one positive width"));
        }
        let subs = MPD_PERIODS.iter().map(|&p| PeriodDiscriminator::new(store, p, channels)).collect::<Result<_>>()?;
        Ok(Self { subs })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<DiscOutput>> {
        self.subs.iter().map(|d| d.forward(x)).collect()
    }
}

fn sq_mean(x: &Tensor, target: f64) -> Result<Tensor> {
    Ok(x.affine(1.0, -target)?.sqr()?.mean_all()?)
}

fn zero_like(t: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), t.dtype(), t.device())?)
}

/// Least-squares discriminator objective `Σ mean((real − 1)²) + mean(fake²)`.
pub fn discriminator_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!("{} real vs {} fake discriminator outputs", real.len(), fake.len())));
    }
    let mut total = zero_like(&real[0])?;
    for (r, f) in real.iter().zip(fake) {
        total = ((total + sq_mean(r, 1.0)?)? + sq_mean(f, 0.0)?)?;
    }
    Ok(total)
}

/// Least-squares generator objective `Σ mean((fake − 1)²)`.
pub fn generator_adversarial_loss(fake: &[Tensor]) -> Result<Tensor> {
    let Some(first) = fake.first() else {
        return Err(Error::Shape("no discriminator outputs".into()));
    };
    let mut total = zero_like(first)?;
    for f in fake {
        total = (total + sq_mean(f, 1.0)?)?;
    }
    Ok(total)
}

/// `(d_loss, g_loss)` for aligned lists of sub-discriminator outputs.
pub fn adversarial_losses(real: &[Tensor], fake: &[Tensor]) -> Result<(Tensor, Tensor)> {
    Ok((discriminator_loss(real, fake)?, generator_adversarial_loss(fake)?))
}

/// `Σ` over sub-discriminators and layers of `mean |real − fake|`; the
/// real activations are treated as constants.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::Shape(format!("{} real vs {} fake feature sets", real.len(), fake.len())));
    }
    let Some(first) = fake.iter().flatten().next() else {
        return Err(Error::Shape("no features to match".into()));
    };
    let mut total = zero_like(first)?;
    for (rs, fs) in real.iter().zip(fake) {
        if rs.len() != fs.len() {
            return Err(Error::Shape(format!("{} real vs {} fake layers", rs.len(), fs.len())));
        }
        for (r, f) in rs.iter().zip(fs) {
            if r.dims() != f.dims() {
                return Err(Error::Shape(format!("feature {:?} vs {:?}", r.dims(), f.dims())));
            }
            total = (total + (r.detach() - f)?.abs()?.mean_all()?)?;
        }
    }
    Ok(total)
}

/// Mean over frames of `‖projected_t − teacher_t‖²` for `dim × T` matrices.
pub fn distillation_loss(projected: &Matrix, teacher: &TeacherFeatures) -> Result<f64> {
    if projected.shape() != teacher.values.shape() {
        return Err(Error::Shape(format!("projection {:?} vs teacher {:?}", projected.shape(), teacher.values.shape())));
    }
    if projected.cols == 0 {
        return Err(Error::InvalidInput("distillation over zero frames".into()));
    }
    let sum: f64 = projected.data.iter().zip(&teacher.values.data).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    Ok(sum / projected.cols as f64)
}

/// Batched distillation loss for `(batch, dim, frames)` tensors, averaged
/// over all `batch · frames` frames.
pub fn distillation_loss_tensor(projected: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    if projected.dims() != teacher.dims() {
        return Err(Error::Shape(format!("projection {:?} vs teacher {:?}", projected.dims(), teacher.dims())));
    }
    let (b, _, t) = projected.dims3()?;
    if b * t == 0 {
        return Err(Error::InvalidInput("distillation over zero frames".into()));
    }
    Ok(((projected - teacher.detach())?.sqr()?.sum_all()? / (b * t) as f64)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mel: f64,
    pub feature_match: f64,
    pub adversarial: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub semantic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mel: 15.0, feature_match: 2.0, adversarial: 1.0, codebook: 1.0, commitment: 0.25, semantic: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("weight_{name}"), "must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("mel", self.mel),
            ("fm", self.feature_match),
            ("adv", self.adversarial),
            ("cb", self.codebook),
            ("commit", self.commitment),
            ("sem", self.semantic),
        ]
    }
}

/// Unweighted generator loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub mel: f64,
    pub feature_match: f64,
    pub adversarial: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub semantic: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("mel", self.mel),
            ("fm", self.feature_match),
            ("adv", self.adversarial),
            ("cb", self.codebook),
            ("commit", self.commitment),
            ("sem", self.semantic),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub parts: LossParts,
    pub total: f64,
    /// Discriminator loss of the same iteration (not part of `total`).
    pub d_loss: f64,
}

/// Weighted sum of the six terms; a non-finite term is reported by name.
pub fn total_generator_loss(parts: LossParts, weights: &LossWeights) -> Result<LossBundle> {
    if let Some((name, _)) = parts.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { term: name.into(), iteration: 0 });
    }
    let total = parts.named().iter().zip(weights.named()).map(|((_, v), (_, w))| v * w).sum();
    Ok(LossBundle { parts, total, d_loss: 0.0 })
}

/// Tensor analogue of [`total_generator_loss`] used for backpropagation.
pub fn weighted_total(terms: &[(&Tensor, f64); 6]) -> Result<Tensor> {
    let mut total = zero_like(terms[0].0)?;
    for (t, w) in terms {
        total = (total + t.affine(*w, 0.0)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f32], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn noise_clip(seed: u64, n: usize, amp: f32) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..n).map(|_| rng.random_range(-amp..amp)).collect(), 16000).unwrap()
    }

    #[test]
    fn mel_loss_fixed_point_and_symmetry() {
        let scales = MelScaleSet::standard(16000);
        let a = noise_clip(1, 3000, 0.5);
        let b = noise_clip(2, 3000, 0.3);
        assert_eq!(multiscale_mel_loss(&a, &a, &scales).unwrap(), 0.0);
        let ab = multiscale_mel_loss(&a, &b, &scales).unwrap();
        let ba = multiscale_mel_loss(&b, &a, &scales).unwrap();
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-12);
        assert!(multiscale_mel_loss(&a, &noise_clip(3, 2999, 0.1), &scales).is_err());
    }

    #[test]
    fn mel_loss_against_silence_matches_direct_recomputation() {
        let scales = MelScaleSet::standard(16000);
        let tone = AudioClip::new(
            (0..6080).map(|i| (0.3 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin()) as f32).collect(),
            16000,
        )
        .unwrap();
        let silence = AudioClip::silence(6080, 16000);
        let expected: f64 = scales
            .configs
            .iter()
            .map(|cfg| {
                let lm = crate::spectral::log_mel(&tone, cfg).unwrap();
                lm.data.iter().map(|v| (v - 1e-5f64.ln()).abs()).sum::<f64>() / lm.data.len() as f64
            })
            .sum();
        let ours = multiscale_mel_loss(&tone, &silence, &scales).unwrap();
        assert!((ours - expected).abs() < 1e-6);
    }

    #[test]
    fn tensor_mel_loss_matches_plain() {
        let scales = MelScaleSet::standard(16000);
        let a = noise_clip(4, 2400, 0.4);
        let b = noise_clip(5, 2400, 0.2);
        let plain = multiscale_mel_loss(&a, &b, &scales).unwrap();
        let loss = MelLoss::new(&scales, DType::F64).unwrap();
        let ta = t(&a.samples, &[1, 2400]).to_dtype(DType::F64).unwrap();
        let tb = t(&b.samples, &[1, 2400]).to_dtype(DType::F64).unwrap();
        let ours = scalar(&loss.forward(&ta, &tb).unwrap());
        assert!((plain - ours).abs() < 1e-9, "{plain} vs {ours}");
    }

    #[test]
    fn mpd_reshape_examples() {
        let clip = AudioClip::new((1..=10).map(|v| v as f32 / 10.0).collect(), 16000).unwrap();
        assert_eq!(mpd_reshape(&clip, 2).unwrap().shape(), (2, 5));
        let m3 = mpd_reshape(&clip, 3).unwrap();
        assert_eq!(m3.shape(), (3, 4));
        assert_eq!(m3.data.iter().filter(|&&v| v == 0.0).count(), 2);
        assert_eq!(m3.get(0, 1), 0.4);
        let m1 = mpd_reshape(&clip, 1).unwrap();
        assert_eq!(m1.shape(), (1, 10));
        assert_eq!(m1.data, clip.samples);
    }

    #[test]
    fn period_fold_matches_reshape() {
        let mut store = ParamStore::new(0);
        let d = PeriodDiscriminator::new(&mut store, 3, &[2]).unwrap();
        let clip = AudioClip::new((0..10).map(|v| v as f32 * 0.05).collect(), 16000).unwrap();
        // A single layer with an identity-like kernel exposes the fold.
        let mut w = vec![0.0f32; 2 * 5];
        w[2] = 1.0;
        store.assign("mpd.p3.conv0.weight", &w).unwrap();
        let out = d.forward(&t(&clip.samples, &[1, 10])).unwrap();
        let h: Vec<f32> = out.features[0].narrow(1, 0, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let m = mpd_reshape(&clip, 3).unwrap();
        assert_eq!(h, m.data);
    }

    #[test]
    fn mpd_shapes() {
        let mut store = ParamStore::new(0);
        let mpd = Mpd::new(&mut store, &[4, 8, 8]).unwrap();
        let outs = mpd.forward(&Tensor::zeros((2, 6080), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(outs.len(), 5);
        for (o, p) in outs.iter().zip(MPD_PERIODS) {
            let cols = 6080usize.div_ceil(p);
            assert_eq!(o.features.len(), 3);
            assert_eq!(o.features[0].dims(), &[2 * p, 4, (cols - 1) / 3 + 1]);
            assert_eq!(o.logits.dim(0).unwrap(), 2 * p);
        }
    }

    #[test]
    fn adversarial_examples() {
        let ones = t(&[1.0; 4], &[4]);
        let zeros = t(&[0.0; 4], &[4]);
        let (d, _) = adversarial_losses(&[ones.clone()], &[zeros]).unwrap();
        assert_eq!(scalar(&d), 0.0);
        assert_eq!(scalar(&generator_adversarial_loss(&[ones]).unwrap()), 0.0);
        let half = t(&[0.5; 3], &[3]);
        let (d, g) = adversarial_losses(&[half.clone()], &[half]).unwrap();
        assert!((scalar(&d) - 0.5).abs() < 1e-7);
        assert!((scalar(&g) - 0.25).abs() < 1e-7);
    }

    #[test]
    fn feature_matching_examples() {
        let a = t(&[1.0, 2.0, 3.0], &[1, 1, 3]);
        assert_eq!(scalar(&feature_matching_loss(&[vec![a.clone()]], &[vec![a.clone()]]).unwrap()), 0.0);
        let b = a.affine(1.0, 0.5).unwrap();
        assert!((scalar(&feature_matching_loss(&[vec![a.clone()]], &[vec![b]]).unwrap()) - 0.5).abs() < 1e-7);
        let l1 = (t(&[0.0, 0.0], &[2]), t(&[0.2, -0.2], &[2]));
        let l2 = (t(&[1.0], &[1]), t(&[0.4], &[1]));
        let v = scalar(&feature_matching_loss(&[vec![l1.0, l2.0]], &[vec![l1.1, l2.1]]).unwrap());
        assert!((v - 0.8).abs() < 1e-7);
        assert!(feature_matching_loss(&[vec![a.clone()]], &[vec![t(&[1.0], &[1])]]).is_err());
    }

    fn naive_distillation(p: &Matrix, h: &Matrix) -> f64 {
        let mut total = 0.0;
        for t in 0..p.cols {
            let mut frame = 0.0;
            for d in 0..p.rows {
                let diff = p.get(d, t) as f64 - h.get(d, t) as f64;
                frame += diff * diff;
            }
            total += frame;
        }
        total / p.cols as f64
    }

    #[test]
    fn distillation_examples() {
        let p = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let h = TeacherFeatures::new(Matrix::zeros(2, 2)).unwrap();
        assert_eq!(distillation_loss(&p, &h).unwrap(), 2.5);
        assert_eq!(distillation_loss(&p, &TeacherFeatures::new(p.clone()).unwrap()).unwrap(), 0.0);
        let empty = Matrix::zeros(2, 0);
        assert!(distillation_loss(&empty, &TeacherFeatures::new(empty.clone()).unwrap()).is_err());
        let tp = t(&p.data, &[1, 2, 2]);
        let th = Tensor::zeros((1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(scalar(&distillation_loss_tensor(&tp, &th).unwrap()), 2.5);
    }

    #[test]
    fn weighted_total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_generator_loss(LossParts::default(), &w).unwrap().total, 0.0);
        let ones = LossParts { mel: 1.0, feature_match: 1.0, adversarial: 1.0, codebook: 1.0, commitment: 1.0, semantic: 1.0 };
        assert_eq!(total_generator_loss(ones, &w).unwrap().total, 20.25);
        let mel = LossParts { mel: 2.0, ..Default::default() };
        assert_eq!(total_generator_loss(mel, &w).unwrap().total, 30.0);
        let bad = LossParts { commitment: f64::NAN, ..Default::default() };
        match total_generator_loss(bad, &w) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "commit"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn distillation_matches_naive_and_is_homogeneous(seed in any::<u64>(), dim in 1usize..64, frames in 1usize..32, c in 0.1f32..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Matrix::from_vec(dim, frames, (0..dim * frames).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
            let h = Matrix::from_vec(dim, frames, (0..dim * frames).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
            let ours = distillation_loss(&p, &TeacherFeatures::new(h.clone()).unwrap()).unwrap();
            prop_assert!((ours - naive_distillation(&p, &h)).abs() < 1e-9);
            prop_assert!(ours >= 0.0);
            let scale = |m: &Matrix| Matrix::from_vec(m.rows, m.cols, m.data.iter().map(|v| v * c).collect()).unwrap();
            let scaled = distillation_loss(&scale(&p), &TeacherFeatures::new(scale(&h)).unwrap()).unwrap();
            prop_assert!((scaled - (c as f64).powi(2) * ours).abs() <= 1e-4 * scaled.max(1.0));
        }

        #[test]
        fn total_is_weighted_sum(v in prop::array::uniform6(0.0f64..100.0)) {
            let parts = LossParts { mel: v[0], feature_match: v[1], adversarial: v[2], codebook: v[3], commitment: v[4], semantic: v[5] };
            let b = total_generator_loss(parts, &LossWeights::default()).unwrap();
            let expected = 15.0 * v[0] + 2.0 * v[1] + v[2] + v[3] + 0.25 * v[4] + v[5];
            prop_assert!((b.total - expected).abs() < 1e-9);
        }
    }
}
