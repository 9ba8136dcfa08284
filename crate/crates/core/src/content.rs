//! Self-supervised content extraction with a speaker-invariant clustering
//! head.
//!
//! A strided convolutional backbone (total stride 320, so features land on
//! the shared 50 fps grid) stands in for a pretrained SSL encoder; weights
//! from a larger model can be warm-started through the checkpoint loader.
//! During fine-tuning a vector-quantization head pulls the assignments of
//! two speaker-perturbed views of the same utterance together; at inference
//! the head is absent and content features are the raw backbone output.

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{hann_window, resample_ratio, Waveform, CONTENT_RATE, FRAME_HOP};
use crate::error::{Error, Result};
use crate::nn::{
    self, Adam, AdamParams, Conv1dLayer, Init, LinearLayer, ParamBuilder, ParamStore,
};

/// Content features: frames x dim, finite, on the 50 fps grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentFeatures {
    pub data: Array2<f32>,
}

impl ContentFeatures {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Backbone layout. Strides multiply to 320; each layer uses
/// kernel = stride + 2*padding so the length law telescopes to
/// `frames = floor(n/320) + 1` (the input is padded by one hop).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Trailing layers that stay trainable during fine-tuning.
    pub trainable_layers: usize,
    pub seed: u64,
}

impl BackboneConfig {
    /// Desk-scale preset: six layers, 48-dim features.
    pub fn desk() -> Self {
        Self {
            channels: vec![16, 16, 32, 32, 48, 48],
            strides: vec![2, 2, 2, 4, 4, 5],
            trainable_layers: 2,
            seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        *self.channels.last().expect("non-empty channels")
    }

    pub fn layers(&self) -> usize {
        self.channels.len()
    }
}

/// Layered temporal encoder: 16 kHz waveform -> frames x D features.
pub struct ContentBackbone {
    store: ParamStore,
    cfg: BackboneConfig,
    layers: Vec<Conv1dLayer>,
}

impl ContentBackbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: BackboneConfig, dtype: DType) -> Result<Self> {
        if cfg.channels.len() != cfg.strides.len() {
            return Err(Error::Config(
                "backbone channels and strides must have equal length".into(),
            ));
        }
        if cfg.strides.iter().product::<usize>() != FRAME_HOP {
            return Err(Error::Config(format!(
                "backbone strides must multiply to {FRAME_HOP}"
            )));
        }
        let mut store = ParamStore::new(dtype, cfg.seed);
        let mut pb = ParamBuilder::new(&mut store);
        let mut scope = pb.pp("backbone");
        let mut layers = Vec::with_capacity(cfg.channels.len());
        let mut in_c = 1;
        for (i, (&out_c, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
            let padding = (stride / 2).max(1);
            let kernel = stride + 2 * padding;
            layers.push(nn::conv1d(
                &mut scope,
                &format!("layer{i}"),
                in_c,
                out_c,
                kernel,
                stride,
                padding,
                1,
            )?);
            in_c = out_c;
        }
        Ok(Self { store, cfg, layers })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// True for parameters updated during fine-tuning: the trailing
    /// `trainable_layers` conv layers.
    pub fn is_trainable(&self, name: &str) -> bool {
        let first_trainable = self.cfg.layers().saturating_sub(self.cfg.trainable_layers);
        (first_trainable..self.cfg.layers())
            .any(|i| name.starts_with(&format!("backbone.layer{i}.")))
    }

    /// Features as a graph tensor (1, D, frames).
    pub fn features_tensor(&self, wav: &Waveform) -> Result<Tensor> {
        if wav.sample_rate() != CONTENT_RATE {
            return Err(Error::InvalidSampleRate {
                got: wav.sample_rate(),
                expected: "16000",
            });
        }
        if wav.len() < FRAME_HOP {
            return Err(Error::TooShort {
                need: FRAME_HOP,
                got: wav.len(),
            });
        }
        // One extra hop of zero padding turns floor(n/320) into
        // floor(n/320) + 1 frames.
        let n = wav.len();
        let mut padded = vec![0.0f32; n + FRAME_HOP];
        padded[FRAME_HOP / 2..FRAME_HOP / 2 + n].copy_from_slice(wav.samples());
        let mut x = nn::tensor_f32(
            &padded,
            &[1, 1, padded.len()],
            self.store.dtype(),
            self.store.device(),
        )?;
        for layer in &self.layers {
            x = layer.forward(&x)?.gelu()?;
        }
        Ok(x)
    }

    /// Deterministic frames x D feature matrix.
    pub fn backbone_features(&self, wav: &Waveform) -> Result<ContentFeatures> {
        let t = self.features_tensor(wav)?.to_dtype(DType::F32)?;
        let (_, d, frames) = t.dims3()?;
        let flat = t.transpose(1, 2)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(ContentFeatures {
            data: Array2::from_shape_vec((frames, d), flat)
                .expect("tensor layout matches shape"),
        })
    }

    /// The content path feeding synthesis. The clustering head is never
    /// applied here: this is exactly [`Self::backbone_features`].
    pub fn extract_content(&self, wav: &Waveform) -> Result<ContentFeatures> {
        self.backbone_features(wav)
    }
}

// ---------------------------------------------------------------------------
// Speaker perturbation for view generation.
// ---------------------------------------------------------------------------

/// Shift pitch/formants by `semitones` while keeping duration: resample by
/// the reciprocal ratio, then overlap-add time-stretch back to the original
/// length.
pub fn pitch_shift(wav: &Waveform, semitones: f32) -> Waveform {
    let n = wav.len();
    let ratio = 2f64.powf(semitones as f64 / 12.0);
    // Speed-up by `ratio`: pitch scales by `ratio`, length by 1/ratio.
    let denom = 100_000u64;
    let num = (ratio * denom as f64).round() as u64;
    let fast = resample_ratio(wav.samples(), num, denom);
    let stretched = ola_stretch(&fast, n);
    Waveform::new(stretched, wav.sample_rate()).expect("stretch output non-empty")
}

/// Overlap-add time stretch to exactly `target_len` samples (windowed frame
/// copies, no pitch change).
fn ola_stretch(input: &[f32], target_len: usize) -> Vec<f32> {
    let n = input.len();
    if n == target_len {
        return input.to_vec();
    }
    let win = 1024.min(n.max(4) / 2 * 2);
    let hop_syn = win / 4;
    let window = hann_window(win);
    let n_frames = target_len.div_ceil(hop_syn) + 1;
    // Analysis hop chosen so the last analysis frame lands at the end.
    let denom = (n_frames - 1).max(1) as f64;
    let max_start = n.saturating_sub(win) as f64;
    let mut out = vec![0.0f64; target_len + win];
    let mut norm = vec![0.0f64; target_len + win];
    for k in 0..n_frames {
        let a = (k as f64 / denom * max_start).round() as usize;
        let s = k * hop_syn;
        for i in 0..win {
            if a + i < n {
                let w = window[i] as f64;
                out[s + i] += w * input[a + i] as f64;
                norm[s + i] += w;
            }
        }
    }
    (0..target_len)
        .map(|i| {
            if norm[i] > 1e-6 {
                (out[i] / norm[i]) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Randomized view generation: pitch shift of 1..4 semitones (random sign)
/// plus a gain in [0.7, 1.0]. Deterministic for a fixed RNG state; output
/// length equals the input length.
pub fn speaker_perturb(wav: &Waveform, rng: &mut ChaCha8Rng) -> Waveform {
    let semis: f64 = rng.random_range(1.0..=4.0);
    let sign = if rng.random_range(0..2u8) == 0 { -1.0 } else { 1.0 };
    let gain: f32 = rng.random_range(0.7..=1.0);
    let shifted = pitch_shift(wav, (sign * semis) as f32);
    let samples = shifted.samples().iter().map(|&s| s * gain).collect();
    Waveform::new(samples, wav.sample_rate()).expect("perturbed output non-empty")
}

// ---------------------------------------------------------------------------
// Clustering head.
// ---------------------------------------------------------------------------

/// Head configuration. Paper-scale values are 2048 clusters / 256 dims;
/// the desk preset keeps 64 / 32.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SpinConfig {
    pub clusters: usize,
    pub code_dim: usize,
    pub assign_temp: f64,
    pub target_temp: f64,
    pub seed: u64,
}

impl SpinConfig {
    pub fn desk(input_dim: usize) -> SpinHeadBuilder {
        SpinHeadBuilder {
            cfg: Self {
                clusters: 64,
                code_dim: 32,
                assign_temp: 0.1,
                target_temp: 0.05,
                seed: 1,
            },
            input_dim,
        }
    }

    pub fn paper(input_dim: usize) -> SpinHeadBuilder {
        SpinHeadBuilder {
            cfg: Self {
                clusters: 2048,
                code_dim: 256,
                assign_temp: 0.1,
                target_temp: 0.05,
                seed: 1,
            },
            input_dim,
        }
    }
}

pub struct SpinHeadBuilder {
    pub cfg: SpinConfig,
    pub input_dim: usize,
}

impl SpinHeadBuilder {
    pub fn build(self) -> Result<SpinHead> {
        SpinHead::new(self.cfg, self.input_dim, DType::F32)
    }
}

/// Projection + codebook over cluster centers. Assignments are softmax over
/// temperature-scaled cosine similarities; the head exists only during
/// training.
pub struct SpinHead {
    store: ParamStore,
    cfg: SpinConfig,
    projection: LinearLayer,
    codebook: Tensor,
}

impl SpinHead {
    pub fn new(cfg: SpinConfig, input_dim: usize, dtype: DType) -> Result<Self> {
        if cfg.assign_temp <= 0.0 || cfg.target_temp <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        let mut store = ParamStore::new(dtype, cfg.seed);
        let mut pb = ParamBuilder::new(&mut store);
        let mut scope = pb.pp("spin");
        let projection = nn::linear(&mut scope, "projection", input_dim, cfg.code_dim, true)?;
        let codebook = scope.get(
            "codebook",
            &[cfg.clusters, cfg.code_dim],
            Init::Normal(1.0),
        )?;
        Ok(Self {
            store,
            cfg,
            projection,
            codebook,
        })
    }

    pub fn config(&self) -> &SpinConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Cosine-similarity logits (frames x clusters) for (frames, D) features.
    fn logits(&self, feats: &Tensor) -> Result<Tensor> {
        let projected = self.projection.forward(feats)?;
        let p = nn::l2_normalize(&projected, 1, 1e-8)?;
        let c = nn::l2_normalize(&self.codebook, 1, 1e-8)?;
        Ok(p.matmul(&c.t()?)?)
    }

    /// Soft assignments with the given temperature; rows sum to one.
    pub fn assignments_tensor(&self, feats: &Tensor, temp: f64) -> Result<Tensor> {
        let logits = (self.logits(feats)? / temp)?;
        nn::softmax_stable(&logits, 1)
    }

    /// Assignment probabilities (frames x clusters) of content features.
    pub fn spin_assignments(&self, feats: &ContentFeatures) -> Result<Array2<f32>> {
        let t = self.features_to_tensor(feats)?;
        let p = self
            .assignments_tensor(&t, self.cfg.assign_temp)?
            .to_dtype(DType::F32)?;
        let (frames, k) = p.dims2()?;
        let flat = p.flatten_all()?.to_vec1::<f32>()?;
        Ok(Array2::from_shape_vec((frames, k), flat).expect("tensor layout matches shape"))
    }

    fn features_to_tensor(&self, feats: &ContentFeatures) -> Result<Tensor> {
        nn::tensor_f32(
            feats.data.as_slice().expect("contiguous features"),
            &[feats.frames(), feats.dim()],
            self.store.dtype(),
            self.store.device(),
        )
    }

    /// Symmetric swapped-prediction cross-entropy between two views.
    /// Targets are sharpened (low-temperature) assignments of the other
    /// view with gradients stopped; the mean over frames is returned.
    pub fn spin_loss_tensor(&self, feats_a: &Tensor, feats_b: &Tensor) -> Result<Tensor> {
        let n = feats_a.dim(0)?.min(feats_b.dim(0)?);
        if n == 0 {
            return Err(Error::EmptyInput("spin views have zero frames"));
        }
        let fa = feats_a.narrow(0, 0, n)?;
        let fb = feats_b.narrow(0, 0, n)?;
        let logits_a = self.logits(&fa)?;
        let logits_b = self.logits(&fb)?;
        let log_pa = nn::log_softmax_stable(&(&logits_a / self.cfg.assign_temp)?, 1)?;
        let log_pb = nn::log_softmax_stable(&(&logits_b / self.cfg.assign_temp)?, 1)?;
        let ta = nn::softmax_stable(&(logits_a.detach() / self.cfg.target_temp)?, 1)?;
        let tb = nn::softmax_stable(&(logits_b.detach() / self.cfg.target_temp)?, 1)?;
        let ce_a = (tb * log_pa)?.sum(1)?.neg()?.mean_all()?;
        let ce_b = (ta * log_pb)?.sum(1)?.neg()?.mean_all()?;
        Ok(((ce_a + ce_b)? * 0.5)?)
    }

    /// Scalar loss over two aligned content-feature views.
    pub fn spin_loss(&self, feats_a: &ContentFeatures, feats_b: &ContentFeatures) -> Result<f64> {
        let a = self.features_to_tensor(feats_a)?;
        let b = self.features_to_tensor(feats_b)?;
        Ok(self
            .spin_loss_tensor(&a, &b)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?)
    }

    /// exp(entropy of the mean assignment): 1.0 for a dead codebook, up to
    /// `clusters` for perfectly balanced usage.
    pub fn codebook_perplexity(&self, all_feats: &[ContentFeatures]) -> Result<f64> {
        let mut mean = vec![0.0f64; self.cfg.clusters];
        let mut total = 0usize;
        for f in all_feats {
            let p = self.spin_assignments(f)?;
            for row in p.rows() {
                for (acc, &v) in mean.iter_mut().zip(row) {
                    *acc += v as f64;
                }
            }
            total += p.nrows();
        }
        if total == 0 {
            return Err(Error::EmptyInput("no frames for perplexity"));
        }
        let mut entropy = 0.0f64;
        for m in &mut mean {
            *m /= total as f64;
            if *m > 0.0 {
                entropy -= *m * m.ln();
            }
        }
        Ok(entropy.exp())
    }
}

/// Fine-tuning settings; paper-scale values are batch 32, 3 epochs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SpinTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SpinTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 3,
            lr: 5e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpinReport {
    pub step_losses: Vec<f64>,
    pub perplexity: f64,
}

/// Fine-tune the head plus the backbone's trailing trainable layers on
/// speaker-perturbed view pairs. Earlier backbone layers are never touched.
pub fn spin_finetune(
    backbone: &mut ContentBackbone,
    head: &mut SpinHead,
    utterances: &[Waveform],
    cfg: &SpinTrainConfig,
) -> Result<SpinReport> {
    if utterances.is_empty() {
        return Err(Error::EmptyInput("fine-tuning dataset"));
    }
    let mut vars = head.store.trainable(|_| true);
    let trainable_filter = {
        let layers = backbone.cfg.layers();
        let first = layers.saturating_sub(backbone.cfg.trainable_layers);
        move |name: &str| {
            (first..layers).any(|i| name.starts_with(&format!("backbone.layer{i}.")))
        }
    };
    vars.extend(backbone.store.trainable(trainable_filter));
    let mut opt = Adam::new(
        vars,
        AdamParams {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::new();
    let steps_per_epoch = utterances.len().div_ceil(cfg.batch_size);
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..utterances.len()).collect();
        shuffle(&mut order, &mut rng);
        for step in 0..steps_per_epoch {
            let batch: Vec<usize> = order
                .iter()
                .cycle()
                .skip(step * cfg.batch_size)
                .take(cfg.batch_size)
                .cloned()
                .collect();
            let mut loss_sum: Option<Tensor> = None;
            for &idx in &batch {
                let wav = &utterances[idx];
                let view_a = speaker_perturb(wav, &mut rng);
                let view_b = speaker_perturb(wav, &mut rng);
                let fa = backbone.features_tensor(&view_a)?.squeeze(0)?.t()?;
                let fb = backbone.features_tensor(&view_b)?.squeeze(0)?.t()?;
                let loss = head.spin_loss_tensor(&fa.contiguous()?, &fb.contiguous()?)?;
                loss_sum = Some(match loss_sum {
                    Some(acc) => (acc + loss)?,
                    None => loss,
                });
            }
            let loss = (loss_sum.expect("non-empty batch") / batch.len() as f64)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: "spin",
                    step: losses.len(),
                });
            }
            let grads = loss.backward()?;
            opt.step(&grads)?;
            losses.push(value);
        }
    }
    let feats: Vec<ContentFeatures> = utterances
        .iter()
        .map(|w| backbone.backbone_features(w))
        .collect::<Result<_>>()?;
    let perplexity = head.codebook_perplexity(&feats)?;
    Ok(SpinReport {
        step_losses: losses,
        perplexity,
    })
}

fn shuffle(xs: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{dominant_frequency, sine_wave};

    fn desk_backbone() -> ContentBackbone {
        ContentBackbone::new(BackboneConfig::desk()).unwrap()
    }

    #[test]
    fn feature_frame_law() {
        let bb = desk_backbone();
        let tone = sine_wave(220.0, 16_000, 3200, 0.5);
        let f = bb.backbone_features(&tone).unwrap();
        assert_eq!(f.frames(), 11);
        assert_eq!(f.dim(), BackboneConfig::desk().dim());

        let one_sec = sine_wave(220.0, 16_000, 16_000, 0.5);
        let f = bb.backbone_features(&one_sec).unwrap();
        assert_eq!(f.frames(), 51);
    }

    #[test]
    fn features_deterministic_and_removal_law() {
        let bb = desk_backbone();
        let tone = sine_wave(330.0, 16_000, 4800, 0.5);
        let a = bb.backbone_features(&tone).unwrap();
        let b = bb.backbone_features(&tone).unwrap();
        assert_eq!(a, b);
        let c = bb.extract_content(&tone).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn feature_frame_law_random_lengths() {
        let bb = desk_backbone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let n = rng.random_range(320..20_000usize);
            let tone = sine_wave(220.0, 16_000, n, 0.4);
            let f = bb.backbone_features(&tone).unwrap();
            assert_eq!(f.frames(), n / 320 + 1, "frame law at n={n}");
        }
    }

    #[test]
    fn pitch_shift_moves_spectral_peak() {
        let tone = sine_wave(220.0, 16_000, 16_000, 0.5);
        let shifted = pitch_shift(&tone, 4.0);
        assert!((shifted.len() as i64 - tone.len() as i64).abs() <= 1);
        let peak = dominant_frequency(&shifted);
        let expected = 220.0 * 2f64.powf(4.0 / 12.0);
        assert!(
            (peak - expected).abs() <= 2.0,
            "peak {peak}, expected {expected}"
        );
    }

    #[test]
    fn perturb_is_seeded_and_length_preserving() {
        let tone = sine_wave(300.0, 16_000, 9000, 0.5);
        let a = speaker_perturb(&tone, &mut ChaCha8Rng::seed_from_u64(4));
        let b = speaker_perturb(&tone, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert!((a.len() as i64 - tone.len() as i64).abs() <= 1);
    }

    fn toy_head(k: usize, d: usize, input_dim: usize) -> SpinHead {
        SpinHead::new(
            SpinConfig {
                clusters: k,
                code_dim: d,
                assign_temp: 0.1,
                target_temp: 0.05,
                seed: 2,
            },
            input_dim,
            DType::F32,
        )
        .unwrap()
    }

    #[test]
    fn assignment_rows_are_probabilities() {
        let head = toy_head(16, 8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data =
            Array2::from_shape_fn((7, 12), |_| rng.random_range(-1.0..1.0f32));
        let p = head
            .spin_assignments(&ContentFeatures { data })
            .unwrap();
        for row in p.rows() {
            let s: f32 = row.sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn uniform_codebook_gives_uniform_rows() {
        let mut head = toy_head(8, 4, 4);
        let ones = Tensor::full(0.5f32, (8, 4), &candle_core::Device::Cpu).unwrap();
        head.store_mut().set("spin.codebook", &ones).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0f32));
        let p = head.spin_assignments(&ContentFeatures { data }).unwrap();
        for row in p.rows() {
            for &v in row {
                assert!((v - 1.0 / 8.0).abs() < 1e-5, "row entry {v}");
            }
        }
    }

    #[test]
    fn matching_codebook_row_wins_at_low_temperature() {
        let mut head = SpinHead::new(
            SpinConfig {
                clusters: 6,
                code_dim: 4,
                assign_temp: 0.01,
                target_temp: 0.05,
                seed: 3,
            },
            4,
            DType::F32,
        )
        .unwrap();
        // Identity projection so features land directly in code space.
        let eye: Vec<f32> = (0..16)
            .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 })
            .collect();
        let eye_t = Tensor::from_vec(eye, (4, 4), &candle_core::Device::Cpu).unwrap();
        head.store_mut().set("spin.projection.weight", &eye_t).unwrap();
        head.store_mut()
            .set(
                "spin.projection.bias",
                &Tensor::zeros((4,), DType::F32, &candle_core::Device::Cpu).unwrap(),
            )
            .unwrap();
        let code = head.codebook.to_dtype(DType::F32).unwrap();
        let row2: Vec<f32> = code.narrow(0, 2, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let data = Array2::from_shape_vec((1, 4), row2).unwrap();
        let p = head.spin_assignments(&ContentFeatures { data }).unwrap();
        let argmax = p
            .row(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 2);
    }

    #[test]
    fn spin_loss_matches_direct_recomputation() {
        let head = toy_head(8, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fa = ContentFeatures {
            data: Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0f32)),
        };
        let fb = ContentFeatures {
            data: Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0f32)),
        };
        let loss = head.spin_loss(&fa, &fb).unwrap();

        // Independent recomputation from assignment matrices.
        let ta = head.sharpened_assignments_for_test(&fa);
        let tb = head.sharpened_assignments_for_test(&fb);
        let pa = head.spin_assignments(&fa).unwrap();
        let pb = head.spin_assignments(&fb).unwrap();
        let ce = |t: &Array2<f32>, p: &Array2<f32>| -> f64 {
            let mut acc = 0.0f64;
            for (trow, prow) in t.rows().into_iter().zip(p.rows()) {
                for (&tv, &pv) in trow.iter().zip(prow) {
                    if tv > 0.0 {
                        acc -= tv as f64 * (pv as f64).max(1e-30).ln();
                    }
                }
            }
            acc / t.nrows() as f64
        };
        let expected = 0.5 * (ce(&tb, &pa) + ce(&ta, &pb));
        assert!(
            (loss - expected).abs() < 1e-4,
            "loss {loss} vs direct {expected}"
        );
    }

    #[test]
    fn spin_loss_truncates_to_min_frames() {
        let head = toy_head(8, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fa = ContentFeatures {
            data: Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0f32)),
        };
        let fb = ContentFeatures {
            data: Array2::from_shape_fn((7, 6), |_| rng.random_range(-1.0..1.0f32)),
        };
        assert!(head.spin_loss(&fa, &fb).unwrap().is_finite());
    }

    #[test]
    fn finetune_freezes_early_layers_and_reduces_loss() {
        let mut backbone = desk_backbone();
        let mut head = SpinConfig::desk(backbone.dim()).build().unwrap();
        let utterances: Vec<Waveform> = (0..4)
            .map(|i| sine_wave(180.0 + 60.0 * i as f32, 16_000, 4000, 0.5))
            .collect();
        let before: std::collections::HashMap<String, Vec<f32>> = backbone
            .store()
            .named_tensors()
            .unwrap()
            .into_iter()
            .map(|(n, t)| (n, t.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
            .collect();
        let report = spin_finetune(
            &mut backbone,
            &mut head,
            &utterances,
            &SpinTrainConfig {
                batch_size: 4,
                epochs: 4,
                lr: 1e-3,
                seed: 5,
            },
        )
        .unwrap();
        assert!(
            report.step_losses.last().unwrap() < report.step_losses.first().unwrap(),
            "losses {:?}",
            report.step_losses
        );
        let after: std::collections::HashMap<String, Vec<f32>> = backbone
            .store()
            .named_tensors()
            .unwrap()
            .into_iter()
            .map(|(n, t)| (n, t.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
            .collect();
        let mut changed = 0;
        for (name, vals) in &after {
            let frozen = !backbone.is_trainable(name);
            if frozen {
                assert_eq!(&before[name], vals, "frozen layer {name} changed");
            } else if before[name] != *vals {
                changed += 1;
            }
        }
        assert!(changed > 0, "trainable layers never updated");
        assert!(report.perplexity > 1.0);
    }

    impl SpinHead {
        /// Test-only: sharpened (target-temperature) assignments.
        fn sharpened_assignments_for_test(&self, feats: &ContentFeatures) -> Array2<f32> {
            let t = self.features_to_tensor(feats).unwrap();
            let p = self
                .assignments_tensor(&t, self.cfg.target_temp)
                .unwrap()
                .to_dtype(DType::F32)
                .unwrap();
            let (frames, k) = p.dims2().unwrap();
            let flat = p.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            Array2::from_shape_vec((frames, k), flat).unwrap()
        }
    }
}
