//! Speaker-identity embeddings and the trainable language-embedding table.
//!
//! The speaker encoder is pluggable: a small trainable classifier-pooled
//! encoder lives here for self-contained runs, and precomputed embeddings
//! from an external encoder can be loaded from the text format instead. The
//! encoder is frozen during synthesis training either way.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{mel_filterbank, stft_magnitudes, Waveform, CONTENT_RATE};
use crate::error::{Error, Result};
use crate::nn::{
    self, Adam, AdamParams, Conv1dLayer, EmbeddingLayer, Init, LinearLayer, ParamBuilder,
    ParamStore,
};

/// Default speaker-embedding width.
pub const DEFAULT_EMBED_DIM: usize = 192;
/// Default language-embedding width.
pub const DEFAULT_LANG_DIM: usize = 64;

/// Fixed-length voice-identity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub values: Vec<f32>,
}

impl SpeakerEmbedding {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// cos(a, b) = dot / (|a| |b|); errors on zero vectors or mixed dims.
pub fn cosine_similarity(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f32> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            what: "speaker embeddings",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())) as f32)
}

/// Arithmetic mean followed by L2 normalization; cancellation to the zero
/// vector is an error.
pub fn average_embedding(embeddings: &[SpeakerEmbedding]) -> Result<SpeakerEmbedding> {
    let first = embeddings.first().ok_or(Error::EmptyInput("embeddings"))?;
    let dim = first.dim();
    let mut acc = vec![0.0f64; dim];
    for e in embeddings {
        if e.dim() != dim {
            return Err(Error::DimensionMismatch {
                what: "speaker embeddings",
                expected: dim,
                got: e.dim(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(&e.values) {
            *a += v as f64;
        }
    }
    let n = embeddings.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::ZeroNormMean);
    }
    Ok(SpeakerEmbedding::new(
        acc.into_iter().map(|v| (v / norm) as f32).collect(),
    ))
}

/// Load `utterance_id v1 .. vE` rows (whitespace-separated). All rows must
/// share one dimension; an empty file yields an empty map.
pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<BTreeMap<String, SpeakerEmbedding>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split_whitespace();
        let id = cols.next().expect("non-empty line has a first column");
        let values: Vec<f32> = cols
            .map(|c| {
                c.parse::<f32>().map_err(|_| Error::ParseLine {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: format!("bad embedding value {c:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(Error::ParseLine {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: "row has no embedding values".into(),
            });
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::DimensionMismatch {
                    what: "embedding file rows",
                    expected: d,
                    got: values.len(),
                })
            }
            _ => {}
        }
        map.insert(id.to_string(), SpeakerEmbedding::new(values));
    }
    Ok(map)
}

pub fn save_embedding_file(
    path: impl AsRef<Path>,
    map: &BTreeMap<String, SpeakerEmbedding>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (id, emb) in map {
        out.push_str(id);
        for v in &emb.values {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Toy trainable speaker encoder.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SpeakerEncoderConfig {
    pub embed_dim: usize,
    pub mel_channels: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for SpeakerEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: DEFAULT_EMBED_DIM,
            mel_channels: 40,
            hidden: 64,
            seed: 0,
        }
    }
}

const ENC_WINDOW: usize = 1024;
const ENC_HOP: usize = 320;
/// Minimum input: half a second at 16 kHz.
const MIN_SAMPLES: usize = 8000;

/// Small convolutional encoder with mean+std pooling over time. Deterministic
/// in inference; trainable through [`SpeakerEncoder::train_classifier`].
pub struct SpeakerEncoder {
    store: ParamStore,
    cfg: SpeakerEncoderConfig,
    conv1: Conv1dLayer,
    conv2: Conv1dLayer,
    conv3: Conv1dLayer,
    proj: LinearLayer,
}

impl SpeakerEncoder {
    pub fn new(cfg: SpeakerEncoderConfig) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32, cfg.seed);
        let mut pb = ParamBuilder::new(&mut store);
        let mut enc = pb.pp("spk_enc");
        let h = cfg.hidden;
        let conv1 = nn::conv1d(&mut enc, "conv1", cfg.mel_channels, h, 5, 1, 2, 1)?;
        let conv2 = nn::conv1d(&mut enc, "conv2", h, h, 5, 2, 2, 1)?;
        let conv3 = nn::conv1d(&mut enc, "conv3", h, h, 5, 2, 2, 1)?;
        let proj = nn::linear(&mut enc, "proj", 2 * h, cfg.embed_dim, true)?;
        Ok(Self {
            store,
            cfg,
            conv1,
            conv2,
            conv3,
            proj,
        })
    }

    pub fn config(&self) -> &SpeakerEncoderConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn log_mel_16k(&self, wav: &Waveform) -> Result<Tensor> {
        let mags = stft_magnitudes(wav.samples(), ENC_WINDOW, ENC_HOP);
        let bins = ENC_WINDOW / 2 + 1;
        let fb = mel_filterbank(self.cfg.mel_channels, bins, CONTENT_RATE);
        let mel = mags.dot(&fb.t());
        let log_mel = mel.mapv(|v| v.max(1e-5).ln());
        let frames = log_mel.nrows();
        let flat: Vec<f32> = log_mel.t().iter().cloned().collect();
        Ok(Tensor::from_vec(
            flat,
            (1, self.cfg.mel_channels, frames),
            self.store.device(),
        )?)
    }

    /// Pooled embedding tensor (1, 2h) before projection.
    fn pooled(&self, wav: &Waveform) -> Result<Tensor> {
        let x = self.log_mel_16k(wav)?;
        let x = nn::leaky_relu(&self.conv1.forward(&x)?, 0.1)?;
        let x = nn::leaky_relu(&self.conv2.forward(&x)?, 0.1)?;
        let x = nn::leaky_relu(&self.conv3.forward(&x)?, 0.1)?;
        let mean = x.mean(2)?; // (1, h)
        let sq_mean = x.sqr()?.mean(2)?;
        let var = (sq_mean - mean.sqr()?)?;
        let std = nn::clamp_t(&var, 1e-8, f64::INFINITY)?.sqrt()?;
        Ok(Tensor::cat(&[&mean, &std], 1)?)
    }

    fn embed_tensor(&self, wav: &Waveform) -> Result<Tensor> {
        if wav.sample_rate() != CONTENT_RATE {
            return Err(Error::InvalidSampleRate {
                got: wav.sample_rate(),
                expected: "16000",
            });
        }
        if wav.len() < MIN_SAMPLES {
            return Err(Error::TooShort {
                need: MIN_SAMPLES,
                got: wav.len(),
            });
        }
        self.proj.forward(&self.pooled(wav)?)
    }

    /// Deterministic embedding of at least 0.5 s of 16 kHz audio.
    pub fn embed_speaker(&self, wav: &Waveform) -> Result<SpeakerEmbedding> {
        let t = self.embed_tensor(wav)?;
        Ok(SpeakerEmbedding::new(
            t.flatten_all()?.to_vec1::<f32>()?,
        ))
    }

    /// Fit the encoder with a linear classifier head over `n_classes`
    /// synthetic speakers. Returns the per-step cross-entropy losses.
    pub fn train_classifier(
        &mut self,
        examples: &[(Waveform, usize)],
        n_classes: usize,
        steps: usize,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("classifier examples"));
        }
        let head = {
            let mut pb = ParamBuilder::new(&mut self.store);
            nn::linear(&mut pb.pp("spk_cls"), "head", self.cfg.embed_dim, n_classes, true)?
        };
        let mut opt = Adam::new(
            self.store.trainable(|_| true),
            AdamParams {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        )?;
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (wav, label) = &examples[rng.random_range(0..examples.len())];
            let emb = self.embed_tensor(wav)?;
            let logits = head.forward(&emb)?;
            let logp = nn::log_softmax_stable(&logits, 1)?;
            let picked = logp.narrow(1, *label, 1)?;
            let loss = picked.neg()?.mean_all()?;
            let grads = loss.backward()?;
            opt.step(&grads)?;
            losses.push(loss.to_scalar::<f32>()? as f64);
        }
        Ok(losses)
    }
}

// ---------------------------------------------------------------------------
// Language embeddings.
// ---------------------------------------------------------------------------

/// Trainable per-language vectors keyed by registered language codes.
pub struct LanguageTable {
    codes: Vec<String>,
    emb: EmbeddingLayer,
    dim: usize,
}

impl LanguageTable {
    /// Register `codes` (order defines ids) and create the trainable table
    /// inside the caller's parameter store.
    pub fn new(pb: &mut ParamBuilder<'_>, codes: Vec<String>, dim: usize) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::EmptyInput("language codes"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &codes {
            if !seen.insert(c.clone()) {
                return Err(Error::Config(format!("duplicate language code {c:?}")));
            }
        }
        let emb = nn::embedding(&mut pb.pp("lang_table"), "emb", codes.len(), dim, 0.02)?;
        Ok(Self { codes, emb, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn language_id(&self, code: &str) -> Result<usize> {
        self.codes
            .iter()
            .position(|c| c == code)
            .ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    /// Trainable row for a registered language, shape (1, dim).
    pub fn language_vector(&self, code: &str) -> Result<Tensor> {
        let id = self.language_id(code)?;
        self.vector_for_id(id)
    }

    pub fn vector_for_id(&self, id: usize) -> Result<Tensor> {
        if id >= self.codes.len() {
            return Err(Error::UnknownLanguage(format!("id {id}")));
        }
        let ids = Tensor::from_vec(vec![id as u32], (1,), self.emb.weight.device())?;
        self.emb.forward(&ids)
    }

    /// Rows for a batch of ids, shape (batch, dim).
    pub fn vectors_for_ids(&self, ids: &[usize]) -> Result<Tensor> {
        for &id in ids {
            if id >= self.codes.len() {
                return Err(Error::UnknownLanguage(format!("id {id}")));
            }
        }
        let ids_t = Tensor::from_vec(
            ids.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            (ids.len(),),
            self.emb.weight.device(),
        )?;
        self.emb.forward(&ids_t)
    }
}

/// Zero language vector used when conditioning is disabled.
pub fn zero_language_vector(batch: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((batch, dim), dtype, &candle_core::Device::Cpu)?)
}
