//! Audio I/O, resampling, and spectral features.
//!
//! The synthesis path runs at 24 kHz; content and speaker features run at
//! 16 kHz. Both share the 320-sample frame hop, so every feature stream obeys
//! the same frame-count law: `frames = floor(n / 320) + 1` under centered
//! reflect padding.

use std::path::Path;

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

/// Sample rate of the synthesis path (decoder output, posterior input).
pub const SYNTH_RATE: u32 = 24_000;
/// Sample rate of the content/speaker path.
pub const CONTENT_RATE: u32 = 16_000;
/// STFT analysis window in samples at 24 kHz.
pub const WINDOW_LENGTH: usize = 1280;
/// Frame hop in samples (shared by every feature stream).
pub const FRAME_HOP: usize = 320;
/// Spectrogram bins: fft_size/2 + 1 with fft_size = window length.
pub const SPEC_BINS: usize = WINDOW_LENGTH / 2 + 1;
/// Default mel channel count for the reconstruction loss.
pub const DEFAULT_MELS: usize = 80;
/// Clamp floor applied before the log in mel features.
pub const MEL_LOG_FLOOR: f32 = 1e-5;

/// Mono audio at a known sample rate. Samples are finite and the buffer is
/// non-empty; entry points of the pipeline additionally require 16 or 24 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::ZeroLengthAudio);
        }
        if sample_rate == 0 {
            return Err(Error::InvalidSampleRate {
                got: sample_rate,
                expected: "> 0",
            });
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteAudio);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

/// Magnitude STFT of a 24 kHz waveform: `frames x SPEC_BINS`, all entries
/// non-negative and finite.
#[derive(Debug, Clone)]
pub struct LinearSpectrogram {
    pub magnitudes: Array2<f32>,
    pub frame_hop: usize,
    pub window_length: usize,
}

impl LinearSpectrogram {
    pub fn frames(&self) -> usize {
        self.magnitudes.nrows()
    }
}

/// Log-mel energies, `frames x n_mels`, frame-aligned with the linear
/// spectrogram of the same waveform.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    pub log_mel: Array2<f32>,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.log_mel.nrows()
    }
}

fn rate_supported(rate: u32) -> bool {
    rate == CONTENT_RATE || rate == SYNTH_RATE
}

/// Decode a PCM WAV file to a mono waveform at `target_rate`.
///
/// Multi-channel audio is averaged to mono before resampling. Samples are
/// peak-normalized only when they exceed full scale.
pub fn load_waveform(path: impl AsRef<Path>, target_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    if !rate_supported(target_rate) {
        return Err(Error::InvalidSampleRate {
            got: target_rate,
            expected: "16000 or 24000",
        });
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavDecode {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::WavDecode {
            path: path.to_path_buf(),
            msg: "zero channels".into(),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::WavDecode {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::WavDecode {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{fmt:?} {bits}-bit (expected 16-bit PCM or 32-bit float)"
            )))
        }
    };
    if interleaved.is_empty() {
        return Err(Error::ZeroLengthAudio);
    }
    let mut mono = Vec::with_capacity(interleaved.len() / channels);
    for frame in interleaved.chunks_exact(channels) {
        let sum: f64 = frame.iter().map(|&s| s as f64).sum();
        mono.push((sum / channels as f64) as f32);
    }
    let peak = mono.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    if !peak.is_finite() {
        return Err(Error::NonFiniteAudio);
    }
    if peak > 1.0 {
        for s in &mut mono {
            *s /= peak;
        }
    }
    let wav = Waveform::new(mono, spec.sample_rate)?;
    if wav.sample_rate() == target_rate {
        Ok(wav)
    } else {
        resample(&wav, target_rate)
    }
}

/// Write a waveform as 16-bit PCM WAV.
pub fn save_waveform(path: impl AsRef<Path>, wav: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::WavDecode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    for &s in wav.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(|e| Error::WavDecode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| Error::WavDecode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(())
}

// Kernel half-width of the resampler in zero crossings of the sinc.
const RESAMPLE_ZEROS: usize = 32;

/// Band-limited polyphase resampling. Output length is
/// `round(n * new_rate / old_rate)`; an identical rate returns the input
/// bit-for-bit.
pub fn resample(wav: &Waveform, new_rate: u32) -> Result<Waveform> {
    if new_rate == 0 {
        return Err(Error::InvalidSampleRate {
            got: new_rate,
            expected: "> 0",
        });
    }
    let old_rate = wav.sample_rate();
    if new_rate == old_rate {
        return Ok(wav.clone());
    }
    let samples = resample_ratio(wav.samples(), old_rate as u64, new_rate as u64);
    Waveform::new(samples, new_rate)
}

/// Resample by the rational ratio `to / from` (rates or any integer pair).
pub(crate) fn resample_ratio(input: &[f32], from: u64, to: u64) -> Vec<f32> {
    let g = gcd(from, to);
    let up = (to / g) as i64; // interpolation factor L
    let down = (from / g) as i64; // decimation factor M
    let n = input.len() as i64;
    let out_len = ((input.len() as u64 * to + from / 2) / from) as usize;

    // Low-pass cutoff in cycles per *input* sample; when downsampling the
    // kernel stretches so the stopband lands below the new Nyquist.
    let scale = if up < down {
        up as f64 / down as f64
    } else {
        1.0
    };
    let half_width = RESAMPLE_ZEROS as f64 / scale;

    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len as i64 {
        // Exact rational source position: t = j * M / L input samples.
        let num = j * down;
        let base = num.div_euclid(up);
        let frac = num.rem_euclid(up) as f64 / up as f64;
        let t = base as f64 + frac;

        let k_lo = (t - half_width).ceil() as i64;
        let k_hi = (t + half_width).floor() as i64;
        let mut acc = 0.0f64;
        let mut wsum = 0.0f64;
        for k in k_lo..=k_hi {
            let u = (k as f64 - t) * scale;
            let w = sinc(u) * hann_taper(u / RESAMPLE_ZEROS as f64);
            wsum += w;
            if k >= 0 && k < n {
                acc += w * input[k as usize] as f64;
            }
        }
        // Normalizing by the truncated-kernel mass keeps unit DC gain.
        out.push(if wsum.abs() > 1e-12 {
            (acc / wsum) as f32
        } else {
            0.0
        });
    }
    out
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Hann taper over u in [-1, 1], zero outside.
fn hann_taper(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    }
}

/// Periodic Hann window of length `n`.
pub(crate) fn hann_window(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            (0.5 * (1.0 - x.cos())) as f32
        })
        .collect()
}

/// Mirror the signal around its end points (no edge repetition).
pub(crate) fn reflect_pad(samples: &[f32], pad: usize) -> Vec<f32> {
    let n = samples.len();
    debug_assert!(pad < n, "reflect pad {pad} needs signal longer than pad");
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(samples[i]);
    }
    out.extend_from_slice(samples);
    for i in 2..=pad + 1 {
        out.push(samples[n - i]);
    }
    out
}

/// Magnitude STFT with centered reflect padding: `floor(n/hop) + 1` frames.
pub(crate) fn stft_magnitudes(samples: &[f32], window_len: usize, hop: usize) -> Array2<f32> {
    let n = samples.len();
    let frames = n / hop + 1;
    let bins = window_len / 2 + 1;
    let window = hann_window(window_len);
    let padded = reflect_pad(samples, window_len / 2);

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(window_len);
    let mut buf = vec![Complex::new(0.0f32, 0.0f32); window_len];
    let mut scratch = vec![Complex::new(0.0f32, 0.0f32); fft.get_inplace_scratch_len()];

    let mut mags = Array2::<f32>::zeros((frames, bins));
    for f in 0..frames {
        let start = f * hop;
        for i in 0..window_len {
            buf[i] = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for b in 0..bins {
            mags[(f, b)] = buf[b].norm();
        }
    }
    mags
}

/// Magnitude STFT of a 24 kHz waveform: Hann window of 1280 samples, hop 320,
/// centered reflect padding.
pub fn linear_spectrogram(wav: &Waveform) -> Result<LinearSpectrogram> {
    if wav.sample_rate() != SYNTH_RATE {
        return Err(Error::InvalidSampleRate {
            got: wav.sample_rate(),
            expected: "24000",
        });
    }
    if wav.len() < WINDOW_LENGTH {
        return Err(Error::TooShort {
            need: WINDOW_LENGTH,
            got: wav.len(),
        });
    }
    let magnitudes = stft_magnitudes(wav.samples(), WINDOW_LENGTH, FRAME_HOP);
    Ok(LinearSpectrogram {
        magnitudes,
        frame_hop: FRAME_HOP,
        window_length: WINDOW_LENGTH,
    })
}

/// Triangular mel filterbank, `n_mels x n_bins`, HTK mel scale, unit-peak
/// triangles spanning 0 .. sample_rate/2.
pub(crate) fn mel_filterbank(n_mels: usize, n_bins: usize, sample_rate: u32) -> Array2<f32> {
    let f_max = sample_rate as f64 / 2.0;
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let mel_inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let m_max = mel(f_max);
    // n_mels + 2 anchor frequencies, evenly spaced on the mel scale.
    let anchors: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_inv(m_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = f_max / (n_bins - 1) as f64;
    let mut fb = Array2::<f32>::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (anchors[m], anchors[m + 1], anchors[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_hz;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[(m, b)] = w as f32;
        }
    }
    fb
}

/// Log-mel features of a 24 kHz waveform. Frame count matches
/// [`linear_spectrogram`] for the same input; values are clamped at
/// [`MEL_LOG_FLOOR`] before the log.
pub fn mel_spectrogram(wav: &Waveform, n_mels: usize) -> Result<MelSpectrogram> {
    let spec = linear_spectrogram(wav)?;
    let fb = mel_filterbank(n_mels, SPEC_BINS, SYNTH_RATE);
    let mel = spec.magnitudes.dot(&fb.t());
    let log_mel = mel.mapv(|v| v.max(MEL_LOG_FLOOR).ln());
    Ok(MelSpectrogram { log_mel })
}

/// Generate a pure sine tone; test helper used across the crate.
pub fn sine_wave(freq_hz: f32, sample_rate: u32, num_samples: usize, amplitude: f32) -> Waveform {
    let samples: Vec<f32> = (0..num_samples)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            (amplitude as f64 * (2.0 * std::f64::consts::PI * freq_hz as f64 * t).sin()) as f32
        })
        .collect();
    Waveform::new(samples, sample_rate).expect("sine wave is valid")
}

/// Dominant frequency of a signal by zero-padded FFT peak, in Hz.
pub fn dominant_frequency(wav: &Waveform) -> f64 {
    let n = wav.len();
    let fft_len = (4 * n).next_power_of_two();
    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(fft_len);
    let mut buf = vec![Complex::new(0.0f32, 0.0); fft_len];
    let window = hann_window(n);
    for i in 0..n {
        buf[i] = Complex::new(wav.samples()[i] * window[i], 0.0);
    }
    fft.process(&mut buf);
    let half = fft_len / 2;
    let peak = (1..half)
        .max_by(|&a, &b| {
            buf[a]
                .norm_sqr()
                .partial_cmp(&buf[b].norm_sqr())
                .expect("finite spectrum")
        })
        .unwrap_or(0);
    peak as f64 * wav.sample_rate() as f64 / fft_len as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn write_test_wav(path: &Path, samples: &[f32], rate: u32, channels: u16) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample((s * 32767.0) as i16).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn load_identity_rate_keeps_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let tone = sine_wave(440.0, 24_000, 24_000, 0.5);
        write_test_wav(&p, tone.samples(), 24_000, 1);
        let wav = load_waveform(&p, 24_000).unwrap();
        assert_eq!(wav.len(), 24_000);
        assert_eq!(wav.sample_rate(), 24_000);
    }

    #[test]
    fn load_resamples_to_16k_preserving_duration() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let tone = sine_wave(440.0, 24_000, 24_000, 0.5);
        write_test_wav(&p, tone.samples(), 24_000, 1);
        let wav = load_waveform(&p, 16_000).unwrap();
        let expected = (24_000u64 * 16_000 / 24_000) as usize;
        assert!((wav.len() as i64 - expected as i64).abs() <= 1);
        assert_eq!(wav.sample_rate(), 16_000);
    }

    #[test]
    fn load_empty_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.wav");
        write_test_wav(&p, &[], 24_000, 1);
        match load_waveform(&p, 24_000) {
            Err(Error::ZeroLengthAudio) => {}
            other => panic!("expected zero-length error, got {other:?}"),
        }
    }

    #[test]
    fn load_missing_file_errors() {
        assert!(matches!(
            load_waveform("/definitely/not/here.wav", 24_000),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn load_averages_stereo_to_mono() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        // L = 0.5, R = -0.5 -> mono 0.0
        let interleaved: Vec<f32> = (0..2000).flat_map(|_| [0.5f32, -0.5f32]).collect();
        write_test_wav(&p, &interleaved, 24_000, 2);
        let wav = load_waveform(&p, 24_000).unwrap();
        assert_eq!(wav.len(), 1000);
        assert!(wav.samples().iter().all(|s| s.abs() < 1e-4));
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let tone = sine_wave(440.0, 24_000, 4800, 0.5);
        let out = resample(&tone, 24_000).unwrap();
        assert_eq!(out.samples(), tone.samples());
    }

    #[test]
    fn resample_preserves_tone_frequency() {
        let tone = sine_wave(440.0, 24_000, 24_000, 0.5);
        let out = resample(&tone, 16_000).unwrap();
        let peak = dominant_frequency(&out);
        assert!(
            (peak - 440.0).abs() <= 1.0,
            "peak {peak} Hz drifted from 440 Hz"
        );
    }

    #[test]
    fn resample_length_law() {
        let tone = sine_wave(440.0, 24_000, 24_000, 0.5);
        let out = resample(&tone, 16_000).unwrap();
        assert!((out.len() as i64 - 16_000).abs() <= 1);
    }

    #[test]
    fn resample_round_trip_keeps_tone() {
        for freq in [220.0f32, 440.0, 1000.0, 3000.0] {
            let tone = sine_wave(freq, 24_000, 24_000, 0.5);
            let down = resample(&tone, 16_000).unwrap();
            let back = resample(&down, 24_000).unwrap();
            let peak = dominant_frequency(&back);
            assert!(
                (peak - freq as f64).abs() <= 1.0,
                "round trip moved {freq} Hz to {peak} Hz"
            );
        }
    }

    #[test]
    fn spectrogram_frame_law() {
        let tone = sine_wave(440.0, 24_000, 3200, 0.5);
        let spec = linear_spectrogram(&tone).unwrap();
        assert_eq!(spec.frames(), 3200 / 320 + 1);
        assert_eq!(spec.magnitudes.ncols(), 641);
    }

    #[test]
    fn spectrogram_zero_input_is_zero() {
        let wav = Waveform::new(vec![0.0; 2000], 24_000).unwrap();
        let spec = linear_spectrogram(&wav).unwrap();
        assert!(spec.magnitudes.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn spectrogram_peak_bin_matches_tone() {
        let tone = sine_wave(440.0, 24_000, 24_000, 0.5);
        let spec = linear_spectrogram(&tone).unwrap();
        let expected_bin = (440.0 / (24_000.0 / 1280.0)).round() as usize;
        assert_eq!(expected_bin, 23);
        for row in spec.magnitudes.rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, expected_bin);
        }
    }

    #[test]
    fn spectrogram_short_input_errors() {
        let wav = Waveform::new(vec![0.1; 1000], 24_000).unwrap();
        assert!(matches!(
            linear_spectrogram(&wav),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn mel_zero_input_hits_log_floor() {
        let wav = Waveform::new(vec![0.0; 3200], 24_000).unwrap();
        let mel = mel_spectrogram(&wav, 80).unwrap();
        let floor = MEL_LOG_FLOOR.ln();
        assert!(mel.log_mel.iter().all(|&v| (v - floor).abs() < 1e-6));
    }

    #[test]
    fn mel_frames_match_linear() {
        let tone = sine_wave(440.0, 24_000, 7777, 0.5);
        let spec = linear_spectrogram(&tone).unwrap();
        let mel = mel_spectrogram(&tone, 80).unwrap();
        assert_eq!(mel.frames(), spec.frames());
        assert_eq!(mel.log_mel.ncols(), 80);
    }

    #[test]
    fn mel_white_noise_is_finite() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let samples: Vec<f32> = (0..2560).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wav = Waveform::new(samples, 24_000).unwrap();
            let mel = mel_spectrogram(&wav, 80).unwrap();
            assert!(mel.log_mel.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn frame_count_law_random_lengths() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(1280..30_000usize);
            let tone = sine_wave(300.0, 24_000, n, 0.4);
            let spec = linear_spectrogram(&tone).unwrap();
            assert_eq!(spec.frames(), n / 320 + 1, "frame law failed at n={n}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.wav");
        let tone = sine_wave(440.0, 24_000, 4800, 0.5);
        save_waveform(&p, &tone).unwrap();
        let back = load_waveform(&p, 24_000).unwrap();
        assert_eq!(back.len(), tone.len());
        let max_err = back
            .samples()
            .iter()
            .zip(tone.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1.0 / 32000.0, "16-bit quantization bound");
    }
}
