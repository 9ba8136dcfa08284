//! Fundamental-frequency extraction and pitch conditioning.
//!
//! The default tracker is a deterministic autocorrelation (YIN-style)
//! estimator; contours produced by an external neural extractor can be
//! loaded through [`load_external_f0`] behind the same type.

use std::path::Path;

use crate::audio::{Waveform, CONTENT_RATE, FRAME_HOP};
use crate::error::{Error, Result};

/// Default lower bound of the trackable range, Hz.
pub const DEFAULT_F_MIN: f32 = 50.0;
/// Default upper bound of the trackable range (soprano territory), Hz.
pub const DEFAULT_F_MAX: f32 = 1100.0;
/// Coarse pitch bins; bin 0 is reserved for unvoiced frames.
pub const PITCH_BINS: usize = 256;

const ANALYSIS_WINDOW: usize = 1024;
const DIP_THRESHOLD: f32 = 0.1;
const VOICING_THRESHOLD: f32 = 0.45;
const SILENCE_RMS: f32 = 1e-4;

/// Per-frame fundamental frequency at hop 320 on the 16 kHz grid.
/// `f0_hz[i] == 0.0` exactly when `voiced[i]` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Contour {
    pub f0_hz: Vec<f32>,
    pub voiced: Vec<bool>,
    pub frame_hop: usize,
}

impl F0Contour {
    pub fn frames(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn validate(&self, f_min: f32, f_max: f32) -> Result<()> {
        if self.f0_hz.len() != self.voiced.len() {
            return Err(Error::FrameCountMismatch {
                expected: self.f0_hz.len(),
                got: self.voiced.len(),
            });
        }
        for (i, (&f, &v)) in self.f0_hz.iter().zip(&self.voiced).enumerate() {
            if v != (f != 0.0) {
                return Err(Error::InvalidInput(format!(
                    "frame {i}: voiced flag {v} inconsistent with f0 {f}"
                )));
            }
            if v && !(f_min..=f_max).contains(&f) {
                return Err(Error::InvalidInput(format!(
                    "frame {i}: voiced f0 {f} outside [{f_min}, {f_max}]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-frame coarse pitch: log-spaced bin in [1, n_bins-1] for voiced frames,
/// 0 for unvoiced.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarsePitch {
    pub bins: Vec<u16>,
}

impl CoarsePitch {
    pub fn frames(&self) -> usize {
        self.bins.len()
    }
}

/// Track f0 of a 16 kHz waveform with the YIN cumulative-mean normalized
/// difference, one estimate per 320-sample hop, `floor(n/320) + 1` frames.
pub fn extract_f0(wav: &Waveform, f_min: f32, f_max: f32) -> Result<F0Contour> {
    if wav.sample_rate() != CONTENT_RATE {
        return Err(Error::InvalidSampleRate {
            got: wav.sample_rate(),
            expected: "16000",
        });
    }
    if !(0.0 < f_min && f_min < f_max && f_max < 8000.0) {
        return Err(Error::InvalidFrequencyRange { f_min, f_max });
    }
    let n = wav.len();
    if n < ANALYSIS_WINDOW {
        return Err(Error::TooShort {
            need: ANALYSIS_WINDOW,
            got: n,
        });
    }
    let sr = CONTENT_RATE as f32;
    let half = ANALYSIS_WINDOW / 2;
    let tau_min = (sr / f_max).ceil() as usize;
    let tau_max = ((sr / f_min).floor() as usize).min(half);
    let padded = crate::audio::reflect_pad(wav.samples(), half);

    let frames = n / FRAME_HOP + 1;
    let mut f0_hz = Vec::with_capacity(frames);
    let mut voiced = Vec::with_capacity(frames);
    let mut diff = vec![0.0f32; tau_max + 1];
    let mut cmndf = vec![0.0f32; tau_max + 1];

    for f in 0..frames {
        let frame = &padded[f * FRAME_HOP..f * FRAME_HOP + ANALYSIS_WINDOW];
        let rms = (frame.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()
            / ANALYSIS_WINDOW as f64)
            .sqrt() as f32;
        if rms < SILENCE_RMS {
            f0_hz.push(0.0);
            voiced.push(false);
            continue;
        }
        difference_function(frame, half, &mut diff);
        cumulative_mean_normalize(&diff, &mut cmndf);
        let tau = pick_lag(&cmndf, tau_min, tau_max);
        if cmndf[tau] < VOICING_THRESHOLD {
            let refined = parabolic_interp(&cmndf, tau, tau_min, tau_max);
            let f0 = (sr / refined).clamp(f_min, f_max);
            f0_hz.push(f0);
            voiced.push(true);
        } else {
            f0_hz.push(0.0);
            voiced.push(false);
        }
    }
    Ok(F0Contour {
        f0_hz,
        voiced,
        frame_hop: FRAME_HOP,
    })
}

/// d(tau) = sum_j (x[j] - x[j+tau])^2 over the first half of the frame.
fn difference_function(frame: &[f32], half: usize, out: &mut [f32]) {
    let tau_max = out.len() - 1;
    out[0] = 0.0;
    for tau in 1..=tau_max {
        let mut acc = 0.0f64;
        for j in 0..half {
            let d = (frame[j] - frame[j + tau]) as f64;
            acc += d * d;
        }
        out[tau] = acc as f32;
    }
}

fn cumulative_mean_normalize(diff: &[f32], out: &mut [f32]) {
    out[0] = 1.0;
    let mut running = 0.0f64;
    for tau in 1..diff.len() {
        running += diff[tau] as f64;
        out[tau] = if running > 0.0 {
            (diff[tau] as f64 * tau as f64 / running) as f32
        } else {
            1.0
        };
    }
}

/// First dip below the threshold (descended to its local minimum), falling
/// back to the global minimum of the search range.
fn pick_lag(cmndf: &[f32], tau_min: usize, tau_max: usize) -> usize {
    let mut tau = tau_min;
    while tau <= tau_max {
        if cmndf[tau] < DIP_THRESHOLD {
            while tau + 1 <= tau_max && cmndf[tau + 1] < cmndf[tau] {
                tau += 1;
            }
            return tau;
        }
        tau += 1;
    }
    (tau_min..=tau_max)
        .min_by(|&a, &b| cmndf[a].partial_cmp(&cmndf[b]).expect("finite cmndf"))
        .unwrap_or(tau_min)
}

fn parabolic_interp(cmndf: &[f32], tau: usize, tau_min: usize, tau_max: usize) -> f32 {
    if tau <= tau_min || tau >= tau_max {
        return tau as f32;
    }
    let (a, b, c) = (
        cmndf[tau - 1] as f64,
        cmndf[tau] as f64,
        cmndf[tau + 1] as f64,
    );
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-12 {
        return tau as f32;
    }
    let offset = (0.5 * (a - c) / denom).clamp(-1.0, 1.0);
    (tau as f64 + offset) as f32
}

/// Load a contour from the two-column text format (`f0_hz voiced01`, one
/// frame per line) and check it holds exactly `expected_frames` entries.
pub fn load_external_f0(path: impl AsRef<Path>, expected_frames: usize) -> Result<F0Contour> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut f0_hz = Vec::new();
    let mut voiced = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split_whitespace();
        let (f_str, v_str) = match (cols.next(), cols.next()) {
            (Some(f), Some(v)) => (f, v),
            _ => {
                return Err(Error::ParseLine {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: "expected two columns: f0_hz voiced01".into(),
                })
            }
        };
        let f0: f32 = f_str.parse().map_err(|_| Error::ParseLine {
            path: path.to_path_buf(),
            line: idx + 1,
            msg: format!("bad f0 value {f_str:?}"),
        })?;
        if f0 < 0.0 {
            return Err(Error::NegativeFrequency(f0));
        }
        let v = match v_str {
            "0" => false,
            "1" => true,
            _ => {
                return Err(Error::ParseLine {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: format!("bad voiced flag {v_str:?} (expected 0 or 1)"),
                })
            }
        };
        if v != (f0 != 0.0) {
            return Err(Error::ParseLine {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("voiced flag {} inconsistent with f0 {}", v_str, f0),
            });
        }
        f0_hz.push(f0);
        voiced.push(v);
    }
    if f0_hz.len() != expected_frames {
        return Err(Error::FrameCountMismatch {
            expected: expected_frames,
            got: f0_hz.len(),
        });
    }
    Ok(F0Contour {
        f0_hz,
        voiced,
        frame_hop: FRAME_HOP,
    })
}

/// Map voiced frames log-linearly onto `1..n_bins-1`; unvoiced frames get
/// bin 0. `f_min` maps to bin 1 and `f_max` to the top bin.
pub fn quantize_pitch(contour: &F0Contour, f_min: f32, f_max: f32, n_bins: usize) -> CoarsePitch {
    debug_assert!(n_bins >= 3 && f_min > 0.0 && f_max > f_min);
    let log_min = (f_min as f64).ln();
    let span = (f_max as f64).ln() - log_min;
    let top = (n_bins - 1) as u16;
    let bins = contour
        .f0_hz
        .iter()
        .zip(&contour.voiced)
        .map(|(&f0, &v)| {
            if !v {
                0
            } else {
                let rel = ((f0 as f64).ln() - log_min) / span;
                let bin = 1 + (rel * (n_bins - 2) as f64).round() as i64;
                bin.clamp(1, top as i64) as u16
            }
        })
        .collect();
    CoarsePitch { bins }
}

/// Shift voiced frames by `semitones` (voicing unchanged), clamping into
/// `[f_min, f_max]`.
pub fn transpose_f0(contour: &F0Contour, semitones: f32, f_min: f32, f_max: f32) -> F0Contour {
    let factor = 2f64.powf(semitones as f64 / 12.0);
    let f0_hz = contour
        .f0_hz
        .iter()
        .zip(&contour.voiced)
        .map(|(&f, &v)| {
            if v {
                ((f as f64 * factor) as f32).clamp(f_min, f_max)
            } else {
                0.0
            }
        })
        .collect();
    F0Contour {
        f0_hz,
        voiced: contour.voiced.clone(),
        frame_hop: contour.frame_hop,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::sine_wave;
    use proptest::prelude::*;

    fn median(mut xs: Vec<f32>) -> f32 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs[xs.len() / 2]
    }

    fn voiced_f0(c: &F0Contour) -> Vec<f32> {
        c.f0_hz
            .iter()
            .zip(&c.voiced)
            .filter(|(_, &v)| v)
            .map(|(&f, _)| f)
            .collect()
    }

    #[test]
    fn tone_220_tracked_within_one_percent() {
        let tone = sine_wave(220.0, 16_000, 16_000, 0.5);
        let c = extract_f0(&tone, DEFAULT_F_MIN, DEFAULT_F_MAX).unwrap();
        let voiced: Vec<f32> = voiced_f0(&c);
        assert!(
            voiced.len() as f64 >= 0.9 * c.frames() as f64,
            "only {}/{} frames voiced",
            voiced.len(),
            c.frames()
        );
        let med = median(voiced);
        assert!((med - 220.0).abs() / 220.0 < 0.01, "median {med}");
    }

    #[test]
    fn synthetic_tone_accuracy_suite() {
        for freq in [100.0f32, 220.0, 440.0, 600.0] {
            let tone = sine_wave(freq, 16_000, 16_000, 0.5);
            let c = extract_f0(&tone, DEFAULT_F_MIN, DEFAULT_F_MAX).unwrap();
            let med = median(voiced_f0(&c));
            assert!(
                (med - freq).abs() / freq < 0.01,
                "median {med} for {freq} Hz tone"
            );
        }
    }

    #[test]
    fn silence_is_fully_unvoiced() {
        let wav = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let c = extract_f0(&wav, DEFAULT_F_MIN, DEFAULT_F_MAX).unwrap();
        assert!(c.voiced.iter().all(|&v| !v));
        assert!(c.f0_hz.iter().all(|&f| f == 0.0));
        assert_eq!(c.frames(), 16_000 / 320 + 1);
    }

    #[test]
    fn piecewise_tone_halves_tracked() {
        let mut samples = sine_wave(220.0, 16_000, 8000, 0.5).into_samples();
        samples.extend(sine_wave(440.0, 16_000, 8000, 0.5).into_samples());
        let wav = Waveform::new(samples, 16_000).unwrap();
        let c = extract_f0(&wav, DEFAULT_F_MIN, DEFAULT_F_MAX).unwrap();
        let mid = c.frames() / 2;
        // Skip a few frames around the discontinuity.
        let first: Vec<f32> = c.f0_hz[..mid - 3]
            .iter()
            .zip(&c.voiced[..mid - 3])
            .filter(|(_, &v)| v)
            .map(|(&f, _)| f)
            .collect();
        let second: Vec<f32> = c.f0_hz[mid + 3..]
            .iter()
            .zip(&c.voiced[mid + 3..])
            .filter(|(_, &v)| v)
            .map(|(&f, _)| f)
            .collect();
        let (m1, m2) = (median(first), median(second));
        assert!((m1 - 220.0).abs() / 220.0 < 0.02, "first half {m1}");
        assert!((m2 - 440.0).abs() / 440.0 < 0.02, "second half {m2}");
    }

    #[test]
    fn contour_length_law() {
        for n in [1024usize, 3200, 5000, 16_000] {
            let tone = sine_wave(220.0, 16_000, n, 0.5);
            let c = extract_f0(&tone, DEFAULT_F_MIN, DEFAULT_F_MAX).unwrap();
            assert_eq!(c.frames(), n / 320 + 1);
        }
    }

    #[test]
    fn invalid_range_rejected() {
        let tone = sine_wave(220.0, 16_000, 4000, 0.5);
        assert!(matches!(
            extract_f0(&tone, 500.0, 100.0),
            Err(Error::InvalidFrequencyRange { .. })
        ));
        assert!(matches!(
            extract_f0(&tone, 0.0, 100.0),
            Err(Error::InvalidFrequencyRange { .. })
        ));
    }

    #[test]
    fn external_f0_exact_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f0.txt");
        let rows: String = (0..101)
            .map(|i| {
                if i % 2 == 0 {
                    "220.0 1\n".to_string()
                } else {
                    "0 0\n".to_string()
                }
            })
            .collect();
        std::fs::write(&p, rows).unwrap();
        let c = load_external_f0(&p, 101).unwrap();
        assert_eq!(c.frames(), 101);
        c.validate(DEFAULT_F_MIN, DEFAULT_F_MAX).unwrap();
    }

    #[test]
    fn external_f0_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f0.txt");
        std::fs::write(&p, "220 1\n".repeat(100)).unwrap();
        assert!(matches!(
            load_external_f0(&p, 101),
            Err(Error::FrameCountMismatch {
                expected: 101,
                got: 100
            })
        ));
    }

    #[test]
    fn external_f0_negative_frequency() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f0.txt");
        std::fs::write(&p, "220 1\n-5 1\n").unwrap();
        assert!(matches!(
            load_external_f0(&p, 2),
            Err(Error::NegativeFrequency(_))
        ));
    }

    #[test]
    fn quantize_endpoints() {
        let c = F0Contour {
            f0_hz: vec![DEFAULT_F_MIN, DEFAULT_F_MAX, 0.0],
            voiced: vec![true, true, false],
            frame_hop: FRAME_HOP,
        };
        let q = quantize_pitch(&c, DEFAULT_F_MIN, DEFAULT_F_MAX, PITCH_BINS);
        assert_eq!(q.bins, vec![1, 255, 0]);
    }

    #[test]
    fn quantize_log_midpoint() {
        let mid = (DEFAULT_F_MIN as f64 * DEFAULT_F_MAX as f64).sqrt() as f32;
        let c = F0Contour {
            f0_hz: vec![mid],
            voiced: vec![true],
            frame_hop: FRAME_HOP,
        };
        let q = quantize_pitch(&c, DEFAULT_F_MIN, DEFAULT_F_MAX, PITCH_BINS);
        assert!((q.bins[0] as i32 - 128).abs() <= 1, "bin {}", q.bins[0]);
    }

    #[test]
    fn transpose_identity_and_octave() {
        let c = F0Contour {
            f0_hz: vec![220.0, 0.0, 330.0],
            voiced: vec![true, false, true],
            frame_hop: FRAME_HOP,
        };
        let same = transpose_f0(&c, 0.0, DEFAULT_F_MIN, DEFAULT_F_MAX);
        assert_eq!(same, c);
        let up = transpose_f0(&c, 12.0, DEFAULT_F_MIN, DEFAULT_F_MAX);
        assert_eq!(up.f0_hz[0], 440.0);
        let round = transpose_f0(
            &transpose_f0(&c, -12.0, DEFAULT_F_MIN, DEFAULT_F_MAX),
            12.0,
            DEFAULT_F_MIN,
            DEFAULT_F_MAX,
        );
        for (a, b) in round.f0_hz.iter().zip(&c.f0_hz) {
            assert!((a - b).abs() <= 1e-9 * b.abs());
        }
    }

    proptest! {
        #[test]
        fn quantization_is_monotone(f0a in 50.0f32..1100.0, f0b in 50.0f32..1100.0) {
            let (lo, hi) = if f0a <= f0b { (f0a, f0b) } else { (f0b, f0a) };
            let c = F0Contour {
                f0_hz: vec![lo, hi],
                voiced: vec![true, true],
                frame_hop: FRAME_HOP,
            };
            let q = quantize_pitch(&c, DEFAULT_F_MIN, DEFAULT_F_MAX, PITCH_BINS);
            prop_assert!(q.bins[0] <= q.bins[1]);
        }

        #[test]
        fn voicing_consistency_after_transpose(st in -24.0f32..24.0) {
            let c = F0Contour {
                f0_hz: vec![100.0, 0.0, 900.0, 0.0],
                voiced: vec![true, false, true, false],
                frame_hop: FRAME_HOP,
            };
            let t = transpose_f0(&c, st, DEFAULT_F_MIN, DEFAULT_F_MAX);
            for (f, v) in t.f0_hz.iter().zip(&t.voiced) {
                prop_assert_eq!(*v, *f != 0.0);
            }
            t.validate(DEFAULT_F_MIN, DEFAULT_F_MAX).unwrap();
        }
    }
}
