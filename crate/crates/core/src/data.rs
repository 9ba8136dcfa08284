//! Dataset manifests, known/unknown evaluation splits, and imbalance-aware
//! weighted sampling.
//!
//! Manifest format: UTF-8, tab-separated, one record per line, `#` comments.
//! Columns: `audio_path  speaker_id  language  content_type  gender
//! dataset_name  split`. A language of `-` normalizes to `unknown`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ContentType {
    Speech,
    Singing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Gender {
    F,
    M,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

/// One audio file's metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub audio_path: String,
    pub speaker_id: String,
    pub language: String,
    pub content_type: ContentType,
    pub gender: Gender,
    pub dataset: String,
    pub split: Split,
}

impl ManifestRecord {
    fn to_line(&self) -> String {
        let ct = match self.content_type {
            ContentType::Speech => "speech",
            ContentType::Singing => "singing",
        };
        let g = match self.gender {
            Gender::F => "F",
            Gender::M => "M",
            Gender::Unknown => "unknown",
        };
        let s = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.audio_path, self.speaker_id, self.language, ct, g, self.dataset, s
        )
    }
}

fn parse_line(path: &Path, line_no: usize, line: &str) -> Result<ManifestRecord> {
    let err = |msg: String| Error::ParseLine {
        path: path.to_path_buf(),
        line: line_no,
        msg,
    };
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 7 {
        return Err(err(format!("expected 7 tab-separated columns, got {}", cols.len())));
    }
    for (i, c) in cols.iter().enumerate() {
        if c.trim().is_empty() {
            return Err(err(format!("column {} is empty", i + 1)));
        }
    }
    let content_type = match cols[3] {
        "speech" => ContentType::Speech,
        "singing" => ContentType::Singing,
        other => return Err(err(format!("unknown content_type {other:?}"))),
    };
    let gender = match cols[4] {
        "F" | "f" => Gender::F,
        "M" | "m" => Gender::M,
        "unknown" | "-" => Gender::Unknown,
        other => return Err(err(format!("unknown gender {other:?}"))),
    };
    let split = match cols[6] {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(err(format!("unknown split {other:?}"))),
    };
    let language = if cols[2] == "-" {
        "unknown".to_string()
    } else {
        cols[2].to_string()
    };
    Ok(ManifestRecord {
        audio_path: cols[0].to_string(),
        speaker_id: cols[1].to_string(),
        language,
        content_type,
        gender,
        dataset: cols[5].to_string(),
        split,
    })
}

/// Load and validate a manifest; duplicate audio paths are rejected.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim_end();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec = parse_line(path, idx + 1, trimmed)?;
        if !seen.insert(rec.audio_path.clone()) {
            return Err(Error::DuplicatePath(rec.audio_path));
        }
        records.push(rec);
    }
    Ok(records)
}

/// Write records in the manifest format (used to persist split outputs).
pub fn save_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// The three evaluation sets. Known-eval clips stay in the training set;
/// unknown-eval speakers are removed from training entirely.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub known_eval: Vec<ManifestRecord>,
    pub unknown_eval: Vec<ManifestRecord>,
    pub train: Vec<ManifestRecord>,
}

/// Split records into known-eval / unknown-eval / train sets:
///
/// - every `test`-split record goes to unknown-eval;
/// - datasets with no test split contribute one female and one male speaker
///   (lexicographically smallest id per gender), moved out of training;
/// - each remaining training speaker contributes up to 10 clips (1 when the
///   speaker has fewer than 10) to known-eval, chosen by sorted path.
pub fn split_eval_sets(records: &[ManifestRecord]) -> Result<EvalSplit> {
    if records.is_empty() {
        return Err(Error::EmptyInput("manifest records"));
    }
    let mut unknown_eval: Vec<ManifestRecord> = records
        .iter()
        .filter(|r| r.split == Split::Test)
        .cloned()
        .collect();

    let datasets: BTreeSet<&str> = records.iter().map(|r| r.dataset.as_str()).collect();
    let mut moved_speakers: BTreeSet<String> = BTreeSet::new();
    for ds in datasets {
        let has_test = records
            .iter()
            .any(|r| r.dataset == ds && r.split == Split::Test);
        if has_test {
            continue;
        }
        for gender in [Gender::F, Gender::M] {
            let pick = records
                .iter()
                .filter(|r| r.dataset == ds && r.gender == gender)
                .map(|r| r.speaker_id.as_str())
                .min();
            if let Some(speaker) = pick {
                moved_speakers.insert(speaker.to_string());
            }
        }
    }
    for r in records {
        if r.split == Split::Train && moved_speakers.contains(&r.speaker_id) {
            unknown_eval.push(r.clone());
        }
    }

    let train: Vec<ManifestRecord> = records
        .iter()
        .filter(|r| r.split == Split::Train && !moved_speakers.contains(&r.speaker_id))
        .cloned()
        .collect();

    let mut per_speaker: BTreeMap<&str, Vec<&ManifestRecord>> = BTreeMap::new();
    for r in &train {
        per_speaker.entry(r.speaker_id.as_str()).or_default().push(r);
    }
    let mut known_eval = Vec::new();
    for (_, mut clips) in per_speaker {
        clips.sort_by(|a, b| a.audio_path.cmp(&b.audio_path));
        let take = if clips.len() >= 10 { 10 } else { 1 };
        known_eval.extend(clips.into_iter().take(take).cloned());
    }
    Ok(EvalSplit {
        known_eval,
        unknown_eval,
        train,
    })
}

/// Grouping key for inverse-frequency weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupKey {
    /// Joint (language, speaker) group: balances both at once.
    #[default]
    LanguageSpeaker,
    Language,
    Speaker,
}

impl GroupKey {
    fn of(self, r: &ManifestRecord) -> String {
        match self {
            GroupKey::LanguageSpeaker => format!("{}\u{1f}{}", r.language, r.speaker_id),
            GroupKey::Language => r.language.clone(),
            GroupKey::Speaker => r.speaker_id.clone(),
        }
    }
}

/// Per-record sampling weights, strictly positive.
#[derive(Debug, Clone)]
pub struct SampleWeights {
    pub weights: Vec<f64>,
}

/// weight(record) = 1 / |group(record)|, so every group carries equal total
/// probability mass under sampling with replacement.
pub fn compute_weights(records: &[ManifestRecord], key: GroupKey) -> Result<SampleWeights> {
    if records.is_empty() {
        return Err(Error::EmptyInput("records for weighting"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(key.of(r)).or_insert(0) += 1;
    }
    let weights = records
        .iter()
        .map(|r| 1.0 / counts[&key.of(r)] as f64)
        .collect();
    Ok(SampleWeights { weights })
}

/// `n` i.i.d. index draws with replacement, P(i) proportional to weight i.
pub fn weighted_sample(
    weights: &SampleWeights,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if weights.weights.is_empty() {
        return Err(Error::EmptyInput("sample weights"));
    }
    let dist = WeightedIndex::new(&weights.weights)
        .map_err(|e| Error::InvalidInput(format!("bad weights: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Cached, frame-aligned features of one utterance, all on the 24 kHz
/// spectrogram grid (`frames = floor(n/320) + 1`).
#[derive(Debug, Clone)]
pub struct UtteranceFeatures {
    pub utterance_id: String,
    pub spec: Array2<f32>,
    pub wav24: Vec<f32>,
    pub content: Array2<f32>,
    pub pitch_bins: Vec<u16>,
    pub speaker: Vec<f32>,
    pub lang_id: usize,
}

impl UtteranceFeatures {
    pub fn frames(&self) -> usize {
        self.spec.nrows()
    }
}

/// One fixed-length training segment.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub spec: Array2<f32>,
    pub wav: Vec<f32>,
    pub content: Array2<f32>,
    pub pitch_bins: Vec<u16>,
    pub speaker: Vec<f32>,
    pub lang_id: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub items: Vec<TrainingExample>,
    pub segment_frames: usize,
}

/// Crop each utterance to a random `segment_frames`-frame window with the
/// matching `segment_frames * 320`-sample waveform slice. Utterances shorter
/// than one segment are skipped with a warning.
pub fn make_batch(
    utterances: &[&UtteranceFeatures],
    segment_frames: usize,
    rng: &mut impl Rng,
) -> Result<TrainingBatch> {
    if segment_frames == 0 {
        return Err(Error::EmptyInput("segment_frames"));
    }
    let mut items = Vec::new();
    for utt in utterances {
        let frames = utt.frames();
        // The last frame has no full hop of audio behind it, so a segment
        // must end at most at frame `frames - 1`.
        if frames < segment_frames + 1 || utt.wav24.len() < segment_frames * 320 {
            log::warn!(
                "utterance {} too short for a {}-frame segment; skipped",
                utt.utterance_id,
                segment_frames
            );
            continue;
        }
        let max_start = frames - 1 - segment_frames;
        let start = if max_start == 0 {
            0
        } else {
            rng.random_range(0..=max_start)
        };
        let spec = utt
            .spec
            .slice(ndarray::s![start..start + segment_frames, ..])
            .to_owned();
        let content = utt
            .content
            .slice(ndarray::s![start..start + segment_frames, ..])
            .to_owned();
        let wav = utt.wav24[start * 320..(start + segment_frames) * 320].to_vec();
        let pitch_bins = utt.pitch_bins[start..start + segment_frames].to_vec();
        items.push(TrainingExample {
            spec,
            wav,
            content,
            pitch_bins,
            speaker: utt.speaker.clone(),
            lang_id: utt.lang_id,
        });
    }
    if items.is_empty() {
        return Err(Error::InvalidInput(
            "all records too short for the requested segment".into(),
        ));
    }
    Ok(TrainingBatch {
        items,
        segment_frames,
    })
}

/// Sorted distinct language codes of a record set: the language registry.
pub fn language_registry(records: &[ManifestRecord]) -> Vec<String> {
    let set: BTreeSet<&str> = records.iter().map(|r| r.language.as_str()).collect();
    set.into_iter().map(str::to_string).collect()
}
