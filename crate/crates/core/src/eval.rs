//! Objective evaluation: DTW alignment, F0 Pearson correlation, word/char
//! error rates, percentile-bootstrap confidence intervals and significance
//! flags against a baseline.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::pitch::F0Contour;
use crate::speaker::{average_embedding, cosine_similarity, SpeakerEmbedding};

/// Monotone alignment between two sequences: starts at (0,0), ends at
/// (len_a-1, len_b-1), steps are (1,0), (0,1) or (1,1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DtwPath {
    pub pairs: Vec<(usize, usize)>,
}

/// Classic DTW under absolute-difference cost. Ties during backtracking
/// prefer the diagonal step, then (1,0), then (0,1).
pub fn dtw_align(a: &[f64], b: &[f64]) -> Result<(DtwPath, f64)> {
    dtw_align_with(a, b, |x, y| (x - y).abs())
}

pub fn dtw_align_with(
    a: &[f64],
    b: &[f64],
    dist: impl Fn(f64, f64) -> f64,
) -> Result<(DtwPath, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("dtw sequence"));
    }
    let (na, nb) = (a.len(), b.len());
    let mut cost = vec![f64::INFINITY; na * nb];
    let at = |i: usize, j: usize| i * nb + j;
    for i in 0..na {
        for j in 0..nb {
            let d = dist(a[i], b[j]);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut m = f64::INFINITY;
                if i > 0 && j > 0 {
                    m = m.min(cost[at(i - 1, j - 1)]);
                }
                if i > 0 {
                    m = m.min(cost[at(i - 1, j)]);
                }
                if j > 0 {
                    m = m.min(cost[at(i, j - 1)]);
                }
                m
            };
            cost[at(i, j)] = d + best;
        }
    }
    // Backtrack with the fixed tie-break order.
    let mut pairs = vec![(na - 1, nb - 1)];
    let (mut i, mut j) = (na - 1, nb - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 {
            cost[at(i - 1, j - 1)]
        } else {
            f64::INFINITY
        };
        let up = if i > 0 { cost[at(i - 1, j)] } else { f64::INFINITY };
        let left = if j > 0 { cost[at(i, j - 1)] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok((DtwPath { pairs }, cost[at(na - 1, nb - 1)]))
}

/// Pearson correlation coefficient; errors on constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "pearson sequences",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("pearson needs at least 2 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxy += (xi - mx) * (yi - my);
        sxx += (xi - mx) * (xi - mx);
        syy += (yi - my) * (yi - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Options for [`f0ppc_with`]. Defaults: log-frequency, mean-centered before
/// alignment (which makes the metric invariant to transposition).
#[derive(Debug, Clone, Copy)]
pub struct F0ppcOptions {
    pub log_scale: bool,
    pub center: bool,
}

impl Default for F0ppcOptions {
    fn default() -> Self {
        Self {
            log_scale: true,
            center: true,
        }
    }
}

/// F0 Pearson correlation after DTW: voiced frames of each contour are taken
/// to (centered) log-frequency, DTW-aligned, and correlated over the aligned
/// pairs.
pub fn f0ppc(reference: &F0Contour, generated: &F0Contour) -> Result<f64> {
    f0ppc_with(reference, generated, F0ppcOptions::default())
}

pub fn f0ppc_with(
    reference: &F0Contour,
    generated: &F0Contour,
    opts: F0ppcOptions,
) -> Result<f64> {
    let prep = |c: &F0Contour| -> Vec<f64> {
        let mut vs: Vec<f64> = c
            .f0_hz
            .iter()
            .zip(&c.voiced)
            .filter(|(_, &v)| v)
            .map(|(&f, _)| {
                if opts.log_scale {
                    (f as f64).ln()
                } else {
                    f as f64
                }
            })
            .collect();
        if opts.center && !vs.is_empty() {
            let m = vs.iter().sum::<f64>() / vs.len() as f64;
            for v in &mut vs {
                *v -= m;
            }
        }
        vs
    };
    let r = prep(reference);
    let g = prep(generated);
    if r.len() < 2 || g.len() < 2 {
        return Err(Error::NotEnoughVoiced);
    }
    let (path, _) = dtw_align(&r, &g)?;
    let xs: Vec<f64> = path.pairs.iter().map(|&(i, _)| r[i]).collect();
    let ys: Vec<f64> = path.pairs.iter().map(|&(_, j)| g[j]).collect();
    pearson(&xs, &ys)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let (m, n) = (reference.len(), hypothesis.len());
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for i in 1..=m {
        cur[0] = i;
        for j in 1..=n {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Edit distance divided by reference length; the reference must be
/// non-empty.
pub fn edit_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference tokens"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Word error rate: whitespace tokenization.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    edit_rate(&r, &h)
}

/// Character error rate: runs of whitespace collapse to a single space
/// before the character-level comparison.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let collapse = |s: &str| -> Vec<char> {
        s.split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .chars()
            .collect()
    };
    let r = collapse(reference);
    let h = collapse(hypothesis);
    edit_rate(&r, &h)
}

/// Percentile bootstrap: resample with replacement `n_boot` times and take
/// the empirical `(100-level)/2` and `(100+level)/2` percentiles of the
/// statistic.
pub fn bootstrap_ci(
    values: &[f64],
    statistic: impl Fn(&[f64]) -> f64,
    n_boot: usize,
    level: f64,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("bootstrap values"));
    }
    let n = values.len();
    let mut stats = Vec::with_capacity(n_boot);
    let mut sample = vec![0.0f64; n];
    for _ in 0..n_boot {
        for s in sample.iter_mut() {
            *s = values[rng.random_range(0..n)];
        }
        stats.push(statistic(&sample));
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite statistic"));
    let alpha = (100.0 - level) / 2.0;
    Ok((
        percentile_sorted(&stats, alpha),
        percentile_sorted(&stats, 100.0 - alpha),
    ))
}

/// 95% percentile-bootstrap CI of the mean with 1000 resamples.
pub fn bootstrap_ci_mean(values: &[f64], rng: &mut impl Rng) -> Result<(f64, f64)> {
    bootstrap_ci(values, mean, 1000, 95.0, rng)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = h - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (zero for fewer than two values).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Bootstrap significance of the mean difference `variant - baseline`:
/// paired resampling when lengths match, independent resampling otherwise.
/// Returns true when the 95% CI of the difference excludes zero.
pub fn significance_vs_baseline(
    baseline_values: &[f64],
    variant_values: &[f64],
    rng: &mut impl Rng,
) -> Result<bool> {
    if baseline_values.is_empty() || variant_values.is_empty() {
        return Err(Error::EmptyInput("significance values"));
    }
    let (lo, hi) = if baseline_values.len() == variant_values.len() {
        let diffs: Vec<f64> = variant_values
            .iter()
            .zip(baseline_values)
            .map(|(v, b)| v - b)
            .collect();
        bootstrap_ci_mean(&diffs, rng)?
    } else {
        let (nb, nv) = (baseline_values.len(), variant_values.len());
        let mut stats = Vec::with_capacity(1000);
        for _ in 0..1000 {
            let mb = (0..nb)
                .map(|_| baseline_values[rng.random_range(0..nb)])
                .sum::<f64>()
                / nb as f64;
            let mv = (0..nv)
                .map(|_| variant_values[rng.random_range(0..nv)])
                .sum::<f64>()
                / nv as f64;
            stats.push(mv - mb);
        }
        stats.sort_by(|a, b| a.partial_cmp(b).expect("finite statistic"));
        (percentile_sorted(&stats, 2.5), percentile_sorted(&stats, 97.5))
    };
    Ok(lo > 0.0 || hi < 0.0)
}

/// Evaluation condition groups mirroring the known/unknown split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EvalGroup {
    KnownSinging,
    KnownSpeech,
    Unknown,
}

impl std::fmt::Display for EvalGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalGroup::KnownSinging => write!(f, "known-singing"),
            EvalGroup::KnownSpeech => write!(f, "known-speech"),
            EvalGroup::Unknown => write!(f, "unknown"),
        }
    }
}

/// One aggregated metric row: condition name, mean +- std, bootstrap CI and
/// (when a baseline was supplied) the significance flag.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub significant: Option<bool>,
}

/// A set of metric rows; serializes to a TSV block and a human table.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("name\tn\tmean\tstd\tci_low\tci_high\tsignificant\n");
        for r in &self.rows {
            let sig = match r.significant {
                Some(true) => "true",
                Some(false) => "false",
                None => "-",
            };
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                r.name, r.n, r.mean, r.std, r.ci_low, r.ci_high, sig
            ));
        }
        out
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<28} {:>5} {:>9} {:>9} {:>9} {:>9}  sig",
            "condition", "n", "mean", "std", "ci_low", "ci_high"
        )?;
        for r in &self.rows {
            let sig = match r.significant {
                Some(true) => "**",
                Some(false) => "",
                None => "-",
            };
            writeln!(
                f,
                "{:<28} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>9.4}  {}",
                r.name, r.n, r.mean, r.std, r.ci_low, r.ci_high, sig
            )?;
        }
        Ok(())
    }
}

/// Summarize one condition: mean, std, bootstrap CI, and significance
/// against `baseline` values when given.
pub fn summarize(
    name: &str,
    values: &[f64],
    baseline: Option<&[f64]>,
    rng: &mut impl Rng,
) -> Result<MetricRow> {
    if values.is_empty() {
        return Err(Error::EmptyInput("metric values"));
    }
    let (ci_low, ci_high) = bootstrap_ci_mean(values, rng)?;
    let significant = match baseline {
        Some(b) => Some(significance_vs_baseline(b, values, rng)?),
        None => None,
    };
    Ok(MetricRow {
        name: name.to_string(),
        n: values.len(),
        mean: mean(values),
        std: std_dev(values),
        ci_low,
        ci_high,
        significant,
    })
}

/// Per-speaker cosine similarity between the average embedding of real
/// utterances and the average embedding of generated utterances, aggregated
/// per evaluation group. Speakers present on only one side are skipped with
/// a warning.
pub fn speaker_similarity_report(
    dataset_embs: &BTreeMap<String, Vec<SpeakerEmbedding>>,
    generated_embs: &BTreeMap<String, Vec<SpeakerEmbedding>>,
    grouping: &BTreeMap<String, EvalGroup>,
    rng: &mut impl Rng,
) -> Result<MetricReport> {
    let mut per_group: BTreeMap<EvalGroup, Vec<f64>> = BTreeMap::new();
    for (speaker, real) in dataset_embs {
        let Some(generated) = generated_embs.get(speaker) else {
            log::warn!("speaker {speaker} has no generated audio; skipped");
            continue;
        };
        let Some(&group) = grouping.get(speaker) else {
            log::warn!("speaker {speaker} missing from grouping; skipped");
            continue;
        };
        if real.is_empty() || generated.is_empty() {
            log::warn!("speaker {speaker} has an empty embedding list; skipped");
            continue;
        }
        let avg_real = average_embedding(real)?;
        let avg_gen = average_embedding(generated)?;
        let sim = cosine_similarity(&avg_real, &avg_gen)?;
        per_group.entry(group).or_default().push(sim as f64);
    }
    for speaker in generated_embs.keys() {
        if !dataset_embs.contains_key(speaker) {
            log::warn!("speaker {speaker} has no reference audio; skipped");
        }
    }
    let mut report = MetricReport::default();
    for (group, values) in &per_group {
        report
            .rows
            .push(summarize(&group.to_string(), values, None, rng)?);
    }
    Ok(report)
}
