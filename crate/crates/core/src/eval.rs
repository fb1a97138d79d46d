//! Corpus BLEU, token accuracy, paired bootstrap significance, per-subset
//! reports and histograms.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, Sentence};
use crate::error::{Error, Result};
use crate::rng::{derive_indexed, rng_from};
use crate::simnoise::NoiseMask;

const MAX_ORDER: usize = 4;

/// Per-sentence sufficient statistics for corpus BLEU.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct BleuStats {
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, other: &Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Add-one smoothing on orders two and up; zero unigram matches give 0.
    fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for n in 1..MAX_ORDER {
            log_sum += ((self.matches[n] + 1) as f64 / (self.totals[n] + 1) as f64).ln();
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * (log_sum / MAX_ORDER as f64).exp()
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn sentence_stats(hyp: &[String], reference: &[String]) -> BleuStats {
    let mut s = BleuStats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..BleuStats::default()
    };
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        s.matches[n - 1] = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
    }
    s
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

fn all_stats(hyps: &[Sentence], refs: &[Sentence]) -> Result<Vec<BleuStats>> {
    check_aligned(hyps.len(), refs.len())?;
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| sentence_stats(h.tokens(), r.tokens()))
        .collect())
}

fn sum_stats<'a>(it: impl Iterator<Item = &'a BleuStats>) -> BleuStats {
    let mut total = BleuStats::default();
    for s in it {
        total.add(s);
    }
    total
}

/// Corpus-level BLEU in `[0, 100]` over token sequences.
pub fn corpus_bleu(hyps: &[Sentence], refs: &[Sentence]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("no references".into()));
    }
    Ok(sum_stats(all_stats(hyps, refs)?.iter()).score())
}

/// Mean over sentences of position-wise matches divided by the longer of
/// the two lengths. Two empty sentences count as a full match.
pub fn token_accuracy(hyps: &[Sentence], refs: &[Sentence]) -> Result<f64> {
    check_aligned(hyps.len(), refs.len())?;
    if refs.is_empty() {
        return Err(Error::InvalidArgument("no references".into()));
    }
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let denom = h.len().max(r.len());
            if denom == 0 {
                return 1.0;
            }
            let hits = h
                .tokens()
                .iter()
                .zip(r.tokens())
                .filter(|(a, b)| a == b)
                .count();
            hits as f64 / denom as f64
        })
        .sum();
    Ok(total / refs.len() as f64)
}

/// One-sided paired bootstrap: the fraction of resamples in which system A
/// does not beat system B, ties counting one half. Small values favour A.
pub fn paired_bootstrap(
    sys_a: &[Sentence],
    sys_b: &[Sentence],
    refs: &[Sentence],
    n_resamples: usize,
    seed: u64,
) -> Result<f64> {
    if n_resamples < 100 {
        return Err(Error::InvalidArgument(format!(
            "need at least 100 resamples, got {n_resamples}"
        )));
    }
    check_aligned(sys_a.len(), sys_b.len())?;
    let a = all_stats(sys_a, refs)?;
    let b = all_stats(sys_b, refs)?;
    let n = refs.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no references".into()));
    }
    let mut worse = 0.0;
    for r in 0..n_resamples {
        let mut rng = rng_from(derive_indexed(seed, "bootstrap", r as u64));
        let mut sa = BleuStats::default();
        let mut sb = BleuStats::default();
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            sa.add(&a[i]);
            sb.add(&b[i]);
        }
        let (x, y) = (sa.score(), sb.score());
        if x < y {
            worse += 1.0;
        } else if x == y {
            worse += 0.5;
        }
    }
    Ok(worse / n_resamples as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bleu: f64,
    pub token_accuracy: f64,
    pub sentences: usize,
}

impl Metrics {
    pub fn compute(hyps: &[Sentence], refs: &[Sentence]) -> Result<Self> {
        Ok(Self {
            bleu: corpus_bleu(hyps, refs)?,
            token_accuracy: token_accuracy(hyps, refs)?,
            sentences: refs.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Metrics,
    /// Keyed by provenance label.
    pub subsets: BTreeMap<String, Metrics>,
}

/// References for subset evaluation: the corpus target for clean pairs and
/// the recorded true target for noisy ones.
pub fn true_references(corpus: &ParallelCorpus, mask: &NoiseMask) -> Result<Vec<Option<Sentence>>> {
    check_aligned(corpus.len(), mask.len())?;
    Ok(corpus
        .pairs()
        .iter()
        .zip(mask.labels().iter().zip(mask.true_targets()))
        .map(|(p, (label, truth))| {
            if label.is_noisy() {
                truth.clone()
            } else {
                Some(p.target.clone())
            }
        })
        .collect())
}

/// Metrics overall and per provenance label.
pub fn subset_eval(hyps: &[Sentence], refs: &[Option<Sentence>], mask: &NoiseMask) -> Result<EvalReport> {
    check_aligned(hyps.len(), refs.len())?;
    check_aligned(hyps.len(), mask.len())?;
    let refs: Vec<Sentence> = refs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.clone().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "pair {i} ({}) has no true reference",
                    mask.labels()[i]
                ))
            })
        })
        .collect::<Result<_>>()?;
    let overall = Metrics::compute(hyps, &refs)?;
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, l) in mask.labels().iter().enumerate() {
        groups.entry(l.to_string()).or_default().push(i);
    }
    let mut subsets = BTreeMap::new();
    for (label, idx) in groups {
        let h: Vec<Sentence> = idx.iter().map(|&i| hyps[i].clone()).collect();
        let r: Vec<Sentence> = idx.iter().map(|&i| refs[i].clone()).collect();
        subsets.insert(label, Metrics::compute(&h, &r)?);
    }
    Ok(EvalReport { overall, subsets })
}

/// Counts per uniform bin over `[lo, hi]`; out-of-range values go to the
/// edge bins.
pub fn histogram(values: &[f64], n_bins: usize, range: (f64, f64)) -> Result<Vec<usize>> {
    let (lo, hi) = range;
    if n_bins == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bad histogram layout: {n_bins} bins over [{lo}, {hi}]"
        )));
    }
    let mut counts = vec![0; n_bins];
    let width = (hi - lo) / n_bins as f64;
    for (position, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "histogram value",
                position,
            });
        }
        let bin = ((v - lo) / width).floor();
        let bin = if bin < 0.0 { 0 } else { (bin as usize).min(n_bins - 1) };
        counts[bin] += 1;
    }
    Ok(counts)
}

/// One histogram series for `histograms.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramSeries {
    pub metric: String,
    pub group: String,
    pub range: (f64, f64),
    pub counts: Vec<usize>,
}

pub fn write_histograms_csv(series: &[HistogramSeries], path: &Path) -> Result<()> {
    let mut out = String::from("metric,group,bin_lo,bin_hi,count\n");
    for s in series {
        let width = (s.range.1 - s.range.0) / s.counts.len() as f64;
        for (i, c) in s.counts.iter().enumerate() {
            let lo = s.range.0 + i as f64 * width;
            writeln!(out, "{},{},{},{},{}", s.metric, s.group, lo, lo + width, c)
                .expect("writing to a String");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
