//! Sentence-pair pre-filtering and detection-accuracy measurement.

use std::fs;
use std::path::Path;

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::simnoise::{NoiseMask, Scorer};

/// A corpus with one filter score per pair.
#[derive(Clone, Debug)]
pub struct ScoredCorpus {
    pub corpus: ParallelCorpus,
    pub scores: Vec<f64>,
    pub scorer: String,
}

impl ScoredCorpus {
    pub fn new(corpus: ParallelCorpus, scores: Vec<f64>, scorer: impl Into<String>) -> Result<Self> {
        if corpus.len() != scores.len() {
            return Err(Error::LengthMismatch {
                left: corpus.len(),
                right: scores.len(),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("filter scores must be finite".into()));
        }
        Ok(Self {
            corpus,
            scores,
            scorer: scorer.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub fn score_corpus(corpus: &ParallelCorpus, scorer: &Scorer) -> Result<ScoredCorpus> {
    let scores = corpus
        .pairs()
        .iter()
        .enumerate()
        .map(|(index, p)| {
            scorer.score(&p.source, &p.target).map_err(|e| Error::ScorePair {
                index,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ScoredCorpus::new(corpus.clone(), scores, scorer.kind().as_str())
}

/// Indices sorted by ascending score, ties by original index.
fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Which pairs a true-ratio threshold flags as noisy: the `floor(r * N)`
/// lowest-scoring pairs, where `r` is the noisy fraction.
pub fn predict_noisy(scores: &[f64], noisy_fraction: f64) -> Vec<bool> {
    let k = (noisy_fraction * scores.len() as f64).floor() as usize;
    let mut flagged = vec![false; scores.len()];
    for &i in ascending_order(scores).iter().take(k) {
        flagged[i] = true;
    }
    flagged
}

/// Agreement between true-ratio threshold predictions and the mask.
pub fn detection_accuracy(scored: &ScoredCorpus, mask: &NoiseMask) -> Result<f64> {
    if mask.len() != scored.len() {
        return Err(Error::LengthMismatch {
            left: scored.len(),
            right: mask.len(),
        });
    }
    let n = mask.len();
    let noisy = mask.noisy_count();
    if noisy == 0 || noisy == n {
        return Err(Error::InvalidArgument(
            "detection accuracy needs both clean and noisy pairs".into(),
        ));
    }
    let predicted = predict_noisy(&scored.scores, noisy as f64 / n as f64);
    let correct = predicted
        .iter()
        .zip(mask.labels())
        .filter(|(p, l)| **p == l.is_noisy())
        .count();
    Ok(correct as f64 / n as f64)
}

/// Drops the `round(f * N)` lowest-scoring pairs, keeping survivor order.
pub fn prefilter_corpus(scored: &ScoredCorpus, remove_fraction: f64) -> Result<ParallelCorpus> {
    if !(0.0..1.0).contains(&remove_fraction) {
        return Err(Error::InvalidArgument(format!(
            "remove fraction {remove_fraction} outside [0, 1)"
        )));
    }
    let n = scored.len();
    let k = (remove_fraction * n as f64).round() as usize;
    let mut removed = vec![false; n];
    for &i in ascending_order(&scored.scores).iter().take(k) {
        removed[i] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
    Ok(scored.corpus.select(&keep))
}

/// One row of `filter_eval.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterEvalRow {
    pub scorer: String,
    pub noise_type: String,
    pub ratio: f64,
    pub accuracy: f64,
}

pub fn write_filter_eval_csv(rows: &[FilterEvalRow], path: &Path) -> Result<()> {
    let mut out = String::from("scorer,noise_type,ratio,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.scorer, r.noise_type, r.ratio, r.accuracy));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Provenance, Sentence, SentencePair, TokenScheme};
    use rand::Rng;

    fn dummy_corpus(n: usize) -> ParallelCorpus {
        let pairs = (0..n)
            .map(|i| {
                SentencePair::new(
                    Sentence::new(&format!("s{i}"), TokenScheme::Whitespace),
                    Sentence::new(&format!("t{i}"), TokenScheme::Whitespace),
                )
            })
            .collect();
        ParallelCorpus::new(pairs, None).unwrap()
    }

    fn mask_from(noisy: &[bool]) -> NoiseMask {
        let labels = noisy
            .iter()
            .map(|&b| if b { Provenance::MisScored } else { Provenance::Clean })
            .collect();
        NoiseMask::new(labels, vec![None; noisy.len()]).unwrap()
    }

    fn scored(scores: Vec<f64>) -> ScoredCorpus {
        ScoredCorpus::new(dummy_corpus(scores.len()), scores, "test").unwrap()
    }

    #[test]
    fn score_corpus_is_pointwise() {
        let c = dummy_corpus(1);
        let s = score_corpus(&c, &Scorer::BagOfWords(None)).unwrap();
        assert_eq!(s.len(), 1);

        let mut emb = crate::simnoise::EmbeddingTable::new(2);
        for (k, v) in [("s0", [1.0, 2.0]), ("t0", [1.0, 2.0]), ("s1", [0.0, 1.0]), ("t1", [1.0, 0.0])] {
            emb.insert(k, v.to_vec()).unwrap();
        }
        let scorer = Scorer::Embedding(emb);
        let c = dummy_corpus(2);
        let s = score_corpus(&c, &scorer).unwrap();
        assert!((s.scores[0] - 1.0).abs() < 1e-12);
        let rev = score_corpus(&c.select(&[1, 0]), &scorer).unwrap();
        assert_eq!(rev.scores, vec![s.scores[1], s.scores[0]]);

        let missing = score_corpus(&dummy_corpus(3), &scorer);
        assert!(matches!(missing, Err(Error::ScorePair { index: 2, .. })));
    }

    #[test]
    fn perfect_and_inverted_separation() {
        let noisy = [false, true, false, true, true, false];
        let good: Vec<f64> = noisy.iter().map(|&b| if b { 0.1 } else { 0.9 }).collect();
        assert_eq!(detection_accuracy(&scored(good.clone()), &mask_from(&noisy)).unwrap(), 1.0);
        let bad: Vec<f64> = good.iter().map(|s| 1.0 - s).collect();
        assert_eq!(detection_accuracy(&scored(bad), &mask_from(&noisy)).unwrap(), 0.0);
    }

    #[test]
    fn random_scores_are_chance() {
        // Monte-Carlo oracle: independent uniform scores carry no signal.
        let mut rng = crate::rng::rng_from(17);
        let n = 2000;
        let noisy: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let acc = detection_accuracy(&scored(scores), &mask_from(&noisy)).unwrap();
        assert!((acc - 0.5).abs() <= 0.03, "{acc}");
    }

    #[test]
    fn one_class_mask_is_an_error() {
        let s = scored(vec![0.1, 0.2]);
        assert!(detection_accuracy(&s, &mask_from(&[false, false])).is_err());
        assert!(detection_accuracy(&s, &mask_from(&[true, true])).is_err());
    }

    #[test]
    fn constant_scores_follow_index_tie_rule() {
        // With all scores equal the first floor(rN) indices are flagged.
        let noisy = [false, false, true, true, false, true, false, false];
        let acc = detection_accuracy(&scored(vec![0.5; 8]), &mask_from(&noisy)).unwrap();
        let flagged = predict_noisy(&[0.5; 8], 3.0 / 8.0);
        assert_eq!(flagged, vec![true, true, true, false, false, false, false, false]);
        let clean_flagged = (0..3).filter(|&i| !noisy[i]).count();
        assert_eq!(acc, 1.0 - 2.0 * clean_flagged as f64 / 8.0);
    }

    #[test]
    fn prefilter_examples() {
        let s = scored((0..10).map(|i| ((i * 7) % 10) as f64).collect());
        assert_eq!(prefilter_corpus(&s, 0.0).unwrap(), s.corpus);
        let kept = prefilter_corpus(&s, 0.2).unwrap();
        assert_eq!(kept.len(), 8);
        let kept_raw: Vec<&str> = kept.sources().map(Sentence::raw).collect();
        let removed: Vec<usize> = (0..10)
            .filter(|i| !kept_raw.contains(&format!("s{i}").as_str()))
            .collect();
        let min_kept = (0..10)
            .filter(|i| !removed.contains(i))
            .map(|i| s.scores[i])
            .fold(f64::INFINITY, f64::min);
        let max_removed = removed.iter().map(|&i| s.scores[i]).fold(f64::NEG_INFINITY, f64::max);
        assert!(min_kept >= max_removed);
        // Survivors keep their original order.
        let positions: Vec<usize> = kept_raw
            .iter()
            .map(|r| r[1..].parse::<usize>().unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(prefilter_corpus(&s, 1.0).is_err());
    }

    #[test]
    fn csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("filter_eval.csv");
        write_filter_eval_csv(
            &[FilterEvalRow {
                scorer: "embedding-cosine".into(),
                noise_type: "mis-random".into(),
                ratio: 0.5,
                accuracy: 0.75,
            }],
            &p,
        )
        .unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap(),
            "scorer,noise_type,ratio,accuracy\nembedding-cosine,mis-random,0.5,0.75\n"
        );
    }
}
