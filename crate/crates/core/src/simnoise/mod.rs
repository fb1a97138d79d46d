//! Misalignment simulation.
//!
//! Similarity-controlled misalignment picks, for every source sentence, a
//! foreign target that shares surface features with the true translation
//! (length and word overlap) and then maximizes a semantic similarity score
//! among the first `k` such candidates. Random misalignment is a seeded
//! derangement of the targets. Either kind of noise can be injected into a
//! clean corpus at a given rate, producing a provenance mask.

mod scorer;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

pub use scorer::{
    cosine, load_dictionary, save_dictionary, score_sentence_pair, synthesize_embeddings,
    EmbeddingTable, ScoreTable, Scorer, ScorerKind, SynthEmbeddingSpec,
};

use crate::corpus::{ParallelCorpus, Provenance, Sentence, SentencePair, TokenScheme};
use crate::error::{Error, Result};
use crate::rng;

/// Jaccard coefficient of the two sentences' token-type sets.
pub fn word_overlap_ratio(a: &Sentence, b: &Sentence) -> f64 {
    let sa: HashSet<&str> = a.tokens().iter().map(String::as_str).collect();
    let sb: HashSet<&str> = b.tokens().iter().map(String::as_str).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseGenSpec {
    /// Maximum number of surface-level candidates passed to the scorer.
    pub k: usize,
    /// Candidates must satisfy `|len(t) - len(src)| < length_tolerance`.
    pub length_tolerance: usize,
    /// Candidates must satisfy `overlap(t, true target) > overlap_threshold`.
    pub overlap_threshold: f64,
    pub seed: u64,
}

impl Default for NoiseGenSpec {
    fn default() -> Self {
        Self {
            k: 50,
            length_tolerance: 3,
            overlap_threshold: 0.4,
            seed: 0,
        }
    }
}

impl NoiseGenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidSpec("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return Err(Error::InvalidSpec("overlap_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The surface-level predicate of the candidate filter.
    pub fn admits(&self, src: &Sentence, true_tgt: &Sentence, candidate: &Sentence) -> bool {
        candidate.len().abs_diff(src.len()) < self.length_tolerance
            && word_overlap_ratio(candidate, true_tgt) > self.overlap_threshold
    }
}

/// Outcome of the quality-control step for one source.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub pool_index: usize,
    pub score: f64,
    /// Pool indices that passed the surface filter, in scan order.
    pub candidates: Vec<usize>,
}

/// Token-type sets interned to sorted ids, for fast repeated overlap tests.
struct InternedSets {
    sets: Vec<Vec<u32>>,
    ids: HashMap<String, u32>,
}

impl InternedSets {
    fn new() -> Self {
        Self {
            sets: Vec::new(),
            ids: HashMap::new(),
        }
    }

    fn intern(&mut self, s: &Sentence) -> Vec<u32> {
        let mut set: Vec<u32> = s
            .tokens()
            .iter()
            .map(|t| {
                let next = self.ids.len() as u32;
                *self.ids.entry(t.clone()).or_insert(next)
            })
            .collect();
        set.sort_unstable();
        set.dedup();
        set
    }

    fn push(&mut self, s: &Sentence) {
        let set = self.intern(s);
        self.sets.push(set);
    }
}

fn jaccard_sorted(a: &[u32], b: &[u32]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

struct Pool<'a> {
    sentences: &'a [Sentence],
    interned: InternedSets,
    used: Vec<bool>,
}

impl<'a> Pool<'a> {
    fn new(sentences: &'a [Sentence]) -> Self {
        let mut interned = InternedSets::new();
        for s in sentences {
            interned.push(s);
        }
        Self {
            sentences,
            interned,
            used: vec![false; sentences.len()],
        }
    }

    /// Surface-level filter: first `k` unused pool entries (in pool order)
    /// satisfying the length and overlap predicates.
    fn candidates(
        &mut self,
        src: &Sentence,
        true_tgt: &Sentence,
        exclude: Option<usize>,
        spec: &NoiseGenSpec,
    ) -> Vec<usize> {
        let true_set = self.interned.intern(true_tgt);
        let mut out = Vec::new();
        for (j, cand) in self.sentences.iter().enumerate() {
            if out.len() >= spec.k {
                break;
            }
            if self.used[j] || Some(j) == exclude {
                continue;
            }
            if cand.len().abs_diff(src.len()) >= spec.length_tolerance {
                continue;
            }
            if cand.raw() == true_tgt.raw() {
                continue;
            }
            if jaccard_sorted(&self.interned.sets[j], &true_set) > spec.overlap_threshold {
                out.push(j);
            }
        }
        out
    }

    fn select(
        &mut self,
        src: &Sentence,
        true_tgt: &Sentence,
        exclude: Option<usize>,
        spec: &NoiseGenSpec,
        scorer: &Scorer,
    ) -> Result<Option<Selection>> {
        let candidates = self.candidates(src, true_tgt, exclude, spec);
        let mut best: Option<(usize, f64)> = None;
        for &j in &candidates {
            let s = scorer.score(src, &self.sentences[j])?;
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        Ok(best.map(|(pool_index, score)| Selection {
            pool_index,
            score,
            candidates,
        }))
    }
}

/// Picks a misaligned target for `src` from `pool`.
///
/// Returns `None` when no pool entry passes the surface filter. Entries equal
/// to `true_tgt` are never considered. Equal scores resolve to the lowest
/// pool index.
pub fn select_misaligned_target(
    src: &Sentence,
    true_tgt: &Sentence,
    pool: &[Sentence],
    spec: &NoiseGenSpec,
    scorer: &Scorer,
) -> Result<Option<Selection>> {
    spec.validate()?;
    Pool::new(pool).select(src, true_tgt, None, spec, scorer)
}

/// Misaligned version of a corpus plus bookkeeping.
#[derive(Clone, Debug)]
pub struct MisalignedCorpus {
    pub corpus: ParallelCorpus,
    /// Pool index of the target assigned to each source.
    pub assigned: Vec<usize>,
    /// Number of sources that fell back to a random foreign target.
    pub fallbacks: usize,
}

/// Similarity-controlled misalignment using the corpus's own targets as the
/// candidate pool.
pub fn generate_misaligned_corpus(
    corpus: &ParallelCorpus,
    spec: &NoiseGenSpec,
    scorer: &Scorer,
) -> Result<MisalignedCorpus> {
    let pool: Vec<Sentence> = corpus.targets().cloned().collect();
    generate_inner(corpus, &pool, true, spec, scorer)
}

/// Similarity-controlled misalignment drawing targets from a separate pool.
pub fn generate_misaligned_from_pool(
    corpus: &ParallelCorpus,
    pool: &[Sentence],
    spec: &NoiseGenSpec,
    scorer: &Scorer,
) -> Result<MisalignedCorpus> {
    generate_inner(corpus, pool, false, spec, scorer)
}

fn generate_inner(
    corpus: &ParallelCorpus,
    pool_sentences: &[Sentence],
    own_pool: bool,
    spec: &NoiseGenSpec,
    scorer: &Scorer,
) -> Result<MisalignedCorpus> {
    spec.validate()?;
    let n = corpus.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "misalignment needs a corpus of at least 2 pairs".into(),
        ));
    }
    if pool_sentences.len() < n {
        return Err(Error::InsufficientNoise {
            required: n,
            available: pool_sentences.len(),
        });
    }
    let mut pool = Pool::new(pool_sentences);
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut labels = vec![Provenance::MisScored; n];
    let mut pending = Vec::new();

    for (i, pair) in corpus.pairs().iter().enumerate() {
        let exclude = own_pool.then_some(i);
        match pool.select(&pair.source, &pair.target, exclude, spec, scorer)? {
            Some(sel) => {
                pool.used[sel.pool_index] = true;
                assigned[i] = Some(sel.pool_index);
            }
            None => pending.push(i),
        }
    }

    let fallbacks = pending.len();
    let mut rng = rng::stage_rng(spec.seed, "simnoise/fallback");
    for &i in &pending {
        let true_tgt = corpus.pairs()[i].target.raw();
        let eligible: Vec<usize> = (0..pool_sentences.len())
            .filter(|&j| !pool.used[j] && pool_sentences[j].raw() != true_tgt)
            .collect();
        let j = match eligible.choose(&mut rng) {
            Some(&j) => j,
            None => {
                // Only this source's own target is left: trade with an
                // already assigned pair, which then becomes random noise too.
                let donors: Vec<usize> = (0..n)
                    .filter(|&d| {
                        d != i
                            && assigned[d].is_some_and(|t| pool_sentences[t].raw() != true_tgt)
                    })
                    .collect();
                let &d = donors.choose(&mut rng).ok_or_else(|| {
                    Error::InvalidArgument("candidate pool exhausted during fallback".into())
                })?;
                let own = (0..pool_sentences.len())
                    .find(|&j| !pool.used[j])
                    .expect("an unused pool entry remains");
                let taken = assigned[d].replace(own).expect("donor is assigned");
                pool.used[own] = true;
                labels[d] = Provenance::MisRandom;
                assigned[i] = Some(taken);
                labels[i] = Provenance::MisRandom;
                continue;
            }
        };
        pool.used[j] = true;
        assigned[i] = Some(j);
        labels[i] = Provenance::MisRandom;
    }

    let assigned: Vec<usize> = assigned
        .into_iter()
        .map(|a| a.expect("every source is assigned"))
        .collect();
    let pairs = corpus
        .pairs()
        .iter()
        .zip(&assigned)
        .map(|(p, &j)| SentencePair::new(p.source.clone(), pool_sentences[j].clone()))
        .collect();
    Ok(MisalignedCorpus {
        corpus: ParallelCorpus::new(pairs, Some(labels))?,
        assigned,
        fallbacks,
    })
}

/// Uniform seeded derangement of `0..n` (n >= 2), by rejection.
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    assert!(n >= 2, "a derangement needs at least 2 elements");
    let mut rng = rng::stage_rng(seed, "simnoise/derangement");
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Random misalignment: targets permuted so that none stays with its source.
pub fn shuffle_misalign(corpus: &ParallelCorpus, seed: u64) -> Result<ParallelCorpus> {
    if corpus.len() < 2 {
        return Err(Error::InvalidArgument(
            "shuffling needs a corpus of at least 2 pairs".into(),
        ));
    }
    let perm = derangement(corpus.len(), seed);
    let pairs = corpus
        .pairs()
        .iter()
        .zip(&perm)
        .map(|(p, &j)| SentencePair::new(p.source.clone(), corpus.pairs()[j].target.clone()))
        .collect();
    ParallelCorpus::new(pairs, Some(vec![Provenance::MisRandom; corpus.len()]))
}

/// Per-pair provenance for a noised corpus, with the original clean target
/// wherever one is known.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoiseMask {
    labels: Vec<Provenance>,
    true_targets: Vec<Option<Sentence>>,
}

impl NoiseMask {
    pub fn new(labels: Vec<Provenance>, true_targets: Vec<Option<Sentence>>) -> Result<Self> {
        if labels.len() != true_targets.len() {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: true_targets.len(),
            });
        }
        Ok(Self {
            labels,
            true_targets,
        })
    }

    pub fn all_clean(corpus: &ParallelCorpus) -> Self {
        Self {
            labels: vec![Provenance::Clean; corpus.len()],
            true_targets: corpus.targets().cloned().map(Some).collect(),
        }
    }

    pub fn labels(&self) -> &[Provenance] {
        &self.labels
    }

    pub fn true_targets(&self) -> &[Option<Sentence>] {
        &self.true_targets
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn noisy_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_noisy()).count()
    }

    /// `index<TAB>provenance<TAB>true_target` (empty when unknown).
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (i, (l, t)) in self.labels.iter().zip(&self.true_targets).enumerate() {
            let t = t.as_ref().map_or("", Sentence::raw);
            writeln!(w, "{i}\t{l}\t{t}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, scheme: TokenScheme) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut labels = Vec::new();
        let mut targets = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let malformed = |message: String| Error::Malformed {
                path: path.to_owned(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(malformed(format!("expected 3 fields, found {}", fields.len())));
            }
            if fields[0].parse::<usize>().ok() != Some(i) {
                return Err(malformed(format!("expected index {i}")));
            }
            labels.push(fields[1].parse().map_err(|e: Error| malformed(e.to_string()))?);
            targets.push((!fields[2].is_empty()).then(|| Sentence::new(fields[2], scheme)));
        }
        Self::new(labels, targets)
    }
}

/// Replaces `round(rate * N)` uniformly chosen clean pairs by noise pairs.
///
/// When `noise` was derived from `clean` (same length, same sources) the
/// replacement for pair `i` is noise pair `i`; otherwise noise pairs are
/// consumed in order.
pub fn inject_noise(
    clean: &ParallelCorpus,
    noise: &ParallelCorpus,
    rate: f64,
    seed: u64,
) -> Result<(ParallelCorpus, NoiseMask)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("rate {rate} outside [0, 1]")));
    }
    let n = clean.len();
    let count = (rate * n as f64).round() as usize;
    let by_index = noise.len() == n
        && clean
            .sources()
            .zip(noise.sources())
            .all(|(a, b)| a.raw() == b.raw());
    if !by_index && noise.len() < count {
        return Err(Error::InsufficientNoise {
            required: count,
            available: noise.len(),
        });
    }
    let mut rng = rng::stage_rng(seed, "simnoise/inject");
    let mut chosen = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();

    let mut pairs: Vec<SentencePair> = clean.pairs().to_vec();
    let mut labels = vec![Provenance::Clean; n];
    let mut true_targets: Vec<Option<Sentence>> = clean.targets().cloned().map(Some).collect();
    for (slot, &i) in chosen.iter().enumerate() {
        let j = if by_index { i } else { slot };
        pairs[i] = noise.pairs()[j].clone();
        labels[i] = match noise.label(j) {
            Provenance::Clean => Provenance::Pool,
            other => other,
        };
        if !by_index {
            true_targets[i] = None;
        }
    }
    let corpus = ParallelCorpus::new(pairs, Some(labels.clone()))?;
    Ok((corpus, NoiseMask::new(labels, true_targets)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SynthTaskSpec, Transformation};

    fn ws(t: &str) -> Sentence {
        Sentence::new(t, TokenScheme::Whitespace)
    }

    fn corpus(pairs: &[(&str, &str)]) -> ParallelCorpus {
        ParallelCorpus::new(
            pairs.iter().map(|(s, t)| SentencePair::new(ws(s), ws(t))).collect(),
            None,
        )
        .unwrap()
    }

    fn table_scorer(entries: &[(&str, &str, f64)]) -> Scorer {
        // Each (src, tgt) pair gets its own key dimension so scores are exact.
        let mut srcs: Vec<Sentence> = Vec::new();
        let mut tgts: Vec<Sentence> = Vec::new();
        for (s, t, _) in entries {
            if !srcs.iter().any(|x| x.raw() == *s) {
                srcs.push(ws(s));
            }
            if !tgts.iter().any(|x| x.raw() == *t) {
                tgts.push(ws(t));
            }
        }
        let mut table = ScoreTable::new(&srcs, &tgts);
        for (s, t, v) in entries {
            let si = srcs.iter().position(|x| x.raw() == *s).unwrap() + 1;
            let ti = tgts.iter().position(|x| x.raw() == *t).unwrap() + 1;
            table.insert(si, ti, *v);
        }
        Scorer::External(table)
    }

    #[test]
    fn overlap_examples() {
        assert!((word_overlap_ratio(&ws("a b c"), &ws("b c d")) - 0.5).abs() < 1e-15);
        assert_eq!(word_overlap_ratio(&ws("a b"), &ws("b a a")), 1.0);
        assert_eq!(word_overlap_ratio(&ws("a b"), &ws("c d")), 0.0);
        assert_eq!(word_overlap_ratio(&ws(""), &ws("")), 0.0);
        let a = ws("x y z w");
        let b = ws("y q");
        assert_eq!(word_overlap_ratio(&a, &b), word_overlap_ratio(&b, &a));
    }

    #[test]
    fn interned_jaccard_matches_set_version() {
        let mut sets = InternedSets::new();
        let a = ws("a b c c d");
        let b = ws("c d e");
        let sa = sets.intern(&a);
        let sb = sets.intern(&b);
        assert_eq!(jaccard_sorted(&sa, &sb), word_overlap_ratio(&a, &b));
    }

    #[test]
    fn singleton_candidate_wins_regardless_of_score() {
        let src = ws("s1 s2 s3");
        let truth = ws("t1 t2 t3");
        let pool = vec![ws("t1 t2 t9"), ws("q q q q q q q q"), ws("z y x")];
        let scorer = table_scorer(&[
            ("s1 s2 s3", "t1 t2 t9", -0.9),
            ("s1 s2 s3", "q q q q q q q q", 1.0),
            ("s1 s2 s3", "z y x", 1.0),
        ]);
        let sel = select_misaligned_target(&src, &truth, &pool, &NoiseGenSpec::default(), &scorer)
            .unwrap()
            .unwrap();
        assert_eq!(sel.pool_index, 0);
        assert_eq!(sel.candidates, vec![0]);
    }

    #[test]
    fn highest_score_wins_and_ties_go_to_lowest_index() {
        let src = ws("s1 s2 s3");
        let truth = ws("t1 t2 t3");
        let pool = vec![ws("t1 t2 t8"), ws("t1 t2 t9"), ws("t1 t3 t9")];
        let scorer = table_scorer(&[
            ("s1 s2 s3", "t1 t2 t8", 0.7),
            ("s1 s2 s3", "t1 t2 t9", 0.9),
            ("s1 s2 s3", "t1 t3 t9", 0.9),
        ]);
        let sel = select_misaligned_target(&src, &truth, &pool, &NoiseGenSpec::default(), &scorer)
            .unwrap()
            .unwrap();
        assert_eq!(sel.pool_index, 1);
        assert_eq!(sel.score, 0.9);
    }

    #[test]
    fn length_filter_can_empty_the_candidate_list() {
        let src = ws("s1 s2");
        let truth = ws("t1 t2");
        let pool = vec![ws("t1 t2 t3 t4 t5"), ws("t1 t2 t2 t2 t2 t2")];
        let sel = select_misaligned_target(
            &src,
            &truth,
            &pool,
            &NoiseGenSpec::default(),
            &Scorer::BagOfWords(None),
        )
        .unwrap();
        assert!(sel.is_none());
    }

    #[test]
    fn first_k_candidates_only() {
        let src = ws("s1 s2 s3");
        let truth = ws("t1 t2 t3");
        let pool = vec![ws("t1 t2 t4"), ws("t1 t2 t5"), ws("t1 t2 t3 t6")];
        let spec = NoiseGenSpec {
            k: 2,
            ..NoiseGenSpec::default()
        };
        let scorer = table_scorer(&[
            ("s1 s2 s3", "t1 t2 t4", 0.1),
            ("s1 s2 s3", "t1 t2 t5", 0.2),
            ("s1 s2 s3", "t1 t2 t3 t6", 0.99),
        ]);
        let sel = select_misaligned_target(&src, &truth, &pool, &spec, &scorer)
            .unwrap()
            .unwrap();
        assert_eq!(sel.candidates, vec![0, 1]);
        assert_eq!(sel.pool_index, 1);
    }

    #[test]
    fn scorer_failure_names_sentence() {
        let src = ws("s1 s2 s3");
        let truth = ws("t1 t2 t3");
        let pool = vec![ws("t1 t2 t4")];
        let scorer = Scorer::Embedding(EmbeddingTable::new(4));
        match select_misaligned_target(&src, &truth, &pool, &NoiseGenSpec::default(), &scorer) {
            Err(Error::Scorer { sentence, .. }) => assert_eq!(sentence, "s1 s2 s3"),
            other => panic!("expected scorer error, got {other:?}"),
        }
    }

    #[test]
    fn forced_matching_without_reuse() {
        // Each source admits exactly one foreign target.
        let c = corpus(&[
            ("a1 a2 a3", "x1 x2 x3"),
            ("b1 b2 b3", "x1 x2 y3"),
            ("c1 c2 c3", "z1 z2 z3"),
        ]);
        let c = ParallelCorpus::new(
            c.pairs()
                .iter()
                .cloned()
                .chain([SentencePair::new(ws("d1 d2 d3"), ws("z1 z2 w3"))])
                .collect(),
            None,
        )
        .unwrap();
        let out = generate_misaligned_corpus(&c, &NoiseGenSpec::default(), &Scorer::BagOfWords(None))
            .unwrap();
        assert_eq!(out.assigned, vec![1, 0, 3, 2]);
        assert_eq!(out.fallbacks, 0);
        assert!(out.corpus.provenance().unwrap().iter().all(|&l| l == Provenance::MisScored));
    }

    #[test]
    fn fallback_is_random_foreign_target() {
        let c = corpus(&[("a", "x"), ("b", "y"), ("c", "z")]);
        let out = generate_misaligned_corpus(&c, &NoiseGenSpec::default(), &Scorer::BagOfWords(None))
            .unwrap();
        assert_eq!(out.fallbacks, 3);
        let labels = out.corpus.provenance().unwrap();
        assert!(labels.iter().all(|&l| l == Provenance::MisRandom));
        for (i, &j) in out.assigned.iter().enumerate() {
            assert_ne!(i, j);
        }
        let distinct: HashSet<usize> = out.assigned.iter().copied().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn misalignment_rejects_tiny_corpus() {
        let c = corpus(&[("a", "x")]);
        assert!(generate_misaligned_corpus(&c, &NoiseGenSpec::default(), &Scorer::BagOfWords(None))
            .is_err());
    }

    fn synth(size: usize) -> (crate::corpus::SynthTask, ParallelCorpus) {
        let spec = SynthTaskSpec {
            vocab_size: 30,
            min_len: 4,
            max_len: 8,
            size,
            transformation: Transformation::SubstitutionCipher,
            seed: 5,
            zipf_exponent: 1.0,
        };
        let task = crate::corpus::SynthTask::new(spec).unwrap();
        let c = task.generate().unwrap();
        (task, c)
    }

    #[test]
    fn scored_selection_beats_random_foreign_targets() {
        let (task, c) = synth(200);
        let scorer = Scorer::BagOfWords(Some(task.cipher().dictionary().clone()));
        let out = generate_misaligned_corpus(&c, &NoiseGenSpec::default(), &scorer).unwrap();
        let chosen_mean: f64 = c
            .pairs()
            .iter()
            .zip(out.corpus.pairs())
            .map(|(orig, mis)| scorer.score(&orig.source, &mis.target).unwrap())
            .sum::<f64>()
            / c.len() as f64;
        // Oracle: average over every foreign target for each source.
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, p) in c.pairs().iter().enumerate() {
            for (j, q) in c.pairs().iter().enumerate() {
                if i != j {
                    total += scorer.score(&p.source, &q.target).unwrap();
                    count += 1;
                }
            }
        }
        let random_mean = total / count as f64;
        assert!(chosen_mean > random_mean, "{chosen_mean} vs {random_mean}");
    }

    #[test]
    fn shuffle_examples() {
        let two = corpus(&[("a", "x"), ("b", "y")]);
        let s = shuffle_misalign(&two, 3).unwrap();
        assert_eq!(s.pairs()[0].target.raw(), "y");
        assert_eq!(s.pairs()[1].target.raw(), "x");

        let (_, c) = synth(50);
        let s1 = shuffle_misalign(&c, 9).unwrap();
        for (a, b) in c.pairs().iter().zip(s1.pairs()) {
            assert_eq!(a.source, b.source);
            assert_ne!(a.target, b.target);
        }
        assert_eq!(shuffle_misalign(&c, 9).unwrap(), s1);
        assert!(s1.provenance().unwrap().iter().all(|&l| l == Provenance::MisRandom));
        assert!(shuffle_misalign(&corpus(&[("a", "x")]), 1).is_err());
    }

    #[test]
    fn inject_examples() {
        let (_, c) = synth(1000);
        let noise = shuffle_misalign(&c, 1).unwrap();

        let (same, mask) = inject_noise(&c, &noise, 0.0, 4).unwrap();
        assert_eq!(same.pairs(), c.pairs());
        assert_eq!(mask.noisy_count(), 0);

        let (all, mask) = inject_noise(&c, &noise, 1.0, 4).unwrap();
        assert_eq!(all.pairs(), noise.pairs());
        assert_eq!(mask.noisy_count(), 1000);

        let (mixed, mask) = inject_noise(&c, &noise, 0.3, 4).unwrap();
        assert_eq!(mask.noisy_count(), 300);
        assert_eq!(mixed.len(), 1000);
        for (i, l) in mask.labels().iter().enumerate() {
            let expect = if l.is_noisy() { &noise.pairs()[i] } else { &c.pairs()[i] };
            assert_eq!(&mixed.pairs()[i], expect);
            assert_eq!(mask.true_targets()[i].as_ref(), Some(&c.pairs()[i].target));
        }
    }

    #[test]
    fn inject_from_external_pool() {
        let (_, c) = synth(100);
        let pool = corpus(&[("p1", "q1"), ("p2", "q2"), ("p3", "q3")]);
        let (mixed, mask) = inject_noise(&c, &pool, 0.03, 2).unwrap();
        let noisy: Vec<usize> = (0..100).filter(|&i| mask.labels()[i].is_noisy()).collect();
        assert_eq!(noisy.len(), 3);
        for (slot, &i) in noisy.iter().enumerate() {
            assert_eq!(mixed.pairs()[i], pool.pairs()[slot]);
            assert_eq!(mask.labels()[i], Provenance::Pool);
            assert!(mask.true_targets()[i].is_none());
        }
        match inject_noise(&c, &pool, 0.1, 2) {
            Err(Error::InsufficientNoise { required, available }) => {
                assert_eq!((required, available), (10, 3));
            }
            other => panic!("expected insufficient noise, got {other:?}"),
        }
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.tsv");
        let m = NoiseMask::new(
            vec![Provenance::Clean, Provenance::MisScored, Provenance::Pool],
            vec![Some(ws("a b")), Some(ws("c")), None],
        )
        .unwrap();
        m.save(&p).unwrap();
        assert_eq!(NoiseMask::load(&p, TokenScheme::Whitespace).unwrap(), m);
    }
}
