//! Parallel corpora: tokenization, vocabularies, TSV I/O and synthetic
//! translation tasks with known ground truth.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenScheme {
    #[default]
    Whitespace,
    Char,
}

impl TokenScheme {
    pub fn separator(self) -> &'static str {
        match self {
            TokenScheme::Whitespace => " ",
            TokenScheme::Char => "",
        }
    }
}

pub fn tokenize(text: &str, scheme: TokenScheme) -> Vec<String> {
    match scheme {
        TokenScheme::Whitespace => text.split_whitespace().map(str::to_owned).collect(),
        TokenScheme::Char => text.chars().map(String::from).collect(),
    }
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S], scheme: TokenScheme) -> String {
    let parts: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    parts.join(scheme.separator())
}

/// A tokenized sentence together with its normalized surface form.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sentence {
    raw: String,
    tokens: Vec<String>,
}

impl Sentence {
    pub fn new(text: &str, scheme: TokenScheme) -> Self {
        let tokens = tokenize(text, scheme);
        Self {
            raw: detokenize(&tokens, scheme),
            tokens,
        }
    }

    pub fn from_tokens(tokens: Vec<String>, scheme: TokenScheme) -> Self {
        Self {
            raw: detokenize(&tokens, scheme),
            tokens,
        }
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Where a training pair came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Clean,
    MisScored,
    MisRandom,
    Pool,
}

impl Provenance {
    pub const ALL: [Provenance; 4] = [
        Provenance::Clean,
        Provenance::MisScored,
        Provenance::MisRandom,
        Provenance::Pool,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Clean => "clean",
            Provenance::MisScored => "mis-scored",
            Provenance::MisRandom => "mis-random",
            Provenance::Pool => "pool",
        }
    }

    pub fn is_noisy(self) -> bool {
        self != Provenance::Clean
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Provenance::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown provenance label {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Sentence,
    pub target: Sentence,
}

impl SentencePair {
    pub fn new(source: Sentence, target: Sentence) -> Self {
        Self { source, target }
    }
}

/// Ordered sentence pairs with optional per-pair provenance labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
    provenance: Option<Vec<Provenance>>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>, provenance: Option<Vec<Provenance>>) -> Result<Self> {
        if let Some(labels) = &provenance {
            if labels.len() != pairs.len() {
                return Err(Error::LengthMismatch {
                    left: pairs.len(),
                    right: labels.len(),
                });
            }
        }
        if let Some(i) = pairs
            .iter()
            .position(|p| p.source.is_empty() || p.target.is_empty())
        {
            return Err(Error::InvalidArgument(format!("pair {i} has an empty side")));
        }
        Ok(Self { pairs, provenance })
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn provenance(&self) -> Option<&[Provenance]> {
        self.provenance.as_deref()
    }

    /// Label of pair `i`, treating unlabeled corpora as clean.
    pub fn label(&self, i: usize) -> Provenance {
        self.provenance
            .as_ref()
            .map_or(Provenance::Clean, |labels| labels[i])
    }

    pub fn labels_or_clean(&self) -> Vec<Provenance> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    pub fn with_provenance(mut self, labels: Vec<Provenance>) -> Result<Self> {
        if labels.len() != self.pairs.len() {
            return Err(Error::LengthMismatch {
                left: self.pairs.len(),
                right: labels.len(),
            });
        }
        self.provenance = Some(labels);
        Ok(self)
    }

    pub fn sources(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|p| &p.source)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|p| &p.target)
    }

    /// Pairs at `indices`, in the given order, with their labels.
    pub fn select(&self, indices: &[usize]) -> Self {
        let pairs = indices.iter().map(|&i| self.pairs[i].clone()).collect();
        let provenance = self
            .provenance
            .as_ref()
            .map(|labels| indices.iter().map(|&i| labels[i]).collect());
        Self { pairs, provenance }
    }

    pub fn into_parts(self) -> (Vec<SentencePair>, Option<Vec<Provenance>>) {
        (self.pairs, self.provenance)
    }
}

/// Bidirectional token/id map with fixed reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn from_ordered(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Builds a vocabulary from token counts: frequency descending, then
    /// lexicographic. Tokens rarer than `min_freq` are left out.
    pub fn from_counts(counts: &HashMap<&str, usize>, min_freq: usize) -> Result<Self> {
        let mut kept: Vec<(&str, usize)> = counts
            .iter()
            .filter(|(tok, &c)| c >= min_freq.max(1) && !RESERVED_TOKENS.contains(tok))
            .map(|(&t, &c)| (t, c))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_ordered(kept.into_iter().map(|(t, _)| t.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, dropping pad/begin/end markers.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK]).to_owned())
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for tok in &self.tokens {
            hasher.update(tok.as_bytes());
            hasher.update([0u8]);
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// One token per line, in id order, reserved entries included.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_RESERVED || lines[..NUM_RESERVED] != RESERVED_TOKENS {
            return Err(Error::Malformed {
                path: path.to_owned(),
                line: 1,
                message: "vocabulary must start with the reserved tokens".into(),
            });
        }
        Self::from_ordered(lines[NUM_RESERVED..].iter().map(|s| s.to_string()))
    }
}

fn count_tokens<'a>(sentences: impl Iterator<Item = &'a Sentence>) -> HashMap<&'a str, usize> {
    let mut counts = HashMap::new();
    for s in sentences {
        for t in s.tokens() {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    counts
}

/// One vocabulary covering both sides of the corpus.
pub fn build_vocab(corpus: &ParallelCorpus, min_freq: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let counts = count_tokens(corpus.sources().chain(corpus.targets()));
    Vocab::from_counts(&counts, min_freq)
}

/// Separate source and target vocabularies.
pub fn build_vocabs(corpus: &ParallelCorpus, min_freq: usize) -> Result<(Vocab, Vocab)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let src = Vocab::from_counts(&count_tokens(corpus.sources()), min_freq)?;
    let tgt = Vocab::from_counts(&count_tokens(corpus.targets()), min_freq)?;
    Ok((src, tgt))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transformation {
    SubstitutionCipher,
    SubstitutionReversal,
}

fn default_zipf() -> f64 {
    1.0
}

/// Declarative description of a synthetic translation task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTaskSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub size: usize,
    pub transformation: Transformation,
    pub seed: u64,
    /// Exponent of the Zipf law used to draw source words; 0 is uniform.
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 10 {
            return Err(Error::InvalidSpec("vocab_size must be at least 10".into()));
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return Err(Error::InvalidSpec(format!(
                "length range [{}, {}] is invalid",
                self.min_len, self.max_len
            )));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(Error::InvalidSpec("zipf_exponent must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Number of distinct source sentences these settings can produce (saturating).
    pub fn capacity(&self) -> u128 {
        let v = self.vocab_size as u128;
        (self.min_len..=self.max_len).fold(0u128, |acc, len| {
            let count = (0..len).try_fold(1u128, |p, _| p.checked_mul(v));
            acc.saturating_add(count.unwrap_or(u128::MAX))
        })
    }
}

/// Token-wise substitution, optionally followed by sequence reversal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cipher {
    map: HashMap<String, String>,
    reverse: bool,
}

impl Cipher {
    pub fn new(map: HashMap<String, String>, reverse: bool) -> Self {
        Self { map, reverse }
    }

    pub fn apply<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        let mut out: Vec<String> = tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                self.map.get(t).cloned().unwrap_or_else(|| t.to_owned())
            })
            .collect();
        if self.reverse {
            out.reverse();
        }
        out
    }

    pub fn dictionary(&self) -> &HashMap<String, String> {
        &self.map
    }

    pub fn reverses(&self) -> bool {
        self.reverse
    }
}

/// A realized synthetic task: source lexicon, cipher and sampling weights.
#[derive(Clone, Debug)]
pub struct SynthTask {
    spec: SynthTaskSpec,
    source_words: Vec<String>,
    cipher: Cipher,
}

impl SynthTask {
    pub fn new(spec: SynthTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stage_rng(spec.seed, "synth/cipher");
        let source_words: Vec<String> = (0..spec.vocab_size).map(|i| format!("s{i}")).collect();
        let mut perm: Vec<usize> = (0..spec.vocab_size).collect();
        perm.shuffle(&mut rng);
        let map = source_words
            .iter()
            .zip(&perm)
            .map(|(w, &j)| (w.clone(), format!("t{j}")))
            .collect();
        let reverse = spec.transformation == Transformation::SubstitutionReversal;
        Ok(Self {
            spec,
            source_words,
            cipher: Cipher::new(map, reverse),
        })
    }

    pub fn spec(&self) -> &SynthTaskSpec {
        &self.spec
    }

    pub fn cipher(&self) -> &Cipher {
        &self.cipher
    }

    pub fn source_words(&self) -> &[String] {
        &self.source_words
    }

    pub fn translate(&self, source: &Sentence) -> Sentence {
        Sentence::from_tokens(self.cipher.apply(source.tokens()), TokenScheme::Whitespace)
    }

    /// Samples `spec.size` distinct sources and pairs each with its
    /// ciphered target.
    pub fn generate(&self) -> Result<ParallelCorpus> {
        let spec = &self.spec;
        let capacity = spec.capacity();
        if spec.size as u128 > capacity {
            return Err(Error::CorpusTooLarge {
                requested: spec.size as u128,
                capacity,
            });
        }
        let mut rng = rng::stage_rng(spec.seed, "synth/sentences");
        let weights: Vec<f64> = (0..spec.vocab_size)
            .map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent))
            .collect();
        let word_dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidSpec(format!("word distribution: {e}")))?;

        let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(spec.size);
        let mut sources: Vec<Vec<usize>> = Vec::with_capacity(spec.size);
        // Rejection sampling stalls near capacity; enumerate small spaces.
        if capacity <= 4 * spec.size as u128 {
            let mut all = enumerate_sequences(spec.vocab_size, spec.min_len, spec.max_len);
            all.shuffle(&mut rng);
            sources.extend(all.into_iter().take(spec.size));
        } else {
            while sources.len() < spec.size {
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let s: Vec<usize> = (0..len).map(|_| word_dist.sample(&mut rng)).collect();
                if seen.insert(s.clone()) {
                    sources.push(s);
                }
            }
        }

        let pairs = sources
            .into_iter()
            .map(|ids| {
                let toks: Vec<String> = ids.iter().map(|&i| self.source_words[i].clone()).collect();
                let source = Sentence::from_tokens(toks, TokenScheme::Whitespace);
                let target = self.translate(&source);
                SentencePair::new(source, target)
            })
            .collect::<Vec<_>>();
        let n = pairs.len();
        ParallelCorpus::new(pairs, Some(vec![Provenance::Clean; n]))
    }
}

fn enumerate_sequences(vocab: usize, min_len: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for len in min_len..=max_len {
        let mut cur = vec![0usize; len];
        'odometer: loop {
            out.push(cur.clone());
            for pos in (0..len).rev() {
                cur[pos] += 1;
                if cur[pos] < vocab {
                    continue 'odometer;
                }
                cur[pos] = 0;
            }
            break;
        }
    }
    out
}

pub fn generate_synthetic_corpus(spec: &SynthTaskSpec) -> Result<ParallelCorpus> {
    SynthTask::new(spec.clone())?.generate()
}

/// Reads `source<TAB>target[<TAB>provenance]` lines.
pub fn parse_parallel_tsv(path: &Path, scheme: TokenScheme) -> Result<ParallelCorpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, message: String| Error::Malformed {
        path: path.to_owned(),
        line,
        message,
    };
    let mut pairs = Vec::new();
    let mut labels: Vec<Provenance> = Vec::new();
    let mut labeled: Option<bool> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(malformed(
                lineno,
                format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let has_label = fields.len() == 3;
        match labeled {
            None => labeled = Some(has_label),
            Some(prev) if prev != has_label => {
                return Err(malformed(lineno, "provenance column present on some lines only".into()))
            }
            _ => {}
        }
        let source = Sentence::new(fields[0], scheme);
        let target = Sentence::new(fields[1], scheme);
        if source.is_empty() || target.is_empty() {
            return Err(malformed(lineno, "empty source or target".into()));
        }
        if has_label {
            labels.push(fields[2].parse().map_err(|e: Error| malformed(lineno, e.to_string()))?);
        }
        pairs.push(SentencePair::new(source, target));
    }
    let provenance = if labeled == Some(true) { Some(labels) } else { None };
    ParallelCorpus::new(pairs, provenance)
}

pub fn write_parallel_tsv(corpus: &ParallelCorpus, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, pair) in corpus.pairs().iter().enumerate() {
        for side in [pair.source.raw(), pair.target.raw()] {
            if side.contains(['\t', '\n', '\r']) {
                return Err(Error::InvalidArgument(format!(
                    "pair {i} contains a tab or newline and cannot be written as TSV"
                )));
            }
        }
        let res = match corpus.provenance() {
            Some(labels) => writeln!(w, "{}\t{}\t{}", pair.source.raw(), pair.target.raw(), labels[i]),
            None => writeln!(w, "{}\t{}", pair.source.raw(), pair.target.raw()),
        };
        res.map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ws(text: &str) -> Sentence {
        Sentence::new(text, TokenScheme::Whitespace)
    }

    fn corpus(pairs: &[(&str, &str)]) -> ParallelCorpus {
        ParallelCorpus::new(
            pairs.iter().map(|(s, t)| SentencePair::new(ws(s), ws(t))).collect(),
            None,
        )
        .unwrap()
    }

    fn spec(size: usize, transformation: Transformation) -> SynthTaskSpec {
        SynthTaskSpec {
            vocab_size: 20,
            min_len: 3,
            max_len: 6,
            size,
            transformation,
            seed: 11,
            zipf_exponent: 1.0,
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("a b a", TokenScheme::Whitespace), vec!["a", "b", "a"]);
        assert!(tokenize("", TokenScheme::Whitespace).is_empty());
        assert!(tokenize("", TokenScheme::Char).is_empty());
        assert_eq!(tokenize("ab", TokenScheme::Char), vec!["a", "b"]);
    }

    #[test]
    fn tokens_rejoin_to_normalized_text() {
        let s = ws("  a   b\tc ");
        assert_eq!(s.raw(), "a b c");
        assert_eq!(detokenize(s.tokens(), TokenScheme::Whitespace), s.raw());
        let c = Sentence::new("héllo", TokenScheme::Char);
        assert_eq!(c.len(), 5);
        assert_eq!(c.raw(), "héllo");
    }

    #[test]
    fn vocab_reserved_and_min_freq() {
        let c = corpus(&[("a b", "x")]);
        let v = build_vocab(&c, 1).unwrap();
        assert_eq!(v.len(), NUM_RESERVED + 3);
        for t in ["a", "b", "x"] {
            assert!(v.id(t) >= NUM_RESERVED);
        }
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(BOS), Some("<s>"));
        assert_eq!(v.token(EOS), Some("</s>"));
        assert_eq!(v.token(UNK), Some("<unk>"));

        let v2 = build_vocab(&c, 2).unwrap();
        assert_eq!(v2.len(), NUM_RESERVED);
        for t in ["a", "b", "x"] {
            assert_eq!(v2.id(t), UNK);
        }
    }

    #[test]
    fn vocab_order_is_frequency_then_lexicographic() {
        let c = corpus(&[("b a c c", "z"), ("c b", "z")]);
        let v = build_vocab(&c, 1).unwrap();
        let words: Vec<&str> = v.tokens()[NUM_RESERVED..].iter().map(String::as_str).collect();
        assert_eq!(words, vec!["c", "b", "z", "a"]);
        assert_eq!(build_vocab(&c, 1).unwrap(), v);
        assert_eq!(v.fingerprint(), build_vocab(&c, 1).unwrap().fingerprint());
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        let empty = ParallelCorpus::new(vec![], None).unwrap();
        assert!(matches!(build_vocab(&empty, 1), Err(Error::EmptyCorpus)));
        assert!(matches!(build_vocabs(&empty, 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn vocab_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let v = build_vocab(&corpus(&[("a b", "x y")]), 1).unwrap();
        let p = dir.path().join("v.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn cipher_examples() {
        let map: HashMap<String, String> = [("a", "x"), ("b", "y")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let plain = Cipher::new(map.clone(), false);
        assert_eq!(plain.apply(&["a", "b"]), vec!["x", "y"]);
        let rev = Cipher::new(map, true);
        assert_eq!(rev.apply(&["a", "b"]), vec!["y", "x"]);
    }

    #[test]
    fn synthetic_ground_truth_and_determinism() {
        for tr in [Transformation::SubstitutionCipher, Transformation::SubstitutionReversal] {
            let task = SynthTask::new(spec(300, tr)).unwrap();
            let c = task.generate().unwrap();
            assert_eq!(c.len(), 300);
            let distinct: HashSet<&str> = c.sources().map(Sentence::raw).collect();
            assert_eq!(distinct.len(), 300);
            for p in c.pairs() {
                assert_eq!(task.cipher().apply(p.source.tokens()), p.target.tokens());
                assert!((3..=6).contains(&p.source.len()));
            }
            assert!(c.labels_or_clean().iter().all(|&l| l == Provenance::Clean));
            assert_eq!(generate_synthetic_corpus(&spec(300, tr)).unwrap(), c);
        }
    }

    #[test]
    fn synthetic_capacity_enforced_and_enumerated() {
        let mut s = spec(10, Transformation::SubstitutionCipher);
        s.vocab_size = 10;
        s.min_len = 1;
        s.max_len = 1;
        assert_eq!(s.capacity(), 10);
        let c = generate_synthetic_corpus(&s).unwrap();
        assert_eq!(c.sources().map(Sentence::raw).collect::<HashSet<_>>().len(), 10);
        s.size = 11;
        assert!(matches!(
            generate_synthetic_corpus(&s),
            Err(Error::CorpusTooLarge { requested: 11, capacity: 10 })
        ));
    }

    #[test]
    fn enumerate_covers_space() {
        let all = enumerate_sequences(3, 1, 2);
        assert_eq!(all.len(), 3 + 9);
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), 12);
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(5, Transformation::SubstitutionCipher);
        s.vocab_size = 9;
        assert!(s.validate().is_err());
        let mut s = spec(5, Transformation::SubstitutionCipher);
        s.min_len = 0;
        assert!(s.validate().is_err());
        let mut s = spec(5, Transformation::SubstitutionCipher);
        s.max_len = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn tsv_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        fs::write(&p, "hallo\thello\n").unwrap();
        let c = parse_parallel_tsv(&p, TokenScheme::Whitespace).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.pairs()[0].source.raw(), "hallo");
        assert_eq!(c.pairs()[0].target.raw(), "hello");
        assert!(c.provenance().is_none());

        fs::write(&p, "onlysource\n").unwrap();
        match parse_parallel_tsv(&p, TokenScheme::Whitespace) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected malformed line, got {other:?}"),
        }

        fs::write(&p, "a\tb\tclean\nc\td\n").unwrap();
        match parse_parallel_tsv(&p, TokenScheme::Whitespace) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed line, got {other:?}"),
        }

        let missing = dir.path().join("nope.tsv");
        assert!(matches!(
            parse_parallel_tsv(&missing, TokenScheme::Whitespace),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn tsv_round_trip_synthetic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        let c = generate_synthetic_corpus(&spec(100, Transformation::SubstitutionReversal)).unwrap();
        write_parallel_tsv(&c, &p).unwrap();
        assert_eq!(parse_parallel_tsv(&p, TokenScheme::Whitespace).unwrap(), c);
    }

    #[test]
    fn tsv_write_rejects_tabs() {
        let dir = tempfile::tempdir().unwrap();
        let c = ParallelCorpus::new(
            vec![SentencePair::new(
                Sentence::new("a\tb", TokenScheme::Char),
                Sentence::new("x", TokenScheme::Char),
            )],
            None,
        )
        .unwrap();
        assert!(write_parallel_tsv(&c, &dir.path().join("x.tsv")).is_err());
    }

    #[test]
    fn corpus_invariants() {
        assert!(ParallelCorpus::new(vec![SentencePair::new(ws("a"), ws(""))], None).is_err());
        assert!(ParallelCorpus::new(
            vec![SentencePair::new(ws("a"), ws("b"))],
            Some(vec![Provenance::Clean, Provenance::Pool])
        )
        .is_err());
        for p in Provenance::ALL {
            assert_eq!(p.as_str().parse::<Provenance>().unwrap(), p);
        }
    }
}
