//! Sentence-pair similarity scorers standing in for cross-lingual quality
//! estimation models.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, SynthTask};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    EmbeddingCosine,
    BagofwordsCosine,
    ExternalScoreTable,
}

impl ScorerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::EmbeddingCosine => "embedding-cosine",
            ScorerKind::BagofwordsCosine => "bagofwords-cosine",
            ScorerKind::ExternalScoreTable => "external-score-table",
        }
    }
}

/// A pluggable similarity model: higher scores mean more similar.
#[derive(Clone, Debug)]
pub enum Scorer {
    Embedding(EmbeddingTable),
    BagOfWords(Option<HashMap<String, String>>),
    External(ScoreTable),
}

impl Scorer {
    pub fn kind(&self) -> ScorerKind {
        match self {
            Scorer::Embedding(_) => ScorerKind::EmbeddingCosine,
            Scorer::BagOfWords(_) => ScorerKind::BagofwordsCosine,
            Scorer::External(_) => ScorerKind::ExternalScoreTable,
        }
    }

    pub fn score(&self, src: &Sentence, tgt: &Sentence) -> Result<f64> {
        let s = match self {
            Scorer::Embedding(table) => {
                cosine(&table.sentence_vector(src)?, &table.sentence_vector(tgt)?)
            }
            Scorer::BagOfWords(dict) => bag_of_words_cosine(src, tgt, dict.as_ref()),
            Scorer::External(table) => table.lookup(src, tgt)?,
        };
        if !s.is_finite() {
            return Err(Error::Scorer {
                sentence: src.raw().to_owned(),
                message: format!("non-finite score against {:?}", tgt.raw()),
            });
        }
        Ok(s)
    }
}

pub fn score_sentence_pair(scorer: &Scorer, src: &Sentence, tgt: &Sentence) -> Result<f64> {
    scorer.score(src, tgt)
}

/// Cosine similarity; zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

fn bag_of_words_cosine(
    src: &Sentence,
    tgt: &Sentence,
    dict: Option<&HashMap<String, String>>,
) -> f64 {
    let mut src_bag: HashMap<&str, f64> = HashMap::new();
    for t in src.tokens() {
        let mapped = dict.and_then(|d| d.get(t)).unwrap_or(t);
        *src_bag.entry(mapped.as_str()).or_insert(0.0) += 1.0;
    }
    let mut tgt_bag: HashMap<&str, f64> = HashMap::new();
    for t in tgt.tokens() {
        *tgt_bag.entry(t.as_str()).or_insert(0.0) += 1.0;
    }
    let dot: f64 = src_bag
        .iter()
        .map(|(k, v)| v * tgt_bag.get(k).copied().unwrap_or(0.0))
        .sum();
    let na: f64 = src_bag.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = tgt_bag.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Vectors keyed by token or by whole sentence text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::LengthMismatch {
                left: self.dim,
                right: vector.len(),
            });
        }
        self.entries.insert(key.into(), vector);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    /// Stored vector for the whole sentence if present, else the mean of its
    /// token vectors.
    pub fn sentence_vector(&self, s: &Sentence) -> Result<Vec<f64>> {
        if let Some(v) = self.entries.get(s.raw()) {
            return Ok(v.clone());
        }
        let mut acc = vec![0.0; self.dim];
        for tok in s.tokens() {
            let v = self.entries.get(tok).ok_or_else(|| Error::Scorer {
                sentence: s.raw().to_owned(),
                message: format!("no embedding for token {tok:?}"),
            })?;
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        if s.is_empty() {
            return Err(Error::Scorer {
                sentence: String::new(),
                message: "empty sentence".into(),
            });
        }
        let n = s.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    /// `key<TAB>v1 v2 ... vd`, one entry per line.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table: Option<EmbeddingTable> = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let malformed = |message: String| Error::Malformed {
                path: path.to_owned(),
                line: i + 1,
                message,
            };
            let (key, values) = line
                .split_once('\t')
                .ok_or_else(|| malformed("expected key<TAB>vector".into()))?;
            let vector = values
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| malformed(format!("bad component: {e}")))?;
            if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
                return Err(malformed("vector must be nonempty and finite".into()));
            }
            let t = table.get_or_insert_with(|| EmbeddingTable::new(vector.len()));
            if vector.len() != t.dim {
                return Err(malformed(format!(
                    "dimension {} differs from {}",
                    vector.len(),
                    t.dim
                )));
            }
            t.entries.insert(key.to_owned(), vector);
        }
        table.ok_or_else(|| Error::Malformed {
            path: path.to_owned(),
            line: 1,
            message: "embedding table is empty".into(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        for k in keys {
            let vals: Vec<String> = self.entries[k].iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{k}\t{}", vals.join(" ")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Precomputed scores keyed by 1-based line numbers into a source list and a
/// target list.
#[derive(Clone, Debug, Default)]
pub struct ScoreTable {
    scores: HashMap<(usize, usize), f64>,
    src_lines: HashMap<String, usize>,
    tgt_lines: HashMap<String, usize>,
}

impl ScoreTable {
    pub fn new(sources: &[Sentence], targets: &[Sentence]) -> Self {
        let index = |list: &[Sentence]| {
            list.iter()
                .enumerate()
                .map(|(i, s)| (s.raw().to_owned(), i + 1))
                .collect()
        };
        Self {
            scores: HashMap::new(),
            src_lines: index(sources),
            tgt_lines: index(targets),
        }
    }

    pub fn insert(&mut self, src_line: usize, tgt_line: usize, score: f64) {
        self.scores.insert((src_line, tgt_line), score);
    }

    /// Reads `src_line_no<TAB>tgt_line_no<TAB>score` rows.
    pub fn load(path: &Path, sources: &[Sentence], targets: &[Sentence]) -> Result<Self> {
        let mut table = Self::new(sources, targets);
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let malformed = |message: String| Error::Malformed {
                path: path.to_owned(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(malformed(format!("expected 3 fields, found {}", fields.len())));
            }
            let s: usize = fields[0].parse().map_err(|e| malformed(format!("{e}")))?;
            let t: usize = fields[1].parse().map_err(|e| malformed(format!("{e}")))?;
            let v: f64 = fields[2].parse().map_err(|e| malformed(format!("{e}")))?;
            if !v.is_finite() {
                return Err(malformed("score must be finite".into()));
            }
            table.insert(s, t, v);
        }
        Ok(table)
    }

    fn lookup(&self, src: &Sentence, tgt: &Sentence) -> Result<f64> {
        let missing = |message: String| Error::Scorer {
            sentence: src.raw().to_owned(),
            message,
        };
        let s = self
            .src_lines
            .get(src.raw())
            .ok_or_else(|| missing("source not in score table index".into()))?;
        let t = self
            .tgt_lines
            .get(tgt.raw())
            .ok_or_else(|| missing(format!("target {:?} not in score table index", tgt.raw())))?;
        self.scores
            .get(&(*s, *t))
            .copied()
            .ok_or_else(|| missing(format!("no score for lines ({s}, {t})")))
    }
}

/// `src_token<TAB>tgt_token` rows.
pub fn load_dictionary(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_once('\t')
                .map(|(s, t)| (s.to_owned(), t.to_owned()))
                .ok_or_else(|| Error::Malformed {
                    path: path.to_owned(),
                    line: i + 1,
                    message: "expected src_token<TAB>tgt_token".into(),
                })
        })
        .collect()
}

pub fn save_dictionary(dict: &HashMap<String, String>, path: &Path) -> Result<()> {
    let mut rows: Vec<(&String, &String)> = dict.iter().collect();
    rows.sort();
    let mut body = String::new();
    for (s, t) in rows {
        body.push_str(s);
        body.push('\t');
        body.push_str(t);
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Parameters of a synthetic cross-lingual embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthEmbeddingSpec {
    pub dim: usize,
    /// Standard deviation of the language-specific perturbation added to
    /// each word's shared meaning vector; larger means a weaker scorer.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthEmbeddingSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Token embeddings in which a source word and its translation share a
/// meaning vector plus independent per-language noise.
pub fn synthesize_embeddings(task: &SynthTask, spec: &SynthEmbeddingSpec) -> Result<EmbeddingTable> {
    if spec.dim == 0 || !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::InvalidSpec("embedding dim must be > 0 and noise >= 0".into()));
    }
    let mut rng = rng::stage_rng(spec.seed, "synth/embeddings");
    let mut gauss = move || -> f64 {
        // Box-Muller; u1 kept away from zero.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let mut table = EmbeddingTable::new(spec.dim);
    let cipher = task.cipher().dictionary();
    for word in task.source_words() {
        let meaning: Vec<f64> = (0..spec.dim).map(|_| gauss()).collect();
        let src: Vec<f64> = meaning.iter().map(|m| m + spec.noise * gauss()).collect();
        let tgt: Vec<f64> = meaning.iter().map(|m| m + spec.noise * gauss()).collect();
        table.insert(word.clone(), src)?;
        table.insert(cipher[word].clone(), tgt)?;
    }
    Ok(table)
}
