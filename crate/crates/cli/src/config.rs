//! Experiment configuration, read from TOML.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use nmtlab_core::corpus::Transformation;
use nmtlab_core::model::LrSchedule;
use nmtlab_core::objectives::ObjectiveConfig;
use nmtlab_core::simnoise::ScorerKind;
use nmtlab_core::train::StatsPolicy;
use nmtlab_core::TokenScheme;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Noise,
    FilterEval,
    Train,
    Eval,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Synth,
        Stage::Noise,
        Stage::FilterEval,
        Stage::Train,
        Stage::Eval,
        Stage::Stats,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Noise => "noise",
            Stage::FilterEval => "filter-eval",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Stats => "stats",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "all_stages")]
    pub stages: Vec<Stage>,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "default_objectives")]
    pub objectives: Vec<ObjectiveConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn all_stages() -> Vec<Stage> {
    Stage::ALL.to_vec()
}

fn default_objectives() -> Vec<ObjectiveConfig> {
    vec![ObjectiveConfig::default()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorpusConfig {
    Synthetic {
        vocab_size: usize,
        min_len: usize,
        max_len: usize,
        train_size: usize,
        test_size: usize,
        #[serde(default = "default_transformation")]
        transformation: Transformation,
        #[serde(default = "default_zipf")]
        zipf_exponent: f64,
    },
    Files {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        scheme: TokenScheme,
    },
}

fn default_transformation() -> Transformation {
    Transformation::SubstitutionCipher
}

fn default_zipf() -> f64 {
    1.0
}

impl CorpusConfig {
    pub fn scheme(&self) -> TokenScheme {
        match self {
            CorpusConfig::Synthetic { .. } => TokenScheme::Whitespace,
            CorpusConfig::Files { scheme, .. } => *scheme,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    MisScored,
    MisRandom,
    Pool,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::MisScored => "mis-scored",
            NoiseKind::MisRandom => "mis-random",
            NoiseKind::Pool => "pool",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub rate: f64,
    /// Candidate cap for similarity-controlled misalignment.
    pub k: usize,
    pub length_tolerance: usize,
    pub overlap_threshold: f64,
    /// Raw pool for `pool` noise; synthetic corpora build one when unset.
    pub pool: Option<PathBuf>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::MisScored,
            rate: 0.0,
            k: 50,
            length_tolerance: 3,
            overlap_threshold: 0.4,
            pool: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    /// Dimension and perturbation of synthesized embeddings.
    pub dim: usize,
    pub embedding_noise: f64,
    pub embeddings: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    pub score_table: Option<PathBuf>,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::EmbeddingCosine,
            dim: 32,
            embedding_noise: 1.0,
            embeddings: None,
            dictionary: None,
            score_table: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub noise_types: Vec<NoiseKind>,
    /// Noisy fractions at which detection accuracy is measured.
    pub ratios: Vec<f64>,
    /// Fraction of lowest-scoring pairs to drop before training.
    pub prefilter: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            noise_types: vec![NoiseKind::MisRandom, NoiseKind::MisScored],
            ratios: vec![0.5],
            prefilter: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_ff: 128,
            enc_layers: 2,
            dec_layers: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub token_stats: StatsPolicy,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = nmtlab_core::train::TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            token_stats: d.token_stats,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bootstrap_resamples: usize,
    pub significance: f64,
    /// Training pairs per provenance label translated for subset metrics.
    pub subset_per_label: usize,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bootstrap_resamples: 1000,
            significance: 0.05,
            subset_per_label: 500,
            histogram_bins: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let CorpusConfig::Files { train, test, .. } = &mut self.corpus {
            fix(train);
            fix(test);
        }
        for p in [
            self.noise.pool.as_mut(),
            self.scorer.embeddings.as_mut(),
            self.scorer.dictionary.as_mut(),
            self.scorer.score_table.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            self.schema_version
        );
        ensure!(!self.stages.is_empty(), "no stages selected");
        ensure!(
            (0.0..=1.0).contains(&self.noise.rate),
            "noise rate {} outside [0, 1]",
            self.noise.rate
        );
        ensure!(self.train.epochs >= 1, "training needs at least one epoch");
        ensure!(self.train.batch_size >= 1, "batch_size must be positive");
        ensure!(!self.objectives.is_empty(), "no objectives configured");
        let mut labels = BTreeSet::new();
        for o in &self.objectives {
            o.validate()?;
            ensure!(labels.insert(o.label()), "objective {} listed twice", o.label());
        }
        for &r in &self.filter.ratios {
            ensure!(r > 0.0 && r < 1.0, "filter ratio {r} outside (0, 1)");
        }
        if let Some(f) = self.filter.prefilter {
            ensure!((0.0..1.0).contains(&f), "prefilter fraction {f} outside [0, 1)");
        }
        ensure!(self.eval.histogram_bins >= 1, "histogram_bins must be positive");
        ensure!(
            self.eval.bootstrap_resamples >= 100,
            "bootstrap_resamples must be at least 100"
        );

        let mut paths: Vec<&Path> = Vec::new();
        match &self.corpus {
            CorpusConfig::Synthetic {
                train_size, test_size, ..
            } => {
                ensure!(*train_size >= 2 && *test_size >= 1, "corpus too small");
            }
            CorpusConfig::Files { train, test, .. } => {
                paths.push(train);
                paths.push(test);
                if self.scorer.kind == ScorerKind::EmbeddingCosine && self.scorer.embeddings.is_none() {
                    bail!("embedding-cosine scoring of file corpora needs scorer.embeddings");
                }
                if self.noise.kind == NoiseKind::Pool && self.noise.pool.is_none() {
                    bail!("pool noise on file corpora needs noise.pool");
                }
            }
        }
        if self.scorer.kind == ScorerKind::ExternalScoreTable && self.scorer.score_table.is_none() {
            bail!("external-score-table scoring needs scorer.score_table");
        }
        paths.extend(
            [
                &self.noise.pool,
                &self.scorer.embeddings,
                &self.scorer.dictionary,
                &self.scorer.score_table,
            ]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path),
        );
        for p in paths {
            ensure!(p.exists(), "referenced path {} does not exist", p.display());
        }
        Ok(())
    }

    pub fn runs(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nmtlab_core::objectives::{ObjectiveKind, TauPolicy};

    const MINIMAL: &str = r#"
schema_version = 1
[corpus]
kind = "synthetic"
vocab_size = 12
min_len = 2
max_len = 5
train_size = 100
test_size = 20
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.stages, Stage::ALL.to_vec());
        assert_eq!(cfg.objectives.len(), 1);
        assert_eq!(cfg.noise.rate, 0.0);
    }

    #[test]
    fn objectives_parse_from_tables() {
        let text = format!(
            "{MINIMAL}\n[[objectives]]\nkind = \"baseline\"\n\n[[objectives]]\nkind = \"self-correct\"\n\
             [objectives.schedule]\nbeta = -5.0\ntau = {{ policy = \"fixed\", tau = 0.5 }}\n"
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.objectives[1].kind, ObjectiveKind::SelfCorrect);
        assert_eq!(cfg.objectives[1].schedule.beta, -5.0);
        assert_eq!(cfg.objectives[1].schedule.tau, TauPolicy::Fixed { tau: 0.5 });
    }

    #[test]
    fn rejects_bad_configs() {
        let bump = MINIMAL.replace("schema_version = 1", "schema_version = 2");
        assert!(ExperimentConfig::from_toml(&bump).is_err());
        let rate = format!("{MINIMAL}\n[noise]\nrate = 1.5\n");
        assert!(ExperimentConfig::from_toml(&rate).is_err());
        let dup = format!("{MINIMAL}\n[[objectives]]\nkind = \"baseline\"\n[[objectives]]\nkind = \"baseline\"\n");
        assert!(ExperimentConfig::from_toml(&dup).is_err());
        let unknown = format!("{MINIMAL}\n[train]\nepoch = 3\n");
        assert!(ExperimentConfig::from_toml(&unknown).is_err());
        let missing = MINIMAL.replace("kind = \"synthetic\"", "kind = \"files\"\ntrain = \"/nonexistent/a.tsv\"\ntest = \"/nonexistent/b.tsv\"");
        let missing: String = missing
            .lines()
            .filter(|l| !l.contains("_len") && !l.contains("_size"))
            .collect::<Vec<_>>()
            .join("\n");
        let err = ExperimentConfig::from_toml(&missing).unwrap_err();
        assert!(format!("{err:#}").contains("scorer.embeddings") || format!("{err:#}").contains("does not exist"));
    }
}
