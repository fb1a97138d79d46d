//! The experiment pipeline: each stage reads its inputs from the output
//! directory and writes its artifacts back into it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use nmtlab_core::corpus::{
    build_vocabs, parse_parallel_tsv, write_parallel_tsv, SynthTask, SynthTaskSpec,
};
use nmtlab_core::eval::{
    histogram, paired_bootstrap, subset_eval, true_references, write_histograms_csv, EvalReport,
    HistogramSeries, Metrics,
};
use nmtlab_core::filters::{
    detection_accuracy, prefilter_corpus, score_corpus, write_filter_eval_csv, FilterEvalRow,
};
use nmtlab_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelParams, ModelShape};
use nmtlab_core::objectives::{read_token_stats_csv, write_token_stats_csv, ObjectiveConfig};
use nmtlab_core::rng::{derive_seed, stage_rng};
use nmtlab_core::simnoise::{
    generate_misaligned_corpus, inject_noise, load_dictionary, shuffle_misalign,
    synthesize_embeddings, EmbeddingTable, NoiseGenSpec, NoiseMask, ScoreTable, Scorer, ScorerKind,
    SynthEmbeddingSpec,
};
use nmtlab_core::train::{encode_corpus, mean_el2n_by_noise, train, translate, TrainConfig};
use nmtlab_core::{ParallelCorpus, Sentence, Vocab};

use crate::config::{CorpusConfig, ExperimentConfig, NoiseKind, Stage};
use crate::manifest::{now, to_json, write_atomic, RunManifest, RunStatus, StageRecord, TrainSummary, BUILD_ID, MANIFEST_FILE};

pub const TRAIN_TSV: &str = "corpus/train.tsv";
pub const TEST_TSV: &str = "corpus/test.tsv";
pub const NOISY_TSV: &str = "noise/train.tsv";
pub const MASK_TSV: &str = "noise/mask.tsv";
pub const FILTER_EVAL_CSV: &str = "filter/filter_eval.csv";
pub const SCORED_TSV: &str = "filter/scored.tsv";
pub const PREFILTERED_TSV: &str = "filter/prefiltered.tsv";
pub const SRC_VOCAB: &str = "vocab/src.vocab";
pub const TGT_VOCAB: &str = "vocab/tgt.vocab";

/// Directory holding one objective's checkpoint, statistics and report.
pub fn run_dir(label: &str) -> String {
    format!("runs/{label}")
}

pub fn eval_report_path(label: &str) -> String {
    format!("runs/{label}/eval_report.json")
}

/// Named seeds derived from the root seed.
pub fn derived_seeds(root: u64) -> BTreeMap<String, u64> {
    [
        "synth",
        "embeddings",
        "noise/generate",
        "noise/inject",
        "filter-eval",
        "model/init",
        "train",
        "eval/subset",
        "eval/bootstrap",
    ]
    .into_iter()
    .map(|k| (k.to_owned(), derive_seed(root, k)))
    .collect()
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    manifest: &'a mut RunManifest,
}

impl Ctx<'_> {
    fn seed(&self, name: &str) -> u64 {
        derive_seed(self.cfg.seed, name)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Creates the parent of `rel` and registers it as an artifact.
    fn output(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        self.manifest.add_artifact(rel);
        Ok(p)
    }

    fn input(&self, rel: &str, producer: Stage) -> Result<PathBuf> {
        let p = self.path(rel);
        ensure!(
            p.exists(),
            "missing {rel}; run the {} stage first",
            producer.as_str()
        );
        Ok(p)
    }

    fn corpus(&self, rel: &str, producer: Stage) -> Result<ParallelCorpus> {
        Ok(parse_parallel_tsv(&self.input(rel, producer)?, self.cfg.corpus.scheme())?)
    }

    fn mask(&self) -> Result<NoiseMask> {
        Ok(NoiseMask::load(&self.input(MASK_TSV, Stage::Noise)?, self.cfg.corpus.scheme())?)
    }
}

fn synth_task(cfg: &ExperimentConfig, seed: u64) -> Result<Option<SynthTask>> {
    match &cfg.corpus {
        CorpusConfig::Synthetic {
            vocab_size,
            min_len,
            max_len,
            train_size,
            test_size,
            transformation,
            zipf_exponent,
        } => Ok(Some(SynthTask::new(SynthTaskSpec {
            vocab_size: *vocab_size,
            min_len: *min_len,
            max_len: *max_len,
            size: train_size + test_size,
            transformation: *transformation,
            seed,
            zipf_exponent: *zipf_exponent,
        })?)),
        CorpusConfig::Files { .. } => Ok(None),
    }
}

fn build_scorer(ctx: &Ctx, clean: &ParallelCorpus) -> Result<Scorer> {
    let sc = &ctx.cfg.scorer;
    let task = synth_task(ctx.cfg, ctx.seed("synth"))?;
    Ok(match sc.kind {
        ScorerKind::EmbeddingCosine => match (&sc.embeddings, &task) {
            (Some(p), _) => Scorer::Embedding(EmbeddingTable::load(p)?),
            (None, Some(task)) => Scorer::Embedding(synthesize_embeddings(
                task,
                &SynthEmbeddingSpec {
                    dim: sc.dim,
                    noise: sc.embedding_noise,
                    seed: ctx.seed("embeddings"),
                },
            )?),
            (None, None) => bail!("no embeddings available for embedding-cosine scoring"),
        },
        ScorerKind::BagofwordsCosine => match (&sc.dictionary, &task) {
            (Some(p), _) => Scorer::BagOfWords(Some(load_dictionary(p)?)),
            (None, Some(task)) => Scorer::BagOfWords(Some(task.cipher().dictionary().clone())),
            (None, None) => Scorer::BagOfWords(None),
        },
        ScorerKind::ExternalScoreTable => {
            let p = sc
                .score_table
                .as_ref()
                .ok_or_else(|| anyhow!("scorer.score_table is required"))?;
            let srcs: Vec<Sentence> = clean.sources().cloned().collect();
            let tgts: Vec<Sentence> = clean.targets().cloned().collect();
            Scorer::External(ScoreTable::load(p, &srcs, &tgts)?)
        }
    })
}

/// A full-size noise corpus of the given kind for `clean`.
fn noise_corpus(
    ctx: &Ctx,
    kind: NoiseKind,
    clean: &ParallelCorpus,
    scorer: &Scorer,
    seed: u64,
) -> Result<ParallelCorpus> {
    let n = &ctx.cfg.noise;
    Ok(match kind {
        NoiseKind::MisScored => {
            let spec = NoiseGenSpec {
                k: n.k,
                length_tolerance: n.length_tolerance,
                overlap_threshold: n.overlap_threshold,
                seed,
            };
            generate_misaligned_corpus(clean, &spec, scorer)?.corpus
        }
        NoiseKind::MisRandom => shuffle_misalign(clean, seed)?,
        NoiseKind::Pool => match &n.pool {
            Some(p) => {
                let (pairs, _) = parse_parallel_tsv(p, ctx.cfg.corpus.scheme())?.into_parts();
                ParallelCorpus::new(pairs, None)?
            }
            None => {
                // Stand-in for raw crawl: unrelated sentences with shuffled targets.
                let task = synth_task(ctx.cfg, derive_seed(seed, "pool-task"))?
                    .ok_or_else(|| anyhow!("pool noise needs noise.pool"))?;
                let raw = shuffle_misalign(&task.generate()?, seed)?;
                ParallelCorpus::new(raw.into_parts().0, None)?
            }
        },
    })
}

fn stage_synth(ctx: &mut Ctx) -> Result<()> {
    let (train, test) = match &ctx.cfg.corpus {
        CorpusConfig::Synthetic { train_size, .. } => {
            let task = synth_task(ctx.cfg, ctx.seed("synth"))?.expect("synthetic corpus");
            let all = task.generate()?;
            let n = all.len();
            let train = all.select(&(0..*train_size).collect::<Vec<_>>());
            let test = all.select(&(*train_size..n).collect::<Vec<_>>());
            (train, test)
        }
        CorpusConfig::Files { train, test, scheme } => {
            let strip = |c: ParallelCorpus| ParallelCorpus::new(c.into_parts().0, None);
            (
                strip(parse_parallel_tsv(train, *scheme)?)?,
                strip(parse_parallel_tsv(test, *scheme)?)?,
            )
        }
    };
    ensure!(train.len() >= 2, "training corpus has fewer than 2 pairs");
    ensure!(!test.is_empty(), "test corpus is empty");
    write_parallel_tsv(&train, &ctx.output(TRAIN_TSV)?)?;
    write_parallel_tsv(&test, &ctx.output(TEST_TSV)?)?;
    Ok(())
}

fn stage_noise(ctx: &mut Ctx) -> Result<()> {
    let clean = ctx.corpus(TRAIN_TSV, Stage::Synth)?;
    let rate = ctx.cfg.noise.rate;
    let (noisy, mask) = if rate == 0.0 {
        let mask = NoiseMask::all_clean(&clean);
        let labels = mask.labels().to_vec();
        (clean.with_provenance(labels)?, mask)
    } else {
        let scorer = build_scorer(ctx, &clean)?;
        let noise = noise_corpus(ctx, ctx.cfg.noise.kind, &clean, &scorer, ctx.seed("noise/generate"))?;
        inject_noise(&clean, &noise, rate, ctx.seed("noise/inject"))?
    };
    write_parallel_tsv(&noisy, &ctx.output(NOISY_TSV)?)?;
    mask.save(&ctx.output(MASK_TSV)?)?;
    Ok(())
}

fn stage_filter_eval(ctx: &mut Ctx) -> Result<()> {
    let clean = ctx.corpus(TRAIN_TSV, Stage::Synth)?;
    let scorer = build_scorer(ctx, &clean)?;
    let name = scorer.kind().as_str();
    let root = ctx.seed("filter-eval");
    let mut rows = Vec::new();
    for &kind in &ctx.cfg.filter.noise_types {
        let noise = noise_corpus(ctx, kind, &clean, &scorer, derive_seed(root, kind.as_str()))?;
        for &ratio in &ctx.cfg.filter.ratios {
            let seed = derive_seed(root, &format!("{}/{ratio}", kind.as_str()));
            let (noisy, mask) = inject_noise(&clean, &noise, ratio, seed)?;
            let scored = score_corpus(&noisy, &scorer)?;
            rows.push(FilterEvalRow {
                scorer: name.to_owned(),
                noise_type: kind.as_str().to_owned(),
                ratio,
                accuracy: detection_accuracy(&scored, &mask)?,
            });
        }
    }
    write_filter_eval_csv(&rows, &ctx.output(FILTER_EVAL_CSV)?)?;

    let noisy = ctx.corpus(NOISY_TSV, Stage::Noise)?;
    let scored = score_corpus(&noisy, &scorer)?;
    let mut text = String::new();
    for (i, (p, s)) in noisy.pairs().iter().zip(&scored.scores).enumerate() {
        text.push_str(&format!("{}\t{}\t{}\t{s}\n", p.source.raw(), p.target.raw(), noisy.label(i)));
    }
    let path = ctx.output(SCORED_TSV)?;
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    if let Some(f) = ctx.cfg.filter.prefilter {
        let kept = prefilter_corpus(&scored, f)?;
        write_parallel_tsv(&kept, &ctx.output(PREFILTERED_TSV)?)?;
    }
    Ok(())
}

/// Longest tokenized sentence plus the end marker.
fn longest(corpora: &[&ParallelCorpus]) -> usize {
    corpora
        .iter()
        .flat_map(|c| c.pairs())
        .map(|p| p.source.len().max(p.target.len()))
        .max()
        .unwrap_or(0)
        + 1
}

fn stage_train(ctx: &mut Ctx) -> Result<()> {
    let data = if ctx.cfg.filter.prefilter.is_some() {
        ctx.corpus(PREFILTERED_TSV, Stage::FilterEval)?
    } else {
        ctx.corpus(NOISY_TSV, Stage::Noise)?
    };
    let test = ctx.corpus(TEST_TSV, Stage::Synth)?;
    let (sv, tv) = build_vocabs(&data, 1)?;
    sv.save(&ctx.output(SRC_VOCAB)?)?;
    tv.save(&ctx.output(TGT_VOCAB)?)?;
    let encoded = encode_corpus(&data, &sv, &tv);

    let m = ctx.cfg.model;
    let shape = ModelShape {
        src_vocab: sv.len(),
        tgt_vocab: tv.len(),
        d_model: m.d_model,
        d_ff: m.d_ff,
        enc_layers: m.enc_layers,
        dec_layers: m.dec_layers,
        // Room for greedy decoding up to twice the source length.
        max_len: 2 * longest(&[&data, &test]) + 4,
    };
    let init = ModelParams::init(shape, ctx.seed("model/init"))?;
    let t = ctx.cfg.train;
    let tcfg = TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        lr: t.lr,
        seed: ctx.seed("train"),
        token_stats: t.token_stats,
    };

    for obj in &ctx.cfg.objectives {
        let label = obj.label();
        let dir = run_dir(&label);
        let outcome = train(init.clone(), &encoded, obj, &tcfg).with_context(|| format!("objective {label}"))?;
        write_token_stats_csv(&outcome.records, &ctx.output(&format!("{dir}/token_stats.csv"))?)?;
        let (noisy, clean) = mean_el2n_by_noise(&outcome.records);
        let finite = |x: f64| x.is_finite().then_some(x);
        ctx.manifest.training.insert(
            label.clone(),
            TrainSummary {
                iterations: outcome.iterations,
                epoch_losses: outcome.epoch_losses.clone(),
                final_el2n_noisy: finite(noisy),
                final_el2n_clean: finite(clean),
            },
        );
        let ck = Checkpoint::new(outcome.params, outcome.optim, sv.fingerprint(), tv.fingerprint(), outcome.iterations);
        save_checkpoint(&ck, &ctx.output(&format!("{dir}/model.ckpt"))?)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub against: String,
    /// One-sided: the bootstrap probability that this system does not beat `against`.
    pub p_value: f64,
    pub threshold: f64,
    pub significant: bool,
    pub resamples: usize,
}

/// Contents of `eval_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub build_id: String,
    pub objective: String,
    pub objective_config: ObjectiveConfig,
    pub noise_kind: NoiseKind,
    pub noise_rate: f64,
    pub seed: u64,
    /// Held-out clean test set.
    pub test: Metrics,
    /// Sampled training pairs against their true references, per provenance.
    pub train_subsets: EvalReport,
    pub significance: Option<Significance>,
    pub config: ExperimentConfig,
}

impl ObjectiveReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Up to `per_label` training indices of each provenance label, ascending.
fn subset_sample(labels: &[nmtlab_core::Provenance], per_label: usize, seed: u64) -> Vec<usize> {
    let mut by_label: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_label.entry(*l).or_default().push(i);
    }
    let mut rng = stage_rng(seed, "subset");
    let mut picked = Vec::new();
    for (_, mut idx) in by_label {
        idx.shuffle(&mut rng);
        idx.truncate(per_label);
        picked.extend(idx);
    }
    picked.sort_unstable();
    picked
}

fn stage_eval(ctx: &mut Ctx) -> Result<()> {
    let scheme = ctx.cfg.corpus.scheme();
    let test = ctx.corpus(TEST_TSV, Stage::Synth)?;
    let noisy = ctx.corpus(NOISY_TSV, Stage::Noise)?;
    let mask = ctx.mask()?;
    let sv = Vocab::load(&ctx.input(SRC_VOCAB, Stage::Train)?)?;
    let tv = Vocab::load(&ctx.input(TGT_VOCAB, Stage::Train)?)?;

    let picked = subset_sample(mask.labels(), ctx.cfg.eval.subset_per_label, ctx.seed("eval/subset"));
    let refs_all = true_references(&noisy, &mask)?;
    let sub_refs: Vec<Option<Sentence>> = picked.iter().map(|&i| refs_all[i].clone()).collect();
    let sub_mask = NoiseMask::new(
        picked.iter().map(|&i| mask.labels()[i]).collect(),
        picked.iter().map(|&i| mask.true_targets()[i].clone()).collect(),
    )?;
    let sub_src: Vec<Sentence> = picked.iter().map(|&i| noisy.pairs()[i].source.clone()).collect();
    let test_src: Vec<Sentence> = test.sources().cloned().collect();
    let test_refs: Vec<Sentence> = test.targets().cloned().collect();

    let mut hyps: BTreeMap<String, Vec<Sentence>> = BTreeMap::new();
    let mut subsets = BTreeMap::new();
    for obj in &ctx.cfg.objectives {
        let label = obj.label();
        let ck = load_checkpoint(&ctx.input(&format!("{}/model.ckpt", run_dir(&label)), Stage::Train)?)?;
        ensure!(
            ck.meta.src_vocab_hash == sv.fingerprint() && ck.meta.tgt_vocab_hash == tv.fingerprint(),
            "checkpoint for {label} was trained with different vocabularies"
        );
        let h = translate(&ck.params, &test_src, &sv, &tv, scheme)?;
        let text: String = h.iter().map(|s| format!("{}\n", s.raw())).collect();
        let path = ctx.output(&format!("{}/test_hyps.txt", run_dir(&label)))?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        hyps.insert(label.clone(), h);
        let sub_hyps = translate(&ck.params, &sub_src, &sv, &tv, scheme)?;
        subsets.insert(label, subset_eval(&sub_hyps, &sub_refs, &sub_mask)?);
    }

    let baseline = ctx
        .cfg
        .objectives
        .iter()
        .find(|o| o.kind == nmtlab_core::objectives::ObjectiveKind::Baseline)
        .map(ObjectiveConfig::label);
    let ev = &ctx.cfg.eval;
    for obj in &ctx.cfg.objectives {
        let label = obj.label();
        let h = &hyps[&label];
        let significance = match &baseline {
            Some(b) if *b != label => Some({
                let p = paired_bootstrap(h, &hyps[b], &test_refs, ev.bootstrap_resamples, ctx.seed("eval/bootstrap"))?;
                Significance {
                    against: b.clone(),
                    p_value: p,
                    threshold: ev.significance,
                    significant: p < ev.significance,
                    resamples: ev.bootstrap_resamples,
                }
            }),
            _ => None,
        };
        let report = ObjectiveReport {
            build_id: BUILD_ID.to_owned(),
            objective: label.clone(),
            objective_config: *obj,
            noise_kind: ctx.cfg.noise.kind,
            noise_rate: ctx.cfg.noise.rate,
            seed: ctx.cfg.seed,
            test: Metrics::compute(h, &test_refs)?,
            train_subsets: subsets.remove(&label).expect("evaluated above"),
            significance,
            config: ctx.cfg.clone(),
        };
        write_atomic(&ctx.output(&eval_report_path(&label))?, &to_json(&report)?)?;
    }
    Ok(())
}

fn stage_stats(ctx: &mut Ctx) -> Result<()> {
    let bins = ctx.cfg.eval.histogram_bins;
    for obj in &ctx.cfg.objectives {
        let dir = run_dir(&obj.label());
        let records = read_token_stats_csv(&ctx.input(&format!("{dir}/token_stats.csv"), Stage::Train)?)?;
        let Some(last) = records.iter().map(|r| r.epoch).max() else {
            continue;
        };
        let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in records.iter().filter(|r| r.epoch == last) {
            let g = groups.entry(r.provenance.as_str().to_owned()).or_default();
            g.0.push(r.loss);
            g.1.push(r.el2n);
        }
        let max_loss = records.iter().map(|r| r.loss).fold(1.0f64, f64::max).ceil();
        let mut series = Vec::new();
        for (group, (loss, el2n)) in &groups {
            for (metric, values, range) in [
                ("loss", loss, (0.0, max_loss)),
                ("el2n", el2n, (0.0, std::f64::consts::SQRT_2)),
            ] {
                series.push(HistogramSeries {
                    metric: metric.to_owned(),
                    group: group.clone(),
                    range,
                    counts: histogram(values, bins, range)?,
                });
            }
        }
        write_histograms_csv(&series, &ctx.output(&format!("{dir}/histograms.csv"))?)?;
    }
    Ok(())
}

fn dispatch(stage: Stage, ctx: &mut Ctx) -> Result<()> {
    match stage {
        Stage::Synth => stage_synth(ctx),
        Stage::Noise => stage_noise(ctx),
        Stage::FilterEval => stage_filter_eval(ctx),
        Stage::Train => stage_train(ctx),
        Stage::Eval => stage_eval(ctx),
        Stage::Stats => stage_stats(ctx),
    }
}

fn execute(stage: Stage, cfg: &ExperimentConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let started = now();
    let result = dispatch(stage, &mut Ctx { cfg, out, manifest });
    manifest.record_stage(StageRecord {
        stage: stage.as_str().to_owned(),
        ok: result.is_ok(),
        error: result.as_ref().err().map(|e| format!("{e:#}")),
        started,
        finished: now(),
    });
    result.map_err(|e| anyhow!("[{}] {e:#}", stage.as_str()))
}

fn refresh_status(cfg: &ExperimentConfig, manifest: &mut RunManifest) {
    let done = cfg
        .stages
        .iter()
        .all(|s| manifest.stages.iter().any(|r| r.stage == s.as_str() && r.ok));
    manifest.status = if done { RunStatus::Complete } else { RunStatus::Partial };
    manifest.finished = Some(now());
}

/// Deletes the files an earlier manifest in `out` claims.
fn clear_previous(out: &Path) -> Result<()> {
    if let Ok(old) = RunManifest::load(out) {
        for a in &old.artifacts {
            let p = out.join(a);
            if p.exists() {
                fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    let m = out.join(MANIFEST_FILE);
    if m.exists() {
        fs::remove_file(&m).with_context(|| format!("removing {}", m.display()))?;
    }
    Ok(())
}

/// Runs every configured stage into `out`. Refuses a non-empty directory
/// unless `force` is set. The manifest is written even when a stage fails.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<RunManifest> {
    cfg.validate()?;
    let occupied = out.exists()
        && fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
    if occupied {
        ensure!(force, "{} is not empty; pass --force to overwrite", out.display());
        clear_previous(out)?;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut cfg = cfg.clone();
    cfg.out_dir = None;
    let mut manifest = RunManifest::new(cfg.clone(), derived_seeds(cfg.seed));
    let mut result = Ok(());
    for stage in Stage::ALL {
        if cfg.runs(stage) {
            result = execute(stage, &cfg, out, &mut manifest);
            if result.is_err() {
                break;
            }
        }
    }
    refresh_status(&cfg, &mut manifest);
    manifest.save(out)?;
    result.map(|()| manifest)
}

/// Runs one stage against the artifacts already in `out`. Without `cfg` the
/// snapshot in the existing manifest is used.
pub fn run_stage(stage: Stage, cfg: Option<&ExperimentConfig>, out: &Path, force: bool) -> Result<RunManifest> {
    let existing = out.join(MANIFEST_FILE).exists().then(|| RunManifest::load(out)).transpose()?;
    let cfg = match (cfg, &existing) {
        (Some(c), Some(m)) => {
            let mut c = c.clone();
            c.out_dir = None;
            ensure!(
                force || c == m.config,
                "config differs from the snapshot in {}; pass --force to replace it",
                out.display()
            );
            c
        }
        (Some(c), None) => {
            let mut c = c.clone();
            c.out_dir = None;
            c
        }
        (None, Some(m)) => m.config.clone(),
        (None, None) => bail!("no --config given and no manifest in {}", out.display()),
    };
    cfg.validate()?;
    let mut manifest = match existing {
        Some(mut m) => {
            m.config = cfg.clone();
            m.seeds = derived_seeds(cfg.seed);
            m
        }
        None => RunManifest::new(cfg.clone(), derived_seeds(cfg.seed)),
    };
    let already = manifest.stages.iter().any(|r| r.stage == stage.as_str() && r.ok);
    ensure!(
        force || !already,
        "stage {} already completed in {}; pass --force to rerun it",
        stage.as_str(),
        out.display()
    );
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let result = execute(stage, &cfg, out, &mut manifest);
    refresh_status(&cfg, &mut manifest);
    manifest.save(out)?;
    result.map(|()| manifest)
}
