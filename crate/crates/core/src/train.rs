//! Mini-batch training and batch translation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, Provenance, Sentence, TokenId, TokenScheme, Vocab, EOS};
use crate::error::{Error, Result};
use crate::model::{optimizer_step, LrSchedule, ModelParams, OptimState};
use crate::objectives::{batch_objective, ObjectiveConfig, TokenRecord};
use crate::rng::stage_rng;

/// Which epochs emit per-token records.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsPolicy {
    None,
    #[default]
    Final,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub token_stats: StatsPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: LrSchedule {
                peak: 2e-3,
                warmup: 200,
            },
            seed: 0,
            token_stats: StatsPolicy::Final,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidSpec("epochs and batch_size must be positive".into()));
        }
        if !(self.lr.peak > 0.0 && self.lr.peak.is_finite()) {
            return Err(Error::InvalidSpec(format!("learning rate {} must be positive", self.lr.peak)));
        }
        Ok(())
    }

    /// Total optimizer steps `T` for a corpus of `n` pairs.
    pub fn total_iterations(&self, n: usize) -> u64 {
        (self.epochs * n.div_ceil(self.batch_size)) as u64
    }
}

/// A pair as model inputs: both sides end with `EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
    pub provenance: Provenance,
}

pub fn encode_sentence(sentence: &Sentence, vocab: &Vocab) -> Vec<TokenId> {
    let mut ids = vocab.encode(sentence.tokens());
    ids.push(EOS);
    ids
}

pub fn encode_corpus(corpus: &ParallelCorpus, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Vec<EncodedPair> {
    corpus
        .pairs()
        .iter()
        .enumerate()
        .map(|(i, p)| EncodedPair {
            src: encode_sentence(&p.source, src_vocab),
            tgt: encode_sentence(&p.target, tgt_vocab),
            provenance: corpus.label(i),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optim: OptimState,
    /// Batch loss at every iteration.
    pub losses: Vec<f64>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub records: Vec<TokenRecord>,
    pub iterations: u64,
}

/// Trains `params` on `data`. The objective's horizon is set to the run's
/// total iteration count.
pub fn train(
    mut params: ModelParams,
    data: &[EncodedPair],
    objective: &ObjectiveConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let total = cfg.total_iterations(data.len());
    let mut objective = *objective;
    objective.schedule.total_iters = total;
    objective.validate()?;

    let mut optim = OptimState::new(params.len(), cfg.lr.at(1));
    let mut losses = Vec::with_capacity(total as usize);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut records = Vec::new();
    let mut t = 0u64;
    let mut grad = params.zero_grad();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = stage_rng(cfg.seed, &format!("train/shuffle#{epoch}"));
        order.shuffle(&mut rng);
        let record = match cfg.token_stats {
            StatsPolicy::None => false,
            StatsPolicy::Final => epoch + 1 == cfg.epochs,
            StatsPolicy::All => true,
        };
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut logits = Vec::with_capacity(batch.len());
            let mut caches = Vec::with_capacity(batch.len());
            for &i in batch {
                let (lg, c) = params.forward_train(&data[i].src, &data[i].tgt)?;
                logits.push(lg);
                caches.push(c);
            }
            let targets: Vec<&[TokenId]> = batch.iter().map(|&i| data[i].tgt.as_slice()).collect();
            let out = batch_objective(&objective, t, &logits, &targets)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "batch loss",
                    position: t as usize,
                });
            }
            grad.fill(0.0);
            for (c, dl) in caches.iter().zip(&out.dlogits) {
                params.backward(c, dl, &mut grad)?;
            }
            optim.lr = cfg.lr.at(t + 1);
            optimizer_step(params.values_mut(), &grad, &mut optim)?;

            if record {
                for (&i, toks) in batch.iter().zip(&out.tokens) {
                    for (position, s) in toks.iter().enumerate() {
                        records.push(TokenRecord {
                            epoch,
                            pair_index: i,
                            position,
                            provenance: data[i].provenance,
                            loss: s.loss,
                            el2n: s.el2n,
                        });
                    }
                }
            }
            losses.push(out.loss);
            epoch_sum += out.loss;
            batches += 1;
            t += 1;
        }
        epoch_losses.push(epoch_sum / batches as f64);
    }
    Ok(TrainOutcome {
        params,
        optim,
        losses,
        epoch_losses,
        records,
        iterations: t,
    })
}

/// Greedy translations of `sources`, detokenized with the target vocabulary.
pub fn translate(
    params: &ModelParams,
    sources: &[Sentence],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    scheme: TokenScheme,
) -> Result<Vec<Sentence>> {
    sources
        .iter()
        .map(|s| {
            let src = encode_sentence(s, src_vocab);
            let max_len = 2 * src.len() + 4;
            let ids = params.decode_greedy(&src, max_len)?;
            Ok(Sentence::from_tokens(tgt_vocab.decode(&ids), scheme))
        })
        .collect()
}

/// Mean el2n over tokens of noisy pairs and of clean pairs, in that order.
pub fn mean_el2n_by_noise(records: &[TokenRecord]) -> (f64, f64) {
    let mean = |noisy: bool| {
        let v: Vec<f64> = records
            .iter()
            .filter(|r| r.provenance.is_noisy() == noisy)
            .map(|r| r.el2n)
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    (mean(true), mean(false))
}
