//! Training objectives: cross-entropy, loss/el2n truncation and
//! self-correction towards the model's own sharpened prediction.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Provenance, TokenId};
use crate::error::{Error, Result};
use crate::model::{log_softmax, softmax_in_place, Logits, ProbDist};

pub fn el2n(p: &ProbDist, y: TokenId) -> Result<f64> {
    if y >= p.len() {
        return Err(Error::OutOfVocab {
            id: y,
            vocab_size: p.len(),
        });
    }
    Ok(el2n_raw(p.as_slice(), y))
}

fn el2n_raw(p: &[f64], y: TokenId) -> f64 {
    p.iter()
        .enumerate()
        .map(|(i, &pi)| {
            let diff = if i == y { pi - 1.0 } else { pi };
            diff * diff
        })
        .sum::<f64>()
        .sqrt()
}

/// `H(p) / ln |V|`, with `0 ln 0 = 0`. A one-entry distribution has entropy 0.
pub fn normalized_entropy(p: &ProbDist) -> f64 {
    entropy_raw(p.as_slice())
}

fn entropy_raw(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return 0.0;
    }
    let h: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    (h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

/// `1 / (1 + exp(beta * (t/T + alpha)))`.
pub fn time_schedule(t: f64, total: f64, alpha: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (beta * (t / total + alpha)).exp())
}

/// `tau_hi - (tau_hi - tau_lo) * time`.
pub fn dynamic_tau(time: f64, tau_hi: f64, tau_lo: f64) -> f64 {
    tau_hi - (tau_hi - tau_lo) * time
}

/// `(1 - lambda) * q + lambda * p_bar`.
pub fn corrected_target(q: &ProbDist, p_bar: &ProbDist, lambda: f64) -> Result<ProbDist> {
    if q.len() != p_bar.len() {
        return Err(Error::LengthMismatch {
            left: q.len(),
            right: p_bar.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(ProbDist::from_raw(
        q.as_slice()
            .iter()
            .zip(p_bar.as_slice())
            .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
            .collect(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TauPolicy {
    Fixed { tau: f64 },
    Dynamic { hi: f64, lo: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub alpha: f64,
    pub beta: f64,
    pub total_iters: u64,
    /// First iteration at which truncation applies; scaled from the horizon when unset.
    pub start_iter: Option<u64>,
    pub tau: TauPolicy,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            alpha: -0.6,
            beta: -6.0,
            total_iters: 1,
            start_iter: None,
            tau: TauPolicy::Dynamic { hi: 1.0, lo: 0.5 },
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.total_iters == 0 {
            return bad("total_iters must be at least 1".into());
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return bad("alpha and beta must be finite".into());
        }
        match self.tau {
            TauPolicy::Fixed { tau } if !(tau > 0.0 && tau.is_finite()) => {
                bad(format!("fixed tau must be positive, got {tau}"))
            }
            TauPolicy::Dynamic { hi, lo } if !(lo > 0.0 && hi >= lo && hi.is_finite()) => {
                bad(format!("dynamic tau needs hi >= lo > 0, got hi={hi} lo={lo}"))
            }
            _ => Ok(()),
        }
    }

    pub fn time(&self, t: u64) -> f64 {
        time_schedule(t as f64, self.total_iters as f64, self.alpha, self.beta)
    }

    pub fn tau_at(&self, t: u64) -> f64 {
        match self.tau {
            TauPolicy::Fixed { tau } => tau,
            TauPolicy::Dynamic { hi, lo } => dynamic_tau(self.time(t), hi, lo),
        }
    }

    pub fn truncation_start(&self) -> u64 {
        self.start_iter
            .unwrap_or_else(|| (1500.0 / 500_000.0 * self.total_iters as f64).round() as u64)
    }
}

/// `(1 - H_norm(p)) * Time(t)`, clamped to `[0, 1]`.
pub fn lambda_weight(p: &ProbDist, t: u64, schedule: &ScheduleParams) -> f64 {
    lambda_raw(p.as_slice(), schedule.time(t))
}

fn lambda_raw(p: &[f64], time: f64) -> f64 {
    ((1.0 - entropy_raw(p)) * time).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Baseline,
    LossTrunc,
    El2nTrunc,
    SelfCorrect,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::LossTrunc => "loss-trunc",
            Self::El2nTrunc => "el2n-trunc",
            Self::SelfCorrect => "self-correct",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub trunc_fraction: f64,
    pub schedule: ScheduleParams,
    /// Replaces the entropy/time weight with a constant.
    pub lambda_override: Option<f64>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Baseline,
            trunc_fraction: 0.1,
            schedule: ScheduleParams::default(),
            lambda_override: None,
        }
    }
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind, schedule: ScheduleParams) -> Self {
        Self {
            kind,
            schedule,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let truncating = matches!(self.kind, ObjectiveKind::LossTrunc | ObjectiveKind::El2nTrunc);
        if truncating && !(self.trunc_fraction > 0.0 && self.trunc_fraction < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "truncation fraction {} outside (0, 1)",
                self.trunc_fraction
            )));
        }
        if let Some(l) = self.lambda_override {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::InvalidSpec(format!("lambda override {l} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// A short label distinguishing fixed and dynamic temperature runs.
    pub fn label(&self) -> String {
        match (self.kind, self.schedule.tau) {
            (ObjectiveKind::SelfCorrect, TauPolicy::Fixed { .. }) => "self-correct-fixed".into(),
            (ObjectiveKind::SelfCorrect, TauPolicy::Dynamic { .. }) => "self-correct-dynamic".into(),
            (kind, _) => kind.as_str().into(),
        }
    }
}

/// Number of tokens truncation removes from a batch of `n`.
pub fn truncation_count(fraction: f64, n: usize) -> usize {
    // The small slack keeps products like 0.1 * 30 from rounding up past 3.
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Marks the `ceil(c * n)` highest values as dropped, earlier positions
/// winning ties. Returns the keep mask.
fn truncation_mask(stat: &[f64], fraction: f64) -> Vec<bool> {
    let k = truncation_count(fraction, stat.len());
    let mut order: Vec<usize> = (0..stat.len()).collect();
    order.sort_by(|&a, &b| stat[b].total_cmp(&stat[a]).then(a.cmp(&b)));
    let mut keep = vec![true; stat.len()];
    for &i in order.iter().take(k) {
        keep[i] = false;
    }
    keep
}

#[derive(Clone, Debug, PartialEq)]
pub struct Truncation {
    pub loss: f64,
    pub keep: Vec<bool>,
}

/// Mean loss after zeroing the top fraction of tokens by the statistic the
/// objective ranks on. Before the start iteration nothing is dropped.
pub fn truncated_loss(
    losses: &[f64],
    el2n: &[f64],
    cfg: &ObjectiveConfig,
    t: u64,
) -> Result<Truncation> {
    if losses.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if losses.len() != el2n.len() {
        return Err(Error::LengthMismatch {
            left: losses.len(),
            right: el2n.len(),
        });
    }
    let stat = match cfg.kind {
        ObjectiveKind::LossTrunc => losses,
        ObjectiveKind::El2nTrunc => el2n,
        other => {
            return Err(Error::InvalidArgument(format!(
                "{} is not a truncation objective",
                other.as_str()
            )))
        }
    };
    let keep = if t < cfg.schedule.truncation_start() {
        vec![true; losses.len()]
    } else {
        truncation_mask(stat, cfg.trunc_fraction)
    };
    Ok(Truncation {
        loss: masked_mean(losses, &keep),
        keep,
    })
}

fn masked_mean(values: &[f64], keep: &[bool]) -> f64 {
    let kept = keep.iter().filter(|&&k| k).count();
    if kept == 0 {
        return 0.0;
    }
    values
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(v, _)| v)
        .sum::<f64>()
        / kept as f64
}

/// Per-token diagnostics: cross-entropy against the reference, el2n, the
/// self-correction weight in effect, and whether the token was kept.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenStat {
    pub loss: f64,
    pub el2n: f64,
    pub lambda: f64,
    pub kept: bool,
}

/// Batch loss, its gradient with respect to every logit, and token stats.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchObjective {
    pub loss: f64,
    pub dlogits: Vec<Vec<f64>>,
    pub tokens: Vec<Vec<TokenStat>>,
    pub masked: usize,
}

struct Token {
    log_p: Vec<f64>,
    p: Vec<f64>,
    ce: f64,
    el2n: f64,
}

/// Evaluates the configured objective on a batch at iteration `t`.
///
/// Every objective is a weighted soft cross-entropy `-Σ q̄ log p` against a
/// target held constant for differentiation, averaged over kept tokens.
pub fn batch_objective(
    cfg: &ObjectiveConfig,
    t: u64,
    logits: &[Logits],
    targets: &[&[TokenId]],
) -> Result<BatchObjective> {
    if logits.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: logits.len(),
            right: targets.len(),
        });
    }
    let mut tokens = Vec::new();
    let mut flat = 0;
    for (lg, tg) in logits.iter().zip(targets) {
        if lg.positions != tg.len() {
            return Err(Error::LengthMismatch {
                left: lg.positions,
                right: tg.len(),
            });
        }
        for (row, &y) in lg.rows().zip(tg.iter()) {
            if y >= lg.vocab {
                return Err(Error::OutOfVocab {
                    id: y,
                    vocab_size: lg.vocab,
                });
            }
            if row.iter().any(|z| !z.is_finite()) {
                return Err(Error::NonFinite {
                    what: "logit",
                    position: flat,
                });
            }
            let log_p = log_softmax(row);
            let p: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
            let ce = -log_p[y];
            let el2n = el2n_raw(&p, y);
            tokens.push(Token { log_p, p, ce, el2n });
            flat += 1;
        }
    }
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }

    let keep = match cfg.kind {
        ObjectiveKind::LossTrunc | ObjectiveKind::El2nTrunc => {
            let losses: Vec<f64> = tokens.iter().map(|k| k.ce).collect();
            let el2n: Vec<f64> = tokens.iter().map(|k| k.el2n).collect();
            truncated_loss(&losses, &el2n, cfg, t)?.keep
        }
        _ => vec![true; tokens.len()],
    };
    let kept = keep.iter().filter(|&&k| k).count();
    let scale = if kept == 0 { 0.0 } else { 1.0 / kept as f64 };
    let (time, tau) = (cfg.schedule.time(t), cfg.schedule.tau_at(t));

    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(logits.len());
    let mut stats = Vec::with_capacity(logits.len());
    let mut idx = 0;
    for (lg, tg) in logits.iter().zip(targets) {
        let v = lg.vocab;
        let mut dl = vec![0.0; lg.data.len()];
        let mut st = Vec::with_capacity(tg.len());
        for (pos, (row, &y)) in lg.rows().zip(tg.iter()).enumerate() {
            let tok = &tokens[idx];
            let lambda = match cfg.kind {
                ObjectiveKind::SelfCorrect => cfg
                    .lambda_override
                    .unwrap_or_else(|| lambda_raw(&tok.p, time)),
                _ => 0.0,
            };
            let mut q = vec![0.0; v];
            q[y] = 1.0;
            if cfg.kind == ObjectiveKind::SelfCorrect {
                let mut p_bar = row.to_vec();
                softmax_in_place(&mut p_bar, tau);
                for (qi, pb) in q.iter_mut().zip(&p_bar) {
                    *qi = (1.0 - lambda) * *qi + lambda * pb;
                }
            }
            if keep[idx] {
                let tok_loss: f64 = -q.iter().zip(&tok.log_p).map(|(a, b)| a * b).sum::<f64>();
                if !tok_loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: "token loss",
                        position: idx,
                    });
                }
                loss += tok_loss;
                let g = &mut dl[pos * v..(pos + 1) * v];
                for ((gi, pi), qi) in g.iter_mut().zip(&tok.p).zip(&q) {
                    *gi = (pi - qi) * scale;
                }
            }
            st.push(TokenStat {
                loss: tok.ce,
                el2n: tok.el2n,
                lambda,
                kept: keep[idx],
            });
            idx += 1;
        }
        dlogits.push(dl);
        stats.push(st);
    }
    Ok(BatchObjective {
        loss: loss * scale,
        dlogits,
        tokens: stats,
        masked: keep.len() - kept,
    })
}

pub fn baseline_ce_loss(logits: &[Logits], targets: &[&[TokenId]]) -> Result<BatchObjective> {
    batch_objective(&ObjectiveConfig::default(), 0, logits, targets)
}

pub fn self_correction_loss(
    logits: &[Logits],
    targets: &[&[TokenId]],
    t: u64,
    schedule: &ScheduleParams,
) -> Result<BatchObjective> {
    let cfg = ObjectiveConfig::new(ObjectiveKind::SelfCorrect, *schedule);
    batch_objective(&cfg, t, logits, targets)
}

/// One row of `token_stats.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRecord {
    pub epoch: usize,
    pub pair_index: usize,
    pub position: usize,
    pub provenance: Provenance,
    pub loss: f64,
    pub el2n: f64,
}

pub fn write_token_stats_csv(records: &[TokenRecord], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,pair_idx,position,provenance,loss,el2n\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.pair_index, r.position, r.provenance, r.loss, r.el2n
        )
        .expect("writing to a String");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_token_stats_csv(path: &Path) -> Result<Vec<TokenRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, message: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(malformed(i + 1, format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| malformed(i + 1, e.to_string()));
        let int = |s: &str| s.parse::<usize>().map_err(|e| malformed(i + 1, e.to_string()));
        out.push(TokenRecord {
            epoch: int(f[0])?,
            pair_index: int(f[1])?,
            position: int(f[2])?,
            provenance: f[3].parse().map_err(|e: Error| malformed(i + 1, e.to_string()))?,
            loss: num(f[4])?,
            el2n: num(f[5])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pd(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    fn logits(rows: &[&[f64]]) -> Logits {
        Logits {
            positions: rows.len(),
            vocab: rows[0].len(),
            data: rows.concat(),
        }
    }

    #[test]
    fn el2n_examples() {
        assert_eq!(el2n(&pd(&[0.0, 1.0, 0.0]), 1).unwrap(), 0.0);
        assert!((el2n(&pd(&[0.25; 4]), 0).unwrap() - 0.75f64.sqrt()).abs() < 1e-12);
        assert!((el2n(&pd(&[1.0, 0.0]), 1).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert!(el2n(&pd(&[1.0, 0.0]), 2).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((normalized_entropy(&pd(&[0.25; 4])) - 1.0).abs() < 1e-12);
        assert_eq!(normalized_entropy(&pd(&[0.0, 1.0, 0.0])), 0.0);
        assert!((normalized_entropy(&pd(&[0.5, 0.5, 0.0, 0.0])) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn time_examples() {
        assert!((time_schedule(60.0, 100.0, -0.6, -6.0) - 0.5).abs() < 1e-12);
        assert!((time_schedule(0.0, 100.0, -0.6, -6.0) - 0.0266).abs() < 5e-5);
        assert!((time_schedule(100.0, 100.0, -0.6, -6.0) - 0.9168).abs() < 5e-5);
    }

    #[test]
    fn lambda_and_tau_examples() {
        let s = ScheduleParams {
            total_iters: 100,
            ..ScheduleParams::default()
        };
        assert!((lambda_weight(&pd(&[0.0, 1.0]), 60, &s) - 0.5).abs() < 1e-12);
        assert_eq!(lambda_weight(&pd(&[0.25; 4]), 80, &s), 0.0);
        let l = lambda_weight(&pd(&[0.5, 0.5, 0.0, 0.0]), 100, &s);
        assert!((l - 0.4584).abs() < 5e-5);
        assert_eq!(dynamic_tau(0.0, 1.0, 0.5), 1.0);
        assert_eq!(dynamic_tau(0.5, 1.0, 0.5), 0.75);
        assert!((s.tau_at(100) - 0.5416).abs() < 5e-5);
    }

    #[test]
    fn corrected_target_examples() {
        let q = ProbDist::one_hot(3, 2).unwrap();
        let p = pd(&[0.1, 0.2, 0.7]);
        assert_eq!(corrected_target(&q, &p, 0.0).unwrap(), q);
        assert_eq!(corrected_target(&q, &p, 1.0).unwrap(), p);
        let m = corrected_target(&q, &p, 0.5).unwrap();
        for (a, b) in m.as_slice().iter().zip([0.05, 0.10, 0.85]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(corrected_target(&q, &p, 1.5).is_err());
    }

    #[test]
    fn baseline_examples() {
        let uniform = logits(&[&[0.0; 5], &[0.0; 5]]);
        let out = baseline_ce_loss(&[uniform], &[&[1, 3]]).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
        let sharp = logits(&[&[0.0, 60.0, 0.0]]);
        assert!(baseline_ce_loss(&[sharp], &[&[1]]).unwrap().loss < 1e-20);
    }

    #[test]
    fn zero_lambda_is_baseline_bit_for_bit() {
        let lg = logits(&[&[0.3, -1.2, 2.0, 0.1], &[1.5, 0.2, -0.4, 0.9]]);
        let base = baseline_ce_loss(&[lg.clone()], &[&[2, 0]]).unwrap();
        let cfg = ObjectiveConfig {
            kind: ObjectiveKind::SelfCorrect,
            lambda_override: Some(0.0),
            ..ObjectiveConfig::default()
        };
        let sc = batch_objective(&cfg, 0, &[lg], &[&[2, 0]]).unwrap();
        assert_eq!(base.loss.to_bits(), sc.loss.to_bits());
        assert_eq!(base.dlogits, sc.dlogits);
    }

    #[test]
    fn full_self_trust_gives_entropy() {
        let row = [0.3, -1.2, 2.0, 0.1];
        let cfg = ObjectiveConfig {
            kind: ObjectiveKind::SelfCorrect,
            lambda_override: Some(1.0),
            schedule: ScheduleParams {
                tau: TauPolicy::Fixed { tau: 1.0 },
                ..ScheduleParams::default()
            },
            ..ObjectiveConfig::default()
        };
        let out = batch_objective(&cfg, 0, &[logits(&[&row])], &[&[0]]).unwrap();
        let p = crate::model::softmax_with_temperature(&row, 1.0).unwrap();
        let h: f64 = p.as_slice().iter().map(|x| -x * x.ln()).sum();
        assert!((out.loss - h).abs() < 1e-12);
        assert!(out.dlogits[0].iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn composed_self_correction_value() {
        // Three tokens at t/T = 0.6 with a fixed temperature of 0.5,
        // recomposed from the per-operation formulas.
        let rows: [[f64; 3]; 3] = [[2.0, 0.5, -1.0], [0.0, 0.0, 0.0], [-0.3, 1.7, 0.4]];
        let ys = [0usize, 2, 1];
        let sched = ScheduleParams {
            total_iters: 10,
            tau: TauPolicy::Fixed { tau: 0.5 },
            ..ScheduleParams::default()
        };
        let mut expected = 0.0;
        for (row, &y) in rows.iter().zip(&ys) {
            let p = crate::model::softmax_with_temperature(row, 1.0).unwrap();
            let pb = crate::model::softmax_with_temperature(row, 0.5).unwrap();
            let lambda = (1.0 - normalized_entropy(&p)) * 0.5;
            let q = corrected_target(&ProbDist::one_hot(3, y).unwrap(), &pb, lambda).unwrap();
            expected -= q
                .as_slice()
                .iter()
                .zip(p.as_slice())
                .map(|(a, b)| a * b.ln())
                .sum::<f64>();
        }
        expected /= 3.0;
        let lg: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let out = self_correction_loss(&[logits(&lg)], &[&ys], 6, &sched).unwrap();
        assert!((out.loss - expected).abs() < 1e-12);
    }

    fn trunc_cfg(kind: ObjectiveKind, c: f64, start: u64) -> ObjectiveConfig {
        ObjectiveConfig {
            kind,
            trunc_fraction: c,
            schedule: ScheduleParams {
                total_iters: 1000,
                start_iter: Some(start),
                ..ScheduleParams::default()
            },
            ..ObjectiveConfig::default()
        }
    }

    #[test]
    fn truncation_examples() {
        let losses = [1.0, 2.0, 3.0, 4.0, 5.0];
        let cfg = trunc_cfg(ObjectiveKind::LossTrunc, 0.2, 10);
        let before = truncated_loss(&losses, &losses, &cfg, 9).unwrap();
        assert_eq!(before.loss, 3.0);
        let after = truncated_loss(&losses, &losses, &cfg, 10).unwrap();
        assert_eq!(after.keep, vec![true, true, true, true, false]);
        assert_eq!(after.loss, 2.5);

        let ten: Vec<f64> = (0..10).map(|i| (i % 3) as f64).collect();
        let out = truncated_loss(&ten, &ten, &cfg, 50).unwrap();
        assert_eq!(out.keep.iter().filter(|k| !**k).count(), 2);
        // Ties on value 2.0 at positions 2, 5, 8: the earlier two go.
        assert!(!out.keep[2] && !out.keep[5] && out.keep[8]);

        let el2n_cfg = trunc_cfg(ObjectiveKind::El2nTrunc, 0.2, 0);
        let ranked = truncated_loss(&losses, &[5.0, 1.0, 1.0, 1.0, 1.0], &el2n_cfg, 0).unwrap();
        assert!(!ranked.keep[0]);
        assert!(truncated_loss(&[], &[], &cfg, 0).is_err());
    }

    #[test]
    fn default_truncation_start_scales_with_horizon() {
        let mut s = ScheduleParams::default();
        s.total_iters = 500_000;
        assert_eq!(s.truncation_start(), 1500);
        s.total_iters = 10_000;
        assert_eq!(s.truncation_start(), 30);
    }

    #[test]
    fn fully_masked_batch_is_zero() {
        let cfg = trunc_cfg(ObjectiveKind::LossTrunc, 0.5, 0);
        let out = batch_objective(&cfg, 0, &[logits(&[&[0.1, 0.2]])], &[&[0]]).unwrap();
        assert_eq!(out.masked, 1);
        assert_eq!(out.loss, 0.0);
        assert!(out.dlogits[0].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn non_finite_logit_is_reported() {
        let bad = logits(&[&[0.0, 0.0], &[f64::NAN, 0.0]]);
        assert!(matches!(
            baseline_ce_loss(&[bad], &[&[0, 1]]),
            Err(Error::NonFinite { position: 1, .. })
        ));
    }

    #[test]
    fn token_stats_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("token_stats.csv");
        let recs = vec![TokenRecord {
            epoch: 3,
            pair_index: 17,
            position: 2,
            provenance: Provenance::MisScored,
            loss: 1.25,
            el2n: 0.5,
        }];
        write_token_stats_csv(&recs, &path).unwrap();
        assert_eq!(read_token_stats_csv(&path).unwrap(), recs);
    }

    fn logit_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-8.0f64..8.0, 2..12)
    }

    proptest! {
        #[test]
        fn ranges_hold(z in logit_vec(), y in 0usize..12, t in 0u64..=1000, lambda in 0.0f64..=1.0) {
            let y = y % z.len();
            let p = crate::model::softmax_with_temperature(&z, 1.0).unwrap();
            let e = el2n(&p, y).unwrap();
            prop_assert!((0.0..=2f64.sqrt() + 1e-12).contains(&e));
            let s = ScheduleParams { total_iters: 1000, ..ScheduleParams::default() };
            let l = lambda_weight(&p, t, &s);
            prop_assert!((0.0..=1.0).contains(&l));
            let time = s.time(t);
            prop_assert!(time > 0.0 && time < 1.0);
            let pb = crate::model::softmax_with_temperature(&z, 0.5).unwrap();
            let q = corrected_target(&ProbDist::one_hot(z.len(), y).unwrap(), &pb, lambda).unwrap();
            prop_assert!(ProbDist::new(q.into_vec()).is_ok());
        }

        #[test]
        fn time_increases(a in 0u64..1000, b in 0u64..1000) {
            prop_assume!(a < b);
            let s = ScheduleParams { total_iters: 1000, ..ScheduleParams::default() };
            prop_assert!(s.time(a) < s.time(b));
            prop_assert!(s.tau_at(a) >= s.tau_at(b));
        }

        #[test]
        fn sharpening_is_monotone(z in logit_vec(), t1 in 0.05f64..2.0, t2 in 0.05f64..2.0) {
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let sharp = crate::model::softmax_with_temperature(&z, lo).unwrap();
            let soft = crate::model::softmax_with_temperature(&z, hi).unwrap();
            let max = |p: &ProbDist| p.as_slice().iter().copied().fold(0.0, f64::max);
            prop_assert!(max(&sharp) >= max(&soft) - 1e-12);
            prop_assert!(normalized_entropy(&sharp) <= normalized_entropy(&soft) + 1e-12);
        }

        #[test]
        fn truncation_count_is_exact(n in 1usize..300, pct in prop::sample::select(vec![5usize, 10, 20])) {
            let c = pct as f64 / 100.0;
            let stat: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64).collect();
            let cfg = trunc_cfg(ObjectiveKind::LossTrunc, c, 5);
            let before = truncated_loss(&stat, &stat, &cfg, 4).unwrap();
            prop_assert!(before.keep.iter().all(|k| *k));
            let after = truncated_loss(&stat, &stat, &cfg, 5).unwrap();
            let dropped = after.keep.iter().filter(|k| !**k).count();
            prop_assert_eq!(dropped, (pct * n).div_ceil(100));
        }
    }
}
