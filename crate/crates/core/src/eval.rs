//! Frozen-backbone evaluation: time-prompted feature extraction, attention
//! pooling and linear probes, and ranking/threshold metrics.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::backbone::mhsa;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::latentvar::{draw_uniforms, one_hot_draw, prior_logits};
use crate::model::Model;
use crate::nn::{trunc_normal, AdamW, GradBuffer, Linear, MultiHeadAttention, ParamId, ParamStore, INIT_STD};
use crate::rng::keyed;
use crate::synthvol::{conversion_label, Dataset, Volume};
use crate::tensor::Mat;
use crate::tokenizer::patchify;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    /// One cross-attention layer from a learnable query, no nonlinearity.
    Attention,
    /// Token mean followed by a linear head.
    MeanLinear,
}

impl Pool {
    pub fn as_str(self) -> &'static str {
        match self {
            Pool::Attention => "attention",
            Pool::MeanLinear => "mean_linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attention" => Some(Pool::Attention),
            "mean_linear" => Some(Pool::MeanLinear),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdRule {
    /// Score threshold maximizing validation balanced accuracy.
    Tuned,
    /// Predicted probability ≥ 0.5.
    Half,
}

impl ThresholdRule {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdRule::Tuned => "tuned",
            ThresholdRule::Half => "half",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tuned" => Some(ThresholdRule::Tuned),
            "half" => Some(ThresholdRule::Half),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub pool: Pool,
    /// Add `TE(prompt_dt)` to the CLS token at inference.
    pub use_te: bool,
    /// Prepend the prior latent to the token set at inference.
    pub use_se: bool,
    pub prompt_dt: f64,
    /// Conversion-within-window label horizon, months.
    pub window: f64,
    pub epochs: usize,
    pub lr_grid: Vec<f64>,
    pub folds: usize,
    /// Use every `visit_stride`-th visit as a probe sample.
    pub visit_stride: usize,
    pub heads: usize,
    /// 0: prior probability vector; k > 0: mean of k one-hot prior draws.
    pub latent_samples: usize,
    pub threshold: ThresholdRule,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn desk() -> Self {
        ProbeConfig {
            pool: Pool::Attention,
            use_te: false,
            use_se: false,
            prompt_dt: 12.0,
            window: 12.0,
            epochs: 100,
            lr_grid: vec![1e-3, 1e-2],
            folds: 4,
            visit_stride: 3,
            heads: 4,
            latent_samples: 0,
            threshold: ThresholdRule::Tuned,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 3 {
            return Err(Error::Config(format!("probe needs at least 3 folds, got {}", self.folds)));
        }
        if self.epochs == 0 || self.lr_grid.is_empty() || self.visit_stride == 0 || self.heads == 0 {
            return Err(Error::Config("probe epochs, lr grid, visit stride, and heads must be non-empty".into()));
        }
        if !(self.window > 0.0) || !(self.prompt_dt >= 0.0) {
            return Err(Error::Config("probe window must be positive and prompt_dt non-negative".into()));
        }
        Ok(())
    }
}

/// Frozen token set for one visit: `[z?, CLS, patches]`, `(N+1|N+2) × E`.
pub fn infer_features(model: &Model, store: &ParamStore, volume: &Volume, delta_t: f64, cfg: &ProbeConfig) -> Result<Mat> {
    check_inference_flags(model, cfg)?;
    let raw = patchify(volume, model.arch.encoder.patch)?;
    let mut tape = Tape::new();
    let h = model.encode_past(&mut tape, store, &raw, delta_t, cfg.use_te)?;
    let tokens = tape.value(h.all).clone();
    if !cfg.use_se {
        return Ok(tokens);
    }
    let heads = model.latent.as_ref().expect("checked above");
    let prior = prior_logits(&mut tape, store, heads, h.cls)?;
    let probs = tape.value(prior.probs);
    let z: Vec<f64> = if cfg.latent_samples == 0 {
        probs.data.clone()
    } else {
        let mut rng = keyed(cfg.seed, delta_t.to_bits());
        let mut acc = vec![0.0; probs.len()];
        for _ in 0..cfg.latent_samples {
            let u = draw_uniforms(heads.spec, &mut rng);
            let hard = one_hot_draw(probs, &u)?;
            for (a, v) in acc.iter_mut().zip(&hard.data) {
                *a += v / cfg.latent_samples as f64;
            }
        }
        acc
    };
    let mut out = Mat::zeros(tokens.rows + 1, tokens.cols);
    out.row_mut(0).copy_from_slice(&z);
    out.data[tokens.cols..].copy_from_slice(&tokens.data);
    Ok(out)
}

fn check_inference_flags(model: &Model, cfg: &ProbeConfig) -> Result<()> {
    if cfg.use_se && model.latent.is_none() {
        return Err(Error::Config(format!(
            "stochastic latent requested at inference but the {} checkpoint has no latent heads",
            model.variant.mode.as_str()
        )));
    }
    if cfg.use_te && model.te_enc.is_none() {
        return Err(Error::Config(format!(
            "temporal prompt requested at inference but the {} checkpoint has no temporal encoder",
            model.variant.mode.as_str()
        )));
    }
    Ok(())
}

/// Probe head parameters.
#[derive(Clone, Debug)]
pub struct PoolHead {
    pub pool: Pool,
    pub query: Option<ParamId>,
    pub attn: Option<MultiHeadAttention>,
    pub head: Linear,
    pub dim: usize,
}

impl PoolHead {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, pool: Pool, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!("pool width {dim} not divisible by {heads} heads")));
        }
        let (query, attn) = match pool {
            Pool::Attention => (
                Some(store.add("pool.query", trunc_normal(1, dim, INIT_STD, rng), false)),
                Some(MultiHeadAttention::new(store, "pool.attn", dim, heads, rng)),
            ),
            Pool::MeanLinear => (None, None),
        };
        let head = Linear::new(store, "pool.head", dim, 1, rng);
        Ok(PoolHead { pool, query, attn, head, dim })
    }
}

/// Cross-attention of the pooling query over `tokens` (`[n × E]` → `[1 × E]`).
pub fn attention_pool(tape: &mut Tape, store: &ParamStore, p: &PoolHead, tokens: Var) -> Result<Var> {
    let (q, attn) = match (p.query, &p.attn) {
        (Some(q), Some(a)) => (q, a),
        _ => return Err(Error::Usage("attention_pool on a mean-linear head".into())),
    };
    let q = tape.param(store, q);
    Ok(mhsa(tape, store, attn, q, tokens, tokens)?.out)
}

/// Logits `[S × 1]` for `S` samples stacked in `x` (`[S·n × E]`).
///
/// For attention pooling the per-head scores and the value path are
/// reassociated through the query and the head weights so that no
/// `S·n × E` projection is materialised; the result equals
/// `head(attention_pool(tokens))` sample by sample.
pub fn batch_logits(tape: &mut Tape, store: &ParamStore, p: &PoolHead, x: Var, samples: usize, n: usize) -> Var {
    let e = p.dim;
    let w = tape.param(store, p.head.w);
    let b = tape.param(store, p.head.b.expect("head has bias"));
    let ones_s = tape.constant(Mat::filled(1, samples, 1.0));
    match (p.pool, p.query, &p.attn) {
        (Pool::Attention, Some(qid), Some(a)) => {
            let h = a.heads;
            let dh = e / h;
            let mut sel = Mat::zeros(e, h);
            for i in 0..e {
                *sel.at_mut(i, i / dh) = 1.0;
            }
            let sel = tape.constant(sel);
            let ones_h = tape.constant(Mat::filled(1, h, 1.0));
            let query = tape.param(store, qid);
            let q = a.q.forward(tape, store, query);
            // per-head query blocks [E × H]
            let spread = tape.matmul_t(q, true, ones_h, false);
            let qblk = tape.mul(spread, sel);
            let wk = tape.param(store, a.k.w);
            let ak = tape.matmul(wk, qblk);
            let scores = tape.matmul_t(ak, true, x, true);
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = tape.reshape(scores, h * samples, n);
            let alpha = tape.softmax_rows(scores);
            // value path folded through the output projection and head
            let wo = tape.param(store, a.o.w);
            let u = tape.matmul(wo, w);
            let spread = tape.matmul_t(u, false, ones_h, false);
            let ublk = tape.mul(spread, sel);
            let wv = tape.param(store, a.v.w);
            let cv = tape.matmul(wv, ublk);
            let vals = tape.matmul_t(cv, true, x, true);
            let vals = tape.reshape(vals, h * samples, n);
            let weighted = tape.mul(alpha, vals);
            let per = tape.sum_cols(weighted);
            let per = tape.reshape(per, h, samples);
            let logits = tape.matmul(ones_h, per);
            let bv = tape.param(store, a.v.b.expect("bias"));
            let bo = tape.param(store, a.o.b.expect("bias"));
            let c1 = tape.matmul(bv, u);
            let c2 = tape.matmul(bo, w);
            let c = tape.add(c1, c2);
            let c = tape.add(c, b);
            let c = tape.matmul(c, ones_s);
            let logits = tape.add(logits, c);
            tape.reshape(logits, samples, 1)
        }
        _ => {
            // mean over each sample's n tokens, then the linear head
            let mut avg = Mat::zeros(samples, samples * n);
            for s in 0..samples {
                for j in 0..n {
                    *avg.at_mut(s, s * n + j) = 1.0 / n as f64;
                }
            }
            let avg = tape.constant(avg);
            let m = tape.matmul(avg, x);
            let l = tape.matmul(m, w);
            let ones = tape.constant(Mat::filled(samples, 1, 1.0));
            let bias = tape.matmul(ones, b);
            tape.add(l, bias)
        }
    }
}

fn check_binary(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Probability that a random positive outscores a random negative (ties ½),
/// via tie-averaged ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = check_binary(labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-wise area under the precision–recall curve, one point per distinct
/// score threshold in descending order.
pub fn prauc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let (pos, _) = check_binary(labels)?;
    if pos == 0 {
        return Err(Error::Metric("PRAUC needs at least one positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

/// Mean of per-class recalls.
pub fn bacc(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let (pos, neg) = check_binary(labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("balanced accuracy needs both classes".into()));
    }
    let tp = predictions.iter().zip(labels).filter(|(&p, &l)| p && l).count();
    let tn = predictions.iter().zip(labels).filter(|(&p, &l)| !p && !l).count();
    Ok((tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0)
}

/// Threshold (predict positive when `score >= t`) maximizing balanced
/// accuracy; ties go to the lowest such threshold.
pub fn best_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let mut cands: Vec<f64> = scores.to_vec();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands.push(f64::INFINITY);
    let mut best = (f64::NEG_INFINITY, cands[0]);
    for &t in &cands {
        let pred: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
        let b = bacc(&pred, labels)?;
        if b > best.0 {
            best = (b, t);
        }
    }
    Ok(best.1)
}

/// Stacked frozen features with labels and patient grouping.
#[derive(Clone, Debug)]
pub struct ProbeSamples {
    /// One `n × E` token set per sample.
    pub features: Vec<Mat>,
    pub labels: Vec<bool>,
    pub patient_ids: Vec<u64>,
}

impl ProbeSamples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positive_ratio(&self) -> f64 {
        self.labels.iter().filter(|&&l| l).count() as f64 / self.len().max(1) as f64
    }
}

/// Pre-conversion visits at the configured stride, labelled by conversion
/// within `cfg.window` months, each encoded once.
pub fn probe_samples(model: &Model, store: &ParamStore, data: &Dataset, cfg: &ProbeConfig) -> Result<ProbeSamples> {
    check_inference_flags(model, cfg)?;
    let mut jobs = Vec::new();
    for (p, rec) in data.patients.iter().enumerate() {
        for v in (0..rec.visits.len()).step_by(cfg.visit_stride) {
            let t = rec.visits[v];
            if t < rec.conversion_time {
                jobs.push((p, v, conversion_label(rec.conversion_time, t, cfg.window)?));
            }
        }
    }
    let features = jobs
        .par_iter()
        .map(|&(p, v, _)| infer_features(model, store, &data.volume(p, v)?, cfg.prompt_dt, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeSamples {
        features,
        labels: jobs.iter().map(|j| j.2).collect(),
        patient_ids: jobs.iter().map(|&(p, _, _)| data.patients[p].patient_id).collect(),
    })
}

/// Patient-level assignment of sample indices to folds.
pub fn patient_folds(patient_ids: &[u64], folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut ids: Vec<u64> = patient_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: std::collections::HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &p)| (p, i % folds)).collect();
    let mut out = vec![Vec::new(); folds];
    for (i, p) in patient_ids.iter().enumerate() {
        out[fold_of[p]].push(i);
    }
    out
}

/// Fails if any patient has samples on both sides.
pub fn check_disjoint(patient_ids: &[u64], a: &[usize], b: &[usize]) -> Result<()> {
    let sa: HashSet<u64> = a.iter().map(|&i| patient_ids[i]).collect();
    if let Some(&i) = b.iter().find(|&&i| sa.contains(&patient_ids[i])) {
        return Err(Error::Split(format!("patient {} appears in both train and test", patient_ids[i])));
    }
    Ok(())
}

fn stack(samples: &ProbeSamples, idx: &[usize]) -> (Mat, Vec<f64>, usize) {
    let n = samples.features[idx[0]].rows;
    let e = samples.features[idx[0]].cols;
    let mut x = Mat::zeros(idx.len() * n, e);
    for (o, &i) in idx.iter().enumerate() {
        x.data[o * n * e..(o + 1) * n * e].copy_from_slice(&samples.features[i].data);
    }
    let y = idx.iter().map(|&i| if samples.labels[i] { 1.0 } else { 0.0 }).collect();
    (x, y, n)
}

/// A trained probe head.
pub struct TrainedProbe {
    pub store: ParamStore,
    pub head: PoolHead,
}

impl TrainedProbe {
    pub fn scores(&self, samples: &ProbeSamples, idx: &[usize]) -> Vec<f64> {
        let (x, _, n) = stack(samples, idx);
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let l = batch_logits(&mut tape, &self.store, &self.head, x, idx.len(), n);
        tape.value(l).data.clone()
    }
}

/// Full-batch Adam on binary cross-entropy.
pub fn train_probe(samples: &ProbeSamples, train: &[usize], cfg: &ProbeConfig, lr: f64, seed: u64) -> Result<TrainedProbe> {
    let (x, y, n) = stack(samples, train);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = PoolHead::new(&mut store, cfg.pool, x.cols, cfg.heads, &mut rng)?;
    let mut opt = AdamW::adam(&store, lr);
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let l = batch_logits(&mut tape, &store, &head, xv, train.len(), n);
        let loss = tape.bce_with_logits(l, &y);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::TrainingFault { epoch: 0, step: 0, msg: "probe loss is not finite".into() });
        }
        let g = tape.backward(loss);
        let mut buf = GradBuffer::new(&store);
        buf.accumulate(&g);
        opt.update(&mut store, &buf);
    }
    Ok(TrainedProbe { store, head })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auroc: f64,
    pub prauc: f64,
    pub bacc: f64,
    pub lr: f64,
    pub n_test: usize,
    pub positive_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub folds: Vec<FoldMetrics>,
    pub positive_ratio: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

impl EvalReport {
    pub fn mean(&self) -> (f64, f64, f64) {
        let a: Vec<f64> = self.folds.iter().map(|f| f.auroc).collect();
        let p: Vec<f64> = self.folds.iter().map(|f| f.prauc).collect();
        let b: Vec<f64> = self.folds.iter().map(|f| f.bacc).collect();
        (mean_sd(&a).0, mean_sd(&p).0, mean_sd(&b).0)
    }

    pub fn sd(&self) -> (f64, f64, f64) {
        let a: Vec<f64> = self.folds.iter().map(|f| f.auroc).collect();
        let p: Vec<f64> = self.folds.iter().map(|f| f.prauc).collect();
        let b: Vec<f64> = self.folds.iter().map(|f| f.bacc).collect();
        (mean_sd(&a).1, mean_sd(&p).1, mean_sd(&b).1)
    }

    /// `fold,auroc,prauc,bacc` rows plus `mean` and `sd` rows, after a `#`
    /// block echoing the configuration.
    pub fn to_csv(&self, cfg: &RunConfig) -> String {
        let mut s = crate::config::csv_header_block(cfg);
        s += &crate::config::config_echo(cfg);
        let _ = writeln!(s, "# positive-ratio {}", self.positive_ratio);
        s += "fold,auroc,prauc,bacc\n";
        for f in &self.folds {
            let _ = writeln!(s, "{},{},{},{}", f.fold, f.auroc, f.prauc, f.bacc);
        }
        let (a, p, b) = self.mean();
        let _ = writeln!(s, "mean,{a},{p},{b}");
        let (a, p, b) = self.sd();
        let _ = writeln!(s, "sd,{a},{p},{b}");
        s
    }
}

/// Cross-validated probe: fold `k` tests, fold `k+1` validates (learning
/// rate and threshold), the rest train.
pub fn evaluate_probe(samples: &ProbeSamples, cfg: &ProbeConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data { path: Default::default(), msg: "no probe samples".into() });
    }
    let folds = patient_folds(&samples.patient_ids, cfg.folds, cfg.seed);
    let results = (0..cfg.folds)
        .into_par_iter()
        .map(|k| {
            let test = &folds[k];
            let val = &folds[(k + 1) % cfg.folds];
            let train: Vec<usize> = (0..cfg.folds)
                .filter(|&f| f != k && f != (k + 1) % cfg.folds)
                .flat_map(|f| folds[f].iter().copied())
                .collect();
            check_disjoint(&samples.patient_ids, &train, test)?;
            check_disjoint(&samples.patient_ids, &train, val)?;
            check_disjoint(&samples.patient_ids, val, test)?;
            let val_labels: Vec<bool> = val.iter().map(|&i| samples.labels[i]).collect();
            let mut best: Option<(f64, f64, TrainedProbe)> = None;
            for (li, &lr) in cfg.lr_grid.iter().enumerate() {
                let probe = train_probe(samples, &train, cfg, lr, cfg.seed ^ ((k as u64) << 8) ^ li as u64)?;
                let a = auroc(&probe.scores(samples, val), &val_labels)?;
                if best.as_ref().map_or(true, |b| a > b.0) {
                    best = Some((a, lr, probe));
                }
            }
            let (_, lr, probe) = best.expect("non-empty grid");
            let threshold = match cfg.threshold {
                ThresholdRule::Tuned => best_threshold(&probe.scores(samples, val), &val_labels)?,
                ThresholdRule::Half => 0.0,
            };
            let scores = probe.scores(samples, test);
            let labels: Vec<bool> = test.iter().map(|&i| samples.labels[i]).collect();
            let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
            Ok(FoldMetrics {
                fold: k,
                auroc: auroc(&scores, &labels)?,
                prauc: prauc(&scores, &labels)?,
                bacc: bacc(&pred, &labels)?,
                lr,
                n_test: test.len(),
                positive_ratio: labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { folds: results, positive_ratio: samples.positive_ratio() })
}

pub fn run_probe(model: &Model, store: &ParamStore, data: &Dataset, cfg: &ProbeConfig) -> Result<EvalReport> {
    let samples = probe_samples(model, store, data, cfg)?;
    evaluate_probe(&samples, cfg)
}
