//! Pretraining: augmentation, the per-batch update, and the epoch loop.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{LossValues, Model, PairInputs, Variant};
use crate::nn::{AdamW, GradBuffer, ParamStore};
use crate::rng::Streams;
use crate::synthvol::{sample_visit_pair, Dataset, Dims, PairSample, Volume};
use crate::tokenizer::{patchify, random_mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentFlags {
    pub flip: bool,
    pub jitter: bool,
    pub crop: bool,
    /// Flip both visits together instead of independently.
    pub joint_flip: bool,
}

impl AugmentFlags {
    pub fn none() -> Self {
        AugmentFlags { flip: false, jitter: false, crop: false, joint_flip: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    /// KL weight.
    pub beta: f64,
    pub mask_ratio: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentFlags,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Record wall-clock time in the metrics log; off gives byte-stable logs.
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            variant: Variant::stamp(),
            beta: 1.0,
            mask_ratio: 0.75,
            dt_min: 3.0,
            dt_max: 18.0,
            epochs: 60,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
            augment: AugmentFlags { flip: true, jitter: true, crop: true, joint_flip: false },
            checkpoint_every: 0,
            record_wall_time: true,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            epochs: 800,
            batch_size: 96,
            lr: 1e-4,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta {} must be a non-negative number", self.beta));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0,1)", self.mask_ratio));
        }
        if !(self.dt_min > 0.0) || self.dt_min > self.dt_max {
            return bad(format!("interval range [{}, {}] must satisfy 0 < min <= max", self.dt_min, self.dt_max));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad(format!("lr {} must be positive and weight_decay {} non-negative", self.lr, self.weight_decay));
        }
        Ok(())
    }
}

/// Mirror along the width axis: `(d, h, w) → (d, h, W−1−w)`.
pub fn flip_w(v: &Volume) -> Volume {
    let mut out = Volume::zeros(v.dims);
    for d in 0..v.dims.d {
        for h in 0..v.dims.h {
            for w in 0..v.dims.w {
                out.set(d, h, w, v.get(d, h, v.dims.w - 1 - w));
            }
        }
    }
    out
}

/// `clamp((x − mean)·contrast + mean + brightness)` on every voxel.
pub fn jitter(v: &Volume, brightness: f64, contrast: f64) -> Volume {
    let m = v.mean();
    let voxels = v
        .voxels
        .iter()
        .map(|&x| (((x as f64 - m) * contrast + m + brightness).clamp(0.0, 1.0)) as f32)
        .collect();
    Volume { dims: v.dims, voxels }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub start: [usize; 3],
    pub size: [usize; 3],
}

pub const MAX_CROP: f64 = 0.125;

pub fn random_crop<R: Rng>(dims: Dims, rng: &mut R) -> CropBox {
    let mut start = [0; 3];
    let mut size = [0; 3];
    for (a, n) in [dims.d, dims.h, dims.w].into_iter().enumerate() {
        let min = ((n as f64) * (1.0 - MAX_CROP)).ceil() as usize;
        let s = rng.gen_range(min.max(1)..=n);
        size[a] = s;
        start[a] = rng.gen_range(0..=n - s);
    }
    CropBox { start, size }
}

/// Nearest-neighbour resize of `cb` back to the full volume dims.
pub fn crop_resize(v: &Volume, cb: &CropBox) -> Volume {
    let dims = v.dims;
    let src = |a: usize, i: usize, n: usize| cb.start[a] + (i * cb.size[a]) / n;
    let mut out = Volume::zeros(dims);
    for d in 0..dims.d {
        let sd = src(0, d, dims.d);
        for h in 0..dims.h {
            let sh = src(1, h, dims.h);
            for w in 0..dims.w {
                out.set(d, h, w, v.get(sd, sh, src(2, w, dims.w)));
            }
        }
    }
    out
}

fn draw_jitter<R: Rng>(rng: &mut R) -> (f64, f64) {
    (rng.gen_range(-0.1..=0.1), rng.gen_range(0.9..=1.1))
}

pub fn augment<R: Rng>(pair: &PairSample, flags: AugmentFlags, rng: &mut R) -> PairSample {
    let mut past = pair.past.clone();
    let mut future = pair.future.clone();
    if flags.crop {
        let cb = random_crop(past.dims, rng);
        past = crop_resize(&past, &cb);
        future = crop_resize(&future, &cb);
    }
    if flags.flip {
        let a = rng.gen_bool(0.5);
        let b = if flags.joint_flip { a } else { rng.gen_bool(0.5) };
        if a {
            past = flip_w(&past);
        }
        if b {
            future = flip_w(&future);
        }
    }
    if flags.jitter {
        let (b, c) = draw_jitter(rng);
        past = jitter(&past, b, c);
        let (b, c) = draw_jitter(rng);
        future = jitter(&future, b, c);
    }
    PairSample { past, future, ..pair.clone() }
}

/// Tokenizes a pair and draws its mask and latent uniforms.
pub fn prepare_inputs(model: &Model, pair: &PairSample, mask_ratio: f64, streams: &mut Streams) -> Result<PairInputs> {
    let patch = model.arch.encoder.patch;
    let past = patchify(&pair.past, patch)?;
    let future = patchify(&pair.future, patch)?;
    let mask = random_mask(future.len(), mask_ratio, &mut streams.mask)?;
    let latent_uniforms = model.draw_uniforms(&mut streams.latent);
    Ok(PairInputs { past, future, delta_t: pair.delta_t, mask, latent_uniforms })
}

/// Batch-mean losses and gradients, without updating parameters.
pub fn batch_gradients(model: &Model, store: &ParamStore, batch: &[PairInputs], beta: f64) -> Result<(LossValues, GradBuffer)> {
    let results: Vec<_> = batch.par_iter().map(|inp| model.loss_and_grads(store, inp, beta)).collect();
    let mut buf = GradBuffer::new(store);
    let mut sum = LossValues { recon: 0.0, kl: 0.0, total: 0.0 };
    for r in results {
        let (l, g) = r?;
        sum.recon += l.recon;
        sum.kl += l.kl;
        sum.total += l.total;
        buf.accumulate(&g);
    }
    let n = batch.len() as f64;
    buf.scale(1.0 / n);
    Ok((LossValues { recon: sum.recon / n, kl: sum.kl / n, total: sum.total / n }, buf))
}

/// One optimizer update on `batch`; parameters are untouched on a fault.
pub fn training_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut AdamW,
    batch: &[PairInputs],
    beta: f64,
    epoch: usize,
    step: usize,
) -> Result<LossValues> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let (losses, grads) = batch_gradients(model, store, batch, beta)?;
    let fault = |msg: String| Error::TrainingFault { epoch, step, msg };
    if !(losses.recon.is_finite() && losses.kl.is_finite() && losses.total.is_finite()) {
        return Err(fault(format!(
            "non-finite loss (recon {}, kl {}, total {})",
            losses.recon, losses.kl, losses.total
        )));
    }
    if !grads.all_finite() {
        return Err(fault("non-finite gradient".into()));
    }
    opt.update(store, &grads);
    Ok(losses)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "epoch,recon,kl,total,wall_ms";

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl RunPaths {
    /// `CKPT` plus `CKPT.metrics.csv` next to it.
    pub fn beside(checkpoint: &Path) -> Self {
        let mut m = checkpoint.as_os_str().to_owned();
        m.push(".metrics.csv");
        RunPaths { checkpoint: checkpoint.to_path_buf(), metrics: PathBuf::from(m) }
    }
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

fn metrics_writer(path: &Path, cfg: &RunConfig) -> Result<fs::File> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let head = crate::config::csv_header_block(cfg);
    write!(f, "{head}{METRICS_HEADER}\n").map_err(|e| Error::io(path, e))?;
    Ok(f)
}

/// Draws one augmented, tokenized pair per patient in a shuffled order.
fn epoch_inputs(model: &Model, cfg: &TrainConfig, data: &Dataset, streams: &mut Streams) -> Result<Vec<PairInputs>> {
    let mut order: Vec<usize> = (0..data.patients.len()).collect();
    order.shuffle(&mut streams.data);
    let mut out = Vec::with_capacity(order.len());
    for p in order {
        let rec = &data.patients[p];
        let (i, j) = sample_visit_pair(rec.patient_id, &rec.visits, cfg.dt_min, cfg.dt_max, &mut streams.data)?;
        let pair = PairSample {
            past: data.volume(p, i)?,
            future: data.volume(p, j)?,
            delta_t: rec.visits[j] - rec.visits[i],
            patient_id: rec.patient_id,
            t: rec.visits[i],
        };
        let pair = augment(&pair, cfg.augment, &mut streams.data);
        out.push(prepare_inputs(model, &pair, cfg.mask_ratio, streams)?);
    }
    Ok(out)
}

/// Runs (or resumes) pretraining. With `paths`, metrics are written per
/// epoch and checkpoints at the configured cadence and at the end; on a
/// numeric fault the last good state is saved before the error returns.
pub fn run_pretrain(cfg: &RunConfig, data: &Dataset, paths: Option<&RunPaths>, resume: Option<Checkpoint>) -> Result<PretrainOutcome> {
    let tc = &cfg.train;
    tc.validate()?;
    if data.dims != cfg.arch.encoder.volume {
        return Err(Error::Config(format!(
            "dataset volumes are {} but the model expects {}",
            data.dims, cfg.arch.encoder.volume
        )));
    }
    let (model, mut store, mut opt, mut streams, start) = match resume {
        Some(ck) => {
            let model = Model::bind(&cfg.arch, tc.variant, &ck.store)?;
            let streams = ck.streams()?;
            (model, ck.store, ck.opt, streams, ck.epoch as usize)
        }
        None => {
            let mut streams = Streams::new(tc.seed);
            let mut store = ParamStore::new();
            let model = Model::new(&mut store, &cfg.arch, tc.variant, &mut streams.init)?;
            let opt = AdamW::new(&store, tc.lr, tc.weight_decay);
            (model, store, opt, streams, 0)
        }
    };
    let mut log = match paths {
        Some(p) => Some(metrics_writer(&p.metrics, cfg)?),
        None => None,
    };
    let snapshot = |store: &ParamStore, opt: &AdamW, streams: &Streams, epoch: usize| {
        Checkpoint::new(cfg.clone(), epoch as u64, streams, store.clone(), opt.clone())
    };
    let mut metrics = Vec::new();
    for epoch in start + 1..=tc.epochs {
        let clock = Instant::now();
        let before = (streams.clone(), epoch - 1);
        let inputs = epoch_inputs(&model, tc, data, &mut streams)?;
        let mut sum = LossValues { recon: 0.0, kl: 0.0, total: 0.0 };
        let mut steps = 0;
        for (step, batch) in inputs.chunks(tc.batch_size).enumerate() {
            match training_step(&model, &mut store, &mut opt, batch, tc.beta, epoch, step) {
                Ok(l) => {
                    sum.recon += l.recon;
                    sum.kl += l.kl;
                    sum.total += l.total;
                    steps += 1;
                }
                Err(e @ Error::TrainingFault { .. }) => {
                    if let Some(p) = paths {
                        // parameters hold the last good update
                        snapshot(&store, &opt, &before.0, before.1).save(&p.checkpoint)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        let n = steps as f64;
        let m = EpochMetrics {
            epoch,
            recon: sum.recon / n,
            kl: sum.kl / n,
            total: sum.total / n,
            wall_ms: if tc.record_wall_time { clock.elapsed().as_millis() as u64 } else { 0 },
        };
        if let (Some(f), Some(p)) = (log.as_mut(), paths) {
            writeln!(f, "{},{},{},{},{}", m.epoch, m.recon, m.kl, m.total, m.wall_ms).map_err(|e| Error::io(&p.metrics, e))?;
        }
        metrics.push(m);
        if let Some(p) = paths {
            if tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0 && epoch < tc.epochs {
                snapshot(&store, &opt, &streams, epoch).save(&p.checkpoint)?;
            }
        }
    }
    let ck = snapshot(&store, &opt, &streams, tc.epochs);
    if let Some(p) = paths {
        ck.save(&p.checkpoint)?;
    }
    Ok(PretrainOutcome { checkpoint: ck, metrics })
}

/// Trailing moving average with the given window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let s = &values[lo..=i];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}
