//! Grouped categorical latent: prior and posterior heads, straight-through
//! sampling, and the balanced KL term.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, ParamStore};
use crate::tensor::Mat;

/// Share of uniform probability mixed into every categorical.
pub const UNIFORM_MIX: f64 = 0.01;
/// Weight of the term that trains the posterior towards a frozen prior; the
/// remainder trains the prior towards a frozen posterior.
pub const KL_BALANCE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentSpec {
    pub groups: usize,
    pub bins: usize,
}

impl LatentSpec {
    pub fn width(&self) -> usize {
        self.groups * self.bins
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.bins < 2 {
            return Err(Error::Config(format!(
                "latent needs at least one group of two bins, got {}x{}",
                self.groups, self.bins
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LatentHeads {
    pub spec: LatentSpec,
    /// `CLS_t → logits`.
    pub prior: Mlp,
    /// `[CLS_t, CLS_{t+Δt}] → logits`.
    pub posterior: Mlp,
}

impl LatentHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, embed_dim: usize, hidden: usize, spec: LatentSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if hidden == 0 {
            return Err(Error::Config("latent hidden width must be positive".into()));
        }
        Ok(LatentHeads {
            spec,
            prior: Mlp::new(store, "prior", embed_dim, hidden, spec.width(), Activation::Silu, rng),
            posterior: Mlp::new(store, "posterior", 2 * embed_dim, hidden, spec.width(), Activation::Silu, rng),
        })
    }
}

/// A distribution over `groups` independent categoricals of `bins` classes.
#[derive(Clone, Copy, Debug)]
pub struct CategoricalLatent {
    /// `[G × B]` raw logits.
    pub logits: Var,
    /// `[G × B]` probabilities after uniform mixing.
    pub probs: Var,
    pub spec: LatentSpec,
}

/// Mixed probabilities from raw logits (`G·B` entries in any row-major shape).
pub fn categorical(tape: &mut Tape, logits: Var, spec: LatentSpec) -> Result<CategoricalLatent> {
    let (r, c) = tape.shape(logits);
    if r * c != spec.width() {
        return Err(Error::Shape(format!("{r}x{c} logits for a {}x{} latent", spec.groups, spec.bins)));
    }
    let logits = tape.reshape(logits, spec.groups, spec.bins);
    let soft = tape.softmax_rows(logits);
    let probs = tape.affine(soft, 1.0 - UNIFORM_MIX, UNIFORM_MIX / spec.bins as f64);
    Ok(CategoricalLatent { logits, probs, spec })
}

/// Prior from the past visit's CLS token (`[1 × E]`).
pub fn prior_logits(tape: &mut Tape, store: &ParamStore, heads: &LatentHeads, cls_t: Var) -> Result<CategoricalLatent> {
    let l = heads.prior.forward(tape, store, cls_t);
    categorical(tape, l, heads.spec)
}

/// Posterior from both CLS tokens.
pub fn posterior_logits(
    tape: &mut Tape,
    store: &ParamStore,
    heads: &LatentHeads,
    cls_t: Var,
    cls_future: Var,
) -> Result<CategoricalLatent> {
    if tape.shape(cls_t) != tape.shape(cls_future) {
        return Err(Error::Shape(format!(
            "CLS shapes {:?} and {:?} differ",
            tape.shape(cls_t),
            tape.shape(cls_future)
        )));
    }
    let x = tape.concat_cols(&[cls_t, cls_future]);
    let l = heads.posterior.forward(tape, store, x);
    categorical(tape, l, heads.spec)
}

/// Inverse-CDF draw of one class per row given one uniform per row.
pub fn one_hot_draw(probs: &Mat, uniforms: &[f64]) -> Result<Mat> {
    if uniforms.len() != probs.rows {
        return Err(Error::Shape(format!("{} uniforms for {} groups", uniforms.len(), probs.rows)));
    }
    let mut hard = Mat::zeros(probs.rows, probs.cols);
    for (g, &u) in uniforms.iter().enumerate() {
        let row = probs.row(g);
        let mut acc = 0.0;
        let mut pick = row.len() - 1;
        for (b, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = b;
                break;
            }
        }
        *hard.at_mut(g, pick) = 1.0;
    }
    Ok(hard)
}

/// Straight-through sample flattened to `[1 × G·B]`: the forward value is an
/// exact one-hot per group, the gradient flows to the probabilities.
pub fn st_sample(tape: &mut Tape, lat: &CategoricalLatent, uniforms: &[f64]) -> Result<Var> {
    let hard = one_hot_draw(tape.value(lat.probs), uniforms)?;
    let z = tape.straight_through(lat.probs, hard);
    Ok(tape.reshape(z, 1, lat.spec.width()))
}

pub fn draw_uniforms<R: Rng>(spec: LatentSpec, rng: &mut R) -> Vec<f64> {
    (0..spec.groups).map(|_| rng.gen::<f64>()).collect()
}

/// Probability vector flattened to `[1 × G·B]`.
pub fn expectation(tape: &mut Tape, lat: &CategoricalLatent) -> Var {
    tape.reshape(lat.probs, 1, lat.spec.width())
}

fn kl_term(tape: &mut Tape, q: Var, p: Var) -> Var {
    let lq = tape.log(q);
    let lp = tape.log(p);
    let d = tape.sub(lq, lp);
    let m = tape.mul(q, d);
    tape.sum(m)
}

/// `KL(q‖p)` summed over groups, differentiable in both arguments.
pub fn kl(tape: &mut Tape, q: &CategoricalLatent, p: &CategoricalLatent) -> Result<Var> {
    if q.spec != p.spec {
        return Err(Error::Shape("posterior and prior latents differ in shape".into()));
    }
    Ok(kl_term(tape, q.probs, p.probs))
}

/// Balanced KL: `0.2·KL(q‖sg p) + 0.8·KL(sg q‖p)`. Its value equals `KL(q‖p)`.
pub fn kl_weighted(tape: &mut Tape, q: &CategoricalLatent, p: &CategoricalLatent) -> Result<Var> {
    if q.spec != p.spec {
        return Err(Error::Shape("posterior and prior latents differ in shape".into()));
    }
    let p_sg = tape.detach(p.probs);
    let q_sg = tape.detach(q.probs);
    let a = kl_term(tape, q.probs, p_sg);
    let b = kl_term(tape, q_sg, p.probs);
    let a = tape.scale(a, KL_BALANCE);
    let b = tape.scale(b, 1.0 - KL_BALANCE);
    Ok(tape.add(a, b))
}
