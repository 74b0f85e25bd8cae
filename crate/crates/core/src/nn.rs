//! Parameter storage, layer building blocks, and the AdamW optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Mat,
    /// Whether decoupled weight decay applies (weight matrices only).
    pub decay: bool,
}

/// Named learnable tensors. Ids are dense and stable for the store's life.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    index: HashMap<String, ParamId>,
}

/// Rounds to the nearest `f32`. Parameters and optimizer moments live on
/// this grid so a 32-bit checkpoint reproduces them exactly.
#[inline]
pub fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Mat, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        value.data.iter_mut().for_each(|v| *v = to_f32_grid(*v));
        let id = ParamId(self.blocks.len());
        self.index.insert(name.clone(), id);
        self.blocks.push(ParamBlock { name, value, decay });
        id
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.blocks[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.blocks[id.0].value
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.blocks[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.blocks.len()).map(ParamId)
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.blocks
            .iter()
            .enumerate()
            .filter(move |(_, b)| b.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.ids_with_prefix(prefix).next().is_some()
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    /// SHA-256 over names, shapes, and values of blocks matching `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for b in self.blocks.iter().filter(|b| b.name.starts_with(prefix)) {
            h.update((b.name.len() as u32).to_le_bytes());
            h.update(b.name.as_bytes());
            h.update((b.value.rows as u32).to_le_bytes());
            h.update((b.value.cols as u32).to_le_bytes());
            for v in &b.value.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Replaces the value of an existing block, keeping its shape.
    pub fn set(&mut self, name: &str, value: Mat) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let cur = &mut self.blocks[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} vs stored {:?}",
                cur.shape(),
                value.shape()
            )));
        }
        *cur = value;
        Ok(())
    }
}

/// Truncated normal at ±2σ, by rejection.
pub fn trunc_normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat {
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), trunc_normal(d_in, d_out, INIT_STD, rng), true);
        let b = store.add(format!("{name}.bias"), Mat::zeros(1, d_out), false);
        Linear {
            w,
            b: Some(b),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Mat::filled(1, dim, 1.0), false);
        let beta = store.add(format!("{name}.bias"), Mat::zeros(1, dim), false);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
}

/// Two linear layers with one nonlinearity between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
            act,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(tape, store, x);
        let h = match self.act {
            Activation::Gelu => tape.gelu(h),
            Activation::Silu => tape.silu(h),
        };
        self.fc2.forward(tape, store, h)
    }
}

/// Query/key/value/output projections around [`Tape::attention`].
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Output of an attention layer plus the node holding its weights.
#[derive(Clone, Copy, Debug)]
pub struct AttnOut {
    pub out: Var,
    pub core: Var,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(dim % heads == 0, "{name}: dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, queries: Var, keys_values: Var) -> AttnOut {
        let q = self.q.forward(tape, store, queries);
        let k = self.k.forward(tape, store, keys_values);
        let v = self.v.forward(tape, store, keys_values);
        let core = tape.attention(q, k, v, self.heads);
        let out = self.o.forward(tape, store, core);
        AttnOut { out, core }
    }
}

/// Per-parameter gradient sums, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Option<Mat>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        GradBuffer {
            grads: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, g: &Grads) {
        for (id, m) in g.params() {
            match &mut self.grads[id.0] {
                Some(cur) => cur.add_assign(m),
                slot @ None => *slot = Some(m.clone()),
            }
        }
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (slot, g) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(g) = g {
                match slot {
                    Some(cur) => cur.add_assign(g),
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Mat::is_finite)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = store
            .blocks()
            .iter()
            .map(|b| Mat::zeros(b.value.rows, b.value.cols))
            .collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Plain Adam (no weight decay), as used by the probe heads.
    pub fn adam(store: &ParamStore, lr: f64) -> Self {
        Self::new(store, lr, 0.0)
    }

    /// One update on every parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let decay = store.block(id).decay;
            let p = store.value_mut(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = to_f32_grid(self.beta1 * m.data[i] + (1.0 - self.beta1) * gi);
                v.data[i] = to_f32_grid(self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi);
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                let mut x = p.data[i];
                if decay {
                    x -= self.lr * self.weight_decay * x;
                }
                x -= self.lr * mhat / (vhat.sqrt() + self.eps);
                p.data[i] = to_f32_grid(x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_param_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "l", 3, 2, &mut rng);
        assert_eq!(l.param_count(), 8);
        assert_eq!(store.num_scalars(), 8);
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = trunc_normal(50, 50, 0.02, &mut rng);
        assert!(m.data.iter().all(|v| v.abs() <= 0.04));
        let mean = m.sum() / m.len() as f64;
        assert!(mean.abs() < 0.002);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::row_vec(vec![1.0, -2.0]), true);
        let mut opt = AdamW::new(&store, 0.05, 0.0);
        for _ in 0..400 {
            let mut tape = Tape::new();
            let x = tape.param(&store, id);
            let sq = tape.mul(x, x);
            let s = tape.sum(sq);
            let g = tape.backward(s);
            let mut buf = GradBuffer::new(&store);
            buf.accumulate(&g);
            opt.update(&mut store, &buf);
        }
        assert!(store.value(id).norm() < 0.05, "{:?}", store.value(id));
    }

    #[test]
    fn values_stay_on_f32_grid() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::row_vec(vec![0.1, 1.0 / 3.0]), true);
        for v in &store.value(id).data {
            assert_eq!(*v, (*v as f32) as f64);
        }
    }
}
