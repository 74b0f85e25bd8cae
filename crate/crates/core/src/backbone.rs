//! The weight-shared ViT encoder used by both Siamese branches, the generic
//! multi-head attention entry point, and CLS attention maps.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, AttnOut, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore, INIT_STD};
use crate::nn::trunc_normal;
use crate::synthvol::{Dims, Volume};
use crate::tensor::Mat;
use crate::tokenizer::{grid_dims, sincos_pos3d, MaskSet, TokenForm, TokenGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub volume: Dims,
    pub patch: Dims,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub final_norm: bool,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            volume: Dims::new(16, 32, 32),
            patch: Dims::new(4, 8, 8),
            depth: 4,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            final_norm: true,
        }
    }

    /// ViT-Base on 32×448×448 OCT volumes with 4×32×32 patches.
    pub fn paper() -> Self {
        EncoderConfig {
            volume: Dims::new(32, 448, 448),
            patch: Dims::new(4, 32, 32),
            depth: 12,
            embed_dim: 768,
            heads: 12,
            mlp_ratio: 4,
            final_norm: true,
        }
    }

    pub fn grid(&self) -> Result<Dims> {
        grid_dims(self.volume, self.patch)
    }

    pub fn n_tokens(&self) -> Result<usize> {
        Ok(self.grid()?.voxels())
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.depth == 0 || self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder depth, width, heads, and mlp ratio must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder width {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Scaled dot-product attention with projections, where keys and values may
/// come from different sequences.
pub fn mhsa(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &MultiHeadAttention,
    queries: Var,
    keys: Var,
    values: Var,
) -> Result<AttnOut> {
    let d = layer.q.d_in;
    for (what, v) in [("queries", queries), ("keys", keys), ("values", values)] {
        if tape.shape(v).1 != d {
            return Err(Error::Shape(format!("{what} width {} != layer width {d}", tape.shape(v).1)));
        }
    }
    if tape.shape(keys).0 != tape.shape(values).0 {
        return Err(Error::Shape(format!(
            "{} keys vs {} values",
            tape.shape(keys).0,
            tape.shape(values).0
        )));
    }
    let q = layer.q.forward(tape, store, queries);
    let k = layer.k.forward(tape, store, keys);
    let v = layer.v.forward(tape, store, values);
    let core = tape.attention(q, k, v, layer.heads);
    let out = layer.o.forward(tape, store, core);
    Ok(AttnOut { out, core })
}

/// Pre-norm transformer block: `x + attn(norm(x))`, then `x + mlp(norm(x))`.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Block {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, Activation::Gelu, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> (Var, AttnOut) {
        let h = self.norm1.forward(tape, store, x);
        let a = self.attn.forward(tape, store, h, h);
        let x = tape.add(x, a.out);
        let h = self.norm2.forward(tape, store, x);
        let m = self.mlp.forward(tape, store, h);
        (tape.add(x, m), a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// Every patch of the past visit.
    PastFull,
    /// The visible patches of the masked future visit.
    FutureVisible,
}

/// Encoder outputs for one branch.
#[derive(Clone, Debug)]
pub struct Embeddings {
    /// `[1 × E]`.
    pub cls: Var,
    /// `[n × E]`, one row per encoded patch.
    pub patches: Var,
    /// `[(n + 1) × E]`, CLS first.
    pub all: Var,
    /// Grid index of each encoded patch row.
    pub token_idx: Vec<usize>,
    pub source: EmbeddingSource,
    /// Attention node of the last block, for CLS attention maps.
    pub last_attn: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Option<LayerNorm>,
    /// Fixed `[N × E]` sin-cos table.
    pub pos: Mat,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let patch_embed = Linear::new(store, "encoder.patch_embed", cfg.patch.voxels(), e, rng);
        let cls = store.add("encoder.cls", trunc_normal(1, e, INIT_STD, rng), false);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("encoder.blocks.{i}"), e, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let norm = cfg.final_norm.then(|| LayerNorm::new(store, "encoder.norm", e));
        let pos = sincos_pos3d(cfg.grid()?, e)?;
        Ok(Encoder {
            cfg: cfg.clone(),
            patch_embed,
            cls,
            blocks,
            norm,
            pos,
        })
    }

    /// Projects the selected raw patches and adds their positional rows.
    pub fn embed_patches(&self, tape: &mut Tape, store: &ParamStore, raw: &TokenGrid, idx: &[usize]) -> Result<Var> {
        if raw.form != TokenForm::Raw {
            return Err(Error::Usage("encoder expects raw-patch tokens".into()));
        }
        if raw.tokens.rows != self.pos.rows || raw.tokens.cols != self.cfg.patch.voxels() {
            return Err(Error::Shape(format!(
                "token matrix {:?} does not match encoder grid of {} patches of {} voxels",
                raw.tokens.shape(),
                self.pos.rows,
                self.cfg.patch.voxels()
            )));
        }
        let mut sel = Mat::zeros(idx.len(), raw.tokens.cols);
        let mut pos = Mat::zeros(idx.len(), self.cfg.embed_dim);
        for (o, &i) in idx.iter().enumerate() {
            sel.row_mut(o).copy_from_slice(raw.tokens.row(i));
            pos.row_mut(o).copy_from_slice(self.pos.row(i));
        }
        let x = tape.constant(sel);
        let x = self.patch_embed.forward(tape, store, x);
        let p = tape.constant(pos);
        Ok(tape.add(x, p))
    }

    /// Runs the blocks on already-embedded patch tokens, with the CLS token
    /// (plus `te_bias`, if given) prepended.
    pub fn encode_tokens(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        patch_tokens: Var,
        te_bias: Option<Var>,
        token_idx: Vec<usize>,
        source: EmbeddingSource,
    ) -> Embeddings {
        let mut cls = tape.param(store, self.cls);
        if let Some(te) = te_bias {
            cls = tape.add(cls, te);
        }
        let mut x = tape.concat_rows(&[cls, patch_tokens]);
        let mut last_attn = None;
        for b in &self.blocks {
            let (y, a) = b.forward(tape, store, x);
            x = y;
            last_attn = Some(a.core);
        }
        if let Some(n) = &self.norm {
            x = n.forward(tape, store, x);
        }
        let n = token_idx.len();
        let cls_out = tape.slice_rows(x, 0, 1);
        let patches = tape.slice_rows(x, 1, n);
        Embeddings {
            cls: cls_out,
            patches,
            all: x,
            token_idx,
            source,
            last_attn: last_attn.expect("encoder has at least one block"),
        }
    }

    /// Encodes one branch. The past branch sees every patch and may carry a
    /// temporal bias on its CLS token; the future branch sees only the
    /// patches left visible by `mask` and never carries a temporal bias.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        raw: &TokenGrid,
        source: EmbeddingSource,
        mask: Option<&MaskSet>,
        te_bias: Option<Var>,
    ) -> Result<Embeddings> {
        let idx: Vec<usize> = match (source, mask) {
            (EmbeddingSource::PastFull, Some(_)) => {
                return Err(Error::Usage("the past branch is encoded without masking".into()))
            }
            (EmbeddingSource::PastFull, None) => (0..raw.len()).collect(),
            (EmbeddingSource::FutureVisible, _) if te_bias.is_some() => {
                return Err(Error::Usage("temporal encoding is only added on the past branch".into()))
            }
            (EmbeddingSource::FutureVisible, Some(m)) => {
                if m.n != raw.len() {
                    return Err(Error::Shape(format!("mask over {} tokens, grid has {}", m.n, raw.len())));
                }
                m.visible()
            }
            (EmbeddingSource::FutureVisible, None) => (0..raw.len()).collect(),
        };
        let x = self.embed_patches(tape, store, raw, &idx)?;
        Ok(self.encode_tokens(tape, store, x, te_bias, idx, source))
    }

    pub fn param_prefix() -> &'static str {
        "encoder."
    }
}

/// CLS-to-patch attention of the last block, averaged over heads, as a
/// `grid`-shaped weight table (sums to 1 over patch keys).
pub fn cls_attention(tape: &Tape, emb: &Embeddings) -> Vec<f64> {
    let weights = tape.attention_weights(emb.last_attn).expect("attention node");
    let n = emb.token_idx.len();
    let heads = weights.len() as f64;
    let mut out = vec![0.0; n];
    for w in weights {
        // row 0 is the CLS query; key 0 is CLS itself
        let row = w.row(0);
        let patch_mass: f64 = row[1..].iter().sum();
        for (o, &v) in out.iter_mut().zip(&row[1..]) {
            *o += v / patch_mass / heads;
        }
    }
    out
}

/// Nearest-neighbour upsampling of a `grid` weight table to volume dims.
pub fn upsample_grid(weights: &[f64], grid: Dims, patch: Dims) -> Volume {
    let dims = Dims::new(grid.d * patch.d, grid.h * patch.h, grid.w * patch.w);
    let mut v = Volume::zeros(dims);
    for d in 0..dims.d {
        for h in 0..dims.h {
            for w in 0..dims.w {
                let g = ((d / patch.d) * grid.h + h / patch.h) * grid.w + w / patch.w;
                v.set(d, h, w, weights[g] as f32);
            }
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::patchify;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            volume: Dims::new(4, 8, 8),
            patch: Dims::new(2, 4, 4),
            depth: 2,
            embed_dim: 12,
            heads: 2,
            mlp_ratio: 2,
            final_norm: true,
        }
    }

    fn volume(seed: u64, dims: Dims) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::new(dims, (0..dims.voxels()).map(|_| rng.gen()).collect()).unwrap()
    }

    fn attn_layer(d: usize, heads: usize, seed: u64) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = MultiHeadAttention::new(&mut store, "a", d, heads, &mut rng);
        (store, l)
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (store, l) = attn_layer(4, 2, 0);
        let mut tape = Tape::new();
        let q = tape.constant(Mat::from_vec(2, 4, vec![0.3, -0.1, 0.5, 0.2, 1.0, 0.0, -1.0, 0.4]));
        let kv = tape.constant(Mat::from_rows(&vec![vec![0.1, 0.2, 0.3, 0.4]; 3]));
        let out = mhsa(&mut tape, &store, &l, q, kv, kv).unwrap();
        for w in tape.attention_weights(out.core).unwrap() {
            for v in &w.data {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_two_key_softmax() {
        // identity projections on one head: logits are q·k / sqrt(d)
        let mut store = ParamStore::new();
        let d = 2;
        let eye = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let mk = |store: &mut ParamStore, n: &str| {
            let w = store.add(format!("{n}.w"), eye.clone(), true);
            Linear { w, b: None, d_in: d, d_out: d }
        };
        let l = MultiHeadAttention {
            q: mk(&mut store, "q"),
            k: mk(&mut store, "k"),
            v: mk(&mut store, "v"),
            o: mk(&mut store, "o"),
            heads: 1,
        };
        let s = 3f64.ln() * 2f64.sqrt();
        let mut tape = Tape::new();
        let q = tape.constant(Mat::row_vec(vec![1.0, 0.0]));
        let k = tape.constant(Mat::from_vec(2, 2, vec![0.0, 0.0, s, 0.0]));
        let out = mhsa(&mut tape, &store, &l, q, k, k).unwrap();
        let w = &tape.attention_weights(out.core).unwrap()[0];
        assert!((w.data[0] - 0.25).abs() < 1e-12 && (w.data[1] - 0.75).abs() < 1e-12, "{w:?}");
    }

    #[test]
    fn joint_key_value_permutation_is_invariant() {
        let (store, l) = attn_layer(4, 2, 1);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin()).collect()).collect();
        let perm = [2, 0, 3, 1];
        let run = |rows: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let q = tape.constant(Mat::from_vec(1, 4, vec![0.2, 0.1, -0.3, 0.7]));
            let kv = tape.constant(Mat::from_rows(rows));
            let out = mhsa(&mut tape, &store, &l, q, kv, kv).unwrap();
            tape.value(out.out).clone()
        };
        let a = run(&rows);
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let b = run(&permuted);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_shape_errors() {
        let (store, l) = attn_layer(4, 2, 2);
        let mut tape = Tape::new();
        let q = tape.constant(Mat::zeros(1, 4));
        let k = tape.constant(Mat::zeros(3, 4));
        let v = tape.constant(Mat::zeros(2, 4));
        assert!(matches!(mhsa(&mut tape, &store, &l, q, k, v), Err(Error::Shape(_))));
        let bad = tape.constant(Mat::zeros(3, 5));
        assert!(matches!(mhsa(&mut tape, &store, &l, q, bad, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn past_and_future_paths_share_weights() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let raw = patchify(&volume(4, cfg.volume), cfg.patch).unwrap();
        let mut tape = Tape::new();
        let a = enc.encode(&mut tape, &store, &raw, EmbeddingSource::PastFull, None, None).unwrap();
        let before: Vec<_> = {
            let mut v: Vec<_> = tape.loaded_params().collect();
            v.sort();
            v
        };
        let b = enc.encode(&mut tape, &store, &raw, EmbeddingSource::FutureVisible, None, None).unwrap();
        let mut after: Vec<_> = tape.loaded_params().collect();
        after.sort();
        // the second branch loaded no new parameter nodes
        assert_eq!(before, after);
        assert_eq!(tape.value(a.all), tape.value(b.all));
    }

    #[test]
    fn masked_future_has_visible_tokens_only() {
        let cfg = EncoderConfig::desk();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let raw = patchify(&volume(6, cfg.volume), cfg.patch).unwrap();
        let mask = crate::tokenizer::random_mask(64, 0.75, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let e = enc
            .encode(&mut tape, &store, &raw, EmbeddingSource::FutureVisible, Some(&mask), None)
            .unwrap();
        assert_eq!(tape.shape(e.all), (17, 64));
        assert_eq!(tape.shape(e.patches), (16, 64));
    }

    #[test]
    fn temporal_bias_rejected_on_future_branch() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let raw = patchify(&volume(4, cfg.volume), cfg.patch).unwrap();
        let mut tape = Tape::new();
        let te = tape.constant(Mat::zeros(1, 12));
        let r = enc.encode(&mut tape, &store, &raw, EmbeddingSource::FutureVisible, None, Some(te));
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn zeroed_output_projections_make_blocks_identity() {
        let mut cfg = tiny();
        cfg.final_norm = false;
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        for b in &enc.blocks {
            for l in [b.attn.o, b.mlp.fc2] {
                *store.value_mut(l.w) = Mat::zeros(l.d_in, l.d_out);
            }
        }
        let raw = patchify(&volume(9, cfg.volume), cfg.patch).unwrap();
        let mut tape = Tape::new();
        let idx: Vec<usize> = (0..raw.len()).collect();
        let x = enc.embed_patches(&mut tape, &store, &raw, &idx).unwrap();
        let e = enc.encode_tokens(&mut tape, &store, x, None, idx, EmbeddingSource::PastFull);
        assert_eq!(tape.value(e.patches), tape.value(x));
        assert_eq!(tape.value(e.cls), store.value(enc.cls));
    }

    #[test]
    fn cls_attention_sums_to_one_and_is_flat_on_constant_input() {
        let cfg = EncoderConfig::desk();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let v = Volume::new(cfg.volume, vec![0.5; cfg.volume.voxels()]).unwrap();
        let raw = patchify(&v, cfg.patch).unwrap();
        let mut tape = Tape::new();
        let e = enc.encode(&mut tape, &store, &raw, EmbeddingSource::PastFull, None, None).unwrap();
        let w = cls_attention(&tape, &e);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let (lo, hi) = w.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(hi - lo < 0.1 / 64.0, "spread {}", hi - lo);
        let up = upsample_grid(&w, cfg.grid().unwrap(), cfg.patch);
        assert_eq!(up.dims, cfg.volume);
        assert_eq!(up.get(0, 0, 0) as f64, w[0] as f32 as f64);
    }
}
