//! Lightweight transformer decoder that reconstructs the masked future patches.
//!
//! Queries are the future visit's visible tokens restored to full grid order
//! with a shared learnable mask token in every masked slot. In the Siamese
//! modes each block first cross-attends from the queries to a key/value
//! sequence built from the past visit (`[ẑ?, CLS_t + TE₂, past patches]`),
//! then self-attends, then applies an MLP. In the single-volume mode the
//! blocks are self-attention only and the encoder CLS joins the sequence.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::{mhsa, Block, EmbeddingSource, Embeddings};
use crate::error::{Error, Result};
use crate::nn::{trunc_normal, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, INIT_STD};
use crate::synthvol::Dims;
use crate::tensor::Mat;
use crate::tokenizer::{sincos_pos3d, MaskSet};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Whether blocks cross-attend to the past visit.
    pub cross: bool,
}

impl DecoderConfig {
    pub fn desk() -> Self {
        DecoderConfig {
            depth: 2,
            embed_dim: 32,
            heads: 4,
            mlp_ratio: 4,
            cross: true,
        }
    }

    pub fn paper() -> Self {
        DecoderConfig {
            depth: 6,
            embed_dim: 384,
            heads: 12,
            mlp_ratio: 4,
            cross: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("decoder depth, width, heads, and mlp ratio must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    pub cross: Option<CrossAttention>,
    pub inner: Block,
}

impl DecoderBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, cross: bool, rng: &mut R) -> Self {
        let cross = cross.then(|| CrossAttention {
            norm_q: LayerNorm::new(store, &format!("{name}.cross_norm_q"), dim),
            norm_kv: LayerNorm::new(store, &format!("{name}.cross_norm_kv"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
        });
        DecoderBlock { cross, inner: Block::new(store, name, dim, heads, mlp_ratio, rng) }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, kv: Option<Var>) -> Result<Var> {
        let mut x = x;
        if let (Some(c), Some(kv)) = (&self.cross, kv) {
            let q = c.norm_q.forward(tape, store, x);
            let k = c.norm_kv.forward(tape, store, kv);
            let a = mhsa(tape, store, &c.attn, q, k, k)?;
            x = tape.add(x, a.out);
        }
        Ok(self.inner.forward(tape, store, x).0)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
    /// Fixed `[N × dd]` sin-cos table.
    pub pos: Mat,
    pub patch_voxels: usize,
}

/// What the decoder reads from the past visit.
#[derive(Clone, Copy, Debug)]
pub struct PastContext<'a> {
    pub emb: &'a Embeddings,
    /// `[1 × E]` latent token placed first in the key/value sequence.
    pub z_hat: Option<Var>,
    /// `[1 × E]` added to the past CLS before decoding.
    pub te: Option<Var>,
}

impl Decoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        encoder_dim: usize,
        grid: Dims,
        patch_voxels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let dd = cfg.embed_dim;
        let embed = Linear::new(store, "decoder.embed", encoder_dim, dd, rng);
        let mask_token = store.add("decoder.mask_token", trunc_normal(1, dd, INIT_STD, rng), false);
        let blocks = (0..cfg.depth)
            .map(|i| DecoderBlock::new(store, &format!("decoder.blocks.{i}"), dd, cfg.heads, cfg.mlp_ratio, cfg.cross, rng))
            .collect();
        let norm = LayerNorm::new(store, "decoder.norm", dd);
        let head = Linear::new(store, "decoder.head", dd, patch_voxels, rng);
        Ok(Decoder {
            cfg: cfg.clone(),
            embed,
            mask_token,
            blocks,
            norm,
            head,
            pos: sincos_pos3d(grid, dd)?,
            patch_voxels,
        })
    }

    fn n_tokens(&self) -> usize {
        self.pos.rows
    }

    /// `[N × dd]` query sequence: visible future tokens in grid order with the
    /// mask token everywhere else, plus decoder positions.
    fn restore(&self, tape: &mut Tape, store: &ParamStore, future: &Embeddings, mask: &MaskSet) -> Result<Var> {
        let n = self.n_tokens();
        if mask.n != n {
            return Err(Error::Shape(format!("mask over {} tokens, decoder grid has {n}", mask.n)));
        }
        let visible = mask.visible();
        if visible != future.token_idx {
            return Err(Error::Shape(format!(
                "mask leaves {} tokens visible but {} future tokens were encoded",
                visible.len(),
                future.token_idx.len()
            )));
        }
        let vis = self.embed.forward(tape, store, future.patches);
        let mt = tape.param(store, self.mask_token);
        let pool = tape.concat_rows(&[vis, mt]);
        let mut slot = Vec::with_capacity(n);
        let mut next = 0;
        for i in 0..n {
            if mask.is_masked(i) {
                slot.push(visible.len());
            } else {
                slot.push(next);
                next += 1;
            }
        }
        let full = tape.gather_rows(pool, &slot);
        let pos = tape.constant(self.pos.clone());
        Ok(tape.add(full, pos))
    }

    /// Key/value sequence from the past visit, positions on patch rows only.
    fn past_kv(&self, tape: &mut Tape, store: &ParamStore, past: &PastContext) -> Result<Var> {
        if past.emb.source != EmbeddingSource::PastFull || past.emb.token_idx.len() != self.n_tokens() {
            return Err(Error::Shape("decoder keys need the fully encoded past visit".into()));
        }
        let mut cls = past.emb.cls;
        if let Some(te) = past.te {
            cls = tape.add(cls, te);
        }
        let mut parts = Vec::with_capacity(3);
        if let Some(z) = past.z_hat {
            parts.push(z);
        }
        parts.push(cls);
        parts.push(past.emb.patches);
        let lead = parts.len() - 1;
        let seq = tape.concat_rows(&parts);
        let x = self.embed.forward(tape, store, seq);
        let mut pos = Mat::zeros(lead + self.n_tokens(), self.cfg.embed_dim);
        pos.data[lead * self.cfg.embed_dim..].copy_from_slice(&self.pos.data);
        let pos = tape.constant(pos);
        Ok(tape.add(x, pos))
    }

    /// Per-patch voxel predictions `[N × P]` in grid order.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        past: Option<&PastContext>,
        future: &Embeddings,
        mask: &MaskSet,
    ) -> Result<Var> {
        let queries = self.restore(tape, store, future, mask)?;
        let (mut x, kv, skip) = match (self.cfg.cross, past) {
            (true, Some(p)) => {
                let kv = self.past_kv(tape, store, p)?;
                (queries, Some(kv), 0)
            }
            (true, None) => return Err(Error::Usage("cross-attention decoder needs the past visit".into())),
            (false, Some(_)) => return Err(Error::Usage("self-attention decoder takes a single visit".into())),
            (false, None) => {
                let cls = self.embed.forward(tape, store, future.cls);
                (tape.concat_rows(&[cls, queries]), None, 1)
            }
        };
        for b in &self.blocks {
            x = b.forward(tape, store, x, kv)?;
        }
        x = self.norm.forward(tape, store, x);
        if skip > 0 {
            x = tape.slice_rows(x, skip, self.n_tokens());
        }
        Ok(self.head.forward(tape, store, x))
    }
}

/// Per-patch standardisation of targets (mean 0, unit variance).
pub fn normalize_patches(target: &Mat) -> Mat {
    let mut out = target.clone();
    let p = target.cols as f64;
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / p;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p;
        let s = (var + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) / s;
        }
    }
    out
}

/// Mean over masked patches of the per-voxel squared error.
pub fn recon_loss(tape: &mut Tape, pred: Var, target: &Mat, mask: &MaskSet) -> Result<Var> {
    if mask.is_empty() {
        return Err(Error::Usage("reconstruction loss over an empty mask".into()));
    }
    if tape.shape(pred) != target.shape() || mask.n != target.rows {
        return Err(Error::Shape(format!(
            "prediction {:?}, target {:?}, mask over {}",
            tape.shape(pred),
            target.shape(),
            mask.n
        )));
    }
    let mut sel = Mat::zeros(mask.len(), target.cols);
    for (o, &i) in mask.masked.iter().enumerate() {
        sel.row_mut(o).copy_from_slice(target.row(i));
    }
    let p = tape.gather_rows(pred, &mask.masked);
    let t = tape.constant(sel);
    let d = tape.sub(p, t);
    let sq = tape.mul(d, d);
    Ok(tape.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Encoder, EncoderConfig};
    use crate::tokenizer::{patchify, random_mask};
    use crate::synthvol::Volume;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_is_zero_for_perfect_and_known_for_constant_error() {
        let target = Mat::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.1).collect());
        let mask = MaskSet::new(vec![1, 3], 4).unwrap();
        let mut tape = Tape::new();
        let p = tape.input(target.clone());
        let l = recon_loss(&mut tape, p, &target, &mask).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let mut off = target.clone();
        for v in off.row_mut(1) {
            *v += 0.5;
        }
        for v in off.row_mut(0) {
            *v += 9.0; // visible, ignored
        }
        let p = tape.input(off);
        let l = recon_loss(&mut tape, p, &target, &mask).unwrap();
        // one of two masked patches off by 0.5 on every voxel
        assert!((tape.scalar(l) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_usage_error() {
        let target = Mat::zeros(4, 2);
        let mut tape = Tape::new();
        let p = tape.input(target.clone());
        let mask = MaskSet::new(vec![], 4).unwrap();
        assert!(matches!(recon_loss(&mut tape, p, &target, &mask), Err(Error::Usage(_))));
    }

    fn setup(cross: bool) -> (ParamStore, Encoder, Decoder) {
        let ecfg = EncoderConfig {
            volume: Dims::new(4, 8, 8),
            patch: Dims::new(2, 4, 4),
            depth: 1,
            embed_dim: 12,
            heads: 2,
            mlp_ratio: 2,
            final_norm: true,
        };
        let dcfg = DecoderConfig {
            depth: 1,
            embed_dim: 8,
            heads: 2,
            mlp_ratio: 2,
            cross,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut store, &ecfg, &mut rng).unwrap();
        let dec = Decoder::new(&mut store, &dcfg, 12, ecfg.grid().unwrap(), 32, &mut rng).unwrap();
        (store, enc, dec)
    }

    fn vol(seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::new(Dims::new(4, 8, 8), (0..256).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn decode_shapes_and_mismatch() {
        let (store, enc, dec) = setup(true);
        let past = patchify(&vol(1), Dims::new(2, 4, 4)).unwrap();
        let fut = patchify(&vol(2), Dims::new(2, 4, 4)).unwrap();
        let mask = random_mask(8, 0.75, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut tape = Tape::new();
        let hp = enc.encode(&mut tape, &store, &past, EmbeddingSource::PastFull, None, None).unwrap();
        let hf = enc
            .encode(&mut tape, &store, &fut, EmbeddingSource::FutureVisible, Some(&mask), None)
            .unwrap();
        let ctx = PastContext { emb: &hp, z_hat: None, te: None };
        let out = dec.decode(&mut tape, &store, Some(&ctx), &hf, &mask).unwrap();
        assert_eq!(tape.shape(out), (8, 32));
        let other = random_mask(8, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(matches!(dec.decode(&mut tape, &store, Some(&ctx), &hf, &other), Err(Error::Shape(_))));
        assert!(matches!(dec.decode(&mut tape, &store, None, &hf, &mask), Err(Error::Usage(_))));
    }

    #[test]
    fn single_volume_decoder() {
        let (store, enc, dec) = setup(false);
        let fut = patchify(&vol(2), Dims::new(2, 4, 4)).unwrap();
        let mask = random_mask(8, 0.75, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut tape = Tape::new();
        let hf = enc
            .encode(&mut tape, &store, &fut, EmbeddingSource::FutureVisible, Some(&mask), None)
            .unwrap();
        let out = dec.decode(&mut tape, &store, None, &hf, &mask).unwrap();
        assert_eq!(tape.shape(out), (8, 32));
    }

    #[test]
    fn normalized_patches_are_standardized() {
        let m = normalize_patches(&Mat::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, 0.5, 0.5, 0.5, 0.5]));
        let r0 = m.row(0);
        assert!(r0.iter().sum::<f64>().abs() < 1e-12);
        assert!(m.row(1).iter().all(|v| v.abs() < 1e-12));
    }
}
