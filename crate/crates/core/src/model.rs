//! Full pretraining model in its three variants and the loss computation for
//! one visit pair.

use rand::Rng;

use crate::autograd::{Grads, Tape, Var};
use crate::backbone::{EmbeddingSource, Embeddings, Encoder, EncoderConfig};
use crate::decoder::{normalize_patches, recon_loss, Decoder, DecoderConfig, PastContext};
use crate::error::{Error, Result};
use crate::latentvar::{
    draw_uniforms, kl_weighted, posterior_logits, prior_logits, st_sample, LatentHeads, LatentSpec,
};
use crate::nn::ParamStore;
use crate::rng::{stream, StreamName};
use crate::temporal::TemporalEncoder;
use crate::tokenizer::{MaskSet, TokenGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Siamese pair with temporal encoding and the stochastic latent.
    Stamp,
    /// Siamese pair, deterministic, no temporal information.
    SiamMae,
    /// Single visit, self-attention decoder.
    Mae,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Stamp => "stamp",
            Mode::SiamMae => "siammae",
            Mode::Mae => "mae",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stamp" => Some(Mode::Stamp),
            "siammae" => Some(Mode::SiamMae),
            "mae" => Some(Mode::Mae),
            _ => None,
        }
    }
}

/// Which parts of the model exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub mode: Mode,
    /// Temporal encoding on the past CLS (STAMP only).
    pub use_te: bool,
    /// Stochastic latent (STAMP only).
    pub use_se: bool,
}

impl Variant {
    pub fn stamp() -> Self {
        Variant { mode: Mode::Stamp, use_te: true, use_se: true }
    }

    pub fn siammae() -> Self {
        Variant { mode: Mode::SiamMae, use_te: false, use_se: false }
    }

    pub fn mae() -> Self {
        Variant { mode: Mode::Mae, use_te: false, use_se: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode != Mode::Stamp && (self.use_te || self.use_se) {
            return Err(Error::Config(format!(
                "temporal encoding and the stochastic latent only exist in stamp mode, not {}",
                self.mode.as_str()
            )));
        }
        Ok(())
    }
}

/// Architecture numbers, independent of the variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub latent: LatentSpec,
    pub latent_hidden: usize,
    pub norm_pix_loss: bool,
}

impl ArchConfig {
    pub fn desk() -> Self {
        ArchConfig {
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(),
            latent: LatentSpec { groups: 2, bins: 32 },
            latent_hidden: 128,
            norm_pix_loss: false,
        }
    }

    pub fn paper() -> Self {
        ArchConfig {
            encoder: EncoderConfig::paper(),
            decoder: DecoderConfig::paper(),
            latent: LatentSpec { groups: 24, bins: 32 },
            latent_hidden: 1536,
            norm_pix_loss: false,
        }
    }

    pub fn validate(&self, variant: &Variant) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        variant.validate()?;
        if variant.use_se {
            self.latent.validate()?;
            if self.latent.width() != self.encoder.embed_dim {
                return Err(Error::Config(format!(
                    "latent {}x{} must flatten to the encoder width {}",
                    self.latent.groups, self.latent.bins, self.encoder.embed_dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub arch: ArchConfig,
    pub variant: Variant,
    pub encoder: Encoder,
    pub te_enc: Option<TemporalEncoder>,
    pub te_dec: Option<TemporalEncoder>,
    pub latent: Option<LatentHeads>,
    pub decoder: Decoder,
}

/// One training example after augmentation and masking.
#[derive(Clone, Debug)]
pub struct PairInputs {
    /// Raw tokens of the earlier visit (ignored in single-visit mode).
    pub past: TokenGrid,
    /// Raw tokens of the later visit.
    pub future: TokenGrid,
    pub delta_t: f64,
    pub mask: MaskSet,
    /// One uniform per latent group.
    pub latent_uniforms: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub recon: Var,
    pub kl: Option<Var>,
    pub total: Var,
    pub pred: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

impl Model {
    /// Builds the model and registers its parameters in `store`.
    pub fn new<R: Rng>(store: &mut ParamStore, arch: &ArchConfig, variant: Variant, rng: &mut R) -> Result<Self> {
        arch.validate(&variant)?;
        let e = arch.encoder.embed_dim;
        let encoder = Encoder::new(store, &arch.encoder, rng)?;
        let te_enc = if variant.use_te { Some(TemporalEncoder::new(store, "te_enc", e, rng)?) } else { None };
        let te_dec = if variant.use_te { Some(TemporalEncoder::new(store, "te_dec", e, rng)?) } else { None };
        let latent = if variant.use_se {
            Some(LatentHeads::new(store, e, arch.latent_hidden, arch.latent, rng)?)
        } else {
            None
        };
        let mut dcfg = arch.decoder.clone();
        dcfg.cross = variant.mode != Mode::Mae;
        let decoder = Decoder::new(store, &dcfg, e, arch.encoder.grid()?, arch.encoder.patch.voxels(), rng)?;
        Ok(Model {
            arch: arch.clone(),
            variant,
            encoder,
            te_enc,
            te_dec,
            latent,
            decoder,
        })
    }

    /// Fresh parameters drawn from the run's init stream.
    pub fn init(arch: &ArchConfig, variant: Variant, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, StreamName::Init);
        let m = Model::new(&mut store, arch, variant, &mut rng)?;
        Ok((m, store))
    }

    /// Rebuilds the structure for `store`, checking every name and shape.
    pub fn bind(arch: &ArchConfig, variant: Variant, store: &ParamStore) -> Result<Self> {
        let (m, fresh) = Model::init(arch, variant, 0)?;
        if fresh.len() != store.len() {
            return Err(Error::Shape(format!(
                "parameter table has {} entries, architecture needs {}",
                store.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.blocks().iter().zip(store.blocks()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(m)
    }

    pub fn draw_uniforms<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match &self.latent {
            Some(l) => draw_uniforms(l.spec, rng),
            None => Vec::new(),
        }
    }

    /// Past-branch encoding with the encoder-side temporal bias when enabled.
    pub fn encode_past(&self, tape: &mut Tape, store: &ParamStore, past: &TokenGrid, delta_t: f64, use_te: bool) -> Result<Embeddings> {
        let te = match (&self.te_enc, use_te) {
            (Some(t), true) => Some(t.forward(tape, store, delta_t)),
            (None, true) => return Err(Error::Usage("model was built without temporal encoding".into())),
            _ => None,
        };
        self.encoder.encode(tape, store, past, EmbeddingSource::PastFull, None, te)
    }

    pub fn forward_loss(&self, tape: &mut Tape, store: &ParamStore, inp: &PairInputs, beta: f64) -> Result<LossVars> {
        let future = self
            .encoder
            .encode(tape, store, &inp.future, EmbeddingSource::FutureVisible, Some(&inp.mask), None)?;
        let pred = if self.variant.mode == Mode::Mae {
            self.decoder.decode(tape, store, None, &future, &inp.mask)?
        } else {
            let past = self.encode_past(tape, store, &inp.past, inp.delta_t, self.variant.use_te)?;
            let mut kl = None;
            let mut z_hat = None;
            if let Some(heads) = &self.latent {
                let prior = prior_logits(tape, store, heads, past.cls)?;
                let post = posterior_logits(tape, store, heads, past.cls, future.cls)?;
                z_hat = Some(st_sample(tape, &post, &inp.latent_uniforms)?);
                kl = Some(kl_weighted(tape, &post, &prior)?);
            }
            let te = self.te_dec.as_ref().map(|t| t.forward(tape, store, inp.delta_t));
            let ctx = PastContext { emb: &past, z_hat, te };
            let pred = self.decoder.decode(tape, store, Some(&ctx), &future, &inp.mask)?;
            let target = self.target(&inp.future);
            let recon = recon_loss(tape, pred, &target, &inp.mask)?;
            let total = match kl {
                Some(k) => {
                    let bk = tape.scale(k, beta);
                    tape.add(recon, bk)
                }
                None => recon,
            };
            return Ok(LossVars { recon, kl, total, pred });
        };
        let target = self.target(&inp.future);
        let recon = recon_loss(tape, pred, &target, &inp.mask)?;
        Ok(LossVars { recon, kl: None, total: recon, pred })
    }

    fn target(&self, future: &TokenGrid) -> crate::tensor::Mat {
        if self.arch.norm_pix_loss {
            normalize_patches(&future.tokens)
        } else {
            future.tokens.clone()
        }
    }

    /// Loss values and gradients for one pair.
    pub fn loss_and_grads(&self, store: &ParamStore, inp: &PairInputs, beta: f64) -> Result<(LossValues, Grads)> {
        let mut tape = Tape::new();
        let l = self.forward_loss(&mut tape, store, inp, beta)?;
        let values = LossValues {
            recon: tape.scalar(l.recon),
            kl: l.kl.map(|k| tape.scalar(k)).unwrap_or(0.0),
            total: tape.scalar(l.total),
        };
        let grads = tape.backward(l.total);
        Ok((values, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::synthvol::{Dims, Volume};
    use crate::tokenizer::{patchify, random_mask};

    pub(crate) fn tiny_arch() -> ArchConfig {
        ArchConfig {
            encoder: EncoderConfig {
                volume: Dims::new(4, 8, 8),
                patch: Dims::new(2, 4, 4),
                depth: 1,
                embed_dim: 12,
                heads: 2,
                mlp_ratio: 2,
                final_norm: true,
            },
            decoder: DecoderConfig { depth: 1, embed_dim: 8, heads: 2, mlp_ratio: 2, cross: true },
            latent: LatentSpec { groups: 2, bins: 6 },
            latent_hidden: 24,
            norm_pix_loss: false,
        }
    }

    fn pair(model: &Model, seed: u64) -> PairInputs {
        let mut r = stream(seed, StreamName::Data);
        let dims = model.arch.encoder.volume;
        let mk = |r: &mut crate::rng::StreamRng| Volume::new(dims, (0..dims.voxels()).map(|_| r.gen()).collect()).unwrap();
        let (a, b) = (mk(&mut r), mk(&mut r));
        let p = model.arch.encoder.patch;
        PairInputs {
            past: patchify(&a, p).unwrap(),
            future: patchify(&b, p).unwrap(),
            delta_t: 6.0,
            mask: random_mask(8, 0.75, &mut r).unwrap(),
            latent_uniforms: model.draw_uniforms(&mut r),
        }
    }

    #[test]
    fn variant_parameter_prefixes() {
        for (v, te, lat, cross) in [
            (Variant::stamp(), true, true, true),
            (Variant::siammae(), false, false, true),
            (Variant::mae(), false, false, false),
        ] {
            let (_, store) = Model::init(&tiny_arch(), v, 1).unwrap();
            assert_eq!(store.has_prefix("te_enc."), te);
            assert_eq!(store.has_prefix("te_dec."), te);
            assert_eq!(store.has_prefix("prior."), lat);
            assert_eq!(store.has_prefix("posterior."), lat);
            assert_eq!(store.has_prefix("decoder.blocks.0.cross_attn."), cross);
        }
    }

    #[test]
    fn latent_must_match_encoder_width() {
        let mut a = tiny_arch();
        a.latent = LatentSpec { groups: 3, bins: 6 };
        assert!(matches!(Model::init(&a, Variant::stamp(), 0), Err(Error::Config(_))));
        let bad = Variant { mode: Mode::SiamMae, use_te: true, use_se: false };
        assert!(matches!(Model::init(&tiny_arch(), bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn losses_are_finite_and_consistent() {
        for v in [Variant::stamp(), Variant::siammae(), Variant::mae()] {
            let (m, store) = Model::init(&tiny_arch(), v, 2).unwrap();
            let inp = pair(&m, 3);
            let (l, g) = m.loss_and_grads(&store, &inp, 1.0).unwrap();
            assert!(l.recon.is_finite() && l.kl >= 0.0);
            assert!((l.total - (l.recon + l.kl)).abs() < 1e-12);
            assert!(g.params().count() > 0);
        }
    }

    #[test]
    fn bind_checks_names() {
        let (_, store) = Model::init(&tiny_arch(), Variant::stamp(), 0).unwrap();
        assert!(Model::bind(&tiny_arch(), Variant::stamp(), &store).is_ok());
        assert!(Model::bind(&tiny_arch(), Variant::siammae(), &store).is_err());
    }
}
