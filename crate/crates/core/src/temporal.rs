//! Learnable encoding of the inter-visit interval.
//!
//! The interval is expanded into `H = dim/2` cosine and sine waves with
//! geometrically spaced frequencies `ω_i = exp(−ln(200)·i/H)` and passed
//! through a two-layer SiLU MLP. The output is added to the past visit's CLS
//! token, once before the encoder and (with a separate instance) once before
//! the decoder.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, ParamStore};
use crate::tensor::Mat;

pub const FREQUENCY_BASE: f64 = 200.0;

pub fn frequencies(embed_dim: usize) -> Result<Vec<f64>> {
    if embed_dim == 0 || embed_dim % 2 != 0 {
        return Err(Error::Config(format!(
            "temporal encoding width must be even and positive, got {embed_dim}"
        )));
    }
    let h = embed_dim / 2;
    Ok((0..h)
        .map(|i| (-FREQUENCY_BASE.ln() * i as f64 / h as f64).exp())
        .collect())
}

/// `[cos(Δt·ω_0..ω_{H−1}), sin(Δt·ω_0..ω_{H−1})]`.
pub fn te_features(delta_t: f64, embed_dim: usize) -> Result<Vec<f64>> {
    let omegas = frequencies(embed_dim)?;
    let mut out = Vec::with_capacity(embed_dim);
    out.extend(omegas.iter().map(|w| (delta_t * w).cos()));
    out.extend(omegas.iter().map(|w| (delta_t * w).sin()));
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct TemporalEncoder {
    pub embed_dim: usize,
    pub mlp: Mlp,
}

impl TemporalEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, embed_dim: usize, rng: &mut R) -> Result<Self> {
        frequencies(embed_dim)?;
        Ok(TemporalEncoder {
            embed_dim,
            mlp: Mlp::new(store, name, embed_dim, embed_dim, embed_dim, Activation::Silu, rng),
        })
    }

    /// `TE(Δt)` as a `1 × embed_dim` node.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, delta_t: f64) -> Var {
        let feats = te_features(delta_t, self.embed_dim).expect("width validated at construction");
        let x = tape.constant(Mat::row_vec(feats));
        self.mlp.forward(tape, store, x)
    }

    /// Evaluates `TE(Δt)` without keeping a tape.
    pub fn eval(&self, store: &ParamStore, delta_t: f64) -> Vec<f64> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, store, delta_t);
        tape.value(v).data.clone()
    }

    pub fn param_count(&self) -> usize {
        self.mlp.fc1.param_count() + self.mlp.fc2.param_count()
    }
}

/// Distance from `TE(k + 0.5)` to the segment `[TE(k), TE(k + 1)]`, for each
/// integer `k` in `[from, to)`.
pub fn interpolation_deviation(enc: &TemporalEncoder, store: &ParamStore, from: i64, to: i64) -> Vec<(f64, f64)> {
    (from..to)
        .map(|k| {
            let a = enc.eval(store, k as f64);
            let b = enc.eval(store, k as f64 + 1.0);
            let m = enc.eval(store, k as f64 + 0.5);
            (k as f64 + 0.5, point_segment_distance(&m, &a, &b))
        })
        .collect()
}

fn point_segment_distance(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let ap: Vec<f64> = p.iter().zip(a).map(|(x, y)| x - y).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let s = if len2 > 0.0 {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ap.iter()
        .zip(&ab)
        .map(|(x, y)| (x - s * y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Smallest pairwise distance between `TE(Δt)` values on an integer grid.
pub fn min_pairwise_distance(enc: &TemporalEncoder, store: &ParamStore, dts: &[f64]) -> f64 {
    let vals: Vec<Vec<f64>> = dts.iter().map(|&d| enc.eval(store, d)).collect();
    let mut best = f64::INFINITY;
    for i in 0..vals.len() {
        for j in i + 1..vals.len() {
            let d: f64 = vals[i].iter().zip(&vals[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_interval_features() {
        let f = te_features(0.0, 8).unwrap();
        assert!(f[..4].iter().all(|&v| v == 1.0));
        assert!(f[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_form_frequencies() {
        let w = frequencies(4).unwrap();
        assert_eq!(w[0], 1.0);
        assert_abs_diff_eq!(w[1], 0.070_710_678, epsilon = 1e-6);
        let big = frequencies(64).unwrap();
        assert!(*big.last().unwrap() > 1.0 / 200.0);
    }

    #[test]
    fn closed_form_features() {
        let f = te_features(3.0, 4).unwrap();
        assert_abs_diff_eq!(f[0], -0.989_992, epsilon = 1e-6);
        assert_abs_diff_eq!(f[2], 0.141_120, epsilon = 1e-6);
    }

    #[test]
    fn odd_width_is_config_error() {
        assert!(matches!(te_features(1.0, 5), Err(Error::Config(_))));
    }

    #[test]
    fn zero_output_weights_give_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = TemporalEncoder::new(&mut store, "te", 8, &mut rng).unwrap();
        *store.value_mut(enc.mlp.fc2.w) = Mat::zeros(8, 8);
        let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.125).collect();
        *store.value_mut(enc.mlp.fc2.b.unwrap()) = Mat::row_vec(bias.clone());
        for dt in [0.0, 3.0, 17.5] {
            assert_eq!(enc.eval(&store, dt), bias);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = TemporalEncoder::new(&mut store, "te", 16, &mut rng).unwrap();
        assert_eq!(enc.eval(&store, 5.0), enc.eval(&store, 5.0));
    }

    #[test]
    fn segment_distance_geometry() {
        assert_abs_diff_eq!(point_segment_distance(&[0.5, 1.0], &[0.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_abs_diff_eq!(point_segment_distance(&[2.0, 0.0], &[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }
}
