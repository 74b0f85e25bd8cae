//! 3D patchification, fixed sin-cos positional tables, and random masking.

use rand::Rng;

use crate::error::{Error, Result};
use crate::synthvol::{Dims, Volume};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenForm {
    /// Each token holds the raw voxels of one patch.
    Raw,
    /// Tokens have been projected to the model width.
    Embedded,
}

/// Tokens in row-major `(d, h, w)` grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Mat,
    pub grid: Dims,
    pub patch: Dims,
    pub form: TokenForm,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch.voxels()
    }
}

/// Grid dimensions for a volume split into patches, or a shape error.
pub fn grid_dims(volume: Dims, patch: Dims) -> Result<Dims> {
    volume.validate()?;
    patch.validate()?;
    if volume.d % patch.d != 0 || volume.h % patch.h != 0 || volume.w % patch.w != 0 {
        return Err(Error::Shape(format!(
            "volume {volume} is not divisible into {patch} patches"
        )));
    }
    Ok(Dims::new(volume.d / patch.d, volume.h / patch.h, volume.w / patch.w))
}

pub fn patchify(v: &Volume, patch: Dims) -> Result<TokenGrid> {
    let grid = grid_dims(v.dims, patch)?;
    let p = patch.voxels();
    let mut tokens = Mat::zeros(grid.voxels(), p);
    let mut t = 0;
    for gd in 0..grid.d {
        for gh in 0..grid.h {
            for gw in 0..grid.w {
                let row = tokens.row_mut(t);
                let mut k = 0;
                for pd in 0..patch.d {
                    for ph in 0..patch.h {
                        let base = v.index(gd * patch.d + pd, gh * patch.h + ph, gw * patch.w);
                        for pw in 0..patch.w {
                            row[k] = v.voxels[base + pw] as f64;
                            k += 1;
                        }
                    }
                }
                t += 1;
            }
        }
    }
    Ok(TokenGrid {
        tokens,
        grid,
        patch,
        form: TokenForm::Raw,
    })
}

pub fn unpatchify(g: &TokenGrid) -> Result<Volume> {
    if g.form != TokenForm::Raw {
        return Err(Error::Usage("unpatchify needs raw-patch tokens, got embedded tokens".into()));
    }
    let p = g.patch;
    if g.tokens.cols != p.voxels() || g.tokens.rows != g.grid.voxels() {
        return Err(Error::Shape(format!(
            "token matrix {:?} does not match grid {} with {} patches",
            g.tokens.shape(),
            g.grid,
            p
        )));
    }
    let dims = Dims::new(g.grid.d * p.d, g.grid.h * p.h, g.grid.w * p.w);
    let mut v = Volume::zeros(dims);
    let mut t = 0;
    for gd in 0..g.grid.d {
        for gh in 0..g.grid.h {
            for gw in 0..g.grid.w {
                let row = g.tokens.row(t);
                let mut k = 0;
                for pd in 0..p.d {
                    for ph in 0..p.h {
                        let base = v.index(gd * p.d + pd, gh * p.h + ph, gw * p.w);
                        for pw in 0..p.w {
                            v.voxels[base + pw] = row[k] as f32;
                            k += 1;
                        }
                    }
                }
                t += 1;
            }
        }
    }
    Ok(v)
}

/// Widths of the per-axis sub-encodings: three even numbers summing to
/// `embed_dim`, as equal as possible, larger ones first.
pub fn axis_widths(embed_dim: usize) -> Result<[usize; 3]> {
    if embed_dim < 6 || embed_dim % 2 != 0 {
        return Err(Error::Config(format!(
            "sin-cos positional width must be even and >= 6, got {embed_dim}"
        )));
    }
    let base = 2 * (embed_dim / 6);
    let mut w = [base; 3];
    let mut rest = embed_dim - 3 * base;
    for slot in w.iter_mut() {
        if rest == 0 {
            break;
        }
        *slot += 2;
        rest -= 2;
    }
    Ok(w)
}

/// 1D sin-cos encoding of one position into `width` values:
/// `[sin(p·ω_0..), cos(p·ω_0..)]`, `ω_i = 10000^{-i/(width/2)}`.
fn sincos_1d(pos: f64, width: usize, out: &mut [f64]) {
    let half = width / 2;
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[i] = (pos * omega).sin();
        out[half + i] = (pos * omega).cos();
    }
}

/// Fixed positional table `[N × embed_dim]`, the concatenation of per-axis
/// encodings of each token's `(d, h, w)` grid coordinate.
pub fn sincos_pos3d(grid: Dims, embed_dim: usize) -> Result<Mat> {
    let widths = axis_widths(embed_dim)?;
    let mut table = Mat::zeros(grid.voxels(), embed_dim);
    let mut t = 0;
    for d in 0..grid.d {
        for h in 0..grid.h {
            for w in 0..grid.w {
                let row = table.row_mut(t);
                let mut off = 0;
                for (axis, &pos) in [d, h, w].iter().enumerate() {
                    sincos_1d(pos as f64, widths[axis], &mut row[off..off + widths[axis]]);
                    off += widths[axis];
                }
                t += 1;
            }
        }
    }
    Ok(table)
}

/// Sorted masked token indices out of `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub masked: Vec<usize>,
    pub n: usize,
}

impl MaskSet {
    pub fn new(mut masked: Vec<usize>, n: usize) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= n) {
            return Err(Error::Shape(format!("mask index out of range for {n} tokens")));
        }
        Ok(MaskSet { masked, n })
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn visible(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n - self.masked.len());
        let mut m = self.masked.iter().peekable();
        for i in 0..self.n {
            if m.peek() == Some(&&i) {
                m.next();
            } else {
                out.push(i);
            }
        }
        out
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// `round(ratio · n)` with halves rounded up.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64 + 0.5).floor() as usize
}

pub fn random_mask<R: Rng>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskSet> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0,1)")));
    }
    let k = mask_count(n, ratio).min(n);
    let masked = rand::seq::index::sample(rng, n, k).into_vec();
    MaskSet::new(masked, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(dims: Dims) -> Volume {
        let n = dims.voxels();
        Volume::new(dims, (0..n).map(|i| i as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn patchify_shape_arithmetic() {
        let g = patchify(&ramp(Dims::new(4, 8, 8)), Dims::new(2, 4, 4)).unwrap();
        assert_eq!(g.tokens.shape(), (8, 32));
        assert_eq!(g.grid, Dims::new(2, 2, 2));
    }

    #[test]
    fn constant_volume_gives_identical_tokens() {
        let v = Volume::new(Dims::new(4, 8, 8), vec![0.25; 256]).unwrap();
        let g = patchify(&v, Dims::new(2, 4, 4)).unwrap();
        for r in 1..g.len() {
            assert_eq!(g.tokens.row(r), g.tokens.row(0));
        }
    }

    #[test]
    fn first_token_holds_leading_block() {
        let v = ramp(Dims::new(4, 8, 8));
        let g = patchify(&v, Dims::new(2, 4, 4)).unwrap();
        let mut expect = Vec::new();
        for d in 0..2 {
            for h in 0..4 {
                for w in 0..4 {
                    expect.push(v.get(d, h, w) as f64);
                }
            }
        }
        assert_eq!(g.tokens.row(0), &expect[..]);
        // token 1 is the next patch along w
        assert_eq!(g.tokens.at(1, 0), v.get(0, 0, 4) as f64);
    }

    #[test]
    fn non_divisible_dims_are_shape_errors() {
        let v = ramp(Dims::new(4, 8, 8));
        assert!(matches!(patchify(&v, Dims::new(3, 4, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn unpatchify_inverts_and_rejects_embedded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dims = Dims::new(16, 32, 32);
        for _ in 0..100 {
            let v = Volume::new(dims, (0..dims.voxels()).map(|_| rng.gen()).collect()).unwrap();
            let g = patchify(&v, Dims::new(4, 8, 8)).unwrap();
            assert_eq!(unpatchify(&g).unwrap(), v);
        }
        let mut g = patchify(&ramp(dims), Dims::new(4, 8, 8)).unwrap();
        g.form = TokenForm::Embedded;
        assert!(matches!(unpatchify(&g), Err(Error::Usage(_))));
    }

    #[test]
    fn swapping_tokens_swaps_blocks() {
        let v = ramp(Dims::new(4, 8, 8));
        let patch = Dims::new(2, 4, 4);
        let mut g = patchify(&v, patch).unwrap();
        let (a, b) = (g.tokens.row(0).to_vec(), g.tokens.row(5).to_vec());
        g.tokens.row_mut(0).copy_from_slice(&b);
        g.tokens.row_mut(5).copy_from_slice(&a);
        let out = unpatchify(&g).unwrap();
        // token 5 = grid (1,0,1) → voxels [2:4, 0:4, 4:8]
        assert_eq!(out.get(0, 0, 0), v.get(2, 0, 4));
        assert_eq!(out.get(2, 0, 4), v.get(0, 0, 0));
        assert_eq!(out.get(0, 4, 0), v.get(0, 4, 0));
    }

    #[test]
    fn axis_factorisation_and_purity() {
        let grid = Dims::new(2, 3, 4);
        let t = sincos_pos3d(grid, 12).unwrap();
        assert_eq!(t, sincos_pos3d(grid, 12).unwrap());
        // tokens 0 and 5 share d=0; the first axis block must agree
        assert_eq!(&t.row(0)[..4], &t.row(5)[..4]);
        assert_ne!(&t.row(0)[4..], &t.row(5)[4..]);
    }

    #[test]
    fn encodings_pairwise_distinct_on_small_grid() {
        let t = sincos_pos3d(Dims::new(2, 2, 2), 12).unwrap();
        for i in 0..8 {
            for j in i + 1..8 {
                let dist: f64 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(dist > 1e-6, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn positional_width_rules() {
        assert_eq!(axis_widths(64).unwrap(), [22, 22, 20]);
        assert_eq!(axis_widths(768).unwrap(), [256, 256, 256]);
        assert_eq!(axis_widths(32).unwrap(), [12, 10, 10]);
        assert!(matches!(sincos_pos3d(Dims::new(2, 2, 2), 13), Err(Error::Config(_))));
        assert!(matches!(sincos_pos3d(Dims::new(2, 2, 2), 4), Err(Error::Config(_))));
    }

    #[test]
    fn mask_cardinality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_mask(8, 0.75, &mut rng).unwrap();
        assert_eq!((m.len(), m.visible().len()), (6, 2));
        assert!(random_mask(8, 0.0, &mut rng).unwrap().is_empty());
        for n in [8, 64, 1000] {
            assert_eq!(random_mask(n, 0.75, &mut rng).unwrap().len(), (0.75 * n as f64).round() as usize);
        }
        assert!(matches!(random_mask(8, 1.0, &mut rng), Err(Error::Config(_))));
        assert!(matches!(random_mask(8, -0.1, &mut rng), Err(Error::Config(_))));
        assert_eq!(mask_count(10, 0.25), 3); // 2.5 rounds up
    }

    #[test]
    fn mask_is_uniform_over_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let hits = (0..10_000)
            .filter(|_| random_mask(8, 0.75, &mut rng).unwrap().is_masked(0))
            .count();
        let f = hits as f64 / 10_000.0;
        assert!((0.73..=0.77).contains(&f), "{f}");
    }

    #[test]
    fn mask_replays_under_same_stream() {
        let r = ChaCha8Rng::seed_from_u64(5);
        let a = random_mask(64, 0.75, &mut r.clone()).unwrap();
        let b = random_mask(64, 0.75, &mut r.clone()).unwrap();
        assert_eq!(a, b);
    }
}
