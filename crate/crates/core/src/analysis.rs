//! Diagnostics: PCA of prior samples across intervals, rank correlation, and
//! the analytic parameter/FLOP cost model.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autograd::Tape;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::latentvar::{draw_uniforms, one_hot_draw, prior_logits};
use crate::model::{ArchConfig, Mode, Model, Variant};
use crate::nn::ParamStore;
use crate::rng::keyed;
use crate::synthvol::Volume;
use crate::tokenizer::{mask_count, patchify};

#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    /// `(pc1, pc2)` per input vector.
    pub projections: Vec<[f64; 2]>,
    /// Share of total variance on each of the two axes, descending.
    pub explained: [f64; 2],
    pub axes: [Vec<f64>; 2],
}

/// Projection onto the top two principal axes of the sample covariance.
/// Each axis is signed so that its largest-magnitude entry is positive.
pub fn pca2(vectors: &[Vec<f64>]) -> Result<Pca2> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("PCA needs at least 3 vectors, got {n}")));
    }
    let d = vectors[0].len();
    if d < 2 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("PCA vectors must share a dimension of at least 2".into()));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let total: f64 = cov.diagonal().iter().sum();
    if !(total > 1e-300) {
        return Err(Error::Degenerate("all vectors are equal".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[k]);
        let mut v: Vec<f64> = col.iter().copied().collect();
        let big = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    let axes = [axis(0), axis(1)];
    let explained = [
        (eig.eigenvalues[order[0]] / total).clamp(0.0, 1.0),
        (eig.eigenvalues[order[1]] / total).clamp(0.0, 1.0),
    ];
    let projections = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let p = |ax: &[f64]| row.iter().zip(ax).map(|(a, b)| a * b).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect();
    Ok(Pca2 { projections, explained, axes })
}

/// Tie-averaged ranks, 1-based.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Degenerate("correlation needs two equal-length series of length >= 2".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant series".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&ranks(a), &ranks(b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub delta_t: f64,
    pub sample_idx: usize,
    pub latent: Vec<f64>,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSweep {
    pub rows: Vec<SweepRow>,
    pub explained: [f64; 2],
    /// `(Δt, mean pc1, variance of pc1)` per interval.
    pub per_dt: Vec<(f64, f64, f64)>,
    /// Rank correlation between Δt and the per-interval mean pc1.
    pub spearman: f64,
}

impl PriorSweep {
    pub fn to_csv(&self, cfg: &RunConfig) -> String {
        let mut s = crate::config::csv_header_block(cfg);
        let _ = writeln!(s, "# explained-variance {} {}", self.explained[0], self.explained[1]);
        let _ = writeln!(s, "# spearman-dt-mean-pc1 {}", self.spearman);
        s += "delta_t,sample_idx,pc1,pc2\n";
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.delta_t, r.sample_idx, r.pc1, r.pc2);
        }
        s
    }
}

/// Draws `k` straight-through prior samples per interval for one visit and
/// projects all draws jointly onto two principal axes.
pub fn sample_prior_sweep(model: &Model, store: &ParamStore, volume: &Volume, dts: &[f64], k: usize, seed: u64) -> Result<PriorSweep> {
    let heads = model.latent.as_ref().ok_or_else(|| {
        Error::Config(format!("prior sweep needs a stamp checkpoint, got {}", model.variant.mode.as_str()))
    })?;
    if dts.is_empty() || k == 0 {
        return Err(Error::Usage("prior sweep needs at least one interval and one sample".into()));
    }
    let raw = patchify(volume, model.arch.encoder.patch)?;
    let mut rows = Vec::with_capacity(dts.len() * k);
    for &dt in dts {
        let mut tape = Tape::new();
        let h = model.encode_past(&mut tape, store, &raw, dt, model.te_enc.is_some())?;
        let prior = prior_logits(&mut tape, store, heads, h.cls)?;
        let probs = tape.value(prior.probs);
        let mut rng = keyed(seed, dt.to_bits());
        for i in 0..k {
            let u = draw_uniforms(heads.spec, &mut rng);
            let z = one_hot_draw(probs, &u)?;
            rows.push(SweepRow { delta_t: dt, sample_idx: i, latent: z.data, pc1: 0.0, pc2: 0.0 });
        }
    }
    let vecs: Vec<Vec<f64>> = rows.iter().map(|r| r.latent.clone()).collect();
    let pca = pca2(&vecs)?;
    for (r, p) in rows.iter_mut().zip(&pca.projections) {
        r.pc1 = p[0];
        r.pc2 = p[1];
    }
    let per_dt: Vec<(f64, f64, f64)> = dts
        .iter()
        .enumerate()
        .map(|(i, &dt)| {
            let pcs: Vec<f64> = rows[i * k..(i + 1) * k].iter().map(|r| r.pc1).collect();
            let m = pcs.iter().sum::<f64>() / k as f64;
            let var = pcs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / k as f64;
            (dt, m, var)
        })
        .collect();
    let xs: Vec<f64> = per_dt.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = per_dt.iter().map(|p| p.1).collect();
    let spearman = spearman(&xs, &ys).unwrap_or(0.0);
    Ok(PriorSweep { rows, explained: pca.explained, per_dt, spearman })
}

/// Parameter and forward-FLOP counts for one pretraining iteration at batch 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cost {
    /// Learnable parameters.
    pub params: u64,
    /// Entries of the fixed sin-cos position tables (not learnable).
    pub fixed_pos: u64,
    pub flops: u64,
}

fn linear(i: u64, o: u64) -> u64 {
    i * o + o
}

/// Matrix-multiply FLOPs, `2·m·k·n`.
fn mm(m: u64, k: u64, n: u64) -> u64 {
    2 * m * k * n
}

fn block_params(d: u64, r: u64) -> u64 {
    2 * (2 * d) + 4 * linear(d, d) + linear(d, r * d) + linear(r * d, d)
}

/// Self-attention block over `n` tokens.
fn block_flops(n: u64, d: u64, r: u64) -> u64 {
    mm(n, d, 3 * d) + mm(n, d, n) + mm(n, n, d) + mm(n, d, d) + mm(n, d, r * d) + mm(n, r * d, d)
}

/// Exact counts from the architecture numbers alone.
pub fn count_cost(arch: &ArchConfig, variant: Variant, mask_ratio: f64) -> Result<Cost> {
    arch.validate(&variant)?;
    let e = arch.encoder.embed_dim as u64;
    let re = arch.encoder.mlp_ratio as u64;
    let dd = arch.decoder.embed_dim as u64;
    let rd = arch.decoder.mlp_ratio as u64;
    let p = arch.encoder.patch.voxels() as u64;
    let n = arch.encoder.n_tokens()? as u64;
    let gb = arch.latent.width() as u64;
    let hid = arch.latent_hidden as u64;
    let cross = variant.mode != Mode::Mae;

    let mut params = linear(p, e) + e + arch.encoder.depth as u64 * block_params(e, re);
    if arch.encoder.final_norm {
        params += 2 * e;
    }
    if variant.use_te {
        params += 2 * 2 * linear(e, e);
    }
    if variant.use_se {
        params += linear(e, hid) + linear(hid, gb) + linear(2 * e, hid) + linear(hid, gb);
    }
    let cross_params = if cross { 2 * (2 * dd) + 4 * linear(dd, dd) } else { 0 };
    params += linear(e, dd) + dd + arch.decoder.depth as u64 * (cross_params + block_params(dd, rd)) + 2 * dd + linear(dd, p);

    let visible = n - mask_count(n as usize, mask_ratio) as u64;
    let enc = |tokens: u64, patches: u64| mm(patches, p, e) + arch.encoder.depth as u64 * block_flops(tokens, e, re);
    let mut flops = enc(visible + 1, visible);
    if cross {
        flops += enc(n + 1, n);
    }
    if variant.use_te {
        flops += 2 * (mm(1, e, e) * 2);
    }
    if variant.use_se {
        flops += mm(1, e, hid) + mm(1, hid, gb) + mm(1, 2 * e, hid) + mm(1, hid, gb);
    }
    let depth = arch.decoder.depth as u64;
    if cross {
        let kv = n + 1 + variant.use_se as u64;
        flops += mm(kv + visible, e, dd);
        let c = mm(n, dd, dd) + mm(kv, dd, 2 * dd) + mm(n, dd, kv) + mm(n, kv, dd) + mm(n, dd, dd);
        flops += depth * (c + block_flops(n, dd, rd));
    } else {
        flops += mm(visible + 1, e, dd);
        flops += depth * block_flops(n + 1, dd, rd);
    }
    flops += mm(n, dd, p);

    let fixed_pos = n * e + n * dd;
    Ok(Cost { params, fixed_pos, flops })
}

/// Named architectures: `{stamp,siammae,mae}-{desk,paper}`.
pub fn named_arch(name: &str) -> Result<(ArchConfig, Variant)> {
    let (mode, scale) = name
        .split_once('-')
        .ok_or_else(|| Error::Config(format!("unknown architecture {name:?}")))?;
    let variant = match mode {
        "stamp" => Variant::stamp(),
        "siammae" => Variant::siammae(),
        "mae" => Variant::mae(),
        _ => return Err(Error::Config(format!("unknown architecture {name:?}"))),
    };
    let arch = match scale {
        "desk" => ArchConfig::desk(),
        "paper" => ArchConfig::paper(),
        _ => return Err(Error::Config(format!("unknown architecture {name:?}"))),
    };
    Ok((arch, variant))
}

/// Aligned text table with one row per named architecture.
pub fn cost_report(names: &[&str], mask_ratio: f64) -> Result<String> {
    let mut s = format!("{:<16} {:>10} {:>14} {:>16}\n", "Model", "GFLOP", "Params (M)", "Fixed pos (M)");
    for name in names {
        let (arch, v) = named_arch(name)?;
        let c = count_cost(&arch, v, mask_ratio)?;
        let _ = writeln!(
            s,
            "{:<16} {:>10.3} {:>14.3} {:>16.3}",
            name,
            c.flops as f64 / 1e9,
            c.params as f64 / 1e6,
            c.fixed_pos as f64 / 1e6
        );
    }
    s += "# FLOPs: forward pass of one pretraining iteration at batch 1, 2 per multiply-accumulate,\n";
    s += "# matrix products only. Params: learnable parameters; fixed sin-cos tables listed separately.\n";
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points_have_one_component() {
        let v: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca2(&v).unwrap();
        assert!((p.explained[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_input_is_degenerate() {
        assert!(matches!(pca2(&vec![vec![1.0, 2.0]; 4]), Err(Error::Degenerate(_))));
        assert!(matches!(pca2(&vec![vec![1.0, 2.0]; 2]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn hand_computed_2d_example() {
        // centered points (±2, 0), (0, ±1): covariance diag(8/3, 2/3)
        let v = vec![vec![3.0, 1.0], vec![-1.0, 1.0], vec![1.0, 2.0], vec![1.0, 0.0]];
        let p = pca2(&v).unwrap();
        assert!((p.explained[0] - 0.8).abs() < 1e-9);
        assert!((p.explained[1] - 0.2).abs() < 1e-9);
        let want = [[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
        for (g, w) in p.projections.iter().zip(want) {
            assert!((g[0] - w[0]).abs() < 1e-9 && (g[1] - w[1]).abs() < 1e-9, "{g:?} vs {w:?}");
        }
    }

    #[test]
    fn translation_invariance_and_orthogonality() {
        let v: Vec<Vec<f64>> = (0..10).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos(), i as f64 * 0.1]).collect();
        let shifted: Vec<Vec<f64>> = v.iter().map(|x| x.iter().map(|y| y + 5.0).collect()).collect();
        let (a, b) = (pca2(&v).unwrap(), pca2(&shifted).unwrap());
        for (x, y) in a.projections.iter().zip(&b.projections) {
            assert!((x[0].abs() - y[0].abs()).abs() < 1e-9);
        }
        let cov: f64 = a.projections.iter().map(|p| p[0] * p[1]).sum::<f64>() / 9.0;
        assert!(cov.abs() < 1e-9);
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn paper_encoder_blocks_closed_form() {
        let d = 768u64;
        // two norms, four projections, two MLP layers
        let want = 12 * (4 * d + (4 * d * d + 4 * d) + (8 * d * d + 5 * d));
        assert_eq!(12 * block_params(d, 4), want);
        assert_eq!(want, 85_054_464);
    }

    #[test]
    fn desk_count_matches_constructed_model() {
        for v in [Variant::stamp(), Variant::siammae(), Variant::mae()] {
            let (_, store) = Model::init(&ArchConfig::desk(), v, 0).unwrap();
            let c = count_cost(&ArchConfig::desk(), v, 0.75).unwrap();
            assert_eq!(c.params, store.num_scalars() as u64, "{v:?}");
        }
    }

    #[test]
    fn report_lists_rows() {
        let r = cost_report(&["mae-paper", "stamp-paper"], 0.75).unwrap();
        assert_eq!(r.lines().filter(|l| l.ends_with(char::is_numeric)).count(), 2);
        assert!(named_arch("bogus").is_err());
    }
}
