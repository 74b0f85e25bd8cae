//! Run configuration: `key = value` text with `#` comments and `[section]`
//! headers, layered over a named profile.
//!
//! ```text
//! profile = desk
//! [train]
//! mode = stamp
//! epochs = 30
//! ```

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::backbone::EncoderConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::eval::{Pool, ProbeConfig, ThresholdRule};
use crate::latentvar::LatentSpec;
use crate::model::{ArchConfig, Mode, Variant};
use crate::synthvol::{DatasetConfig, Dims};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Profile::Desk),
            "paper" => Some(Profile::Paper),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub data: DatasetConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self::for_profile(Profile::Desk)
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => RunConfig {
                profile,
                data: DatasetConfig::default(),
                arch: ArchConfig::desk(),
                train: TrainConfig::desk(),
                probe: ProbeConfig::desk(),
            },
            Profile::Paper => RunConfig {
                profile,
                data: DatasetConfig { dims: Dims::new(32, 448, 448), ..DatasetConfig::default() },
                arch: ArchConfig::paper(),
                train: TrainConfig::paper(),
                probe: ProbeConfig::desk(),
            },
        }
    }

    /// Parses `text`; the profile defaults to desk unless the text names one.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_profile(text, None)
    }

    pub fn parse_with_profile(text: &str, profile: Option<Profile>) -> Result<Self> {
        let mut cfg: Option<RunConfig> = profile.map(Self::for_profile);
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| Error::Parse { line, msg };
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err(format!("malformed section header {s:?}")))?.trim();
                if !["data", "model", "train", "probe"].contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = s.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {s:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() && key == "profile" {
                if cfg.is_some() {
                    return Err(err("profile must be the first setting and appear once".into()));
                }
                let p = Profile::parse(value).ok_or_else(|| err(format!("unknown profile {value:?} (desk|paper)")))?;
                cfg = Some(Self::for_profile(p));
                continue;
            }
            let c = cfg.get_or_insert_with(Self::desk);
            let r = match section.as_str() {
                "data" => set_data(&mut c.data, key, value),
                "model" => set_model(&mut c.arch, key, value),
                "train" => set_train(&mut c.train, key, value),
                "probe" => set_probe(&mut c.probe, key, value),
                _ => Err(format!("unknown key {key:?} outside any section")),
            };
            r.map_err(err)?;
        }
        let cfg = cfg.unwrap_or_else(Self::desk);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.arch.validate(&self.train.variant)?;
        self.train.validate()?;
        self.probe.validate()?;
        Ok(())
    }

    /// The effective configuration as parseable text.
    pub fn emit(&self) -> String {
        let mut s = format!("profile = {}\n", self.profile.as_str());
        let d = &self.data;
        s += "\n[data]\n";
        for (k, v) in [
            ("dims", dims_str(d.dims)),
            ("p_branch_b", d.p_branch_b.to_string()),
            ("growth_min", d.growth_min.to_string()),
            ("growth_max", d.growth_max.to_string()),
            ("tau_min", d.tau_min.to_string()),
            ("tau_max", d.tau_max.to_string()),
            ("non_converter_prob", d.non_converter_prob.to_string()),
            ("lead_min", d.lead_min.to_string()),
            ("lead_max", d.lead_max.to_string()),
            ("study_months", d.study_months.to_string()),
            ("visit_interval", d.visit_interval.to_string()),
            ("noise_amplitude", d.noise_amplitude.to_string()),
            ("n_pretrain", d.n_pretrain.to_string()),
            ("n_probe", d.n_probe.to_string()),
            ("seed", d.seed.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let a = &self.arch;
        s += "\n[model]\n";
        for (k, v) in [
            ("volume", dims_str(a.encoder.volume)),
            ("patch", dims_str(a.encoder.patch)),
            ("enc_depth", a.encoder.depth.to_string()),
            ("enc_dim", a.encoder.embed_dim.to_string()),
            ("enc_heads", a.encoder.heads.to_string()),
            ("enc_mlp_ratio", a.encoder.mlp_ratio.to_string()),
            ("enc_final_norm", a.encoder.final_norm.to_string()),
            ("dec_depth", a.decoder.depth.to_string()),
            ("dec_dim", a.decoder.embed_dim.to_string()),
            ("dec_heads", a.decoder.heads.to_string()),
            ("dec_mlp_ratio", a.decoder.mlp_ratio.to_string()),
            ("latent_groups", a.latent.groups.to_string()),
            ("latent_bins", a.latent.bins.to_string()),
            ("latent_hidden", a.latent_hidden.to_string()),
            ("norm_pix_loss", a.norm_pix_loss.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let t = &self.train;
        s += "\n[train]\n";
        for (k, v) in [
            ("mode", t.variant.mode.as_str().to_string()),
            ("use_te", t.variant.use_te.to_string()),
            ("use_se", t.variant.use_se.to_string()),
            ("beta", t.beta.to_string()),
            ("mask_ratio", t.mask_ratio.to_string()),
            ("dt_min", t.dt_min.to_string()),
            ("dt_max", t.dt_max.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("seed", t.seed.to_string()),
            ("flip", t.augment.flip.to_string()),
            ("jitter", t.augment.jitter.to_string()),
            ("crop", t.augment.crop.to_string()),
            ("joint_flip", t.augment.joint_flip.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("record_wall_time", t.record_wall_time.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let p = &self.probe;
        s += "\n[probe]\n";
        let grid: Vec<String> = p.lr_grid.iter().map(|v| v.to_string()).collect();
        for (k, v) in [
            ("pool", p.pool.as_str().to_string()),
            ("use_te", p.use_te.to_string()),
            ("use_se", p.use_se.to_string()),
            ("prompt_dt", p.prompt_dt.to_string()),
            ("window", p.window.to_string()),
            ("epochs", p.epochs.to_string()),
            ("lr_grid", grid.join(",")),
            ("folds", p.folds.to_string()),
            ("visit_stride", p.visit_stride.to_string()),
            ("heads", p.heads.to_string()),
            ("latent_samples", p.latent_samples.to_string()),
            ("threshold", p.threshold.as_str().to_string()),
            ("seed", p.seed.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the emitted configuration.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.emit().as_bytes()))
    }
}

/// `#` lines with the tool version and config digest, for CSV outputs.
pub fn csv_header_block(cfg: &RunConfig) -> String {
    format!(
        "# stamp {}\n# config-sha256 {}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.digest()
    )
}

/// The effective configuration as `#`-prefixed comment lines.
pub fn config_echo(cfg: &RunConfig) -> String {
    cfg.emit()
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| format!("# {l}\n"))
        .collect()
}

fn dims_str(d: Dims) -> String {
    format!("{}x{}x{}", d.d, d.h, d.w)
}

type SetResult = std::result::Result<(), String>;

fn p_f64(key: &str, v: &str) -> std::result::Result<f64, String> {
    v.parse::<f64>()
        .ok()
        .filter(|x| !x.is_nan())
        .ok_or_else(|| format!("{key}: expected a number, got {v:?}"))
}

fn p_usize(key: &str, v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("{key}: expected a non-negative integer, got {v:?}"))
}

fn p_u64(key: &str, v: &str) -> std::result::Result<u64, String> {
    v.parse().map_err(|_| format!("{key}: expected a non-negative integer, got {v:?}"))
}

fn p_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

fn p_dims(key: &str, v: &str) -> std::result::Result<Dims, String> {
    let parts: Vec<&str> = v.split('x').map(str::trim).collect();
    let n: Vec<usize> = parts.iter().filter_map(|p| p.parse().ok()).collect();
    if parts.len() != 3 || n.len() != 3 || n.contains(&0) {
        return Err(format!("{key}: expected DxHxW with positive sizes, got {v:?}"));
    }
    Ok(Dims::new(n[0], n[1], n[2]))
}

fn in_range(key: &str, x: f64, lo: f64, hi: f64, hi_open: bool) -> std::result::Result<f64, String> {
    let ok = x >= lo && if hi_open { x < hi } else { x <= hi };
    if ok {
        Ok(x)
    } else {
        let close = if hi_open { ")" } else { "]" };
        Err(format!("{key} = {x} outside [{lo},{hi}{close}"))
    }
}

fn positive(key: &str, x: f64) -> std::result::Result<f64, String> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{key} = {x} must be positive"))
    }
}

fn set_data(d: &mut DatasetConfig, k: &str, v: &str) -> SetResult {
    match k {
        "dims" => d.dims = p_dims(k, v)?,
        "p_branch_b" => d.p_branch_b = in_range(k, p_f64(k, v)?, 0.0, 1.0, false)?,
        "growth_min" => d.growth_min = positive(k, p_f64(k, v)?)?,
        "growth_max" => d.growth_max = positive(k, p_f64(k, v)?)?,
        "tau_min" => d.tau_min = positive(k, p_f64(k, v)?)?,
        "tau_max" => d.tau_max = positive(k, p_f64(k, v)?)?,
        "non_converter_prob" => d.non_converter_prob = in_range(k, p_f64(k, v)?, 0.0, 1.0, false)?,
        "lead_min" => d.lead_min = positive(k, p_f64(k, v)?)?,
        "lead_max" => d.lead_max = positive(k, p_f64(k, v)?)?,
        "study_months" => d.study_months = in_range(k, p_f64(k, v)?, 0.0, 1200.0, false)?,
        "visit_interval" => d.visit_interval = positive(k, p_f64(k, v)?)?,
        "noise_amplitude" => d.noise_amplitude = in_range(k, p_f64(k, v)?, 0.0, 0.5, false)?,
        "n_pretrain" => d.n_pretrain = p_usize(k, v)?,
        "n_probe" => d.n_probe = p_usize(k, v)?,
        "seed" => d.seed = p_u64(k, v)?,
        _ => return Err(format!("unknown key {k:?} in [data]")),
    }
    Ok(())
}

fn set_model(a: &mut ArchConfig, k: &str, v: &str) -> SetResult {
    let e: &mut EncoderConfig = &mut a.encoder;
    let d: &mut DecoderConfig = &mut a.decoder;
    match k {
        "volume" => e.volume = p_dims(k, v)?,
        "patch" => e.patch = p_dims(k, v)?,
        "enc_depth" => e.depth = p_usize(k, v)?,
        "enc_dim" => e.embed_dim = p_usize(k, v)?,
        "enc_heads" => e.heads = p_usize(k, v)?,
        "enc_mlp_ratio" => e.mlp_ratio = p_usize(k, v)?,
        "enc_final_norm" => e.final_norm = p_bool(k, v)?,
        "dec_depth" => d.depth = p_usize(k, v)?,
        "dec_dim" => d.embed_dim = p_usize(k, v)?,
        "dec_heads" => d.heads = p_usize(k, v)?,
        "dec_mlp_ratio" => d.mlp_ratio = p_usize(k, v)?,
        "latent_groups" => a.latent = LatentSpec { groups: p_usize(k, v)?, ..a.latent },
        "latent_bins" => a.latent = LatentSpec { bins: p_usize(k, v)?, ..a.latent },
        "latent_hidden" => a.latent_hidden = p_usize(k, v)?,
        "norm_pix_loss" => a.norm_pix_loss = p_bool(k, v)?,
        _ => return Err(format!("unknown key {k:?} in [model]")),
    }
    Ok(())
}

fn set_train(t: &mut TrainConfig, k: &str, v: &str) -> SetResult {
    match k {
        "mode" => {
            // resets the switches to the mode's defaults; set them after `mode`
            let mode = Mode::parse(v).ok_or_else(|| format!("mode: expected stamp|siammae|mae, got {v:?}"))?;
            let on = mode == Mode::Stamp;
            t.variant = Variant { mode, use_te: on, use_se: on };
        }
        "use_te" => t.variant.use_te = p_bool(k, v)?,
        "use_se" => t.variant.use_se = p_bool(k, v)?,
        "beta" => t.beta = in_range(k, p_f64(k, v)?, 0.0, f64::MAX, false)?,
        "mask_ratio" => t.mask_ratio = in_range(k, p_f64(k, v)?, 0.0, 1.0, true)?,
        "dt_min" => t.dt_min = positive(k, p_f64(k, v)?)?,
        "dt_max" => t.dt_max = positive(k, p_f64(k, v)?)?,
        "epochs" => t.epochs = p_usize(k, v)?,
        "batch_size" => t.batch_size = p_usize(k, v)?,
        "lr" => t.lr = positive(k, p_f64(k, v)?)?,
        "weight_decay" => t.weight_decay = in_range(k, p_f64(k, v)?, 0.0, 1.0, false)?,
        "seed" => t.seed = p_u64(k, v)?,
        "flip" => t.augment.flip = p_bool(k, v)?,
        "jitter" => t.augment.jitter = p_bool(k, v)?,
        "crop" => t.augment.crop = p_bool(k, v)?,
        "joint_flip" => t.augment.joint_flip = p_bool(k, v)?,
        "checkpoint_every" => t.checkpoint_every = p_usize(k, v)?,
        "record_wall_time" => t.record_wall_time = p_bool(k, v)?,
        _ => return Err(format!("unknown key {k:?} in [train]")),
    }
    Ok(())
}

fn set_probe(p: &mut ProbeConfig, k: &str, v: &str) -> SetResult {
    match k {
        "pool" => p.pool = Pool::parse(v).ok_or_else(|| format!("pool: expected attention|mean_linear, got {v:?}"))?,
        "use_te" => p.use_te = p_bool(k, v)?,
        "use_se" => p.use_se = p_bool(k, v)?,
        "prompt_dt" => p.prompt_dt = in_range(k, p_f64(k, v)?, 0.0, 1200.0, false)?,
        "window" => p.window = positive(k, p_f64(k, v)?)?,
        "epochs" => p.epochs = p_usize(k, v)?,
        "lr_grid" => {
            p.lr_grid = v
                .split(',')
                .map(|x| p_f64(k, x.trim()).and_then(|x| positive(k, x)))
                .collect::<std::result::Result<_, _>>()?
        }
        "folds" => p.folds = p_usize(k, v)?,
        "visit_stride" => p.visit_stride = p_usize(k, v)?,
        "heads" => p.heads = p_usize(k, v)?,
        "latent_samples" => p.latent_samples = p_usize(k, v)?,
        "threshold" => p.threshold = ThresholdRule::parse(v).ok_or_else(|| format!("threshold: expected tuned|half, got {v:?}"))?,
        "seed" => p.seed = p_u64(k, v)?,
        _ => return Err(format!("unknown key {k:?} in [probe]")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_desk_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::desk());
        assert_eq!(RunConfig::parse("# just a comment\n\n").unwrap(), RunConfig::desk());
    }

    #[test]
    fn mask_ratio_range_error_has_line() {
        let e = RunConfig::parse("[train]\n\nmask_ratio = 1.5\n").unwrap_err();
        match e {
            Error::Parse { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("[0,1)"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_and_type_errors() {
        assert!(matches!(RunConfig::parse("[train]\nfoo = 1"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(RunConfig::parse("[train]\nepochs = many"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(RunConfig::parse("[nope]"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::parse("epochs = 3"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn emit_parse_round_trip() {
        for p in [Profile::Desk, Profile::Paper] {
            let c = RunConfig::for_profile(p);
            assert_eq!(RunConfig::parse(&c.emit()).unwrap(), c);
        }
        let mut c = RunConfig::desk();
        c.train.lr = 3.3e-4;
        c.train.variant = crate::model::Variant::siammae();
        c.probe.lr_grid = vec![1e-3, 0.02];
        c.data.dims = Dims::new(8, 16, 16);
        c.arch.encoder.volume = Dims::new(8, 16, 16);
        assert_eq!(RunConfig::parse(&c.emit()).unwrap(), c);
    }

    #[test]
    fn profile_must_come_first() {
        assert!(RunConfig::parse("profile = paper\n[train]\nepochs = 2").is_ok());
        assert!(RunConfig::parse("[train]\nepochs = 2\n").is_ok());
        assert!(matches!(
            RunConfig::parse("profile = desk\nprofile = paper"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn invalid_combinations_are_config_errors() {
        let e = RunConfig::parse("[train]\nmode = siammae\nuse_te = true\n").unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e:?}");
        let c = RunConfig::parse("[train]\nmode = siammae\n").unwrap();
        assert_eq!(c.train.variant, Variant::siammae());
    }
}
