//! Command-line entry points. Each subcommand maps errors to a stable exit
//! code: 0 ok, 2 config, 3 data, 4 checkpoint, 5 numeric fault.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{cost_report, sample_prior_sweep};
use crate::backbone::{cls_attention, upsample_grid};
use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::{config_echo, RunConfig};
use crate::error::{Error, Result};
use crate::eval::run_probe;
use crate::model::Model;
use crate::synthvol::{read_volume, write_volume, Dataset, MANIFEST_NAME};
use crate::tokenizer::patchify;
use crate::trainer::{run_pretrain, RunPaths};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "stamp", version, about = "Spatio-temporal masked pretraining for longitudinal volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic pretraining and probing splits.
    SynthGen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a model and write a checkpoint plus metrics CSV.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Frozen-backbone conversion probe with patient-level cross-validation.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Interval (months) used as the temporal prompt.
        #[arg(long)]
        dt: f64,
        #[arg(long)]
        use_te: bool,
        #[arg(long)]
        use_se: bool,
        #[arg(long)]
        out: PathBuf,
        /// Probe settings; defaults to the checkpoint's configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw prior samples over a list of intervals and project them with PCA.
    SamplePrior {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Comma-separated intervals in months.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        dts: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export the last-layer CLS attention of the past encoder as a volume.
    AttnMap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        dt: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic parameter and FLOP report.
    CountCost {
        /// Architecture name, e.g. stamp-paper; repeatable.
        #[arg(long = "arch", required = true)]
        archs: Vec<String>,
        #[arg(long, default_value_t = 0.75)]
        mask_ratio: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Usage(_) => EXIT_CONFIG,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::TrainingFault { .. } | Error::Degenerate(_) => EXIT_NUMERIC,
        Error::Shape(_)
        | Error::Format { .. }
        | Error::Sampling { .. }
        | Error::Metric(_)
        | Error::Split(_)
        | Error::Data { .. }
        | Error::Io { .. } => EXIT_DATA,
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthGen { config, out } => synth_gen(&load_config(&config)?, &out),
        Command::Pretrain { config, data, out, seed, resume } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            pretrain(&cfg, &data, &out, resume.as_deref())
        }
        Command::Probe { ckpt, data, dt, use_te, use_se, out, config, seed } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mut cfg = ck.config.clone();
            if let Some(path) = config {
                cfg.probe = load_config(&path)?.probe;
            }
            cfg.probe.prompt_dt = dt;
            cfg.probe.use_te = use_te;
            cfg.probe.use_se = use_se;
            if let Some(s) = seed {
                cfg.probe.seed = s;
            }
            cfg.validate()?;
            probe(&ck, &cfg, &data, &out)
        }
        Command::SamplePrior { ckpt, volume, dts, k, out, seed } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = bind(&ck)?;
            let v = read_volume(&volume)?;
            let sweep = sample_prior_sweep(&model, &ck.store, &v, &dts, k, seed)?;
            write_text(&out, &sweep.to_csv(&ck.config))?;
            write_echo(&out, &ck.config)
        }
        Command::AttnMap { ckpt, volume, dt, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            attn_map(&ck, &volume, dt, &out)
        }
        Command::CountCost { archs, mask_ratio, out } => {
            let names: Vec<&str> = archs.iter().map(String::as_str).collect();
            let report = cost_report(&names, mask_ratio)?;
            match out {
                Some(p) => write_text(&p, &report),
                None => {
                    print!("{report}");
                    Ok(())
                }
            }
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `OUT.config`: the effective configuration next to an artifact.
pub fn echo_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn write_echo(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&echo_path(out), &cfg.emit())
}

/// A directory holding `manifest.csv`, or its `sub` child that does.
fn data_dir(dir: &Path, sub: &str) -> PathBuf {
    if dir.join(MANIFEST_NAME).exists() {
        dir.to_path_buf()
    } else {
        dir.join(sub)
    }
}

fn bind(ck: &Checkpoint) -> Result<Model> {
    Model::bind(&ck.config.arch, ck.config.train.variant, &ck.store).map_err(|e| match e {
        Error::Config(m) | Error::Shape(m) => Error::Checkpoint(format!("parameters do not match the embedded config: {m}")),
        other => other,
    })
}

pub fn synth_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    Dataset::pretrain_split(&cfg.data)?.write_to(&out.join("pretrain"))?;
    Dataset::probe_split(&cfg.data)?.write_to(&out.join("probe"))?;
    write_text(&out.join("config.txt"), &cfg.emit())
}

pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let ds = Dataset::load(&data_dir(data, "pretrain"))?;
    let resume = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config.arch != cfg.arch || ck.config.train.variant != cfg.train.variant {
                return Err(Error::Checkpoint(format!("{}: architecture differs from the configuration", p.display())));
            }
            Some(ck)
        }
        None => None,
    };
    run_pretrain(cfg, &ds, Some(&RunPaths::beside(out)), resume)?;
    write_echo(out, cfg)
}

pub fn probe(ck: &Checkpoint, cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let model = bind(ck)?;
    // flag/mode mismatches are configuration errors, reported before any data work
    if cfg.probe.use_se && model.latent.is_none() || cfg.probe.use_te && model.te_enc.is_none() {
        return Err(Error::Config(format!(
            "--use-te/--use-se need a checkpoint trained with them; this one is {} (te={}, se={})",
            model.variant.mode.as_str(),
            model.variant.use_te,
            model.variant.use_se
        )));
    }
    let ds = Dataset::load(&data_dir(data, "probe"))?;
    let report = run_probe(&model, &ck.store, &ds, &cfg.probe)?;
    write_text(out, &report.to_csv(cfg))
}

pub fn attn_map(ck: &Checkpoint, volume: &Path, dt: f64, out: &Path) -> Result<()> {
    let model = bind(ck)?;
    let v = read_volume(volume)?;
    if v.dims != model.arch.encoder.volume {
        return Err(Error::Data {
            path: volume.to_path_buf(),
            msg: format!("dims {} differ from the model's {}", v.dims, model.arch.encoder.volume),
        });
    }
    let raw = patchify(&v, model.arch.encoder.patch)?;
    let mut tape = Tape::new();
    let emb = model.encode_past(&mut tape, &ck.store, &raw, dt, model.te_enc.is_some())?;
    let w = cls_attention(&tape, &emb);
    let map = upsample_grid(&w, model.arch.encoder.grid()?, model.arch.encoder.patch);
    write_volume(out, &map)?;
    write_text(&echo_path(out), &config_echo(&ck.config))
}
