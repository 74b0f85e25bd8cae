//! Seedable synthetic longitudinal volumes with branching progression, plus
//! the on-disk volume and manifest formats.
//!
//! Every patient carries a central ellipsoidal lesion that grows linearly in
//! time and brightens over a precursor window leading up to its conversion
//! time τ. At τ the patient commits to one of two outcome paths: a bright
//! sub-blob (path A) or a dark expanding core (path B). Before τ the two
//! paths render identically, so the future is genuinely multi-modal given
//! any pre-conversion scan.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::keyed;

pub const SVOL_MAGIC: &[u8; 4] = b"SVOL";
pub const SVOL_VERSION: u8 = 0x01;
pub const MANIFEST_NAME: &str = "manifest.csv";
pub const MANIFEST_HEADER: [&str; 5] = ["patient_id", "visit_month", "path", "tau", "branch"];

const BACKGROUND: f64 = 0.1;
const LESION_BASE: f64 = 0.45;
const LESION_PRECURSOR_GAIN: f64 = 0.3;
const PATH_A_VALUE: f64 = 0.95;
const PATH_B_VALUE: f64 = 0.03;
const INITIAL_RADIUS: f64 = 4.0;
const BRANCH_RADIUS0: f64 = 2.0;
const BRANCH_GROWTH: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Dims { d, h, w }
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Shape(format!("volume dims must be positive, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    PathA,
    PathB,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::PathA => "A",
            Branch::PathB => "B",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" => Some(Branch::PathA),
            "B" => Some(Branch::PathB),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientLatent {
    pub patient_id: u64,
    /// Lesion radius growth, voxels/month along the in-plane axes.
    pub growth_rate: f64,
    /// Conversion time τ in months; `f64::INFINITY` for non-converters.
    pub conversion_time: f64,
    pub branch: Branch,
    /// Lesion centre in voxel coordinates (d, h, w).
    pub base_center: [f64; 3],
    /// Months before τ over which the lesion brightens.
    pub precursor_lead: f64,
    pub noise_seed: u64,
}

impl PatientLatent {
    pub fn converts(&self) -> bool {
        self.conversion_time.is_finite()
    }
}

/// A dense scalar grid, stored `d`-major then `h` then `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, voxels: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if voxels.len() != dims.voxels() {
            return Err(Error::Shape(format!(
                "{} voxels for dims {dims}",
                voxels.len()
            )));
        }
        Ok(Volume { dims, voxels })
    }

    pub fn zeros(dims: Dims) -> Self {
        Volume {
            dims,
            voxels: vec![0.0; dims.voxels()],
        }
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims.h + h) * self.dims.w + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.voxels[self.index(d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, v: f32) {
        let i = self.index(d, h, w);
        self.voxels[i] = v;
    }

    pub fn mean(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum::<f64>() / self.voxels.len() as f64
    }

    pub fn is_valid(&self) -> bool {
        self.voxels.len() == self.dims.voxels()
            && self.voxels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub dims: Dims,
    /// Probability of outcome path B.
    pub p_branch_b: f64,
    pub growth_min: f64,
    pub growth_max: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub non_converter_prob: f64,
    pub lead_min: f64,
    pub lead_max: f64,
    /// Last visit month; visits run from 0 to this inclusive.
    pub study_months: f64,
    pub visit_interval: f64,
    pub noise_amplitude: f64,
    pub n_pretrain: usize,
    pub n_probe: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            dims: Dims::new(16, 32, 32),
            p_branch_b: 0.5,
            growth_min: 0.1,
            growth_max: 0.3,
            tau_min: 3.0,
            tau_max: 36.0,
            non_converter_prob: 0.3,
            lead_min: 9.0,
            lead_max: 15.0,
            study_months: 24.0,
            visit_interval: 1.0,
            noise_amplitude: 0.05,
            n_pretrain: 200,
            n_probe: 160,
            seed: 17,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.dims.validate()?;
        if !(0.0..=1.0).contains(&self.p_branch_b) {
            return bad(format!("p_branch_b {} outside [0,1]", self.p_branch_b));
        }
        if !(0.0..=1.0).contains(&self.non_converter_prob) {
            return bad(format!("non_converter_prob {} outside [0,1]", self.non_converter_prob));
        }
        if !(self.growth_min > 0.0) || self.growth_min > self.growth_max {
            return bad(format!(
                "growth bounds [{}, {}] must satisfy 0 < min <= max",
                self.growth_min, self.growth_max
            ));
        }
        if !(self.tau_min > 0.0) || self.tau_min > self.tau_max {
            return bad(format!(
                "conversion-time bounds [{}, {}] must satisfy 0 < min <= max",
                self.tau_min, self.tau_max
            ));
        }
        if !(self.lead_min > 0.0) || self.lead_min > self.lead_max {
            return bad(format!(
                "precursor lead bounds [{}, {}] must satisfy 0 < min <= max",
                self.lead_min, self.lead_max
            ));
        }
        if !(self.visit_interval > 0.0) || !(self.study_months >= 0.0) {
            return bad("visit schedule must have positive interval and non-negative span".into());
        }
        if !(0.0..=0.5).contains(&self.noise_amplitude) {
            return bad(format!("noise_amplitude {} outside [0,0.5]", self.noise_amplitude));
        }
        Ok(())
    }

    pub fn visit_months(&self) -> Vec<f64> {
        let n = (self.study_months / self.visit_interval).floor() as usize;
        (0..=n).map(|i| i as f64 * self.visit_interval).collect()
    }

    /// Seed for patient `index` of this dataset.
    pub fn patient_seed(&self, index: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            ^ 0x94D0_49BB_1331_11EB
    }
}

const PATIENT_TAG: u64 = 0x5041_5449_454E_5400;
const NOISE_TAG: u64 = 0x4E4F_4953_4500_0000;

/// Draws a patient's latent factors; a pure function of `(seed, cfg)`.
/// The returned `patient_id` is `seed`; dataset builders overwrite it.
pub fn gen_patient(seed: u64, cfg: &DatasetConfig) -> Result<PatientLatent> {
    cfg.validate()?;
    let mut rng = keyed(seed, PATIENT_TAG);
    let branch = if rng.gen::<f64>() < cfg.p_branch_b {
        Branch::PathB
    } else {
        Branch::PathA
    };
    let growth_rate = cfg.growth_min + (cfg.growth_max - cfg.growth_min) * rng.gen::<f64>();
    let non_converter = rng.gen::<f64>() < cfg.non_converter_prob;
    let tau_draw = cfg.tau_min + (cfg.tau_max - cfg.tau_min) * rng.gen::<f64>();
    let conversion_time = if non_converter { f64::INFINITY } else { tau_draw };
    let lead = cfg.lead_min + (cfg.lead_max - cfg.lead_min) * rng.gen::<f64>();
    let Dims { d, h, w } = cfg.dims;
    let jitter = |rng: &mut crate::rng::StreamRng, n: usize| {
        let c = n as f64 / 2.0;
        c + (rng.gen::<f64>() - 0.5) * 0.2 * n as f64
    };
    let base_center = [jitter(&mut rng, d), jitter(&mut rng, h), jitter(&mut rng, w)];
    let noise_seed = rng.gen();
    Ok(PatientLatent {
        patient_id: seed,
        growth_rate,
        conversion_time,
        branch,
        base_center,
        precursor_lead: lead,
        noise_seed,
    })
}

/// Lesion radius in in-plane voxels at month `t`, clamped to fit the grid.
pub fn lesion_radius(latent: &PatientLatent, t: f64, dims: Dims) -> f64 {
    let cap = 0.4 * dims.h.min(dims.w) as f64;
    (INITIAL_RADIUS + latent.growth_rate * t).min(cap)
}

/// Precursor progress in [0,1]: 0 until `τ − lead`, 1 from τ on.
pub fn precursor(latent: &PatientLatent, t: f64) -> f64 {
    if !latent.converts() {
        return 0.0;
    }
    let start = latent.conversion_time - latent.precursor_lead;
    ((t - start) / latent.precursor_lead).clamp(0.0, 1.0)
}

/// Radius of the branch-specific region at month `t` (0 before τ).
pub fn branch_radius(latent: &PatientLatent, t: f64, dims: Dims) -> f64 {
    if !latent.converts() || t < latent.conversion_time {
        return 0.0;
    }
    let r = BRANCH_RADIUS0 + BRANCH_GROWTH * (t - latent.conversion_time);
    r.min(lesion_radius(latent, t, dims))
}

/// Normalised ellipsoid distance from the lesion centre (1 = surface at
/// in-plane radius `r`); the depth axis is scaled by `D/H`.
fn ellipsoid_dist(latent: &PatientLatent, dims: Dims, d: usize, h: usize, w: usize, r: f64) -> f64 {
    let rd = r * dims.d as f64 / dims.h as f64;
    let [cd, ch, cw] = latent.base_center;
    let zd = (d as f64 + 0.5 - cd) / rd;
    let zh = (h as f64 + 0.5 - ch) / r;
    let zw = (w as f64 + 0.5 - cw) / r;
    zd * zd + zh * zh + zw * zw
}

/// True where the voxel lies inside the lesion at month `t`.
pub fn in_lesion(latent: &PatientLatent, t: f64, dims: Dims, d: usize, h: usize, w: usize) -> bool {
    ellipsoid_dist(latent, dims, d, h, w, lesion_radius(latent, t, dims)) <= 1.0
}

/// True where the voxel lies inside the branch-specific region at month `t`.
pub fn in_branch_region(latent: &PatientLatent, t: f64, dims: Dims, d: usize, h: usize, w: usize) -> bool {
    let r = branch_radius(latent, t, dims);
    r > 0.0 && ellipsoid_dist(latent, dims, d, h, w, r) <= 1.0
}

/// Renders the visit at month `t`. Pure in `(latent, t, dims)`.
pub fn render_volume(latent: &PatientLatent, t: f64, dims: Dims, noise_amplitude: f64) -> Result<Volume> {
    dims.validate()?;
    if !(t >= 0.0) {
        return Err(Error::Usage(format!("render time must be >= 0, got {t}")));
    }
    let mut rng = keyed(latent.noise_seed ^ NOISE_TAG, t.to_bits());
    let lesion_value = LESION_BASE + LESION_PRECURSOR_GAIN * precursor(latent, t);
    let branch_value = match latent.branch {
        Branch::PathA => PATH_A_VALUE,
        Branch::PathB => PATH_B_VALUE,
    };
    let r = lesion_radius(latent, t, dims);
    let rb = branch_radius(latent, t, dims);
    let mut voxels = Vec::with_capacity(dims.voxels());
    for d in 0..dims.d {
        for h in 0..dims.h {
            for w in 0..dims.w {
                let noise = noise_amplitude * rng.gen::<f64>();
                let base = if rb > 0.0 && ellipsoid_dist(latent, dims, d, h, w, rb) <= 1.0 {
                    branch_value
                } else if ellipsoid_dist(latent, dims, d, h, w, r) <= 1.0 {
                    lesion_value
                } else {
                    BACKGROUND
                };
                voxels.push((base + noise).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(Volume { dims, voxels })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub past: Volume,
    pub future: Volume,
    pub delta_t: f64,
    pub patient_id: u64,
    pub t: f64,
}

/// Ordered index pairs `(i, j)`, `i < j`, whose separation lies in range.
pub fn admissible_pairs(visit_times: &[f64], dt_min: f64, dt_max: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..visit_times.len() {
        for j in 0..visit_times.len() {
            let dt = visit_times[j] - visit_times[i];
            if dt > 0.0 && dt >= dt_min && dt <= dt_max {
                out.push((i, j));
            }
        }
    }
    out
}

/// Picks one admissible ordered visit pair uniformly.
pub fn sample_visit_pair<R: Rng>(
    patient_id: u64,
    visit_times: &[f64],
    dt_min: f64,
    dt_max: f64,
    rng: &mut R,
) -> Result<(usize, usize)> {
    let pairs = admissible_pairs(visit_times, dt_min, dt_max);
    pairs.choose(rng).copied().ok_or_else(|| Error::Sampling {
        patient_id,
        msg: format!("no visit pair with separation in [{dt_min}, {dt_max}] months"),
    })
}

/// Samples an admissible pair and renders both visits.
pub fn sample_pair<R: Rng>(
    latent: &PatientLatent,
    visit_times: &[f64],
    dt_min: f64,
    dt_max: f64,
    dims: Dims,
    noise_amplitude: f64,
    rng: &mut R,
) -> Result<PairSample> {
    let (i, j) = sample_visit_pair(latent.patient_id, visit_times, dt_min, dt_max, rng)?;
    let (t0, t1) = (visit_times[i], visit_times[j]);
    Ok(PairSample {
        past: render_volume(latent, t0, dims, noise_amplitude)?,
        future: render_volume(latent, t1, dims, noise_amplitude)?,
        delta_t: t1 - t0,
        patient_id: latent.patient_id,
        t: t0,
    })
}

/// Whether conversion happens within `window` months of a pre-conversion
/// visit at `t`. The boundary `τ = t + window` counts as converted.
pub fn conversion_label(conversion_time: f64, t: f64, window: f64) -> Result<bool> {
    if !(window > 0.0) {
        return Err(Error::Usage(format!("window must be positive, got {window}")));
    }
    if t >= conversion_time {
        return Err(Error::Usage(format!(
            "visit at month {t} is not before conversion at {conversion_time}"
        )));
    }
    Ok(conversion_time <= t + window)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut buf = Vec::with_capacity(17 + 4 * v.voxels.len());
    buf.extend_from_slice(SVOL_MAGIC);
    buf.push(SVOL_VERSION);
    for n in [v.dims.d, v.dims.h, v.dims.w] {
        let n = u32::try_from(n).map_err(|_| Error::Shape(format!("dimension {n} exceeds u32")))?;
        buf.extend_from_slice(&n.to_le_bytes());
    }
    for x in &v.voxels {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 17 {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != SVOL_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    if bytes[4] != SVOL_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", bytes[4])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let dims = Dims::new(dim(0), dim(1), dim(2));
    if dims.voxels() == 0 {
        return Err(Error::format(path, format!("zero-sized dims {dims}")));
    }
    let payload = &bytes[17..];
    if payload.len() % 4 != 0 || payload.len() / 4 != dims.voxels() {
        return Err(Error::format(
            path,
            format!(
                "header dims {dims} need {} values, payload has {} bytes",
                dims.voxels(),
                payload.len()
            ),
        ));
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Volume { dims, voxels })
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_volume(path, &bytes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub patient_id: u64,
    pub visit_month: f64,
    pub path: String,
    pub tau: f64,
    pub branch: Branch,
}

fn fmt_month(x: f64) -> String {
    if x.is_infinite() {
        "inf".to_string()
    } else {
        format!("{x}")
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data {
        path: path.into(),
        msg: e.to_string(),
    })?;
    let data_err = |e: csv::Error| Error::Data {
        path: path.into(),
        msg: e.to_string(),
    };
    w.write_record(MANIFEST_HEADER).map_err(data_err)?;
    for r in rows {
        w.write_record([
            r.patient_id.to_string(),
            fmt_month(r.visit_month),
            r.path.clone(),
            fmt_month(r.tau),
            r.branch.as_str().to_string(),
        ])
        .map_err(data_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let err = |msg: String| Error::Data {
        path: path.into(),
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = r.headers().map_err(|e| err(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(err(format!("expected header {}", MANIFEST_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let at = |msg: &str| err(format!("row {}: {msg}", line + 2));
        let patient_id = rec[0].parse().map_err(|_| at("bad patient_id"))?;
        let visit_month: f64 = rec[1].parse().map_err(|_| at("bad visit_month"))?;
        let tau: f64 = rec[3].parse().map_err(|_| at("bad tau"))?;
        let branch = Branch::parse(&rec[4]).ok_or_else(|| at("branch must be A or B"))?;
        rows.push(ManifestRow {
            patient_id,
            visit_month,
            path: rec[2].to_string(),
            tau,
            branch,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub enum VisitSource {
    /// Rendered on demand from the generator.
    Latent(PatientLatent),
    /// One file per visit, aligned with `visits`.
    Files(Vec<PathBuf>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: u64,
    pub conversion_time: f64,
    pub branch: Branch,
    pub visits: Vec<f64>,
    pub source: VisitSource,
}

/// A set of patients whose visits can be materialised as volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub noise_amplitude: f64,
    pub patients: Vec<PatientRecord>,
}

impl Dataset {
    /// Patients `first..first+count` of the generator described by `cfg`.
    pub fn synthetic(cfg: &DatasetConfig, first: u64, count: usize) -> Result<Self> {
        cfg.validate()?;
        let visits = cfg.visit_months();
        let patients = (first..first + count as u64)
            .map(|i| {
                let mut latent = gen_patient(cfg.patient_seed(i), cfg)?;
                latent.patient_id = i;
                Ok(PatientRecord {
                    patient_id: i,
                    conversion_time: latent.conversion_time,
                    branch: latent.branch,
                    visits: visits.clone(),
                    source: VisitSource::Latent(latent),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            dims: cfg.dims,
            noise_amplitude: cfg.noise_amplitude,
            patients,
        })
    }

    pub fn pretrain_split(cfg: &DatasetConfig) -> Result<Self> {
        Self::synthetic(cfg, 0, cfg.n_pretrain)
    }

    pub fn probe_split(cfg: &DatasetConfig) -> Result<Self> {
        Self::synthetic(cfg, cfg.n_pretrain as u64, cfg.n_probe)
    }

    pub fn volume(&self, patient: usize, visit: usize) -> Result<Volume> {
        let rec = &self.patients[patient];
        match &rec.source {
            VisitSource::Latent(l) => render_volume(l, rec.visits[visit], self.dims, self.noise_amplitude),
            VisitSource::Files(paths) => {
                let v = read_volume(&paths[visit])?;
                if v.dims != self.dims {
                    return Err(Error::Data {
                        path: paths[visit].clone(),
                        msg: format!("dims {} differ from dataset dims {}", v.dims, self.dims),
                    });
                }
                Ok(v)
            }
        }
    }

    /// Writes every visit as an SVOL file plus `manifest.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rows = Vec::new();
        for (pi, rec) in self.patients.iter().enumerate() {
            for (vi, &month) in rec.visits.iter().enumerate() {
                let name = format!("p{:05}_m{:03}.svol", rec.patient_id, vi);
                write_volume(&dir.join(&name), &self.volume(pi, vi)?)?;
                rows.push(ManifestRow {
                    patient_id: rec.patient_id,
                    visit_month: month,
                    path: name,
                    tau: rec.conversion_time,
                    branch: rec.branch,
                });
            }
        }
        write_manifest(&dir.join(MANIFEST_NAME), &rows)
    }

    /// Loads a directory written by [`Dataset::write_to`]. Visit paths in the
    /// manifest are relative to `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST_NAME);
        let rows = read_manifest(&manifest)?;
        let mut patients: Vec<PatientRecord> = Vec::new();
        for row in rows {
            let path = dir.join(&row.path);
            match patients.last_mut() {
                Some(p) if p.patient_id == row.patient_id => {
                    if p.conversion_time.to_bits() != row.tau.to_bits() || p.branch != row.branch {
                        return Err(Error::Data {
                            path: manifest,
                            msg: format!("patient {} has inconsistent tau/branch rows", row.patient_id),
                        });
                    }
                    p.visits.push(row.visit_month);
                    if let VisitSource::Files(f) = &mut p.source {
                        f.push(path);
                    }
                }
                _ => {
                    if patients.iter().any(|p| p.patient_id == row.patient_id) {
                        return Err(Error::Data {
                            path: manifest,
                            msg: format!("rows of patient {} are not contiguous", row.patient_id),
                        });
                    }
                    patients.push(PatientRecord {
                        patient_id: row.patient_id,
                        conversion_time: row.tau,
                        branch: row.branch,
                        visits: vec![row.visit_month],
                        source: VisitSource::Files(vec![path]),
                    });
                }
            }
        }
        let Some(first) = patients.first() else {
            return Err(Error::Data {
                path: manifest,
                msg: "manifest lists no visits".into(),
            });
        };
        let VisitSource::Files(f) = &first.source else { unreachable!() };
        let dims = read_volume(&f[0])?.dims;
        Ok(Dataset {
            dims,
            noise_amplitude: 0.0,
            patients,
        })
    }
}
