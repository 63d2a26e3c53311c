//! Dataset generation, manifests and validation.
//!
//! A dataset directory holds `manifest.json` and one directory per case:
//!
//! ```text
//! case_0000/
//!   t1.nii t1ce.nii t2.nii flair.nii   adapted intensities
//!   seg.nii                            extended labels
//!   raw/t1.nii ...                     intensities before adaptation
//!   meta.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapt::{adapt, build_reference, AdaptError, AdaptationReport, ReferenceDistribution};
use crate::growth::{simulate, GrowthError, GrowthParams};
use crate::metrics::{class_frequencies, tumor_only, ImbalanceReport};
use crate::nifti::{self, NiftiError};
use crate::registration::{Atlas, RegistrationError};
use crate::synth::{case_seed, estimate_intensity_model, synthesize, IntensityModel, SynthError, SynthParams, RNG_ALGORITHM};
use crate::volume::{labels, LabelVolume, Modality, MultimodalCase, ScalarVolume, VolumeError};

/// Version tag of the dataset layout and of the meaning of every field.
pub const FORMAT_REVISION: &str = "biosynth-dataset/1";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const META_FILE: &str = "meta.json";
pub const SEG_FILE: &str = "seg.nii";
pub const RAW_DIR: &str = "raw";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Growth(#[from] GrowthError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error("no case was generated successfully ({0} failures)")]
    NoCases(usize),
}

impl PipelineError {
    /// True for failures of the numerical schemes rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            PipelineError::Growth(GrowthError::Unstable { .. }) | PipelineError::Registration(RegistrationError::NonFinite(_))
        )
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Growth parameters that may be randomized per case.
pub const RANGED_GROWTH_FIELDS: [&str; 16] = [
    "d_w", "kappa_gw", "kappa_i", "rho_p", "rho_i", "alpha_pi", "beta_ip", "gamma", "c_h", "sigma_h", "seed_sigma",
    "seed_amplitude", "t_final", "tau_p", "tau_i", "tau_n",
];

fn default_count() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory with one subdirectory per atlas holding `t1.nii` and
    /// `labels.nii`.
    pub atlas_dir: PathBuf,
    /// `reference_dist.json` or a directory of reference cases.
    pub reference: PathBuf,
    /// `intensity_model.json` or a directory of labeled cases to estimate it.
    pub intensity_model: PathBuf,
    /// Uniform `[min, max]` per growth parameter.
    #[serde(default)]
    pub growth_ranges: BTreeMap<String, [f64; 2]>,
    /// Values for growth parameters that are not ranged.
    #[serde(default)]
    pub growth: GrowthParams,
    /// Synthesis settings; `rng_seed` is replaced per case.
    #[serde(default)]
    pub synth: SynthParams,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub jobs: usize,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.count == 0 {
            return bad("count must be >= 1".into());
        }
        for (k, [lo, hi]) in &self.growth_ranges {
            if !RANGED_GROWTH_FIELDS.contains(&k.as_str()) {
                return bad(format!("growth_ranges: unknown or non-scalar parameter {k:?}"));
            }
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("growth_ranges.{k}: need finite min <= max, got [{lo}, {hi}]"));
            }
        }
        self.synth.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    /// Makes relative paths relative to `base` (the config file directory).
    pub fn resolve_relative(&mut self, base: &Path) {
        for p in [&mut self.atlas_dir, &mut self.reference, &mut self.intensity_model, &mut self.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Draws ranged growth parameters in key order, then overwrites the seed
/// center. Fields without a range keep the base value.
pub fn sample_growth_params(
    base: &GrowthParams,
    ranges: &BTreeMap<String, [f64; 2]>,
    rng: &mut impl Rng,
) -> Result<GrowthParams, PipelineError> {
    let mut value = serde_json::to_value(base).expect("serializable");
    let obj = value.as_object_mut().expect("struct serializes to an object");
    for (k, [lo, hi]) in ranges {
        let u: f64 = rng.random();
        let v = lo + (hi - lo) * u;
        if !obj.contains_key(k) {
            return Err(PipelineError::Config(format!("unknown growth parameter {k:?}")));
        }
        obj.insert(k.clone(), serde_json::json!(v));
    }
    serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))
}

/// A uniformly chosen white-matter or glial voxel, as voxel coordinates.
pub fn sample_seed_center(seg: &LabelVolume, rng: &mut impl Rng) -> Result<[f64; 3], PipelineError> {
    let candidates: Vec<usize> = seg
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == labels::WHITE || l == labels::GLIAL)
        .map(|(k, _)| k)
        .collect();
    if candidates.is_empty() {
        return Err(PipelineError::Config("atlas has no white or glial voxel to seed a tumor".into()));
    }
    let k = candidates[rng.random_range(0..candidates.len())];
    Ok(seg.geometry().coords(k).map(|c| c as f64))
}

/// Overlays tumor labels onto healthy labels inside the brain.
pub fn implant(healthy: &LabelVolume, tumor: &LabelVolume) -> Result<LabelVolume, VolumeError> {
    healthy.geometry().ensure_same(tumor.geometry(), "tumor labels")?;
    let out = healthy
        .labels()
        .iter()
        .zip(tumor.labels())
        .map(|(&h, &t)| if t != labels::BACKGROUND && h != labels::BACKGROUND { t } else { h })
        .collect();
    LabelVolume::new(*healthy.geometry(), out)
}

pub fn load_atlas(dir: &Path) -> Result<Atlas, PipelineError> {
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let t1 = nifti::read_scalar(dir.join("t1.nii"))?;
    let seg = nifti::read_labels(dir.join("labels.nii"))?;
    Ok(Atlas::new(id, t1, seg)?)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if entry.file_type().map_err(io_err(dir))?.is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Every atlas under `dir`, ordered by directory name.
pub fn load_atlases(dir: &Path) -> Result<Vec<Atlas>, PipelineError> {
    let atlases = sorted_subdirs(dir)?.iter().map(|d| load_atlas(d)).collect::<Result<Vec<_>, _>>()?;
    if atlases.is_empty() {
        return Err(PipelineError::Config(format!("no atlases in {}", dir.display())));
    }
    Ok(atlases)
}

/// Reads `<dir>/{t1,t1ce,t2,flair,seg}.nii`.
pub fn load_case(dir: &Path) -> Result<MultimodalCase, PipelineError> {
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let vols = Modality::ALL
        .iter()
        .map(|m| nifti::read_scalar(dir.join(format!("{}.nii", m.name()))))
        .collect::<Result<Vec<_>, _>>()?;
    let vols: [ScalarVolume; 4] = vols.try_into().expect("four modalities");
    let seg = nifti::read_labels(dir.join(SEG_FILE))?;
    Ok(MultimodalCase::new(id, vols, seg)?)
}

pub fn load_corpus(dir: &Path) -> Result<Vec<MultimodalCase>, PipelineError> {
    let cases = sorted_subdirs(dir)?.iter().map(|d| load_case(d)).collect::<Result<Vec<_>, _>>()?;
    if cases.is_empty() {
        return Err(PipelineError::Config(format!("no cases in {}", dir.display())));
    }
    Ok(cases)
}

/// Writes the four modalities and `seg.nii` into `dir`.
pub fn write_case(case: &MultimodalCase, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for m in Modality::ALL {
        nifti::write_scalar(case.modality(m), dir.join(format!("{}.nii", m.name())))?;
    }
    nifti::write_labels(&case.seg, dir.join(SEG_FILE))?;
    Ok(())
}

pub fn load_reference(path: &Path) -> Result<ReferenceDistribution, PipelineError> {
    if path.is_dir() {
        Ok(build_reference(&load_corpus(path)?)?)
    } else {
        let r: ReferenceDistribution = read_json(path)?;
        r.validate()?;
        Ok(r)
    }
}

pub fn load_intensity_model(path: &Path) -> Result<IntensityModel, PipelineError> {
    if path.is_dir() {
        Ok(estimate_intensity_model(&load_corpus(path)?)?)
    } else {
        read_json(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSummary {
    pub wasserstein1_before: BTreeMap<Modality, f64>,
    pub wasserstein1_after: BTreeMap<Modality, f64>,
}

impl From<&AdaptationReport> for AdaptationSummary {
    fn from(r: &AdaptationReport) -> Self {
        Self {
            wasserstein1_before: r.modalities.iter().map(|(m, x)| (*m, x.wasserstein1_before)).collect(),
            wasserstein1_after: r.modalities.iter().map(|(m, x)| (*m, x.wasserstein1_after)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub index: usize,
    pub seed: u64,
    pub atlas_id: String,
    pub growth_params: GrowthParams,
    pub adaptation: AdaptationSummary,
    /// Path relative to the dataset root → lowercase hex SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_revision: String,
    pub master_seed: u64,
    pub count: usize,
    pub cases: Vec<CaseEntry>,
    pub failures: Vec<CaseFailure>,
}

/// Per-case `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseMeta {
    pub format_revision: String,
    pub id: String,
    pub index: usize,
    pub master_seed: u64,
    pub seed: u64,
    pub seed_mixing: String,
    pub rng_algorithm: String,
    pub atlas_id: String,
    pub growth_params: GrowthParams,
    pub growth_steps: usize,
    pub growth_dt: f64,
    pub synth_params: SynthParams,
    pub adaptation: AdaptationReport,
    pub imbalance_extended: ImbalanceReport,
    pub imbalance_tumor_only: ImbalanceReport,
}

struct Inputs<'a> {
    config: &'a PipelineConfig,
    atlases: &'a [Atlas],
    model: &'a IntensityModel,
    reference: &'a ReferenceDistribution,
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

fn generate_case(index: usize, inp: &Inputs) -> Result<CaseEntry, PipelineError> {
    let cfg = inp.config;
    let seed = case_seed(cfg.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atlas = &inp.atlases[index % inp.atlases.len()];
    let mut params = sample_growth_params(&cfg.growth, &cfg.growth_ranges, &mut rng)?;
    params.seed_center = sample_seed_center(&atlas.labels, &mut rng)?;
    let synth_params = SynthParams { rng_seed: rng.next_u64(), ..cfg.synth.clone() };
    let id = case_id(index);

    let growth = simulate(&atlas.labels, &params)?;
    let seg = implant(&atlas.labels, &growth.tumor_labels)?;
    let mut raw = synthesize(&seg, Some(&growth.final_state), inp.model, &synth_params)?;
    raw.id = id.clone();
    let (adapted, report) = adapt(&raw, inp.reference)?;

    let brain = seg.mask_of(&labels::FOREGROUND);
    let meta = CaseMeta {
        format_revision: FORMAT_REVISION.into(),
        id: id.clone(),
        index,
        master_seed: cfg.seed,
        seed,
        seed_mixing: "splitmix64(master_seed ^ index)".into(),
        rng_algorithm: RNG_ALGORITHM.into(),
        atlas_id: atlas.id.clone(),
        growth_params: params.clone(),
        growth_steps: growth.steps,
        growth_dt: growth.dt,
        synth_params,
        adaptation: report.clone(),
        imbalance_extended: class_frequencies(&seg, Some(&brain))?,
        imbalance_tumor_only: class_frequencies(&tumor_only(&seg), Some(&brain))?,
    };

    let dir = cfg.output.join(&id);
    write_case(&adapted, &dir)?;
    let raw_dir = dir.join(RAW_DIR);
    fs::create_dir_all(&raw_dir).map_err(io_err(&raw_dir))?;
    for m in Modality::ALL {
        nifti::write_scalar(raw.modality(m), raw_dir.join(format!("{}.nii", m.name())))?;
    }
    write_json(&dir.join(META_FILE), &meta)?;

    let mut files = BTreeMap::new();
    for rel in case_files(&id) {
        files.insert(rel.clone(), sha256_file(&cfg.output.join(&rel))?);
    }
    info!("{id}: atlas {} with {} tumor voxels", atlas.id, seg.labels().iter().filter(|&&l| labels::is_tumor(l)).count());
    Ok(CaseEntry {
        id,
        index,
        seed,
        atlas_id: atlas.id.clone(),
        growth_params: params,
        adaptation: AdaptationSummary::from(&report),
        files,
    })
}

/// Relative paths of every file a case directory must contain.
pub fn case_files(id: &str) -> Vec<String> {
    let mut out: Vec<String> = Modality::ALL.iter().map(|m| format!("{id}/{}.nii", m.name())).collect();
    out.push(format!("{id}/{SEG_FILE}"));
    out.push(format!("{id}/{META_FILE}"));
    out.extend(Modality::ALL.iter().map(|m| format!("{id}/{RAW_DIR}/{}.nii", m.name())));
    out
}

/// Runs the full chain for `config.count` cases and writes the manifest.
/// Fails if the output directory already has content or no case succeeds.
pub fn generate(config: &PipelineConfig) -> Result<DatasetManifest, PipelineError> {
    config.validate()?;
    let out = &config.output;
    if out.exists() && fs::read_dir(out).map_err(io_err(out))?.next().is_some() {
        return Err(PipelineError::Config(format!("output directory {} is not empty", out.display())));
    }
    let atlases = load_atlases(&config.atlas_dir)?;
    let model = load_intensity_model(&config.intensity_model)?;
    let reference = load_reference(&config.reference)?;
    fs::create_dir_all(out).map_err(io_err(out))?;

    let inputs = Inputs { config, atlases: &atlases, model: &model, reference: &reference };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    let mut results: Vec<(usize, Result<CaseEntry, PipelineError>)> =
        pool.install(|| (0..config.count).into_par_iter().map(|k| (k, generate_case(k, &inputs))).collect());
    results.sort_by_key(|(k, _)| *k);

    let mut cases = Vec::new();
    let mut failures = Vec::new();
    for (index, r) in results {
        match r {
            Ok(entry) => cases.push(entry),
            Err(e) => {
                warn!("case {index} failed: {e}");
                let dir = out.join(case_id(index));
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
                }
                failures.push(CaseFailure { index, error: e.to_string() });
            }
        }
    }
    let manifest = DatasetManifest {
        format_revision: FORMAT_REVISION.into(),
        master_seed: config.seed,
        count: config.count,
        cases,
        failures,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    if manifest.cases.is_empty() {
        return Err(PipelineError::NoCases(manifest.failures.len()));
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseFindings {
    pub id: String,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Problems not tied to one case (manifest, stray entries).
    pub dataset: Vec<String>,
    pub cases: Vec<CaseFindings>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.dataset.is_empty() && self.cases.iter().all(|c| c.problems.is_empty())
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            list_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}

/// Checks a generated dataset against its manifest and the per-case
/// invariants.
pub fn validate(root: &Path) -> Result<ValidationReport, PipelineError> {
    if !root.is_dir() {
        return Err(PipelineError::Config(format!("{} is not a directory", root.display())));
    }
    let mut report = ValidationReport::default();
    let manifest: DatasetManifest = match read_json(&root.join(MANIFEST_FILE)) {
        Ok(m) => m,
        Err(e) => {
            report.dataset.push(format!("manifest: {e}"));
            return Ok(report);
        }
    };
    if manifest.format_revision != FORMAT_REVISION {
        report.dataset.push(format!("unknown format revision {:?}", manifest.format_revision));
    }
    let mut listed: Vec<String> = vec![MANIFEST_FILE.into()];
    for entry in &manifest.cases {
        listed.extend(entry.files.keys().cloned());
        report.cases.push(CaseFindings { id: entry.id.clone(), problems: validate_case(root, entry) });
    }
    let mut present = Vec::new();
    list_files(root, root, &mut present).map_err(io_err(root))?;
    for f in &present {
        if !listed.contains(f) {
            report.dataset.push(format!("file not in manifest: {f}"));
        }
    }
    Ok(report)
}

fn validate_case(root: &Path, entry: &CaseEntry) -> Vec<String> {
    let mut problems = Vec::new();
    let required = case_files(&entry.id);
    for rel in &required {
        if !entry.files.contains_key(rel) {
            problems.push(format!("manifest lacks {rel}"));
        }
    }
    for (rel, digest) in &entry.files {
        let path = root.join(rel);
        match sha256_file(&path) {
            Ok(d) if &d == digest => {}
            Ok(_) => problems.push(format!("{rel}: checksum mismatch")),
            Err(e) => problems.push(format!("{rel}: {e}")),
        }
    }
    let dir = root.join(&entry.id);
    let seg = match nifti::read_labels(dir.join(SEG_FILE)) {
        Ok(s) => s,
        Err(e) => {
            problems.push(format!("{SEG_FILE}: {e}"));
            return problems;
        }
    };
    let mut scalars = BTreeMap::new();
    for m in Modality::ALL {
        for (prefix, raw) in [("", false), ("raw/", true)] {
            let rel = format!("{prefix}{}.nii", m.name());
            match nifti::read_scalar(dir.join(&rel)) {
                Ok(v) => {
                    if !v.geometry().same_grid(seg.geometry()) {
                        problems.push(format!("{rel}: geometry differs from {SEG_FILE}"));
                    } else {
                        scalars.insert((m, raw), v);
                    }
                }
                Err(e) => problems.push(format!("{rel}: {e}")),
            }
        }
    }
    if let Err(e) = read_json::<CaseMeta>(&dir.join(META_FILE)) {
        problems.push(format!("{META_FILE}: {e}"));
    }
    // healthy tissue dominates the generated anatomy
    let tumor = seg.labels().iter().filter(|&&l| labels::is_tumor(l)).count();
    let healthy = seg.labels().iter().filter(|&&l| labels::is_healthy(l)).count();
    if healthy <= tumor {
        problems.push(format!("{tumor} tumor voxels vs {healthy} healthy voxels"));
    }
    for m in Modality::ALL {
        if let (Some(a), Some(r)) = (scalars.get(&(m, false)), scalars.get(&(m, true))) {
            problems.extend(adaptation_findings(m, &seg, r, a));
        }
    }
    problems
}

/// Background (label 0) must be bit-identical and brain voxels must keep
/// their order.
fn adaptation_findings(m: Modality, seg: &LabelVolume, raw: &ScalarVolume, adapted: &ScalarVolume) -> Vec<String> {
    let mut out = Vec::new();
    let (r, a) = (raw.values(), adapted.values());
    let (background, mut brain): (Vec<usize>, Vec<usize>) =
        (0..r.len()).partition(|&k| seg.labels()[k] == labels::BACKGROUND);
    if background.iter().any(|&k| a[k].to_bits() != r[k].to_bits()) {
        out.push(format!("{m}: background changed by adaptation"));
    }
    brain.sort_by(|&i, &j| r[i].total_cmp(&r[j]));
    if brain.windows(2).any(|w| a[w[1]] < a[w[0]]) {
        out.push(format!("{m}: adaptation reordered brain intensities"));
    }
    out
}
