use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use biosynth::adapt::{self, wasserstein1, Histogram, REPORT_BINS};
use biosynth::growth::{self, GrowthParams, SpeciesState};
use biosynth::metrics::{class_frequencies, dice as region_dice, tumor_only, ImbalanceReport, RegionSpec};
use biosynth::phantom::{write_demo_kit, DemoOptions};
use biosynth::pipeline::{self, read_json, write_json, PipelineConfig, PipelineError, META_FILE, RAW_DIR};
use biosynth::registration::{self, exponentiate, warp_labels, warp_scalar, RegistrationParams};
use biosynth::synth::{self, SynthParams, RNG_ALGORITHM};
use biosynth::{labels, nifti, brain_mask, LabelVolume, Mask, Modality, ScalarVolume};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::settings::{resolve, Globals, Keys};
use crate::*;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::data(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(io(path))
}

fn print_json<T: Serialize>(value: &T) {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    // a closed pipe on stdout is not an error of ours
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct SimulateSettings {
    labels: PathBuf,
    output: PathBuf,
    #[serde(default)]
    growth: GrowthParams,
}

pub fn simulate(g: &Globals, a: SimulateArgs) -> Result<(), Failure> {
    let keys = Keys { globals: &["output"], paths: &["labels", "output"] };
    let s: SimulateSettings = resolve(g, &keys, json!({ "labels": a.labels }))?;
    let seg = nifti::read_labels(&s.labels)?;
    let result = growth::simulate(&seg, &s.growth)?;
    create_dir(&s.output)?;
    for (name, vol) in ["p", "i", "n"].iter().zip(result.final_state.to_volumes()) {
        nifti::write_scalar(&vol, s.output.join(format!("{name}.nii")))?;
    }
    nifti::write_labels(&result.tumor_labels, s.output.join("tumor_labels.nii"))?;
    let mut csv = String::from("t,mass_p,mass_i,mass_n\n");
    for m in &result.mass_series {
        writeln!(csv, "{},{},{},{}", m.t, m.mass_p, m.mass_i, m.mass_n).expect("string write");
    }
    let path = s.output.join("mass_series.csv");
    fs::write(&path, csv).map_err(io(&path))?;
    let report = json!({
        "dt": result.dt,
        "steps": result.steps,
        "mass_clipped": result.mass_series.last().map(|m| m.mass_clipped),
        "growth_params": s.growth,
    });
    write_json(&s.output.join("simulate.json"), &report)?;
    Ok(())
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct RegisterSettings {
    fixed: PathBuf,
    moving: PathBuf,
    exclude: Option<PathBuf>,
    moving_labels: Option<PathBuf>,
    output: PathBuf,
    #[serde(default)]
    registration: RegistrationParams,
}

pub fn register(g: &Globals, a: RegisterArgs) -> Result<(), Failure> {
    let keys = Keys { globals: &["output"], paths: &["fixed", "moving", "exclude", "moving_labels", "output"] };
    let flags = json!({ "fixed": a.fixed, "moving": a.moving, "exclude": a.exclude, "moving_labels": a.moving_labels });
    let s: RegisterSettings = resolve(g, &keys, flags)?;
    let fixed = nifti::read_scalar(&s.fixed)?;
    let moving = nifti::read_scalar(&s.moving)?;
    let exclude = match &s.exclude {
        Some(p) => nifti::read_labels(p)?.mask_of(&labels::TUMOR).dilate(2),
        None => Mask::empty(*fixed.geometry()),
    };
    let result = registration::register(&fixed, &moving, &exclude, &s.registration)?;
    let phi = exponentiate(&result.velocity)?;
    create_dir(&s.output)?;
    nifti::write_scalar(&warp_scalar(&moving, &phi)?, s.output.join("warped.nii"))?;
    if let Some(p) = &s.moving_labels {
        let l = nifti::read_labels(p)?;
        nifti::write_labels(&warp_labels(&l, &phi)?, s.output.join("warped_labels.nii"))?;
    }
    for (k, axis) in ["x", "y", "z"].iter().enumerate() {
        nifti::write_scalar(&result.velocity.0.component_volume(k), s.output.join(format!("velocity_{axis}.nii")))?;
    }
    let report = json!({
        "similarity_initial": result.similarity_initial,
        "similarity_final": result.similarity_final,
        "min_jacobian": result.min_jacobian,
        "iterations_run": result.iterations_run,
        "max_velocity": result.velocity.max_norm(),
        "max_displacement": phi.max_displacement(),
        "registration": s.registration,
    });
    write_json(&s.output.join("report.json"), &report)?;
    print_json(&report);
    Ok(())
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct EnrichSettings {
    case: PathBuf,
    atlas_dir: PathBuf,
    output: PathBuf,
    #[serde(default)]
    registration: RegistrationParams,
}

pub fn enrich_labels(g: &Globals, a: EnrichArgs) -> Result<(), Failure> {
    let keys = Keys { globals: &["output"], paths: &["case", "atlas_dir", "output"] };
    let s: EnrichSettings = resolve(g, &keys, json!({ "case": a.case, "atlas_dir": a.atlas_dir }))?;
    let case = pipeline::load_case(&s.case)?;
    let atlases = pipeline::load_atlases(&s.atlas_dir)?;
    let enriched = registration::enrich_case(&case, &atlases, &s.registration)?;
    create_dir(&s.output)?;
    nifti::write_labels(&enriched.labels, s.output.join("seg.nii"))?;
    let report = json!({ "case": case.id, "atlases": enriched.atlases });
    write_json(&s.output.join("fusion_report.json"), &report)?;
    print_json(&report);
    Ok(())
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct SynthesizeSettings {
    labels: PathBuf,
    model: PathBuf,
    species: Option<PathBuf>,
    output: PathBuf,
    seed: Option<u64>,
    #[serde(default)]
    synth: SynthParams,
}

fn read_species(dir: &Path, seg: &LabelVolume) -> Result<SpeciesState, Failure> {
    let read = |name: &str| -> Result<Vec<f64>, Failure> {
        let v = nifti::read_scalar(dir.join(format!("{name}.nii")))?;
        v.geometry().ensure_same(seg.geometry(), name)?;
        Ok(v.values().iter().map(|&x| f64::from(x)).collect())
    };
    Ok(SpeciesState::new(*seg.geometry(), read("p")?, read("i")?, read("n")?, 0.0)?)
}

pub fn synthesize(g: &Globals, a: SynthesizeArgs) -> Result<(), Failure> {
    let keys = Keys { globals: &["seed", "output"], paths: &["labels", "model", "species", "output"] };
    let s: SynthesizeSettings =
        resolve(g, &keys, json!({ "labels": a.labels, "model": a.model, "species": a.species }))?;
    let seg = nifti::read_labels(&s.labels)?;
    let model = pipeline::load_intensity_model(&s.model)?;
    let species = s.species.as_deref().map(|d| read_species(d, &seg)).transpose()?;
    let params = SynthParams { rng_seed: s.seed.unwrap_or(s.synth.rng_seed), ..s.synth };
    let case = synth::synthesize(&seg, species.as_ref(), &model, &params)?;
    pipeline::write_case(&case, &s.output)?;
    write_json(&s.output.join(META_FILE), &json!({ "synth_params": params, "rng_algorithm": RNG_ALGORITHM }))?;
    Ok(())
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct AdaptSettings {
    case: PathBuf,
    reference: PathBuf,
    output: PathBuf,
}

pub fn adapt(g: &Globals, a: AdaptArgs) -> Result<(), Failure> {
    let keys = Keys { globals: &["output"], paths: &["case", "reference", "output"] };
    let s: AdaptSettings = resolve(g, &keys, json!({ "case": a.case, "reference": a.reference }))?;
    let case = pipeline::load_case(&s.case)?;
    let reference = pipeline::load_reference(&s.reference)?;
    let (out, report) = adapt::adapt(&case, &reference)?;
    pipeline::write_case(&out, &s.output)?;
    let meta_in = s.case.join(META_FILE);
    let mut meta: Value = if meta_in.is_file() { read_json(&meta_in)? } else { json!({}) };
    let Value::Object(map) = &mut meta else {
        return Err(Failure::data(format!("{}: not a JSON object", meta_in.display())));
    };
    map.insert("adaptation".into(), serde_json::to_value(&report).expect("serializable"));
    write_json(&s.output.join(META_FILE), &meta)?;
    print_json(&pipeline::AdaptationSummary::from(&report));
    Ok(())
}

pub fn generate(g: &Globals, a: GenerateArgs) -> Result<(), Failure> {
    let keys = Keys {
        globals: &["seed", "jobs", "output"],
        paths: &["atlas_dir", "reference", "intensity_model", "output"],
    };
    let flags = json!({
        "count": a.count,
        "atlas_dir": a.atlas_dir,
        "reference": a.reference,
        "intensity_model": a.intensity_model,
    });
    let config: PipelineConfig = resolve(g, &keys, flags)?;
    match pipeline::generate(&config) {
        Ok(manifest) => {
            let failures: Vec<_> = manifest.failures.iter().map(|f| json!({"index": f.index, "error": f.error})).collect();
            print_json(&json!({
                "output": config.output,
                "cases": manifest.cases.iter().map(|c| &c.id).collect::<Vec<_>>(),
                "failures": failures,
            }));
            Ok(())
        }
        Err(e @ PipelineError::NoCases(_)) => Err(Failure::data(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct ValidateSettings {
    dataset: PathBuf,
}

pub fn validate(g: &Globals, a: ValidateArgs) -> Result<(), Failure> {
    let keys = Keys { globals: &[], paths: &["dataset"] };
    let s: ValidateSettings = resolve(g, &keys, json!({ "dataset": a.dataset }))?;
    let report = pipeline::validate(&s.dataset)?;
    print_json(&json!({ "passed": report.passed(), "dataset": report.dataset, "cases": report.cases }));
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::data(format!("{} failed validation", s.dataset.display())))
    }
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct DiceSettings {
    pred: PathBuf,
    truth: PathBuf,
    regions: Option<Vec<String>>,
}

pub fn dice(g: &Globals, a: DiceArgs) -> Result<(), Failure> {
    let keys = Keys { globals: &[], paths: &["pred", "truth"] };
    let s: DiceSettings = resolve(g, &keys, json!({ "pred": a.pred, "truth": a.truth, "regions": a.regions }))?;
    let regions = match &s.regions {
        None => RegionSpec::BRATS.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| RegionSpec::parse(n.trim()).ok_or_else(|| Failure::usage(format!("unknown region {n:?}"))))
            .collect::<Result<_, _>>()?,
    };
    let pred = nifti::read_labels(&s.pred)?;
    let truth = nifti::read_labels(&s.truth)?;
    let mut scores = BTreeMap::new();
    for r in regions {
        scores.insert(r.name(), region_dice(&pred, &truth, r)?);
    }
    print_json(&scores);
    Ok(())
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct StatsSettings {
    labels: Option<PathBuf>,
    brain: Option<PathBuf>,
    #[serde(default)]
    tumor_only: bool,
    case: Option<PathBuf>,
    reference: Option<PathBuf>,
}

#[derive(Serialize)]
struct Panel {
    voxels: usize,
    mean: f64,
    /// Values at the 1st, 25th, 50th, 75th and 99th percentiles.
    percentiles: [f64; 5],
    histogram: Vec<f64>,
}

#[derive(Serialize)]
struct ModalityStats {
    hist_min: f64,
    hist_max: f64,
    bins: usize,
    panels: BTreeMap<&'static str, Panel>,
    /// Wasserstein-1 distance between each pair of panels.
    wasserstein1: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct CaseStats {
    imbalance_extended: ImbalanceReport,
    imbalance_tumor_only: ImbalanceReport,
    modalities: BTreeMap<Modality, ModalityStats>,
}

fn masked_values(vol: &ScalarVolume, mask: &Mask) -> Vec<f64> {
    vol.values().iter().zip(mask.bits()).filter(|(_, &b)| b).map(|(&v, _)| f64::from(v)).collect()
}

fn modality_stats(samples: BTreeMap<&'static str, Vec<f64>>) -> Result<ModalityStats, Failure> {
    let all = samples.values().flatten().copied();
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let mut hists = BTreeMap::new();
    let mut panels = BTreeMap::new();
    for (name, mut v) in samples {
        if v.is_empty() {
            return Err(Failure::data(format!("{name}: no brain voxels")));
        }
        let hist = Histogram::from_values(&v, lo, hi, REPORT_BINS)?;
        v.sort_by(f64::total_cmp);
        let pick = |q: f64| v[((v.len() - 1) as f64 * q).round() as usize];
        let panel = Panel {
            voxels: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            percentiles: [0.01, 0.25, 0.5, 0.75, 0.99].map(pick),
            histogram: hist.counts.clone(),
        };
        hists.insert(name, hist);
        panels.insert(name, panel);
    }
    let mut w = BTreeMap::new();
    let names: Vec<_> = hists.keys().copied().collect();
    for (k, a) in names.iter().enumerate() {
        for b in &names[k + 1..] {
            w.insert(format!("{a}/{b}"), wasserstein1(&hists[a], &hists[b])?);
        }
    }
    Ok(ModalityStats { hist_min: lo, hist_max: hi, bins: REPORT_BINS, panels, wasserstein1: w })
}

fn case_stats(dir: &Path, reference: Option<&Path>) -> Result<CaseStats, Failure> {
    let case = pipeline::load_case(dir)?;
    let mask = case.brain_mask();
    let reference = reference.map(pipeline::load_reference).transpose()?;
    let raw_dir = dir.join(RAW_DIR);
    let mut modalities = BTreeMap::new();
    for m in Modality::ALL {
        let mut samples = BTreeMap::new();
        samples.insert("adapted", masked_values(case.modality(m), &mask));
        if raw_dir.is_dir() {
            let raw = nifti::read_scalar(raw_dir.join(format!("{}.nii", m.name())))?;
            raw.geometry().ensure_same(case.geometry(), "raw")?;
            samples.insert("synthetic", masked_values(&raw, &mask));
        }
        if let Some(r) = &reference {
            samples.insert("real", r.table(m).to_vec());
        }
        modalities.insert(m, modality_stats(samples)?);
    }
    let brain = case.seg.mask_of(&labels::FOREGROUND);
    Ok(CaseStats {
        imbalance_extended: class_frequencies(&case.seg, Some(&brain))?,
        imbalance_tumor_only: class_frequencies(&tumor_only(&case.seg), Some(&brain))?,
        modalities,
    })
}

pub fn stats(g: &Globals, a: StatsArgs) -> Result<(), Failure> {
    let keys = Keys { globals: &[], paths: &["labels", "brain", "case", "reference"] };
    let flags = json!({
        "labels": a.labels,
        "brain": a.brain,
        "tumor_only": a.tumor_only.then_some(true),
        "case": a.case,
        "reference": a.reference,
    });
    let s: StatsSettings = resolve(g, &keys, flags)?;
    match (&s.labels, &s.case) {
        (Some(path), None) => {
            let mut seg = nifti::read_labels(path)?;
            let brain = s.brain.as_deref().map(|p| nifti::read_labels(p).map(|b| brain_mask(&b))).transpose()?;
            if s.tumor_only {
                seg = tumor_only(&seg);
            }
            print_json(&class_frequencies(&seg, brain.as_ref())?);
            Ok(())
        }
        (None, Some(dir)) => {
            print_json(&case_stats(dir, s.reference.as_deref())?);
            Ok(())
        }
        _ => Err(Failure::usage("stats needs exactly one of --labels or --case")),
    }
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct PhantomSettings {
    output: PathBuf,
    atlases: Option<usize>,
    reference_cases: Option<usize>,
    size: Option<usize>,
    spacing: Option<f32>,
    seed: Option<u64>,
}

pub fn phantom(g: &Globals, a: PhantomArgs) -> Result<(), Failure> {
    let keys = Keys { globals: &["seed", "output"], paths: &["output"] };
    let flags =
        json!({ "atlases": a.atlases, "reference_cases": a.reference_cases, "size": a.size, "spacing": a.spacing });
    let s: PhantomSettings = resolve(g, &keys, flags)?;
    let d = DemoOptions::default();
    let o = &s;
    let opts = DemoOptions {
        atlases: o.atlases.unwrap_or(d.atlases),
        reference_cases: o.reference_cases.unwrap_or(d.reference_cases),
        size: o.size.unwrap_or(d.size),
        spacing: o.spacing.unwrap_or(d.spacing),
        seed: o.seed.unwrap_or(d.seed),
    };
    if opts.atlases == 0 || opts.reference_cases == 0 || opts.size < 8 || !(opts.spacing > 0.0) {
        return Err(Failure::usage("phantom needs atlases >= 1, reference_cases >= 1, size >= 8 and spacing > 0"));
    }
    let config = write_demo_kit(&s.output, &opts)?;
    let _ = writeln!(std::io::stdout().lock(), "{}", config.display());
    Ok(())
}
