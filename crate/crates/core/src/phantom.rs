//! Procedural brain phantoms: labeled anatomies with a T1-like contrast,
//! random smooth velocity fields, intensity tables and a self-contained
//! demo kit (atlases, reference corpus, intensity model, config).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapt::build_reference;
use crate::filter::gaussian_smooth;
use crate::growth::GrowthParams;
use crate::nifti;
use crate::pipeline::{io_err, write_case, write_json, PipelineConfig, PipelineError};
use crate::registration::{Atlas, VectorField, VelocityField};
use crate::synth::{synthesize, ClassStats, IntensityModel, SynthParams};
use crate::volume::{labels, GridGeometry, LabelVolume, Modality, ScalarVolume};

/// Shape parameters of one phantom head, in normalized ellipsoid units
/// unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    /// Center in voxel coordinates.
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub radii: [f64; 3],
    pub fold_amplitude: f64,
    pub fold_freq: [f64; 2],
    pub fold_phase: [f64; 2],
    pub csf_rim: f64,
    pub cortex: f64,
    pub ventricle_scale: f64,
    pub glial_offset: f64,
}

impl Anatomy {
    /// Average head for a cubic grid of side `n`.
    pub fn standard(n: usize) -> Self {
        let c = (n as f64 - 1.0) / 2.0;
        let s = n as f64 / 64.0;
        Self {
            center: [c, c, c],
            radii: [24.0 * s, 27.0 * s, 22.0 * s],
            fold_amplitude: 0.04,
            fold_freq: [5.0, 4.0],
            fold_phase: [0.0, 0.0],
            csf_rim: 0.07,
            cortex: 0.16,
            ventricle_scale: 1.0,
            glial_offset: 0.3,
        }
    }

    /// A random variation of [`Anatomy::standard`].
    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        let base = Self::standard(n);
        let mut j = |spread: f64| 1.0 + spread * (2.0 * rng.random::<f64>() - 1.0);
        let radii = base.radii.map(|r| r * j(0.08));
        let center = base.center.map(|c| c + (j(0.03) - 1.0) * n as f64);
        let fold_amplitude = base.fold_amplitude * j(0.4);
        let fold_freq = [base.fold_freq[0] * j(0.2), base.fold_freq[1] * j(0.2)];
        let csf_rim = base.csf_rim * j(0.2);
        let cortex = base.cortex * j(0.2);
        let ventricle_scale = j(0.25);
        let glial_offset = base.glial_offset * j(0.15);
        let tau = std::f64::consts::TAU;
        let fold_phase = [tau * rng.random::<f64>(), tau * rng.random::<f64>()];
        Self { center, radii, fold_amplitude, fold_freq, fold_phase, csf_rim, cortex, ventricle_scale, glial_offset }
    }

    fn label_at(&self, p: [f64; 3]) -> u8 {
        let q = [0, 1, 2].map(|a| (p[a] - self.center[a]) / self.radii[a]);
        let r = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        let theta = q[2].atan2((q[0] * q[0] + q[1] * q[1]).sqrt());
        let phi = q[1].atan2(q[0]);
        let fold = 1.0
            + self.fold_amplitude
                * (self.fold_freq[0] * theta + self.fold_phase[0]).sin()
                * (self.fold_freq[1] * phi + self.fold_phase[1]).sin();
        let s = r / fold;
        if s > 1.0 {
            return labels::BACKGROUND;
        }
        if s > 1.0 - self.csf_rim {
            return labels::CSF;
        }
        // gray matter follows the folded surface, white matter is smooth
        if s > 1.0 - self.csf_rim - self.cortex {
            return labels::GRAY;
        }
        let inside = |c: [f64; 3], rad: [f64; 3]| {
            (0..3).map(|a| ((q[a] - c[a]) / rad[a]).powi(2)).sum::<f64>() <= 1.0
        };
        let vs = self.ventricle_scale;
        for side in [-1.0, 1.0] {
            if inside([side * 0.12, 0.05, 0.08], [0.07 * vs, 0.28 * vs, 0.12 * vs]) {
                return labels::CSF;
            }
        }
        let g = self.glial_offset;
        for side in [-1.0, 1.0] {
            if inside([side * g, -0.05, -0.05], [0.15, 0.22, 0.16]) {
                return labels::GLIAL;
            }
        }
        labels::WHITE
    }

    pub fn labels(&self, geometry: GridGeometry) -> LabelVolume {
        let lv = LabelVolume::from_fn(geometry, |x, y, z| self.label_at([x as f64, y as f64, z as f64]));
        lv.expect("phantom labels are valid")
    }
}

/// Mean T1 contrast of each healthy class on an arbitrary unit scale.
pub fn t1_contrast(label: u8) -> f32 {
    match label {
        labels::CSF => 250.0,
        labels::GRAY => 550.0,
        labels::WHITE => 800.0,
        labels::GLIAL => 680.0,
        _ => 0.0,
    }
}

/// Noise-free T1-like image: class means blurred by `blur` voxels and
/// masked to the head.
pub fn t1_image(seg: &LabelVolume, blur: f64) -> ScalarVolume {
    let mut v: Vec<f32> = seg.labels().iter().map(|&l| t1_contrast(l)).collect();
    gaussian_smooth(&mut v, seg.geometry().dims(), blur);
    for (x, &l) in v.iter_mut().zip(seg.labels()) {
        if l == labels::BACKGROUND {
            *x = 0.0;
        }
    }
    ScalarVolume::new(*seg.geometry(), v).expect("finite phantom image")
}

/// Phantom atlas `index` of a family seeded by `seed` on a cubic grid.
pub fn atlas(seed: u64, index: usize, n: usize, spacing: f32) -> Atlas {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let anatomy = Anatomy::random(n, &mut rng);
    let geometry = GridGeometry::new([n; 3], [spacing; 3], [0.0; 3]).expect("valid phantom grid");
    let seg = anatomy.labels(geometry);
    let t1 = t1_image(&seg, 0.7);
    Atlas::new(format!("phantom-{index:02}"), t1, seg).expect("phantom atlas is healthy")
}

/// Random smooth stationary velocity field whose largest vector has
/// length `max_norm` voxels. `sigma` is the smoothing width in voxels.
///
/// The noise is drawn on a grid padded by `3 sigma` on every side and
/// cropped after smoothing, so the field has the same statistics at the
/// border as in the middle.
pub fn smooth_velocity(geometry: GridGeometry, max_norm: f64, sigma: f64, seed: u64) -> VelocityField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = geometry.dims();
    let pad = (3.0 * sigma).ceil() as usize;
    let big = dims.map(|d| d + 2 * pad);
    let big_len = big[0] * big[1] * big[2];
    let comps: Vec<Vec<f32>> = (0..3)
        .map(|_| {
            let mut c: Vec<f32> = (0..big_len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            gaussian_smooth(&mut c, big, sigma);
            let mut out = Vec::with_capacity(geometry.len());
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    let row = (z + pad) * big[0] * big[1] + (y + pad) * big[0] + pad;
                    out.extend_from_slice(&c[row..row + dims[0]]);
                }
            }
            out
        })
        .collect();
    let mk = |v: Vec<f32>| ScalarVolume::new(geometry, v).expect("finite");
    let [x, y, z]: [Vec<f32>; 3] = comps.try_into().expect("three components");
    let field = VectorField::from_components(mk(x), mk(y), mk(z)).expect("same grid");
    let norm = field.max_norm();
    let scale = if norm > 0.0 { (max_norm / norm) as f32 } else { 0.0 };
    VelocityField(field.scaled(scale))
}

/// Class means per modality (t1, t1ce, t2, flair) of the pre-adaptation
/// synthetic contrast.
fn base_means(label: u8) -> [f64; 4] {
    match label {
        labels::NECROTIC => [200.0, 220.0, 900.0, 400.0],
        labels::EDEMA => [450.0, 470.0, 950.0, 1000.0],
        labels::ENHANCING => [600.0, 1100.0, 700.0, 800.0],
        labels::CSF => [250.0, 260.0, 1000.0, 150.0],
        labels::GRAY => [550.0, 570.0, 650.0, 600.0],
        labels::WHITE => [800.0, 810.0, 450.0, 450.0],
        _ => [680.0, 690.0, 550.0, 520.0],
    }
}

fn model_from(f: impl Fn(f64) -> (f64, f64)) -> IntensityModel {
    let mut table = BTreeMap::new();
    for l in labels::FOREGROUND {
        for (m, mean) in Modality::ALL.iter().zip(base_means(l)) {
            let (mean, std) = f(mean);
            table.insert((l, *m), ClassStats { mean, std });
        }
    }
    IntensityModel::new(table).expect("complete table")
}

/// Intensity table used to synthesize raw cases (roughly 150 to 1100).
pub fn synthetic_model() -> IntensityModel {
    model_from(|m| (m, 0.06 * m))
}

/// Table of the stand-in "scanner" corpus: an affine remap of
/// [`synthetic_model`] into a disjoint range (above 2000) with wider spread.
pub fn reference_model() -> IntensityModel {
    model_from(|m| (2000.0 + 2.5 * m, 0.1 * 2.5 * m))
}

/// Ellipsoidal tumor (necrotic core, enhancing shell, edema halo) drawn on
/// the brain of `seg`; `center` and `radius` in voxels.
pub fn tumor_ball(seg: &LabelVolume, center: [f64; 3], radius: f64) -> LabelVolume {
    let g = *seg.geometry();
    let out = (0..g.len())
        .map(|k| {
            let own = seg.labels()[k];
            let c = g.coords(k);
            let r = (0..3).map(|a| (c[a] as f64 - center[a]).powi(2)).sum::<f64>().sqrt() / radius;
            match own {
                labels::BACKGROUND => own,
                _ if r <= 0.35 => labels::NECROTIC,
                _ if r <= 0.6 => labels::ENHANCING,
                _ if r <= 1.0 => labels::EDEMA,
                _ => own,
            }
        })
        .collect();
    LabelVolume::new(g, out).expect("valid labels")
}

/// Options of [`write_demo_kit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoOptions {
    pub atlases: usize,
    pub reference_cases: usize,
    pub size: usize,
    pub spacing: f32,
    pub seed: u64,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self { atlases: 3, reference_cases: 2, size: 64, spacing: 2.5, seed: 1 }
    }
}

/// Growth ranges of the demo config: small, fast tumors that stay well
/// below the healthy-tissue volume.
pub fn demo_growth_ranges() -> BTreeMap<String, [f64; 2]> {
    [
        ("d_w", [0.1, 0.2]),
        ("rho_p", [0.15, 0.3]),
        ("rho_i", [0.04, 0.08]),
        ("alpha_pi", [0.01, 0.03]),
        ("beta_ip", [0.005, 0.02]),
        ("gamma", [0.05, 0.1]),
        ("seed_amplitude", [0.4, 0.6]),
        ("t_final", [50.0, 90.0]),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Writes phantom atlases, a reference corpus with its quantile tables, the
/// synthetic intensity model and a `config.json` pointing at them. Returns
/// the config path.
pub fn write_demo_kit(dir: &Path, opts: &DemoOptions) -> Result<PathBuf, PipelineError> {
    let atlas_dir = dir.join("atlases");
    for i in 0..opts.atlases {
        let a = atlas(opts.seed, i, opts.size, opts.spacing);
        let d = atlas_dir.join(&a.id);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        nifti::write_scalar(&a.t1, d.join("t1.nii"))?;
        nifti::write_labels(&a.labels, d.join("labels.nii"))?;
    }

    let corpus_dir = dir.join("reference_corpus");
    let mut corpus = Vec::new();
    let model = reference_model();
    for i in 0..opts.reference_cases {
        let base = atlas(opts.seed ^ 0xA5A5_A5A5, i, opts.size, opts.spacing);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
        let anatomy = Anatomy::standard(opts.size);
        let offset = [0, 1, 2].map(|a| anatomy.radii[a] * (rng.random::<f64>() - 0.5) * 0.6);
        let center = [0, 1, 2].map(|a| anatomy.center[a] + offset[a]);
        let seg = tumor_ball(&base.labels, center, opts.size as f64 * 0.12);
        let params = SynthParams { rng_seed: rng.random(), ..SynthParams::default() };
        let mut case = synthesize(&seg, None, &model, &params)?;
        case.id = format!("ref_{i:02}");
        write_case(&case, &corpus_dir.join(&case.id))?;
        corpus.push(case);
    }
    let reference = build_reference(&corpus)?;
    write_json(&dir.join("reference_dist.json"), &reference)?;
    write_json(&dir.join("intensity_model.json"), &synthetic_model())?;

    let config = PipelineConfig {
        atlas_dir: "atlases".into(),
        reference: "reference_dist.json".into(),
        intensity_model: "intensity_model.json".into(),
        growth_ranges: demo_growth_ranges(),
        growth: GrowthParams::default(),
        synth: SynthParams::default(),
        count: 2,
        seed: 7,
        output: "dataset".into(),
        jobs: 0,
    };
    let path = dir.join("config.json");
    write_json(&path, &config)?;
    Ok(path)
}
