//! Four-modality intensity synthesis from an extended label map.
//!
//! Each modality is built from smoothed label indicators (partial volume),
//! class means and stds from an [`IntensityModel`], additive Gaussian noise
//! and a smooth multiplicative bias field.
//!
//! Random draws come from ChaCha8 seeded with [`SynthParams::rng_seed`].
//! For each modality in t1, t1ce, t2, flair order the generator first yields
//! one standard normal per voxel (x fastest) for the bias field, then one
//! per voxel for the noise. Draws are made even when the corresponding
//! amplitude is zero so that the streams never shift.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::gaussian_smooth;
use crate::growth::SpeciesState;
use crate::volume::{labels, LabelVolume, Modality, MultimodalCase, ScalarVolume, VolumeError};

/// Identifier written to metadata so that outputs can be traced to the
/// generator that produced them.
pub const RNG_ALGORITHM: &str = "chacha8/rand_chacha-0.9/standard-normal-ziggurat/rand_distr-0.5";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("intensity model has no entry for label {label} / {modality}")]
    MissingEntry { label: u8, modality: Modality },
    #[error("intensity model entry {key}: {reason}")]
    InvalidEntry { key: String, reason: String },
    #[error("invalid synthesis parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-label, per-modality intensity statistics. Serialized as a JSON
/// object keyed by `"<label>/<modality>"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, ClassStats>", into = "BTreeMap<String, ClassStats>")]
pub struct IntensityModel {
    table: BTreeMap<(u8, Modality), ClassStats>,
}

fn model_key(label: u8, m: Modality) -> String {
    format!("{label}/{}", m.name())
}

impl IntensityModel {
    /// Builds a model from a complete table.
    pub fn new(table: BTreeMap<(u8, Modality), ClassStats>) -> Result<Self, SynthError> {
        for (&(label, m), s) in &table {
            let key = model_key(label, m);
            if label == labels::BACKGROUND || !labels::is_valid(label) {
                return Err(SynthError::InvalidEntry { key, reason: "not a foreground label".into() });
            }
            if !(s.mean.is_finite() && s.std.is_finite() && s.std >= 0.0) {
                return Err(SynthError::InvalidEntry { key, reason: "mean must be finite and std >= 0".into() });
            }
        }
        for label in labels::FOREGROUND {
            for modality in Modality::ALL {
                if !table.contains_key(&(label, modality)) {
                    return Err(SynthError::MissingEntry { label, modality });
                }
            }
        }
        Ok(Self { table })
    }

    pub fn get(&self, label: u8, m: Modality) -> Option<ClassStats> {
        self.table.get(&(label, m)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (u8, Modality, ClassStats)> + '_ {
        self.table.iter().map(|(&(l, m), &s)| (l, m, s))
    }
}

impl TryFrom<BTreeMap<String, ClassStats>> for IntensityModel {
    type Error = SynthError;

    fn try_from(raw: BTreeMap<String, ClassStats>) -> Result<Self, SynthError> {
        let mut table = BTreeMap::new();
        for (key, stats) in raw {
            let bad = |reason: &str| SynthError::InvalidEntry { key: key.clone(), reason: reason.into() };
            let (l, m) = key.split_once('/').ok_or_else(|| bad("expected <label>/<modality>"))?;
            let label: u8 = l.parse().map_err(|_| bad("label is not an integer"))?;
            let modality = Modality::from_name(m).ok_or_else(|| bad("unknown modality"))?;
            table.insert((label, modality), stats);
        }
        Self::new(table)
    }
}

impl From<IntensityModel> for BTreeMap<String, ClassStats> {
    fn from(m: IntensityModel) -> Self {
        m.table.into_iter().map(|((l, md), s)| (model_key(l, md), s)).collect()
    }
}

/// Sample mean and std (n − 1 denominator; zero for a single voxel) of
/// every foreground label in every modality, pooled over the corpus.
pub fn estimate_intensity_model(cases: &[MultimodalCase]) -> Result<IntensityModel, SynthError> {
    // Welford accumulators: (n, mean, m2)
    let mut acc: BTreeMap<(u8, Modality), (u64, f64, f64)> = BTreeMap::new();
    for case in cases {
        case.check_geometry()?;
        for m in Modality::ALL {
            let vals = case.modality(m).values();
            for (&l, &v) in case.seg.labels().iter().zip(vals) {
                if l == labels::BACKGROUND {
                    continue;
                }
                let e = acc.entry((l, m)).or_insert((0, 0.0, 0.0));
                e.0 += 1;
                let x = f64::from(v);
                let delta = x - e.1;
                e.1 += delta / e.0 as f64;
                e.2 += delta * (x - e.1);
            }
        }
    }
    for label in labels::FOREGROUND {
        for modality in Modality::ALL {
            if !acc.contains_key(&(label, modality)) {
                return Err(SynthError::MissingEntry { label, modality });
            }
        }
    }
    let table = acc
        .into_iter()
        .map(|(k, (n, mean, m2))| {
            let std = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
            (k, ClassStats { mean, std })
        })
        .collect();
    IntensityModel::new(table)
}

fn default_pv_sigma() -> f64 {
    0.7
}
fn default_noise() -> f64 {
    0.5
}
fn default_bias_amplitude() -> f64 {
    0.2
}
fn default_bias_sigma() -> f64 {
    16.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    #[serde(default = "default_pv_sigma")]
    pub pv_sigma: f64,
    #[serde(default = "default_noise")]
    pub noise_std_frac: f64,
    #[serde(default = "default_bias_amplitude")]
    pub bias_amplitude: f64,
    #[serde(default = "default_bias_sigma")]
    pub bias_sigma: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            pv_sigma: default_pv_sigma(),
            noise_std_frac: default_noise(),
            bias_amplitude: default_bias_amplitude(),
            bias_sigma: default_bias_sigma(),
            rng_seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let all = [self.pv_sigma, self.noise_std_frac, self.bias_amplitude, self.bias_sigma];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(SynthError::InvalidParams("pv_sigma, noise_std_frac, bias_amplitude and bias_sigma must be >= 0".into()))
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-case seed: `splitmix64(master ⊕ index)`.
pub fn case_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ index)
}

/// Smoothed-indicator weights per present foreground label, normalized to
/// sum to one inside the brain (label ≠ 0).
fn partial_volume_weights(seg: &LabelVolume, pv_sigma: f64) -> Vec<(u8, Vec<f32>)> {
    let dims = seg.geometry().dims();
    let mut out: Vec<(u8, Vec<f32>)> = labels::FOREGROUND
        .iter()
        .filter(|&&l| seg.count(l) > 0)
        .map(|&l| {
            let mut ind: Vec<f32> = seg.labels().iter().map(|&x| if x == l { 1.0 } else { 0.0 }).collect();
            gaussian_smooth(&mut ind, dims, pv_sigma);
            (l, ind)
        })
        .collect();
    for (k, &l) in seg.labels().iter().enumerate() {
        if l == labels::BACKGROUND {
            continue;
        }
        let total: f32 = out.iter().map(|(_, w)| w[k]).sum();
        // a voxel always carries part of its own indicator, so total > 0
        for (_, w) in &mut out {
            w[k] /= total;
        }
    }
    out
}

fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}

/// Synthesizes t1, t1ce, t2 and flair for an extended label map. Species
/// fields only contribute through the labels; when given, their grid must
/// match.
pub fn synthesize(
    seg: &LabelVolume,
    species: Option<&SpeciesState>,
    model: &IntensityModel,
    params: &SynthParams,
) -> Result<MultimodalCase, SynthError> {
    params.validate()?;
    let g = *seg.geometry();
    if let Some(s) = species {
        g.ensure_same(s.geometry(), "species fields")?;
    }
    for &l in labels::FOREGROUND.iter().filter(|&&l| seg.count(l) > 0) {
        for m in Modality::ALL {
            model.get(l, m).ok_or(SynthError::MissingEntry { label: l, modality: m })?;
        }
    }
    let weights = partial_volume_weights(seg, params.pv_sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let n = g.len();
    let mut vols = Vec::with_capacity(4);
    for m in Modality::ALL {
        let mut bias = standard_normals(&mut rng, n);
        let noise = standard_normals(&mut rng, n);
        gaussian_smooth(&mut bias, g.dims(), params.bias_sigma);
        let peak = bias.iter().fold(0f32, |a, &b| a.max(b.abs()));
        let stats: Vec<ClassStats> = weights.iter().map(|(l, _)| model.get(*l, m).expect("checked above")).collect();
        let values: Vec<f32> = (0..n)
            .map(|k| {
                if seg.labels()[k] == labels::BACKGROUND {
                    return 0.0;
                }
                let (mut mean, mut std) = (0f64, 0f64);
                for ((_, w), s) in weights.iter().zip(&stats) {
                    let w = f64::from(w[k]);
                    mean += w * s.mean;
                    std += w * s.std;
                }
                let b = if peak > 0.0 { f64::from(bias[k] / peak) } else { 0.0 };
                let v = (mean + f64::from(noise[k]) * std * params.noise_std_frac) * (1.0 + params.bias_amplitude * b);
                v as f32
            })
            .collect();
        vols.push(ScalarVolume::new(g, values)?);
    }
    let vols: [ScalarVolume; 4] = vols.try_into().expect("four modalities");
    Ok(MultimodalCase::new("synthetic", vols, seg.clone())?)
}
