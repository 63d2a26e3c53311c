//! Monotone quantile matching of brain intensities toward a reference
//! distribution, with Wasserstein-1 reporting on binned histograms.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Mask, Modality, MultimodalCase, ScalarVolume, VolumeError};

/// Number of quantiles in every table.
pub const QUANTILES: usize = 1024;
/// Histogram bins used for distance reports.
pub const REPORT_BINS: usize = 256;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("reference corpus is empty")]
    EmptyCorpus,
    #[error("no brain voxels in {0}")]
    EmptyMask(String),
    #[error("quantile table for {modality} is invalid: {reason}")]
    InvalidTable { modality: Modality, reason: String },
    #[error("histograms use different binning")]
    BinningMismatch,
    #[error("histogram has no mass")]
    EmptyHistogram,
    #[error("histogram range must be finite with min < max and at least one bin")]
    InvalidHistogram,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Evenly spaced quantiles (`j / (q − 1)`, `j = 0..q`) of `sorted`, with
/// linear interpolation between order statistics.
pub fn quantile_table(sorted: &[f64], q: usize) -> Vec<f64> {
    assert!(!sorted.is_empty() && q >= 2);
    let last = (sorted.len() - 1) as f64;
    (0..q)
        .map(|j| {
            let pos = last * j as f64 / (q - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let t = pos - lo as f64;
            if lo == hi {
                sorted[lo]
            } else {
                sorted[lo] + t * (sorted[hi] - sorted[lo])
            }
        })
        .collect()
}

/// Per-modality reference quantiles pooled over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceDistribution {
    pub cases: usize,
    pub voxels: BTreeMap<Modality, usize>,
    pub quantiles: BTreeMap<Modality, Vec<f64>>,
}

impl ReferenceDistribution {
    pub fn table(&self, m: Modality) -> &[f64] {
        &self.quantiles[&m]
    }

    /// Checks that every modality has a non-decreasing, finite table of at
    /// least two entries.
    pub fn validate(&self) -> Result<(), AdaptError> {
        for m in Modality::ALL {
            let bad = |reason: &str| AdaptError::InvalidTable { modality: m, reason: reason.into() };
            let t = self.quantiles.get(&m).ok_or_else(|| bad("missing"))?;
            if t.len() < 2 {
                return Err(bad("fewer than two quantiles"));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite value"));
            }
            if t.windows(2).any(|w| w[1] < w[0]) {
                return Err(bad("values decrease"));
            }
        }
        Ok(())
    }
}

fn brain_values(vol: &ScalarVolume, mask: &Mask) -> Vec<f64> {
    vol.values().iter().zip(mask.bits()).filter(|(_, &b)| b).map(|(&v, _)| f64::from(v)).collect()
}

/// Pools brain intensities per modality over `cases` and tabulates
/// [`QUANTILES`] quantiles.
pub fn build_reference(cases: &[MultimodalCase]) -> Result<ReferenceDistribution, AdaptError> {
    if cases.is_empty() {
        return Err(AdaptError::EmptyCorpus);
    }
    let masks: Vec<Mask> = cases.iter().map(MultimodalCase::brain_mask).collect();
    for (c, m) in cases.iter().zip(&masks) {
        c.check_geometry()?;
        if m.count() == 0 {
            return Err(AdaptError::EmptyMask(c.id.clone()));
        }
    }
    let mut quantiles = BTreeMap::new();
    let mut voxels = BTreeMap::new();
    for m in Modality::ALL {
        let mut pooled: Vec<f64> =
            cases.iter().zip(&masks).flat_map(|(c, mask)| brain_values(c.modality(m), mask)).collect();
        pooled.sort_by(f64::total_cmp);
        voxels.insert(m, pooled.len());
        quantiles.insert(m, quantile_table(&pooled, QUANTILES));
    }
    Ok(ReferenceDistribution { cases: cases.len(), voxels, quantiles })
}

/// Fractional rank of `v` in a non-decreasing table; values inside a run of
/// equal entries get the middle of the run.
pub fn fractional_rank(table: &[f64], v: f64) -> f64 {
    let n = table.len();
    // first index with table[i] >= v, and first with table[i] > v
    let lo = table.partition_point(|&t| t < v);
    let hi = table.partition_point(|&t| t <= v);
    if hi > lo {
        return (lo + hi - 1) as f64 / 2.0;
    }
    if lo == 0 {
        return 0.0;
    }
    if lo == n {
        return (n - 1) as f64;
    }
    let (a, b) = (table[lo - 1], table[lo]);
    (lo - 1) as f64 + (v - a) / (b - a)
}

/// Value of a table at a fractional rank (linear between entries).
pub fn value_at_rank(table: &[f64], r: f64) -> f64 {
    let r = r.clamp(0.0, (table.len() - 1) as f64);
    let lo = r.floor() as usize;
    let t = r - lo as f64;
    if t == 0.0 {
        table[lo]
    } else {
        table[lo] + t * (table[lo + 1] - table[lo])
    }
}

/// Fixed-range histogram with equal-width bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<f64>,
}

impl Histogram {
    pub fn new(min: f64, max: f64, bins: usize) -> Result<Self, AdaptError> {
        if !(min.is_finite() && max.is_finite() && min < max && bins > 0) {
            return Err(AdaptError::InvalidHistogram);
        }
        Ok(Self { min, max, counts: vec![0.0; bins] })
    }

    /// Histogram of `values` over `[min, max]`; values outside are clamped
    /// into the end bins.
    pub fn from_values(values: &[f64], min: f64, max: f64, bins: usize) -> Result<Self, AdaptError> {
        let mut h = Self::new(min, max, bins)?;
        for &v in values {
            h.add(v, 1.0);
        }
        Ok(h)
    }

    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / self.counts.len() as f64
    }

    pub fn add(&mut self, v: f64, weight: f64) {
        let n = self.counts.len();
        let b = ((v - self.min) / self.bin_width()).floor();
        let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(n - 1) };
        self.counts[b] += weight;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// `W₁ = Σ |CDF_A − CDF_B| · bin_width` after normalizing both to unit mass.
pub fn wasserstein1(a: &Histogram, b: &Histogram) -> Result<f64, AdaptError> {
    if a.counts.len() != b.counts.len() || a.min != b.min || a.max != b.max {
        return Err(AdaptError::BinningMismatch);
    }
    let (ta, tb) = (a.total(), b.total());
    if ta <= 0.0 || tb <= 0.0 {
        return Err(AdaptError::EmptyHistogram);
    }
    let (mut ca, mut cb, mut acc) = (0.0, 0.0, 0.0);
    for (x, y) in a.counts.iter().zip(&b.counts) {
        ca += x / ta;
        cb += y / tb;
        acc += (ca - cb).abs();
    }
    Ok(acc * a.bin_width())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityReport {
    pub wasserstein1_before: f64,
    pub wasserstein1_after: f64,
    pub hist_min: f64,
    pub hist_max: f64,
    pub bins: usize,
    /// Set when the source had no intensity spread and was left unchanged.
    pub degenerate_source: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub modalities: BTreeMap<Modality, ModalityReport>,
}

/// Maps every brain voxel of every modality through the source-to-reference
/// quantile transfer. Background voxels are untouched.
pub fn adapt(
    case: &MultimodalCase,
    reference: &ReferenceDistribution,
) -> Result<(MultimodalCase, AdaptationReport), AdaptError> {
    case.check_geometry()?;
    reference.validate()?;
    let mask = case.brain_mask();
    if mask.count() == 0 {
        return Err(AdaptError::EmptyMask(case.id.clone()));
    }
    let mut out = case.clone();
    let mut modalities = BTreeMap::new();
    for m in Modality::ALL {
        let src_vol = case.modality(m);
        let mut src = brain_values(src_vol, &mask);
        src.sort_by(f64::total_cmp);
        let src_table = quantile_table(&src, QUANTILES);
        let ref_table = reference.table(m);
        let degenerate = src_table[0] == src_table[QUANTILES - 1];
        if degenerate {
            warn!("case {}: {m} has no intensity spread; left unchanged", case.id);
        }
        let mut values = src_vol.values().to_vec();
        if !degenerate {
            for (v, &inside) in values.iter_mut().zip(mask.bits()) {
                if inside {
                    *v = value_at_rank(ref_table, fractional_rank(&src_table, f64::from(*v))) as f32;
                }
            }
        }
        let adapted = ScalarVolume::new(*src_vol.geometry(), values)?;
        let after = brain_values(&adapted, &mask);

        let lo = src[0].min(ref_table[0]).min(after.iter().copied().fold(f64::INFINITY, f64::min));
        let hi = src[src.len() - 1].max(ref_table[ref_table.len() - 1]).max(after.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let hi = if hi > lo { hi } else { lo + 1.0 };
        let mut href = Histogram::new(lo, hi, REPORT_BINS)?;
        for &q in ref_table {
            href.add(q, 1.0);
        }
        let hsrc = Histogram::from_values(&src, lo, hi, REPORT_BINS)?;
        let hadp = Histogram::from_values(&after, lo, hi, REPORT_BINS)?;
        modalities.insert(
            m,
            ModalityReport {
                wasserstein1_before: wasserstein1(&hsrc, &href)?,
                wasserstein1_after: wasserstein1(&hadp, &href)?,
                hist_min: lo,
                hist_max: hi,
                bins: REPORT_BINS,
                degenerate_source: degenerate,
            },
        );
        *out.modality_mut(m) = adapted;
    }
    Ok((out, AdaptationReport { modalities }))
}
