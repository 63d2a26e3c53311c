//! BraTS region Dice and class-frequency statistics.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::volume::{labels, LabelVolume, Mask, VolumeError};

/// A named set of labels scored together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionSpec {
    /// Enhancing tumor: {4}.
    Et,
    /// Whole tumor: {1, 2, 4}.
    Wt,
    /// Tumor core: {1, 4}.
    Tc,
    /// A single label.
    Class(u8),
}

impl RegionSpec {
    pub const BRATS: [RegionSpec; 3] = [RegionSpec::Et, RegionSpec::Wt, RegionSpec::Tc];

    pub fn members(&self) -> Vec<u8> {
        match *self {
            RegionSpec::Et => vec![labels::ENHANCING],
            RegionSpec::Wt => vec![labels::NECROTIC, labels::EDEMA, labels::ENHANCING],
            RegionSpec::Tc => vec![labels::NECROTIC, labels::ENHANCING],
            RegionSpec::Class(k) => vec![k],
        }
    }

    pub fn name(&self) -> String {
        match *self {
            RegionSpec::Et => "ET".into(),
            RegionSpec::Wt => "WT".into(),
            RegionSpec::Tc => "TC".into(),
            RegionSpec::Class(k) => format!("class_{k}"),
        }
    }

    pub fn parse(s: &str) -> Option<RegionSpec> {
        match s.to_ascii_uppercase().as_str() {
            "ET" => Some(RegionSpec::Et),
            "WT" => Some(RegionSpec::Wt),
            "TC" => Some(RegionSpec::Tc),
            other => {
                let k: u8 = other.strip_prefix("CLASS_").unwrap_or(other).parse().ok()?;
                labels::is_valid(k).then_some(RegionSpec::Class(k))
            }
        }
    }
}

impl fmt::Display for RegionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty regions score 1.0.
pub fn dice(pred: &LabelVolume, truth: &LabelVolume, region: RegionSpec) -> Result<f64, VolumeError> {
    pred.geometry().ensure_same(truth.geometry(), "truth")?;
    let members = region.members();
    let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        let (ip, it) = (members.contains(&p), members.contains(&t));
        a += u64::from(ip);
        b += u64::from(it);
        both += u64::from(ip && it);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Dice for ET, WT and TC keyed by region name.
pub fn brats_dice(pred: &LabelVolume, truth: &LabelVolume) -> Result<BTreeMap<String, f64>, VolumeError> {
    RegionSpec::BRATS.iter().map(|r| Ok((r.name(), dice(pred, truth, *r)?))).collect()
}

/// Key under which label-0 voxels inside a brain mask are counted.
pub const UNLABELED_BRAIN: &str = "unlabeled_brain";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub total_voxels: usize,
    /// Every label over the whole volume (absent labels as 0); sums to
    /// `total_voxels`.
    pub counts: BTreeMap<u8, usize>,
    /// Voxels of the classes that enter the ratios.
    pub foreground_voxels: usize,
    /// Foreground classes with their counts, including absent ones as 0.
    pub foreground_counts: BTreeMap<String, usize>,
    /// Largest over smallest count among present foreground classes.
    pub foreground_max_min_ratio: Option<f64>,
    /// Tumor voxels over healthy-tissue voxels.
    pub tumor_to_healthy_ratio: Option<f64>,
}

/// Class frequencies of a label map.
///
/// Without a mask the foreground classes are the nonzero labels. With a
/// brain mask, label-0 voxels inside the mask form one more foreground
/// class ([`UNLABELED_BRAIN`]), so that a tumor-only map and its enriched
/// counterpart are compared over the same voxels.
pub fn class_frequencies(seg: &LabelVolume, brain: Option<&Mask>) -> Result<ImbalanceReport, VolumeError> {
    if let Some(m) = brain {
        seg.geometry().ensure_same(m.geometry(), "brain mask")?;
    }
    let mut counts: BTreeMap<u8, usize> = labels::ALL.iter().map(|&l| (l, 0)).collect();
    let mut unlabeled = 0usize;
    for (k, &l) in seg.labels().iter().enumerate() {
        *counts.get_mut(&l).expect("valid label") += 1;
        if l == labels::BACKGROUND && brain.is_some_and(|m| m.get(k)) {
            unlabeled += 1;
        }
    }
    let mut foreground_counts: BTreeMap<String, usize> =
        labels::FOREGROUND.iter().map(|&l| (l.to_string(), counts[&l])).collect();
    if brain.is_some() {
        foreground_counts.insert(UNLABELED_BRAIN.into(), unlabeled);
    }
    let present: Vec<usize> = foreground_counts.values().copied().filter(|&c| c > 0).collect();
    let foreground_max_min_ratio = match (present.iter().max(), present.iter().min()) {
        (Some(&hi), Some(&lo)) => Some(hi as f64 / lo as f64),
        _ => None,
    };
    let tumor: usize = labels::TUMOR.iter().map(|l| counts[l]).sum();
    let healthy: usize = labels::HEALTHY.iter().map(|l| counts[l]).sum();
    Ok(ImbalanceReport {
        total_voxels: seg.labels().len(),
        counts,
        foreground_voxels: present.iter().sum(),
        foreground_counts,
        foreground_max_min_ratio,
        tumor_to_healthy_ratio: (healthy > 0).then(|| tumor as f64 / healthy as f64),
    })
}

/// Tumor-only view of an extended map: healthy labels become background.
pub fn tumor_only(seg: &LabelVolume) -> LabelVolume {
    let out = seg.labels().iter().map(|&l| if labels::is_tumor(l) { l } else { labels::BACKGROUND }).collect();
    LabelVolume::from_raw(*seg.geometry(), out)
}
