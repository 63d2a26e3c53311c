//! Grid geometry, scalar/label volume containers and interpolation.
//!
//! All volumes are stored x-fastest (`index = x + nx * (y + ny * z)`), the
//! same order NIfTI uses on disk.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default upper bound on the voxel count of a single grid (512³).
pub const DEFAULT_VOXEL_CAP: usize = 512 * 512 * 512;

/// Label values used by every label map in the toolkit.
pub mod labels {
    pub const BACKGROUND: u8 = 0;
    /// Necrotic / non-enhancing tumor core.
    pub const NECROTIC: u8 = 1;
    pub const EDEMA: u8 = 2;
    pub const ENHANCING: u8 = 4;
    pub const CSF: u8 = 5;
    pub const GRAY: u8 = 6;
    pub const WHITE: u8 = 7;
    pub const GLIAL: u8 = 8;

    /// Every label a `LabelVolume` may hold, ascending.
    pub const ALL: [u8; 8] = [0, 1, 2, 4, 5, 6, 7, 8];
    /// Nonzero labels, ascending.
    pub const FOREGROUND: [u8; 7] = [1, 2, 4, 5, 6, 7, 8];
    pub const TUMOR: [u8; 3] = [NECROTIC, EDEMA, ENHANCING];
    pub const HEALTHY: [u8; 4] = [CSF, GRAY, WHITE, GLIAL];

    pub fn is_valid(label: u8) -> bool {
        ALL.contains(&label)
    }

    pub fn is_tumor(label: u8) -> bool {
        matches!(label, NECROTIC | EDEMA | ENHANCING)
    }

    pub fn is_healthy(label: u8) -> bool {
        matches!(label, CSF | GRAY | WHITE | GLIAL)
    }
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("grid of {voxels} voxels exceeds the cap of {cap}")]
    VoxelCapExceeded { voxels: usize, cap: usize },
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite value {value} at voxel {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("invalid label {value} at voxel {index}")]
    InvalidLabel { index: usize, value: u8 },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
}

/// Shape and physical placement of a voxel grid.
///
/// Spacing and origin are kept in single precision because that is what the
/// NIfTI header stores; this keeps write/read roundtrips exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    dims: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], origin: [f32; 3]) -> Result<Self, VolumeError> {
        Self::with_cap(dims, spacing, origin, DEFAULT_VOXEL_CAP)
    }

    pub fn with_cap(
        dims: [usize; 3],
        spacing: [f32; 3],
        origin: [f32; 3],
        cap: usize,
    ) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidGeometry(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::InvalidGeometry(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::InvalidGeometry(format!("origin must be finite, got {origin:?}")));
        }
        let voxels = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .unwrap_or(usize::MAX);
        if voxels > cap {
            return Err(VolumeError::VoxelCapExceeded { voxels, cap });
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Isotropic grid with unit spacing at the origin.
    pub fn cube(n: usize) -> Self {
        Self::new([n; 3], [1.0; 3], [0.0; 3]).expect("valid cube geometry")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn spacing_f64(&self) -> [f64; 3] {
        self.spacing.map(f64::from)
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing_f64().iter().product()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn same_grid(&self, other: &GridGeometry) -> bool {
        self == other
    }

    pub fn ensure_same(&self, other: &GridGeometry, what: &str) -> Result<(), VolumeError> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(VolumeError::GeometryMismatch(format!("{what}: {self:?} vs {other:?}")))
        }
    }
}

/// Dense single-precision intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    geometry: GridGeometry,
    values: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(geometry: GridGeometry, values: Vec<f32>) -> Result<Self, VolumeError> {
        if values.len() != geometry.len() {
            return Err(VolumeError::LengthMismatch { expected: geometry.len(), actual: values.len() });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index, value });
        }
        Ok(Self { geometry, values })
    }

    /// Skips the finiteness scan; callers guarantee the invariant.
    pub(crate) fn from_raw(geometry: GridGeometry, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), geometry.len());
        Self { geometry, values }
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        Self::filled(geometry, 0.0)
    }

    pub fn filled(geometry: GridGeometry, value: f32) -> Self {
        assert!(value.is_finite());
        Self { geometry, values: vec![value; geometry.len()] }
    }

    /// Builds a volume from a function of voxel coordinates.
    pub fn from_fn(geometry: GridGeometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self, VolumeError> {
        let [nx, ny, nz] = geometry.dims();
        let mut values = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    values.push(f(x, y, z));
                }
            }
        }
        Self::new(geometry, values)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.geometry.index(x, y, z)]
    }

    /// Trilinear interpolation at a continuous voxel coordinate; points
    /// outside `[0, dim-1]` are clamped to the boundary.
    pub fn sample_trilinear(&self, point: [f64; 3]) -> f64 {
        sample_trilinear(&self.values, &self.geometry, point)
    }

    /// Sum of all values in double precision.
    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum()
    }
}

/// Trilinear interpolation on a raw x-fastest buffer with boundary clamping.
pub fn sample_trilinear(values: &[f32], geometry: &GridGeometry, point: [f64; 3]) -> f64 {
    let dims = geometry.dims();
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f64;
        let p = point[a].clamp(0.0, max);
        let p = if p.is_nan() { 0.0 } else { p };
        let fl = p.floor();
        let mut b = fl as usize;
        let mut t = p - fl;
        if b + 1 > dims[a] - 1 {
            // at the upper boundary the upper neighbour would be out of range
            b = dims[a] - 1;
            t = 0.0;
        }
        base[a] = b;
        frac[a] = t;
    }
    let [nx, ny, _] = dims;
    let step = [
        usize::from(frac[0] > 0.0),
        if frac[1] > 0.0 { nx } else { 0 },
        if frac[2] > 0.0 { nx * ny } else { 0 },
    ];
    let i000 = base[0] + nx * (base[1] + ny * base[2]);
    let v = |off: usize| f64::from(values[i000 + off]);
    let (tx, ty, tz) = (frac[0], frac[1], frac[2]);
    let c00 = v(0) * (1.0 - tx) + v(step[0]) * tx;
    let c10 = v(step[1]) * (1.0 - tx) + v(step[1] + step[0]) * tx;
    let c01 = v(step[2]) * (1.0 - tx) + v(step[2] + step[0]) * tx;
    let c11 = v(step[2] + step[1]) * (1.0 - tx) + v(step[2] + step[1] + step[0]) * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    c0 * (1.0 - tz) + c1 * tz
}

/// Dense 8-bit label volume restricted to the toolkit's label set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: GridGeometry,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(geometry: GridGeometry, labels: Vec<u8>) -> Result<Self, VolumeError> {
        if labels.len() != geometry.len() {
            return Err(VolumeError::LengthMismatch { expected: geometry.len(), actual: labels.len() });
        }
        if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &l)| !labels::is_valid(l)) {
            return Err(VolumeError::InvalidLabel { index, value });
        }
        Ok(Self { geometry, labels })
    }

    /// Skips label validation; callers guarantee the invariant.
    pub(crate) fn from_raw(geometry: GridGeometry, labels: Vec<u8>) -> Self {
        Self { geometry, labels }
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        Self { geometry, labels: vec![0; geometry.len()] }
    }

    pub fn from_fn(geometry: GridGeometry, mut f: impl FnMut(usize, usize, usize) -> u8) -> Result<Self, VolumeError> {
        let [nx, ny, nz] = geometry.dims();
        let mut labels = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    labels.push(f(x, y, z));
                }
            }
        }
        Self::new(geometry, labels)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.geometry.index(x, y, z)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Binary mask of the voxels whose label is in `set`.
    pub fn mask_of(&self, set: &[u8]) -> Mask {
        Mask::from_raw(self.geometry, self.labels.iter().map(|l| set.contains(l)).collect())
    }
}

/// Boolean voxel mask sharing a grid with the volumes it selects from.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    geometry: GridGeometry,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(geometry: GridGeometry, bits: Vec<bool>) -> Result<Self, VolumeError> {
        if bits.len() != geometry.len() {
            return Err(VolumeError::LengthMismatch { expected: geometry.len(), actual: bits.len() });
        }
        Ok(Self { geometry, bits })
    }

    pub(crate) fn from_raw(geometry: GridGeometry, bits: Vec<bool>) -> Self {
        Self { geometry, bits }
    }

    pub fn empty(geometry: GridGeometry) -> Self {
        Self { geometry, bits: vec![false; geometry.len()] }
    }

    pub fn full(geometry: GridGeometry) -> Self {
        Self { geometry, bits: vec![true; geometry.len()] }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn not(&self) -> Mask {
        Mask::from_raw(self.geometry, self.bits.iter().map(|b| !b).collect())
    }

    pub fn and(&self, other: &Mask) -> Mask {
        assert!(self.geometry.same_grid(&other.geometry));
        Mask::from_raw(self.geometry, self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect())
    }

    pub fn or(&self, other: &Mask) -> Mask {
        assert!(self.geometry.same_grid(&other.geometry));
        Mask::from_raw(self.geometry, self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect())
    }

    /// Dilation by a cubic (Chebyshev) structuring element of the given
    /// radius in voxels.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        // separable: a cube is the product of three 1D intervals
        let mut bits = self.bits.clone();
        let dims = self.geometry.dims();
        for axis in 0..3 {
            bits = dilate_axis(&bits, dims, axis, radius);
        }
        Mask::from_raw(self.geometry, bits)
    }
}

fn dilate_axis(bits: &[bool], dims: [usize; 3], axis: usize, radius: usize) -> Vec<bool> {
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let n = dims[axis];
    let mut out = vec![false; bits.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let pos = (idx / stride) % n;
        let lo = pos.saturating_sub(radius);
        let hi = (pos + radius).min(n - 1);
        let start = idx - (pos - lo) * stride;
        *o = (0..=hi - lo).any(|k| bits[start + k * stride]);
    }
    out
}

/// Voxels carrying any nonzero label.
pub fn brain_mask(seg: &LabelVolume) -> Mask {
    Mask::from_raw(*seg.geometry(), seg.labels().iter().map(|&l| l != labels::BACKGROUND).collect())
}

/// One of the four structural MR sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1,
    T1ce,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1ce, Modality::T2, Modality::Flair];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }

    pub fn from_name(name: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.name() == name)
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Four co-registered modalities plus their segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalCase {
    pub id: String,
    pub t1: ScalarVolume,
    pub t1ce: ScalarVolume,
    pub t2: ScalarVolume,
    pub flair: ScalarVolume,
    pub seg: LabelVolume,
}

impl MultimodalCase {
    pub fn new(
        id: impl Into<String>,
        [t1, t1ce, t2, flair]: [ScalarVolume; 4],
        seg: LabelVolume,
    ) -> Result<Self, VolumeError> {
        let case = Self { id: id.into(), t1, t1ce, t2, flair, seg };
        case.check_geometry()?;
        Ok(case)
    }

    pub fn check_geometry(&self) -> Result<(), VolumeError> {
        let g = self.seg.geometry();
        for m in Modality::ALL {
            g.ensure_same(self.modality(m).geometry(), m.name())?;
        }
        Ok(())
    }

    pub fn geometry(&self) -> &GridGeometry {
        self.seg.geometry()
    }

    pub fn modality(&self, m: Modality) -> &ScalarVolume {
        match m {
            Modality::T1 => &self.t1,
            Modality::T1ce => &self.t1ce,
            Modality::T2 => &self.t2,
            Modality::Flair => &self.flair,
        }
    }

    /// Voxels that are labeled or nonzero in any modality.
    pub fn brain_mask(&self) -> Mask {
        let g = *self.geometry();
        let bits = (0..g.len())
            .map(|k| self.seg.labels()[k] != 0 || Modality::ALL.iter().any(|&m| self.modality(m).values()[k] != 0.0))
            .collect();
        Mask::from_raw(g, bits)
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut ScalarVolume {
        match m {
            Modality::T1 => &mut self.t1,
            Modality::T1ce => &mut self.t1ce,
            Modality::T2 => &mut self.t2,
            Modality::Flair => &mut self.flair,
        }
    }
}

/// Either kind of volume, for APIs that accept both.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Label(LabelVolume),
}

impl Volume {
    pub fn geometry(&self) -> &GridGeometry {
        match self {
            Volume::Scalar(v) => v.geometry(),
            Volume::Label(v) => v.geometry(),
        }
    }
}
