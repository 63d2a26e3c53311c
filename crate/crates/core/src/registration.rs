//! Diffeomorphic demons registration with a stationary velocity field,
//! atlas label transfer and majority-vote fusion.
//!
//! Displacements and velocities are in voxel units. A deformation `φ`
//! maps a fixed-space voxel `x` to `x + φ(x)` in moving space, so warping
//! reads `out(x) = in(x + φ(x))`.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{downsample2, gaussian_smooth, upsample2};
use crate::volume::{labels, GridGeometry, LabelVolume, Mask, MultimodalCase, ScalarVolume, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("non-finite {0} field")]
    NonFinite(&'static str),
    #[error("linear interpolation would invent labels; use nearest for label volumes")]
    LinearOnLabels,
    #[error("invalid registration parameters: {0}")]
    InvalidParams(String),
    #[error("label fusion needs at least one atlas")]
    NoAtlases,
    #[error("{0} similarity values for {1} atlases")]
    SimilarityCount(usize, usize),
    #[error("atlas {id}: {reason}")]
    InvalidAtlas { id: String, reason: String },
    #[error("registration failed for every atlas: {0}")]
    AllAtlasesFailed(String),
}

/// Three displacement-like components on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    geometry: GridGeometry,
    comps: [Vec<f32>; 3],
}

impl VectorField {
    pub fn zeros(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        Self { geometry, comps: [vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }

    pub fn from_components(x: ScalarVolume, y: ScalarVolume, z: ScalarVolume) -> Result<Self, VolumeError> {
        let geometry = *x.geometry();
        geometry.ensure_same(y.geometry(), "y component")?;
        geometry.ensure_same(z.geometry(), "z component")?;
        Ok(Self { geometry, comps: [x.into_values(), y.into_values(), z.into_values()] })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn component(&self, axis: usize) -> &[f32] {
        &self.comps[axis]
    }

    /// Component `axis` as a scalar volume (for output).
    pub fn component_volume(&self, axis: usize) -> ScalarVolume {
        ScalarVolume::from_raw(self.geometry, self.comps[axis].clone())
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [f32; 3] {
        [self.comps[0][idx], self.comps[1][idx], self.comps[2][idx]]
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.geometry.len())
            .map(|i| {
                let [a, b, c] = self.at(i).map(f64::from);
                a * a + b * b + c * c
            })
            .fold(0f64, f64::max)
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self { geometry: self.geometry, comps: self.comps.clone().map(|c| c.into_iter().map(|v| v * s).collect()) }
    }

    fn smooth(&mut self, sigma: f64) {
        let dims = self.geometry.dims();
        for c in &mut self.comps {
            gaussian_smooth(c, dims, sigma);
        }
    }

    fn add_assign(&mut self, other: &VectorField) {
        for a in 0..3 {
            for (x, y) in self.comps[a].iter_mut().zip(&other.comps[a]) {
                *x += *y;
            }
        }
    }

    /// Samples all three components at a continuous voxel position.
    #[inline]
    fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let t = Trilinear::new(&self.geometry, p);
        [t.apply(&self.comps[0]), t.apply(&self.comps[1]), t.apply(&self.comps[2])]
    }
}

/// Precomputed trilinear stencil, shared across several buffers.
struct Trilinear {
    offsets: [usize; 8],
    weights: [f64; 8],
}

impl Trilinear {
    #[inline]
    fn new(geometry: &GridGeometry, p: [f64; 3]) -> Self {
        let dims = geometry.dims();
        let mut base = [0usize; 3];
        let mut t = [0f64; 3];
        let mut step = [0usize; 3];
        let strides = [1, dims[0], dims[0] * dims[1]];
        for a in 0..3 {
            let max = (dims[a] - 1) as f64;
            let q = if p[a].is_nan() { 0.0 } else { p[a].clamp(0.0, max) };
            let fl = q.floor();
            let b = fl as usize;
            if b >= dims[a] - 1 {
                base[a] = dims[a] - 1;
            } else {
                base[a] = b;
                t[a] = q - fl;
                step[a] = strides[a];
            }
        }
        let i0 = base[0] + strides[1] * base[1] + strides[2] * base[2];
        let [sx, sy, sz] = step;
        let [tx, ty, tz] = t;
        Self {
            offsets: [i0, i0 + sx, i0 + sy, i0 + sx + sy, i0 + sz, i0 + sx + sz, i0 + sy + sz, i0 + sx + sy + sz],
            weights: [
                (1.0 - tx) * (1.0 - ty) * (1.0 - tz),
                tx * (1.0 - ty) * (1.0 - tz),
                (1.0 - tx) * ty * (1.0 - tz),
                tx * ty * (1.0 - tz),
                (1.0 - tx) * (1.0 - ty) * tz,
                tx * (1.0 - ty) * tz,
                (1.0 - tx) * ty * tz,
                tx * ty * tz,
            ],
        }
    }

    #[inline]
    fn apply(&self, values: &[f32]) -> f64 {
        let mut acc = 0.0;
        for k in 0..8 {
            acc += self.weights[k] * f64::from(values[self.offsets[k]]);
        }
        acc
    }
}

/// Stationary velocity field (voxels per unit time).
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField(pub VectorField);

impl VelocityField {
    pub fn zeros(geometry: GridGeometry) -> Self {
        Self(VectorField::zeros(geometry))
    }

    pub fn geometry(&self) -> &GridGeometry {
        self.0.geometry()
    }

    pub fn max_norm(&self) -> f64 {
        self.0.max_norm()
    }

    pub fn negated(&self) -> Self {
        Self(self.0.scaled(-1.0))
    }
}

/// Dense displacement field with its minimum interior Jacobian determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub displacement: VectorField,
    pub min_jacobian: f64,
}

impl DeformationField {
    pub fn identity(geometry: GridGeometry) -> Self {
        Self { displacement: VectorField::zeros(geometry), min_jacobian: 1.0 }
    }

    pub fn from_displacement(displacement: VectorField) -> Self {
        let min_jacobian = min_jacobian(&displacement);
        Self { displacement, min_jacobian }
    }

    pub fn geometry(&self) -> &GridGeometry {
        self.displacement.geometry()
    }

    pub fn max_displacement(&self) -> f64 {
        self.displacement.max_norm()
    }
}

/// `outer ∘ inner`: the map `x ↦ x + d_in(x) + d_out(x + d_in(x))`.
fn compose_displacements(outer: &VectorField, inner: &VectorField) -> VectorField {
    let g = inner.geometry;
    let dims = g.dims();
    let mut out = VectorField::zeros(g);
    let mut idx = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let d = inner.at(idx).map(f64::from);
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                let s = outer.sample(p);
                for a in 0..3 {
                    out.comps[a][idx] = (d[a] + s[a]) as f32;
                }
                idx += 1;
            }
        }
    }
    out
}

pub fn compose(outer: &DeformationField, inner: &DeformationField) -> Result<DeformationField, RegistrationError> {
    outer.geometry().ensure_same(inner.geometry(), "compose")?;
    Ok(DeformationField::from_displacement(compose_displacements(&outer.displacement, &inner.displacement)))
}

/// Number of squarings so the scaled field moves less than half a voxel.
pub fn squaring_steps(max_norm: f64) -> u32 {
    if max_norm <= 0.5 {
        0
    } else {
        (max_norm / 0.5).log2().ceil() as u32
    }
}

/// Scaling and squaring: `exp(v) = (id + v / 2^S)^(2^S)`.
pub fn exponentiate(v: &VelocityField) -> Result<DeformationField, RegistrationError> {
    if !v.0.is_finite() {
        return Err(RegistrationError::NonFinite("velocity"));
    }
    let steps = squaring_steps(v.max_norm());
    let mut d = v.0.scaled((0.5f64).powi(steps as i32) as f32);
    for _ in 0..steps {
        d = compose_displacements(&d, &d);
    }
    if !d.is_finite() {
        return Err(RegistrationError::NonFinite("deformation"));
    }
    Ok(DeformationField::from_displacement(d))
}

/// Minimum of `det(I + ∇d)` over interior voxels, central differences.
/// Axes shorter than three voxels contribute no derivative.
pub fn min_jacobian(d: &VectorField) -> f64 {
    let g = d.geometry;
    let dims = g.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let range = |a: usize| if dims[a] >= 3 { 1..dims[a] - 1 } else { 0..dims[a] };
    let mut worst = f64::INFINITY;
    for z in range(2) {
        for y in range(1) {
            for x in range(0) {
                let idx = g.index(x, y, z);
                // m[i][j] = ∂(x_i + d_i)/∂x_j
                let mut m = [[0f64; 3]; 3];
                for (i, row) in m.iter_mut().enumerate() {
                    for j in 0..3 {
                        let deriv = if dims[j] >= 3 {
                            let c = &d.comps[i];
                            0.5 * (f64::from(c[idx + strides[j]]) - f64::from(c[idx - strides[j]]))
                        } else {
                            0.0
                        };
                        row[j] = deriv + if i == j { 1.0 } else { 0.0 };
                    }
                }
                let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                worst = worst.min(det);
            }
        }
    }
    if worst.is_finite() {
        worst
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Linear,
    Nearest,
}

pub fn warp_scalar(vol: &ScalarVolume, phi: &DeformationField) -> Result<ScalarVolume, RegistrationError> {
    vol.geometry().ensure_same(phi.geometry(), "warp")?;
    Ok(warp_values(vol.values(), &phi.displacement))
}

fn warp_values(values: &[f32], d: &VectorField) -> ScalarVolume {
    let g = d.geometry;
    let dims = g.dims();
    let mut out = Vec::with_capacity(g.len());
    let mut idx = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let [dx, dy, dz] = d.at(idx).map(f64::from);
                let t = Trilinear::new(&g, [x as f64 + dx, y as f64 + dy, z as f64 + dz]);
                out.push(t.apply(values) as f32);
                idx += 1;
            }
        }
    }
    ScalarVolume::from_raw(g, out)
}

pub fn warp_labels(vol: &LabelVolume, phi: &DeformationField) -> Result<LabelVolume, RegistrationError> {
    let g = *vol.geometry();
    g.ensure_same(phi.geometry(), "warp")?;
    let dims = g.dims();
    let d = &phi.displacement;
    let src = vol.labels();
    let mut out = Vec::with_capacity(g.len());
    let mut idx = 0;
    let near = |p: f64, n: usize| {
        let q = if p.is_nan() { 0.0 } else { p.round().clamp(0.0, (n - 1) as f64) };
        q as usize
    };
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let [dx, dy, dz] = d.at(idx).map(f64::from);
                let (sx, sy, sz) =
                    (near(x as f64 + dx, dims[0]), near(y as f64 + dy, dims[1]), near(z as f64 + dz, dims[2]));
                out.push(src[g.index(sx, sy, sz)]);
                idx += 1;
            }
        }
    }
    Ok(LabelVolume::from_raw(g, out))
}

/// Warps either kind of volume; labels only accept nearest-neighbour.
pub fn warp(vol: &Volume, phi: &DeformationField, interp: Interpolation) -> Result<Volume, RegistrationError> {
    match (vol, interp) {
        (Volume::Label(_), Interpolation::Linear) => Err(RegistrationError::LinearOnLabels),
        (Volume::Label(l), Interpolation::Nearest) => Ok(Volume::Label(warp_labels(l, phi)?)),
        (Volume::Scalar(s), Interpolation::Linear) => Ok(Volume::Scalar(warp_scalar(s, phi)?)),
        (Volume::Scalar(s), Interpolation::Nearest) => {
            let g = *s.geometry();
            g.ensure_same(phi.geometry(), "warp")?;
            let dims = g.dims();
            let d = &phi.displacement;
            let out = (0..g.len())
                .map(|idx| {
                    let c = g.coords(idx);
                    let p: [usize; 3] = [0, 1, 2].map(|a| {
                        let q = c[a] as f64 + f64::from(d.comps[a][idx]);
                        if q.is_nan() {
                            0
                        } else {
                            q.round().clamp(0.0, (dims[a] - 1) as f64) as usize
                        }
                    });
                    s.values()[g.index(p[0], p[1], p[2])]
                })
                .collect();
            Ok(Volume::Scalar(ScalarVolume::from_raw(g, out)))
        }
    }
}

/// Demons update for `moving(x + φ(x)) ≈ fixed(x)`:
/// `u = (f − m) ∇m / (|∇m|² + (f − m)² + eps)`, zero outside `valid`,
/// magnitude capped at `max_step` voxels.
pub fn demons_force(
    fixed: &ScalarVolume,
    warped_moving: &ScalarVolume,
    valid: &Mask,
    eps: f64,
    max_step: f64,
) -> Result<VelocityField, RegistrationError> {
    let g = *fixed.geometry();
    g.ensure_same(warped_moving.geometry(), "demons force")?;
    g.ensure_same(valid.geometry(), "demons mask")?;
    Ok(VelocityField(force_field(fixed.values(), warped_moving.values(), valid.bits(), &g, eps, max_step)))
}

fn force_field(f: &[f32], m: &[f32], valid: &[bool], g: &GridGeometry, eps: f64, max_step: f64) -> VectorField {
    let dims = g.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut u = VectorField::zeros(*g);
    let mut idx = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if valid[idx] {
                    let diff = f64::from(f[idx]) - f64::from(m[idx]);
                    if diff != 0.0 {
                        let pos = [x, y, z];
                        let mut grad = [0f64; 3];
                        for a in 0..3 {
                            let n = dims[a];
                            if n < 2 {
                                continue;
                            }
                            let (lo, hi) = (pos[a].saturating_sub(1), (pos[a] + 1).min(n - 1));
                            let (ilo, ihi) = (idx - (pos[a] - lo) * strides[a], idx + (hi - pos[a]) * strides[a]);
                            grad[a] = (f64::from(m[ihi]) - f64::from(m[ilo])) / (hi - lo) as f64;
                        }
                        let g2 = grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2];
                        if g2 > 0.0 {
                            let scale = diff / (g2 + diff * diff + eps);
                            let mut step = grad.map(|c| c * scale);
                            let norm = (step[0] * step[0] + step[1] * step[1] + step[2] * step[2]).sqrt();
                            if norm > max_step {
                                step = step.map(|c| c * max_step / norm);
                            }
                            for a in 0..3 {
                                u.comps[a][idx] = step[a] as f32;
                            }
                        }
                    }
                }
                idx += 1;
            }
        }
    }
    u
}

fn default_levels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationParams {
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Iterations per level, coarse to fine.
    pub iters_per_level: Vec<usize>,
    pub sigma_fluid: f64,
    pub sigma_diff: f64,
    pub force_epsilon: f64,
    pub max_step: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            levels: default_levels(),
            iters_per_level: vec![100, 75, 50],
            sigma_fluid: 1.0,
            sigma_diff: 1.5,
            force_epsilon: 1e-6,
            max_step: 1.0,
        }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |m: String| Err(RegistrationError::InvalidParams(m));
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        if self.iters_per_level.len() != self.levels {
            return bad(format!("{} iteration counts for {} levels", self.iters_per_level.len(), self.levels));
        }
        if !(self.sigma_fluid >= 0.0 && self.sigma_diff >= 0.0) {
            return bad("smoothing sigmas must be >= 0".into());
        }
        if !(self.force_epsilon >= 0.0 && self.max_step > 0.0) {
            return bad("force_epsilon must be >= 0 and max_step > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub velocity: VelocityField,
    /// Masked mean squared difference of normalized intensities.
    pub similarity_initial: f64,
    pub similarity_final: f64,
    pub min_jacobian: f64,
    pub iterations_run: usize,
}

/// Rescales the 1st–99th percentile of all voxels to `[0, 1]` (clamped).
///
/// With background filling more than 1% of the grid the lower anchor is 0,
/// so two images of the same anatomy get the same scale whatever the shape
/// of their brain outline.
pub fn normalize_intensity(vol: &ScalarVolume) -> ScalarVolume {
    let mut sorted: Vec<f32> = vol.values().to_vec();
    sorted.sort_by(f32::total_cmp);
    let pick = |q: f64| f64::from(sorted[((sorted.len() - 1) as f64 * q).round() as usize]);
    let (mut lo, mut hi) = (pick(0.01), pick(0.99));
    if hi <= lo {
        lo = f64::from(sorted[0]);
        hi = f64::from(sorted[sorted.len() - 1]);
    }
    if hi <= lo {
        return ScalarVolume::from_raw(*vol.geometry(), vec![0.0; sorted.len()]);
    }
    let span = hi - lo;
    let out = vol.values().iter().map(|&v| ((f64::from(v) - lo) / span).clamp(0.0, 1.0) as f32).collect();
    ScalarVolume::from_raw(*vol.geometry(), out)
}

fn masked_mse(a: &[f32], b: &[f32], mask: &[bool]) -> f64 {
    let (mut acc, mut n) = (0.0, 0usize);
    for k in 0..a.len() {
        if mask[k] {
            let d = f64::from(a[k]) - f64::from(b[k]);
            acc += d * d;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

struct Level {
    geometry: GridGeometry,
    fixed: Vec<f32>,
    moving: Vec<f32>,
    valid: Vec<bool>,
}

/// Registers `moving` onto `fixed`, ignoring voxels in `exclude` for the
/// force and the similarity.
///
/// Intensities are normalized per volume first. The similarity is the mean
/// squared difference over voxels that are not excluded and nonzero in
/// either input.
pub fn register(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    exclude: &Mask,
    params: &RegistrationParams,
) -> Result<RegistrationResult, RegistrationError> {
    params.validate()?;
    let g = *fixed.geometry();
    g.ensure_same(moving.geometry(), "moving image")?;
    g.ensure_same(exclude.geometry(), "exclusion mask")?;

    let f = normalize_intensity(fixed);
    let m = normalize_intensity(moving);
    let support: Vec<bool> = (0..g.len())
        .map(|k| !exclude.get(k) && (fixed.values()[k] != 0.0 || moving.values()[k] != 0.0))
        .collect();
    let valid: Vec<f32> = exclude.bits().iter().map(|&e| if e { 0.0 } else { 1.0 }).collect();

    // pyramid, finest first
    let mut pyramid = vec![Level {
        geometry: g,
        fixed: f.values().to_vec(),
        moving: m.values().to_vec(),
        valid: exclude.bits().iter().map(|&e| !e).collect(),
    }];
    let mut valid_frac = valid;
    for _ in 1..params.levels {
        let prev = pyramid.last().unwrap();
        if prev.geometry.dims().iter().all(|&d| d < 4) {
            break;
        }
        let (fx, cg) = downsample2(&prev.fixed, &prev.geometry);
        let (mv, _) = downsample2(&prev.moving, &prev.geometry);
        let (vf, _) = downsample2(&valid_frac, &prev.geometry);
        pyramid.push(Level { geometry: cg, fixed: fx, moving: mv, valid: vf.iter().map(|&v| v >= 0.5).collect() });
        valid_frac = vf;
    }
    // levels that could not be built reuse the coarsest available grid's budget
    let skipped = params.levels - pyramid.len();
    let mut iters: Vec<usize> = params.iters_per_level[skipped..].to_vec();
    iters[0] += params.iters_per_level[..skipped].iter().sum::<usize>();

    let coarsest = pyramid.last().unwrap().geometry;
    let mut v = VectorField::zeros(coarsest);
    let mut iterations_run = 0;
    for (li, level) in pyramid.iter().rev().enumerate() {
        if v.geometry != level.geometry {
            v = upsample_velocity(&v, &level.geometry);
        }
        for _ in 0..iters[li] {
            let phi = exponentiate(&VelocityField(v.clone()))?;
            let warped = warp_values(&level.moving, &phi.displacement);
            let mut u = force_field(
                &level.fixed,
                warped.values(),
                &level.valid,
                &level.geometry,
                params.force_epsilon,
                params.max_step,
            );
            u.smooth(params.sigma_fluid);
            v.add_assign(&u);
            v.smooth(params.sigma_diff);
            if !v.is_finite() {
                return Err(RegistrationError::NonFinite("velocity"));
            }
            iterations_run += 1;
        }
    }

    let velocity = VelocityField(v);
    let phi = exponentiate(&velocity)?;
    let warped = warp_values(m.values(), &phi.displacement);
    Ok(RegistrationResult {
        similarity_initial: masked_mse(f.values(), m.values(), &support),
        similarity_final: masked_mse(f.values(), warped.values(), &support),
        min_jacobian: phi.min_jacobian,
        velocity,
        iterations_run,
    })
}

/// Trilinear upsampling onto a finer grid; components along halved axes
/// are doubled to stay in fine-voxel units.
fn upsample_velocity(v: &VectorField, fine: &GridGeometry) -> VectorField {
    let cd = v.geometry.dims();
    let fd = fine.dims();
    let mut comps = [0, 1, 2].map(|a| upsample2(&v.comps[a], &v.geometry, fd));
    for a in 0..3 {
        if fd[a] != cd[a] {
            comps[a].iter_mut().for_each(|x| *x *= 2.0);
        }
    }
    VectorField { geometry: *fine, comps }
}

/// A healthy labeled template brain.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub id: String,
    pub t1: ScalarVolume,
    pub labels: LabelVolume,
}

impl Atlas {
    pub fn new(id: impl Into<String>, t1: ScalarVolume, labels: LabelVolume) -> Result<Self, RegistrationError> {
        let id = id.into();
        if !t1.geometry().same_grid(labels.geometry()) {
            return Err(RegistrationError::InvalidAtlas { id, reason: "t1 and labels differ in geometry".into() });
        }
        if let Some(&l) = labels.labels().iter().find(|&&l| l != labels::BACKGROUND && !labels::is_healthy(l)) {
            return Err(RegistrationError::InvalidAtlas { id, reason: format!("label {l} is not a healthy tissue label") });
        }
        Ok(Self { id, t1, labels })
    }
}

const FUSION_LABELS: [u8; 5] = [labels::BACKGROUND, labels::CSF, labels::GRAY, labels::WHITE, labels::GLIAL];

fn fusion_slot(l: u8) -> Option<usize> {
    FUSION_LABELS.iter().position(|&x| x == l)
}

/// Per-voxel majority vote over healthy labels. Ties go to the label whose
/// best supporting atlas has the lowest similarity value, then to the
/// smaller label.
pub fn fuse_labels(warped: &[LabelVolume], similarities: &[f64]) -> Result<LabelVolume, RegistrationError> {
    fuse(warped, similarities, None)
}

/// Like [`fuse_labels`], but inside `brain` a background vote only wins
/// when no atlas proposes a tissue label.
pub fn fuse_labels_within(
    warped: &[LabelVolume],
    similarities: &[f64],
    brain: &Mask,
) -> Result<LabelVolume, RegistrationError> {
    fuse(warped, similarities, Some(brain))
}

fn fuse(warped: &[LabelVolume], similarities: &[f64], brain: Option<&Mask>) -> Result<LabelVolume, RegistrationError> {
    let first = warped.first().ok_or(RegistrationError::NoAtlases)?;
    if similarities.len() != warped.len() {
        return Err(RegistrationError::SimilarityCount(similarities.len(), warped.len()));
    }
    let g = *first.geometry();
    for w in warped {
        g.ensure_same(w.geometry(), "fused label map")?;
    }
    if let Some(b) = brain {
        g.ensure_same(b.geometry(), "fusion brain mask")?;
    }
    let mut out = Vec::with_capacity(g.len());
    for idx in 0..g.len() {
        let mut votes = [0usize; 5];
        let mut best = [f64::INFINITY; 5];
        for (w, &sim) in warped.iter().zip(similarities) {
            if let Some(s) = fusion_slot(w.labels()[idx]) {
                votes[s] += 1;
                best[s] = best[s].min(sim);
            }
        }
        if brain.is_some_and(|b| b.get(idx)) && votes[1..].iter().any(|&c| c > 0) {
            votes[0] = 0;
        }
        let mut winner = 0;
        for s in 1..5 {
            let better = votes[s] > votes[winner] || (votes[s] == votes[winner] && best[s] < best[winner]);
            if better {
                winner = s;
            }
        }
        out.push(if votes[winner] == 0 { labels::BACKGROUND } else { FUSION_LABELS[winner] });
    }
    Ok(LabelVolume::from_raw(g, out))
}

/// Outcome of registering one atlas during enrichment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasReport {
    pub atlas_id: String,
    pub similarity_initial: Option<f64>,
    pub similarity_final: Option<f64>,
    pub min_jacobian: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Enrichment {
    pub labels: LabelVolume,
    pub atlases: Vec<AtlasReport>,
}

/// Adds healthy-tissue labels to a tumor segmentation by registering every
/// atlas T1 to the case T1 (tumor dilated by two voxels is excluded),
/// warping the atlas labels and fusing them. Tumor labels are never changed.
pub fn enrich_case(
    case: &MultimodalCase,
    atlases: &[Atlas],
    params: &RegistrationParams,
) -> Result<Enrichment, RegistrationError> {
    if atlases.is_empty() {
        return Err(RegistrationError::NoAtlases);
    }
    case.check_geometry()?;
    let g = *case.geometry();
    let tumor = case.seg.mask_of(&labels::TUMOR);
    let exclude = tumor.dilate(2);
    let brain = case.brain_mask();

    let outcomes: Vec<Result<(RegistrationResult, LabelVolume), RegistrationError>> = atlases
        .par_iter()
        .map(|atlas| {
            g.ensure_same(atlas.t1.geometry(), &format!("atlas {}", atlas.id))?;
            let res = register(&case.t1, &atlas.t1, &exclude, params)?;
            let phi = exponentiate(&res.velocity)?;
            let warped = warp_labels(&atlas.labels, &phi)?;
            Ok((res, warped))
        })
        .collect();

    let mut reports = Vec::with_capacity(atlases.len());
    let mut maps = Vec::new();
    let mut sims = Vec::new();
    let mut failures = Vec::new();
    for (atlas, outcome) in atlases.iter().zip(outcomes) {
        match outcome {
            Ok((res, warped)) => {
                reports.push(AtlasReport {
                    atlas_id: atlas.id.clone(),
                    similarity_initial: Some(res.similarity_initial),
                    similarity_final: Some(res.similarity_final),
                    min_jacobian: Some(res.min_jacobian),
                    error: None,
                });
                sims.push(res.similarity_final);
                maps.push(warped);
            }
            Err(e) => {
                warn!("skipping atlas {}: {e}", atlas.id);
                failures.push(format!("{}: {e}", atlas.id));
                reports.push(AtlasReport {
                    atlas_id: atlas.id.clone(),
                    similarity_initial: None,
                    similarity_final: None,
                    min_jacobian: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    if maps.is_empty() {
        return Err(RegistrationError::AllAtlasesFailed(failures.join("; ")));
    }
    let fused = fuse_labels_within(&maps, &sims, &brain)?;
    let out = (0..g.len())
        .map(|k| {
            let own = case.seg.labels()[k];
            if labels::is_tumor(own) {
                own
            } else if brain.get(k) {
                fused.labels()[k]
            } else {
                labels::BACKGROUND
            }
        })
        .collect();
    Ok(Enrichment { labels: LabelVolume::from_raw(g, out), atlases: reports })
}
