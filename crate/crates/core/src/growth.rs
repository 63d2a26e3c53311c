//! Three-species reaction-diffusion tumor growth on a labeled brain.
//!
//! Species are cell volume fractions: proliferative `p`, infiltrative `i`
//! and necrotic `n`. Each time step is split into
//!
//! 1. conservative diffusion of `p` and `i`, `∂s/∂t = ∇·(D_s ∇s)`, with face
//!    diffusivities taken as the harmonic mean of the two adjacent voxels
//!    (zero when either side is zero, giving no-flux walls at CSF and
//!    background) and explicit sub-stepping under the stability limit;
//! 2. pointwise reactions with total occupancy `c = p + i + n` and a smooth
//!    crowding switch `H = ½(1 + tanh((c − c_h)/σ_h))`:
//!    - `p' = ρ_p g p (1−c)⁺ − α p + β i − γ H p`
//!    - `i' = ρ_i g i (1−c)⁺ + α p − β i − γ H i`
//!    - `n' = γ H (p + i)`
//! 3. clipping of negatives; where `c > 1`, `p` and `i` are rescaled together
//!    so that `p + i = 1 − n`.
//!
//! Linear diffusion can carry mobile cells into voxels that are already
//! full; the clip removes that excess and the amount is reported as
//! `mass_clipped`, so `total + mass_clipped` never decreases.
//!
//! Species fields are held in double precision so that diffusion conserves
//! mass to roundoff.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{labels, GridGeometry, LabelVolume, ScalarVolume, VolumeError};

#[derive(Debug, Error)]
pub enum GrowthError {
    #[error("invalid growth parameters: {0}")]
    InvalidParams(String),
    #[error("seed center {center:?} lies outside the grid {dims:?}")]
    SeedOutsideGrid { center: [f64; 3], dims: [usize; 3] },
    #[error("seed center {center:?} lies in tissue with zero diffusivity (label {label})")]
    SeedInInertTissue { center: [f64; 3], label: u8 },
    #[error("non-finite concentration at voxel {voxel} (dt = {dt} days, max diffusivity = {d_max} mm²/day)")]
    Unstable { voxel: usize, dt: f64, d_max: f64 },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

fn default_record_interval() -> usize {
    10
}

/// Model and solver parameters. Units: mm, days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthParams {
    /// White-matter diffusivity of proliferative cells (mm²/day).
    pub d_w: f64,
    /// Gray/white diffusivity ratio.
    pub kappa_gw: f64,
    /// Diffusivity multiplier of the infiltrative species.
    pub kappa_i: f64,
    pub rho_p: f64,
    pub rho_i: f64,
    /// Proliferative → infiltrative conversion rate.
    pub alpha_pi: f64,
    /// Infiltrative → proliferative conversion rate.
    pub beta_ip: f64,
    /// Necrosis rate.
    pub gamma: f64,
    /// Occupancy at which the necrosis switch is half on.
    pub c_h: f64,
    pub sigma_h: f64,
    /// Seed position in voxel coordinates.
    pub seed_center: [f64; 3],
    /// Seed Gaussian width in mm.
    pub seed_sigma: f64,
    pub seed_amplitude: f64,
    pub t_final: f64,
    pub cfl_safety: f64,
    pub tau_p: f64,
    pub tau_i: f64,
    pub tau_n: f64,
    /// Steps between mass-series samples.
    #[serde(default = "default_record_interval")]
    pub record_interval: usize,
}

impl Default for GrowthParams {
    fn default() -> Self {
        Self {
            d_w: 0.13,
            kappa_gw: 0.1,
            kappa_i: 5.0,
            rho_p: 0.1,
            rho_i: 0.05,
            alpha_pi: 0.05,
            beta_ip: 0.01,
            gamma: 0.1,
            c_h: 0.9,
            sigma_h: 0.05,
            seed_center: [32.0, 32.0, 32.0],
            seed_sigma: 3.0,
            seed_amplitude: 0.5,
            t_final: 300.0,
            cfl_safety: 0.9,
            tau_p: 0.4,
            tau_i: 0.02,
            tau_n: 0.5,
            record_interval: default_record_interval(),
        }
    }
}

impl GrowthParams {
    pub fn validate(&self) -> Result<(), GrowthError> {
        let bad = |msg: String| Err(GrowthError::InvalidParams(msg));
        let rates = [
            ("d_w", self.d_w),
            ("rho_p", self.rho_p),
            ("rho_i", self.rho_i),
            ("alpha_pi", self.alpha_pi),
            ("beta_ip", self.beta_ip),
            ("gamma", self.gamma),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be a finite non-negative rate"));
            }
        }
        if !(self.kappa_gw > 0.0 && self.kappa_gw <= 1.0) {
            return bad(format!("kappa_gw = {} must lie in (0, 1]", self.kappa_gw));
        }
        if !(self.kappa_i >= 1.0 && self.kappa_i.is_finite()) {
            return bad(format!("kappa_i = {} must be >= 1", self.kappa_i));
        }
        if !(self.c_h > 0.0 && self.c_h < 1.0) {
            return bad(format!("c_h = {} must lie in (0, 1)", self.c_h));
        }
        if !(self.sigma_h > 0.0 && self.sigma_h.is_finite()) {
            return bad(format!("sigma_h = {} must be positive", self.sigma_h));
        }
        if !(self.seed_sigma > 0.0 && self.seed_sigma.is_finite()) {
            return bad(format!("seed_sigma = {} must be positive", self.seed_sigma));
        }
        if !(0.0..=1.0).contains(&self.seed_amplitude) {
            return bad(format!("seed_amplitude = {} must lie in [0, 1]", self.seed_amplitude));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return bad(format!("t_final = {} must be positive", self.t_final));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety < 1.0) {
            return bad(format!("cfl_safety = {} must lie in (0, 1)", self.cfl_safety));
        }
        for (name, v) in [("tau_p", self.tau_p), ("tau_i", self.tau_i), ("tau_n", self.tau_n)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} = {v} must lie in (0, 1)"));
            }
        }
        if self.record_interval == 0 {
            return bad("record_interval must be >= 1".into());
        }
        if self.seed_center.iter().any(|c| !c.is_finite()) {
            return bad(format!("seed_center {:?} must be finite", self.seed_center));
        }
        Ok(())
    }

    /// Largest reaction sub-step that keeps explicit Euler positive and the
    /// total occupancy at or below one.
    fn reaction_dt_limit(&self) -> f64 {
        let total = self.rho_p + self.rho_i + self.alpha_pi + self.beta_ip + self.gamma;
        if total > 0.0 {
            1.0 / total
        } else {
            f64::INFINITY
        }
    }
}

/// Per-voxel diffusivities and growth mask derived from tissue labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueCoefficients {
    pub diff_p: ScalarVolume,
    pub diff_i: ScalarVolume,
    pub growth_scale: ScalarVolume,
}

impl TissueCoefficients {
    pub fn geometry(&self) -> &GridGeometry {
        self.diff_p.geometry()
    }

    /// Largest diffusivity of either species.
    pub fn max_diffusivity(&self) -> f64 {
        self.diff_p
            .values()
            .iter()
            .chain(self.diff_i.values())
            .fold(0f64, |m, &d| m.max(f64::from(d)))
    }
}

pub fn derive_tissue_coefficients(seg: &LabelVolume, params: &GrowthParams) -> TissueCoefficients {
    let geometry = *seg.geometry();
    let d_w = params.d_w as f32;
    let d_g = (params.d_w * params.kappa_gw) as f32;
    let diff_p: Vec<f32> = seg
        .labels()
        .iter()
        .map(|&l| match l {
            labels::WHITE | labels::GLIAL => d_w,
            labels::GRAY => d_g,
            // tumor labels carried in a merged map grow like white matter
            l if labels::is_tumor(l) => d_w,
            _ => 0.0,
        })
        .collect();
    let kappa_i = params.kappa_i as f32;
    let diff_i = diff_p.iter().map(|&d| kappa_i * d).collect();
    let growth_scale = diff_p.iter().map(|&d| if d > 0.0 { 1.0 } else { 0.0 }).collect();
    TissueCoefficients {
        diff_p: ScalarVolume::from_raw(geometry, diff_p),
        diff_i: ScalarVolume::from_raw(geometry, diff_i),
        growth_scale: ScalarVolume::from_raw(geometry, growth_scale),
    }
}

/// Species concentrations at time `t` (days).
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesState {
    geometry: GridGeometry,
    pub p: Vec<f64>,
    pub i: Vec<f64>,
    pub n: Vec<f64>,
    pub t: f64,
}

/// Species masses (mm³ of cells) at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassSample {
    pub t: f64,
    pub mass_p: f64,
    pub mass_i: f64,
    pub mass_n: f64,
    /// Cumulative mass removed by the saturation clip since `t = 0`.
    #[serde(default)]
    pub mass_clipped: f64,
}

impl MassSample {
    pub fn total(&self) -> f64 {
        self.mass_p + self.mass_i + self.mass_n
    }
}

impl SpeciesState {
    pub fn new(geometry: GridGeometry, p: Vec<f64>, i: Vec<f64>, n: Vec<f64>, t: f64) -> Result<Self, GrowthError> {
        let len = geometry.len();
        for (name, f) in [("p", &p), ("i", &i), ("n", &n)] {
            if f.len() != len {
                return Err(GrowthError::InvalidParams(format!("species {name} has {} values, grid has {len}", f.len())));
            }
        }
        Ok(Self { geometry, p, i, n, t })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        let len = geometry.len();
        Self { geometry, p: vec![0.0; len], i: vec![0.0; len], n: vec![0.0; len], t: 0.0 }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn mass(&self) -> MassSample {
        let vv = self.geometry.voxel_volume();
        MassSample {
            t: self.t,
            mass_p: self.p.iter().sum::<f64>() * vv,
            mass_i: self.i.iter().sum::<f64>() * vv,
            mass_n: self.n.iter().sum::<f64>() * vv,
            mass_clipped: 0.0,
        }
    }

    fn to_volume(&self, field: &[f64]) -> ScalarVolume {
        ScalarVolume::from_raw(self.geometry, field.iter().map(|&v| v as f32).collect())
    }

    /// Single-precision copies of `(p, i, n)` for output.
    pub fn to_volumes(&self) -> [ScalarVolume; 3] {
        [self.to_volume(&self.p), self.to_volume(&self.i), self.to_volume(&self.n)]
    }

    /// Largest violation of `0 <= p, i, n` and `p + i + n <= 1` (0 when valid).
    pub fn bound_violation(&self) -> f64 {
        let mut worst = 0f64;
        for k in 0..self.p.len() {
            let (p, i, n) = (self.p[k], self.i[k], self.n[k]);
            worst = worst.max(-p).max(-i).max(-n).max(p + i + n - 1.0);
        }
        worst
    }
}

/// Gaussian initial condition for the proliferative species.
pub fn seed_tumor(geometry: &GridGeometry, params: &GrowthParams) -> Result<SpeciesState, GrowthError> {
    let dims = geometry.dims();
    let c = params.seed_center;
    if (0..3).any(|a| !(c[a] >= 0.0 && c[a] <= (dims[a] - 1) as f64)) {
        return Err(GrowthError::SeedOutsideGrid { center: c, dims });
    }
    let sp = geometry.spacing_f64();
    let two_s2 = 2.0 * params.seed_sigma * params.seed_sigma;
    let mut state = SpeciesState::zeros(*geometry);
    if params.seed_amplitude == 0.0 {
        return Ok(state);
    }
    let mut idx = 0;
    for z in 0..dims[2] {
        let dz = (z as f64 - c[2]) * sp[2];
        for y in 0..dims[1] {
            let dy = (y as f64 - c[1]) * sp[1];
            for x in 0..dims[0] {
                let dx = (x as f64 - c[0]) * sp[0];
                let v = params.seed_amplitude * (-(dx * dx + dy * dy + dz * dz) / two_s2).exp();
                state.p[idx] = if v < 1e-6 { 0.0 } else { v };
                idx += 1;
            }
        }
    }
    Ok(state)
}

/// Precomputed face conductances `D_face / h²` for one species.
struct FaceConductance {
    /// `faces[a][idx]` couples voxel `idx` with `idx + stride[a]`.
    faces: [Vec<f64>; 3],
}

impl FaceConductance {
    fn new(diff: &ScalarVolume) -> Self {
        let g = diff.geometry();
        let dims = g.dims();
        let sp = g.spacing_f64();
        let strides = [1, dims[0], dims[0] * dims[1]];
        let d = diff.values();
        let faces = [0, 1, 2].map(|a| {
            let inv_h2 = 1.0 / (sp[a] * sp[a]);
            let mut f = vec![0f64; d.len()];
            if dims[a] > 1 {
                for (idx, fv) in f.iter_mut().enumerate() {
                    let pos = (idx / strides[a]) % dims[a];
                    if pos + 1 < dims[a] {
                        let (da, db) = (f64::from(d[idx]), f64::from(d[idx + strides[a]]));
                        if da > 0.0 && db > 0.0 {
                            *fv = 2.0 * da * db / (da + db) * inv_h2;
                        }
                    }
                }
            }
            f
        });
        Self { faces }
    }
}

/// Stable explicit diffusion step size for the given maximum diffusivity.
fn diffusion_dt_limit(geometry: &GridGeometry, d_max: f64, cfl_safety: f64) -> f64 {
    if d_max <= 0.0 {
        return f64::INFINITY;
    }
    let h_min = geometry.spacing_f64().into_iter().fold(f64::INFINITY, f64::min);
    cfl_safety * h_min * h_min / (6.0 * d_max)
}

fn diffuse(field: &mut Vec<f64>, scratch: &mut Vec<f64>, cond: &FaceConductance, dims: [usize; 3], dt: f64) {
    let strides = [1, dims[0], dims[0] * dims[1]];
    scratch.clear();
    scratch.extend_from_slice(field);
    let s = &*field;
    for (idx, out) in scratch.iter_mut().enumerate() {
        let here = s[idx];
        let mut flux = 0.0;
        for a in 0..3 {
            let st = strides[a];
            let f_plus = cond.faces[a][idx];
            if f_plus > 0.0 {
                flux += f_plus * (s[idx + st] - here);
            }
            if idx >= st {
                let f_minus = cond.faces[a][idx - st];
                if f_minus > 0.0 {
                    flux -= f_minus * (here - s[idx - st]);
                }
            }
        }
        *out = here + dt * flux;
    }
    std::mem::swap(field, scratch);
}

/// Returns the mass fraction removed by the saturation clip (summed over
/// voxels, before multiplying by voxel volume).
fn react(state: &mut SpeciesState, growth_scale: &[f32], params: &GrowthParams, dt: f64) -> f64 {
    let mut clipped = 0.0;
    for k in 0..state.p.len() {
        let (p, i, n) = (state.p[k], state.i[k], state.n[k]);
        if p == 0.0 && i == 0.0 {
            continue;
        }
        let c = p + i + n;
        let g = f64::from(growth_scale[k]);
        let room = (1.0 - c).max(0.0);
        let h = 0.5 * (1.0 + ((c - params.c_h) / params.sigma_h).tanh());
        let dp = params.rho_p * g * p * room - params.alpha_pi * p + params.beta_ip * i - params.gamma * h * p;
        let di = params.rho_i * g * i * room + params.alpha_pi * p - params.beta_ip * i - params.gamma * h * i;
        let dn = params.gamma * h * (p + i);
        let (p, i, n) = (p + dt * dp, i + dt * di, n + dt * dn);
        let raw = p + i + n;
        let (mut p, mut i, n) = (p.max(0.0), i.max(0.0), n.clamp(0.0, 1.0));
        // over-full voxels shed mobile cells only, so necrosis never shrinks
        if p + i + n > 1.0 {
            let scale = (1.0 - n) / (p + i);
            p *= scale;
            i *= scale;
        }
        clipped += raw - (p + i + n);
        state.p[k] = p;
        state.i[k] = i;
        state.n[k] = n;
    }
    clipped
}

/// Advances the state by `dt` days. Diffusion and reaction are each
/// sub-stepped internally when `dt` exceeds their stability limits.
pub fn step(
    state: &SpeciesState,
    coeffs: &TissueCoefficients,
    params: &GrowthParams,
    dt: f64,
) -> Result<SpeciesState, GrowthError> {
    let mut next = state.clone();
    let mut stepper = Stepper::new(coeffs, params)?;
    stepper.advance(&mut next, dt)?;
    Ok(next)
}

/// Reusable step machinery; avoids recomputing face conductances every step.
struct Stepper<'a> {
    params: &'a GrowthParams,
    growth_scale: &'a [f32],
    cond_p: FaceConductance,
    cond_i: FaceConductance,
    dims: [usize; 3],
    d_max: f64,
    diff_limit: f64,
    scratch: Vec<f64>,
    /// Voxel-summed clip losses, not yet scaled by voxel volume.
    clipped: f64,
}

impl<'a> Stepper<'a> {
    fn new(coeffs: &'a TissueCoefficients, params: &'a GrowthParams) -> Result<Self, GrowthError> {
        let geometry = coeffs.geometry();
        let d_max = coeffs.max_diffusivity();
        Ok(Self {
            params,
            growth_scale: coeffs.growth_scale.values(),
            cond_p: FaceConductance::new(&coeffs.diff_p),
            cond_i: FaceConductance::new(&coeffs.diff_i),
            dims: geometry.dims(),
            d_max,
            diff_limit: diffusion_dt_limit(geometry, d_max, params.cfl_safety),
            scratch: Vec::with_capacity(geometry.len()),
            clipped: 0.0,
        })
    }

    fn advance(&mut self, state: &mut SpeciesState, dt: f64) -> Result<(), GrowthError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(GrowthError::InvalidParams(format!("dt = {dt} must be positive")));
        }
        if self.d_max > 0.0 {
            let subs = (dt / self.diff_limit).ceil().max(1.0) as usize;
            let h = dt / subs as f64;
            for _ in 0..subs {
                diffuse(&mut state.p, &mut self.scratch, &self.cond_p, self.dims, h);
                diffuse(&mut state.i, &mut self.scratch, &self.cond_i, self.dims, h);
            }
        }
        let subs = (dt / self.params.reaction_dt_limit()).ceil().max(1.0) as usize;
        let h = dt / subs as f64;
        for _ in 0..subs {
            self.clipped += react(state, self.growth_scale, self.params, h);
        }
        state.t += dt;
        let bad = state
            .p
            .iter()
            .chain(&state.i)
            .chain(&state.n)
            .position(|v| !v.is_finite());
        if let Some(pos) = bad {
            return Err(GrowthError::Unstable { voxel: pos % state.p.len(), dt, d_max: self.d_max });
        }
        Ok(())
    }
}

/// Maps species concentrations to BraTS tumor labels; the first matching
/// rule wins: necrotic (1), then enhancing (4), then edema (2).
pub fn species_to_labels(state: &SpeciesState, params: &GrowthParams) -> LabelVolume {
    let labels_out = (0..state.p.len())
        .map(|k| {
            if state.n[k] >= params.tau_n {
                labels::NECROTIC
            } else if state.p[k] >= params.tau_p {
                labels::ENHANCING
            } else if state.i[k] >= params.tau_i {
                labels::EDEMA
            } else {
                labels::BACKGROUND
            }
        })
        .collect();
    LabelVolume::from_raw(state.geometry, labels_out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthResult {
    pub final_state: SpeciesState,
    pub tumor_labels: LabelVolume,
    pub mass_series: Vec<MassSample>,
    /// Uniform step used for the run.
    pub dt: f64,
    pub steps: usize,
}

/// Time step chosen by [`simulate`]: the tighter of the diffusion and
/// reaction limits, capped at one day, shrunk so `t_final` is hit exactly.
pub fn choose_dt(coeffs: &TissueCoefficients, params: &GrowthParams) -> (f64, usize) {
    let limit = diffusion_dt_limit(coeffs.geometry(), coeffs.max_diffusivity(), params.cfl_safety)
        .min(params.reaction_dt_limit())
        .min(1.0);
    let steps = (params.t_final / limit).ceil().max(1.0) as usize;
    (params.t_final / steps as f64, steps)
}

/// Grows a tumor from the seed to `t_final` on the given tissue labels.
///
/// The seed is restricted to voxels where tumor cells may grow, so
/// background and CSF never carry tumor.
pub fn simulate(seg: &LabelVolume, params: &GrowthParams) -> Result<GrowthResult, GrowthError> {
    params.validate()?;
    let geometry = *seg.geometry();
    let coeffs = derive_tissue_coefficients(seg, params);
    let mut state = seed_tumor(&geometry, params)?;
    let c = params.seed_center;
    let nearest = geometry.index(c[0].round() as usize, c[1].round() as usize, c[2].round() as usize);
    if coeffs.diff_p.values()[nearest] == 0.0 {
        return Err(GrowthError::SeedInInertTissue { center: c, label: seg.labels()[nearest] });
    }
    for (k, &g) in coeffs.growth_scale.values().iter().enumerate() {
        if g == 0.0 {
            state.p[k] = 0.0;
        }
    }

    let (dt, steps) = choose_dt(&coeffs, params);
    let mut stepper = Stepper::new(&coeffs, params)?;
    let vv = geometry.voxel_volume();
    let mut series = vec![state.mass()];
    for s in 1..=steps {
        stepper.advance(&mut state, dt)?;
        if s == steps {
            // land exactly on t_final regardless of accumulated roundoff
            state.t = params.t_final;
        }
        if s % params.record_interval == 0 || s == steps {
            series.push(MassSample { mass_clipped: stepper.clipped * vv, ..state.mass() });
        }
    }
    let tumor_labels = species_to_labels(&state, params);
    Ok(GrowthResult { final_state: state, tumor_labels, mass_series: series, dt, steps })
}
