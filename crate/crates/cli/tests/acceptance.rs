//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Every checked quantity is recomputed here from the raw arrays (analytic
//! heat kernel, hand-written Jacobian and trilinear sampling, histogram
//! Wasserstein distance, hand-counted votes and overlaps) rather than read
//! back from the library's own reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use biosynth::adapt::{adapt, build_reference};
use biosynth::growth::{choose_dt, derive_tissue_coefficients, seed_tumor, simulate, step, GrowthParams, SpeciesState};
use biosynth::metrics::{dice, RegionSpec};
use biosynth::phantom::{self, demo_growth_ranges, reference_model, synthetic_model, tumor_ball, Anatomy};
use biosynth::pipeline::{sample_growth_params, sample_seed_center};
use biosynth::registration::{
    enrich_case, exponentiate, fuse_labels, fuse_labels_within, register, RegistrationParams, VectorField,
};
use biosynth::synth::{synthesize, SynthParams};
use biosynth::{labels, nifti, GridGeometry, LabelVolume, Mask, Modality, MultimodalCase, ScalarVolume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const HEAT_REL_L2: f64 = 0.02;
const HEAT_RUNTIME: Duration = Duration::from_secs(60);
const CONSERVATION_REL_PER_STEP: f64 = 1e-9;
const CONSERVATION_STEPS: usize = 100;
const BOUND_SLACK: f64 = 1e-6;
const BOUND_DRAWS: u64 = 50;
const REGISTRATION_PAIRS: u64 = 20;
const ROUND_TRIP_MEDIAN: f64 = 0.1;
const RECOVERY_RATIO: f64 = 0.25;
const SELF_MAX_DISPLACEMENT: f64 = 0.05;
const TRUE_WARP_MAX: f64 = 3.0;
const W1_RATIO: f64 = 0.1;
const DICE_TOL: f64 = 1e-9;
const E2E_RUNTIME: Duration = Duration::from_secs(15 * 60);
const GRID: usize = 64;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- oracles

fn heat_kernel(amp: f64, sigma0: f64, d: f64, t: f64, r2: f64) -> f64 {
    let var0 = sigma0 * sigma0;
    let var = var0 + 2.0 * d * t;
    amp * (var0 / var).powf(1.5) * (-r2 / (2.0 * var)).exp()
}

fn total_mass(s: &SpeciesState) -> f64 {
    s.p.iter().chain(&s.i).chain(&s.n).sum()
}

/// Trilinear sample of one component with edge clamping.
fn trilinear(values: &[f32], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0f64; 3];
    for a in 0..3 {
        let q = p[a].clamp(0.0, (dims[a] - 1) as f64);
        lo[a] = q.floor() as usize;
        hi[a] = (lo[a] + 1).min(dims[a] - 1);
        t[a] = q - lo[a] as f64;
    }
    let at = |x: usize, y: usize, z: usize| f64::from(values[x + dims[0] * (y + dims[1] * z)]);
    let mut acc = 0.0;
    for (cz, wz) in [(lo[2], 1.0 - t[2]), (hi[2], t[2])] {
        for (cy, wy) in [(lo[1], 1.0 - t[1]), (hi[1], t[1])] {
            for (cx, wx) in [(lo[0], 1.0 - t[0]), (hi[0], t[0])] {
                acc += wx * wy * wz * at(cx, cy, cz);
            }
        }
    }
    acc
}

fn displacement_at(d: &VectorField, p: [f64; 3]) -> [f64; 3] {
    let dims = d.geometry().dims();
    [0, 1, 2].map(|a| trilinear(d.component(a), dims, p))
}

/// `out(x) = in(x + d(x))`.
fn warp_oracle(img: &ScalarVolume, d: &VectorField) -> ScalarVolume {
    let g = *img.geometry();
    let dims = g.dims();
    let v = (0..g.len())
        .map(|k| {
            let c = g.coords(k).map(|x| x as f64);
            let u = [0, 1, 2].map(|a| f64::from(d.component(a)[k]));
            trilinear(img.values(), dims, [c[0] + u[0], c[1] + u[1], c[2] + u[2]]) as f32
        })
        .collect();
    ScalarVolume::new(g, v).unwrap()
}

/// Smallest `det(I + ∇d)` over interior voxels, central differences.
fn min_jacobian_oracle(d: &VectorField) -> f64 {
    let g = *d.geometry();
    let [nx, ny, nz] = g.dims();
    let stride = [1, nx, nx * ny];
    let mut worst = f64::INFINITY;
    for z in 1..nz - 1 {
        for y in 1..ny - 1 {
            for x in 1..nx - 1 {
                let k = g.index(x, y, z);
                let mut j = [[0f64; 3]; 3];
                for (a, row) in j.iter_mut().enumerate() {
                    let c = d.component(a);
                    for (b, cell) in row.iter_mut().enumerate() {
                        let deriv = (f64::from(c[k + stride[b]]) - f64::from(c[k - stride[b]])) / 2.0;
                        *cell = deriv + if a == b { 1.0 } else { 0.0 };
                    }
                }
                let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                worst = worst.min(det);
            }
        }
    }
    worst
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Median of |x + b(x) + f(x + b(x)) − x| for forward `f` and backward `b`.
fn round_trip_median(f: &VectorField, b: &VectorField) -> f64 {
    let g = *f.geometry();
    median(
        (0..g.len())
            .map(|k| {
                let c = g.coords(k).map(|x| x as f64);
                let ub = [0, 1, 2].map(|a| f64::from(b.component(a)[k]));
                let uf = displacement_at(f, [c[0] + ub[0], c[1] + ub[1], c[2] + ub[2]]);
                (0..3).map(|a| (ub[a] + uf[a]).powi(2)).sum::<f64>().sqrt()
            })
            .collect(),
    )
}

fn max_norm(d: &VectorField) -> f64 {
    (0..d.geometry().len())
        .map(|k| (0..3).map(|a| f64::from(d.component(a)[k]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// MSE over voxels where either image is nonzero, in raw intensities.
fn raw_mse(a: &ScalarVolume, b: &ScalarVolume) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        if x != 0.0 || y != 0.0 {
            sum += f64::from(x - y).powi(2);
            n += 1;
        }
    }
    sum / n as f64
}

/// W1 between two samples on a shared 256-bin grid.
fn w1_oracle(a: &[f64], b: &[f64]) -> f64 {
    let bins = 256;
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let hist = |v: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in v {
            h[(((x - lo) / width) as usize).min(bins - 1)] += 1.0 / v.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    let (mut ca, mut cb, mut w) = (0.0, 0.0, 0.0);
    for k in 0..bins {
        ca += ha[k];
        cb += hb[k];
        w += (ca - cb).abs() * width;
    }
    w
}

// ---------------------------------------------------------------- criteria

fn heat_kernel_criterion() -> Outcome {
    let t0 = Instant::now();
    let c = (GRID / 2) as f64;
    let seg = LabelVolume::from_fn(GridGeometry::cube(GRID), |_, _, _| labels::WHITE).unwrap();
    let params = GrowthParams {
        d_w: 1.0,
        kappa_i: 1.0,
        rho_p: 0.0,
        rho_i: 0.0,
        alpha_pi: 0.0,
        beta_ip: 0.0,
        gamma: 0.0,
        seed_center: [c; 3],
        seed_sigma: 3.0,
        seed_amplitude: 0.8,
        t_final: 5.0,
        ..GrowthParams::default()
    };
    let res = simulate(&seg, &params).unwrap();
    let elapsed = t0.elapsed();
    let g = seg.geometry();
    let (mut err2, mut ref2) = (0.0, 0.0);
    for (k, &num) in res.final_state.p.iter().enumerate() {
        let r2 = g.coords(k).iter().map(|&x| (x as f64 - c).powi(2)).sum();
        let exact = heat_kernel(0.8, 3.0, 1.0, 5.0, r2);
        err2 += (num - exact).powi(2);
        ref2 += exact * exact;
    }
    let rel = (err2 / ref2).sqrt();
    outcome(
        rel < HEAT_REL_L2 && elapsed < HEAT_RUNTIME,
        format!("relative L2 {rel:.4} (< {HEAT_REL_L2}), {:.1} s (< {} s)", elapsed.as_secs_f64(), HEAT_RUNTIME.as_secs()),
    )
}

fn conservation_criterion() -> Outcome {
    let n = 32;
    let seg = Anatomy::standard(n).labels(GridGeometry::cube(n));
    let c = (n / 2) as f64;
    let params = GrowthParams {
        rho_p: 0.0,
        rho_i: 0.0,
        alpha_pi: 0.0,
        beta_ip: 0.0,
        gamma: 0.0,
        seed_center: [c + 4.0, c, c],
        seed_sigma: 4.0,
        seed_amplitude: 0.5,
        ..GrowthParams::default()
    };
    let coeffs = derive_tissue_coefficients(&seg, &params);
    let mut state = seed_tumor(seg.geometry(), &params).unwrap();
    let (dt, _) = choose_dt(&coeffs, &params);
    let mut worst: f64 = 0.0;
    for _ in 0..CONSERVATION_STEPS {
        let before = total_mass(&state);
        state = step(&state, &coeffs, &params, dt).unwrap();
        worst = worst.max((total_mass(&state) - before).abs() / before);
    }
    outcome(worst < CONSERVATION_REL_PER_STEP, format!("worst relative change per step {worst:.2e} over {CONSERVATION_STEPS} steps"))
}

fn bounds_criterion() -> Outcome {
    let n = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let ranges = demo_growth_ranges();
    let mut worst_bound: f64 = 0.0;
    let mut necrosis_drops = 0usize;
    let mut steps_total = 0usize;
    for draw in 0..BOUND_DRAWS {
        let seg = phantom::atlas(draw, draw as usize, n, 5.0).labels;
        let mut params = sample_growth_params(&GrowthParams::default(), &ranges, &mut rng).unwrap();
        params.seed_center = sample_seed_center(&seg, &mut rng).unwrap();
        let coeffs = derive_tissue_coefficients(&seg, &params);
        let mut state = seed_tumor(seg.geometry(), &params).unwrap();
        let (dt, steps) = choose_dt(&coeffs, &params);
        worst_bound = worst_bound.max(violation(&state));
        for _ in 0..steps {
            let next = step(&state, &coeffs, &params, dt).unwrap();
            worst_bound = worst_bound.max(violation(&next));
            necrosis_drops += next.n.iter().zip(&state.n).filter(|(a, b)| a < b).count();
            state = next;
        }
        steps_total += steps;
    }
    outcome(
        worst_bound <= BOUND_SLACK && necrosis_drops == 0,
        format!(
            "{BOUND_DRAWS} draws, {steps_total} steps: worst bound excess {worst_bound:.2e}, necrotic decreases {necrosis_drops}"
        ),
    )
}

/// Amount by which any voxel leaves `0 <= p, i, n` and `p + i + n <= 1`.
fn violation(s: &SpeciesState) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..s.p.len() {
        let (p, i, n) = (s.p[k], s.i[k], s.n[k]);
        worst = worst.max(-p).max(-i).max(-n).max(p + i + n - 1.0);
    }
    worst
}

struct RegistrationRun {
    min_jacobian: f64,
    round_trip: f64,
    ratio: Option<f64>,
}

fn registration_runs() -> (Vec<RegistrationRun>, f64) {
    let params = RegistrationParams::default();
    let mut runs = Vec::new();
    for pair in 0..REGISTRATION_PAIRS {
        let (fixed, moving, ratio_wanted) = if pair % 2 == 0 {
            // a phantom against a known smooth warp of itself
            let atlas = phantom::atlas(100 + pair, pair as usize, GRID, 2.5);
            let truth = phantom::smooth_velocity(*atlas.t1.geometry(), TRUE_WARP_MAX, 6.0, 500 + pair);
            let phi = exponentiate(&truth).unwrap();
            let moving = warp_oracle(&atlas.t1, &phi.displacement);
            (atlas.t1, moving, true)
        } else {
            // two different phantom anatomies
            let a = phantom::atlas(200 + pair, 0, GRID, 2.5);
            let b = phantom::atlas(200 + pair, 1, GRID, 2.5);
            (a.t1, b.t1, false)
        };
        let g = *fixed.geometry();
        let res = register(&fixed, &moving, &Mask::empty(g), &params).unwrap();
        let fwd = exponentiate(&res.velocity).unwrap();
        let back = exponentiate(&res.velocity.negated()).unwrap();
        let ratio = ratio_wanted.then(|| {
            let warped = warp_oracle(&moving, &fwd.displacement);
            raw_mse(&fixed, &warped) / raw_mse(&fixed, &moving)
        });
        runs.push(RegistrationRun {
            min_jacobian: min_jacobian_oracle(&fwd.displacement),
            round_trip: round_trip_median(&fwd.displacement, &back.displacement),
            ratio,
        });
    }
    let atlas = phantom::atlas(7, 3, GRID, 2.5);
    let res = register(&atlas.t1, &atlas.t1, &Mask::empty(*atlas.t1.geometry()), &params).unwrap();
    let self_max = max_norm(&exponentiate(&res.velocity).unwrap().displacement);
    (runs, self_max)
}

fn diffeomorphy_criterion(runs: &[RegistrationRun]) -> Outcome {
    let jac = runs.iter().map(|r| r.min_jacobian).fold(f64::INFINITY, f64::min);
    let rt = runs.iter().map(|r| r.round_trip).fold(0.0, f64::max);
    outcome(
        runs.len() as u64 >= REGISTRATION_PAIRS && jac > 0.0 && rt < ROUND_TRIP_MEDIAN,
        format!("{} pairs at {GRID}^3: smallest min Jacobian {jac:.3}, largest round-trip median {rt:.4} voxel", runs.len()),
    )
}

fn recovery_criterion(runs: &[RegistrationRun], self_max: f64) -> Outcome {
    let ratios: Vec<f64> = runs.iter().filter_map(|r| r.ratio).collect();
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    outcome(
        !ratios.is_empty() && worst < RECOVERY_RATIO && self_max < SELF_MAX_DISPLACEMENT,
        format!("{} warped pairs: worst final/initial MSE {worst:.4}; self-registration max displacement {self_max:.2e} voxel", ratios.len()),
    )
}

fn fusion_criterion() -> Outcome {
    // one voxel per hand case: (atlas labels, similarities, expected, expected inside brain)
    let cases: [([u8; 3], [f64; 3], u8, u8); 7] = [
        ([6, 6, 7], [0.5, 0.4, 0.01], 6, 6),
        ([7, 7, 7], [0.1, 0.2, 0.3], 7, 7),
        ([5, 6, 7], [0.3, 0.1, 0.2], 6, 6),
        ([5, 6, 7], [0.3, 0.2, 0.1], 7, 7),
        ([8, 5, 6], [0.2, 0.2, 0.2], 5, 5),
        ([0, 0, 6], [0.1, 0.2, 0.3], 0, 6),
        ([0, 5, 8], [0.05, 0.2, 0.1], 0, 8),
    ];
    let g = GridGeometry::new([cases.len(), 1, 1], [1.0; 3], [0.0; 3]).unwrap();
    let maps: Vec<LabelVolume> =
        (0..3).map(|a| LabelVolume::new(g, cases.iter().map(|c| c.0[a]).collect()).unwrap()).collect();
    let mut mismatches = Vec::new();
    for (k, c) in cases.iter().enumerate() {
        // similarities differ per voxel, so each case is fused on its own
        let single: Vec<LabelVolume> = maps
            .iter()
            .map(|m| LabelVolume::new(GridGeometry::cube(1), vec![m.labels()[k]]).unwrap())
            .collect();
        let got = fuse_labels(&single, &c.1).unwrap().labels()[0];
        let got_in = fuse_labels_within(&single, &c.1, &Mask::full(GridGeometry::cube(1))).unwrap().labels()[0];
        if got != c.2 || got_in != c.3 {
            mismatches.push(format!("{:?}/{:?}: {got},{got_in} vs {},{}", c.0, c.1, c.2, c.3));
        }
    }

    // enrichment of a tumor-only case
    let n = 32;
    let fixed = phantom::atlas(31, 0, n, 5.0);
    let c = (n as f64 - 1.0) / 2.0;
    let with_tumor = tumor_ball(&fixed.labels, [c + 3.0, c + 1.0, c], 4.5);
    let tumor_seg = biosynth::metrics::tumor_only(&with_tumor);
    let zero = ScalarVolume::zeros(*fixed.t1.geometry());
    let case = MultimodalCase::new("t", [fixed.t1.clone(), zero.clone(), zero.clone(), zero], tumor_seg.clone()).unwrap();
    let atlases: Vec<_> = (1..4).map(|i| phantom::atlas(31, i, n, 5.0)).collect();
    let out = enrich_case(&case, &atlases, &RegistrationParams::default()).unwrap();
    let tumor_voxels = tumor_seg.labels().iter().filter(|&&l| labels::is_tumor(l)).count();
    let changed = tumor_seg
        .labels()
        .iter()
        .zip(out.labels.labels())
        .filter(|(&a, &b)| labels::is_tumor(a) && a != b)
        .count();
    let invaded = tumor_seg
        .labels()
        .iter()
        .zip(out.labels.labels())
        .filter(|(&a, &b)| !labels::is_tumor(a) && labels::is_tumor(b))
        .count();
    outcome(
        mismatches.is_empty() && tumor_voxels > 0 && changed == 0 && invaded == 0,
        format!(
            "{} vote cases, mismatches {:?}; enrich with 3 atlases: {tumor_voxels} tumor voxels, {changed} changed, {invaded} added",
            cases.len(),
            mismatches
        ),
    )
}

fn adaptation_criterion() -> Outcome {
    let atlas = phantom::atlas(41, 0, GRID, 2.5);
    let c = (GRID as f64 - 1.0) / 2.0;
    let seg = tumor_ball(&atlas.labels, [c + 5.0, c, c - 3.0], 6.0);
    let case = synthesize(&seg, None, &synthetic_model(), &SynthParams { rng_seed: 41, ..SynthParams::default() }).unwrap();
    let ref_atlas = phantom::atlas(42, 1, GRID, 2.5);
    let ref_seg = tumor_ball(&ref_atlas.labels, [c - 4.0, c + 2.0, c], 5.0);
    let real = synthesize(&ref_seg, None, &reference_model(), &SynthParams { rng_seed: 42, ..SynthParams::default() }).unwrap();
    let reference = build_reference(std::slice::from_ref(&real)).unwrap();
    let (out, _) = adapt(&case, &reference).unwrap();
    let mask = case.brain_mask();
    let mut lines = Vec::new();
    let mut pass = true;
    for m in Modality::ALL {
        let pick = |v: &ScalarVolume| -> Vec<f64> {
            v.values().iter().zip(mask.bits()).filter(|(_, &b)| b).map(|(&x, _)| f64::from(x)).collect()
        };
        let before = pick(case.modality(m));
        let after = pick(out.modality(m));
        let table = reference.table(m);
        let disjoint = before.iter().copied().fold(f64::NEG_INFINITY, f64::max) < table[0];
        let (w_before, w_after) = (w1_oracle(&before, table), w1_oracle(&after, table));
        let mut order: Vec<usize> = (0..before.len()).collect();
        order.sort_by(|&a, &b| before[a].total_cmp(&before[b]));
        let rank_ok = order.windows(2).all(|w| {
            let (a, b) = (w[0], w[1]);
            after[a] <= after[b] && (before[a] != before[b] || after[a] == after[b])
        });
        let background_ok = case
            .modality(m)
            .values()
            .iter()
            .zip(out.modality(m).values())
            .zip(mask.bits())
            .all(|((x, y), &b)| b || x.to_bits() == y.to_bits());
        pass &= disjoint && w_after <= W1_RATIO * w_before && rank_ok && background_ok;
        lines.push(format!("{m} W1 {w_before:.1}->{w_after:.2} rank {rank_ok} disjoint {disjoint}"));
    }
    outcome(pass, lines.join("; "))
}

fn dice_criterion() -> Outcome {
    let line = |v: &[u8]| {
        let g = GridGeometry::new([v.len(), 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        LabelVolume::new(g, v.to_vec()).unwrap()
    };
    let truth = line(&[4, 4, 0, 0, 0, 0]);
    let checks = [
        (dice(&truth, &truth, RegionSpec::Et).unwrap(), 1.0),
        (dice(&line(&[0, 0, 4, 4, 0, 0]), &truth, RegionSpec::Et).unwrap(), 0.0),
        // |A| = 4, |B| = 2, overlap 2: 2*2/6
        (dice(&line(&[4, 4, 4, 4, 0, 0]), &truth, RegionSpec::Et).unwrap(), 2.0 * 2.0 / 6.0),
        (dice(&line(&[0, 5, 6, 7, 8, 0]), &line(&[0, 0, 0, 0, 0, 0]), RegionSpec::Wt).unwrap(), 1.0),
        // WT counts 1, 2 and 4 together: pred {0,1,2}, truth {0,1,2,3}
        (dice(&line(&[1, 2, 4, 0, 0, 0]), &line(&[2, 2, 2, 1, 0, 0]), RegionSpec::Wt).unwrap(), 2.0 * 3.0 / 7.0),
    ];
    let worst = checks.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max);
    outcome(
        worst <= DICE_TOL,
        format!("{} hand cases (1.0, 0.0, 0.6667, empty 1.0, WT 0.8571), worst error {worst:.1e}", checks.len()),
    )
}

fn max_min_ratio(counts: &BTreeMap<&str, usize>) -> f64 {
    let present: Vec<usize> = counts.values().copied().filter(|&c| c > 0).collect();
    *present.iter().max().unwrap() as f64 / *present.iter().min().unwrap() as f64
}

fn imbalance_criterion(dataset: &Path) -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut seen = 0;
    let mut dirs: Vec<PathBuf> = fs::read_dir(dataset).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    for dir in dirs {
        let seg = nifti::read_labels(dir.join("seg.nii")).unwrap();
        let names = ["1", "2", "4", "5", "6", "7", "8"];
        let mut extended: BTreeMap<&str, usize> = BTreeMap::new();
        let mut tumor: BTreeMap<&str, usize> = BTreeMap::new();
        for &l in seg.labels() {
            if l == 0 {
                continue;
            }
            let name = names[[1, 2, 4, 5, 6, 7, 8].iter().position(|&x| x == l).unwrap()];
            *extended.entry(name).or_default() += 1;
            // over the same brain voxels, healthy tissue is unlabeled in the tumor-only map
            let key = if labels::is_tumor(l) { name } else { "unlabeled" };
            *tumor.entry(key).or_default() += 1;
        }
        let (e, t) = (max_min_ratio(&extended), max_min_ratio(&tumor));
        pass &= e < t;
        seen += 1;
        lines.push(format!("{}: extended {e:.1} < tumor-only {t:.1}", dir.file_name().unwrap().to_string_lossy()));
    }
    outcome(pass && seen > 0, lines.join("; "))
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_biosynth")).args(args).output().unwrap()
}

fn end_to_end(work: &Path) -> (Outcome, PathBuf) {
    let t0 = Instant::now();
    let kit = work.join("kit");
    let s = |p: &Path| p.display().to_string();
    let made = cli(&["phantom", "--output", &s(&kit), "--size", &GRID.to_string()]);
    assert!(made.status.success(), "{}", String::from_utf8_lossy(&made.stderr));
    let config = s(&kit.join("config.json"));
    let (a, b) = (work.join("a"), work.join("b"));
    let mut statuses = Vec::new();
    for out in [&a, &b] {
        let r = cli(&["generate", "--config", &config, "--count", "2", "--seed", "7", "--output", &s(out)]);
        if !r.status.success() {
            eprintln!("{}", String::from_utf8_lossy(&r.stderr));
        }
        statuses.push(r.status.success());
    }
    let identical = statuses.iter().all(|&x| x) && tree(&a) == tree(&b);
    let files = if identical { tree(&a).len() } else { 0 };
    let valid = cli(&["validate", &s(&a)]).status.success();
    let elapsed = t0.elapsed();
    (
        outcome(
            identical && valid && elapsed < E2E_RUNTIME,
            format!(
                "two runs of generate --count 2 --seed 7 at {GRID}^3: identical {identical} ({files} files), validate {valid}, {:.1} s",
                elapsed.as_secs_f64()
            ),
        ),
        a,
    )
}

fn main() {
    // cargo passes harness flags such as --nocapture or a name filter
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if filter.iter().any(|f| !"acceptance".contains(f.as_str())) {
        return;
    }
    let work = tempfile::tempdir().unwrap();
    let (e2e, dataset) = end_to_end(work.path());
    let (runs, self_max) = registration_runs();

    let results = [
        ("heat-kernel", heat_kernel_criterion()),
        ("conservation", conservation_criterion()),
        ("species-bounds", bounds_criterion()),
        ("diffeomorphy", diffeomorphy_criterion(&runs)),
        ("registration-recovery", recovery_criterion(&runs, self_max)),
        ("label-fusion", fusion_criterion()),
        ("adaptation", adaptation_criterion()),
        ("dice", dice_criterion()),
        ("imbalance", imbalance_criterion(&dataset)),
        ("end-to-end", e2e),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
