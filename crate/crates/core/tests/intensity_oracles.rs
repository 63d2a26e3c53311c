use std::collections::BTreeMap;

use biosynth::adapt::{adapt, build_reference, wasserstein1, Histogram, QUANTILES};
use biosynth::phantom::{self, reference_model, synthetic_model, tumor_ball};
use biosynth::synth::{estimate_intensity_model, synthesize, SynthParams};
use biosynth::{labels, GridGeometry, LabelVolume, Modality, MultimodalCase, ScalarVolume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn line_geometry(n: usize) -> GridGeometry {
    GridGeometry::new([n, 1, 1], [1.0; 3], [0.0; 3]).unwrap()
}

#[test]
fn estimated_means_match_generating_normals() {
    let per_class = 100_000;
    let n = per_class * labels::FOREGROUND.len();
    let g = line_geometry(n);
    let seg = LabelVolume::from_fn(g, |x, _, _| labels::FOREGROUND[x / per_class]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth = |l: u8, m: Modality| (100.0 * f64::from(l) + 7.0 * m as u8 as f64, 5.0 + f64::from(l));
    let vols = Modality::ALL.map(|m| {
        let v: Vec<f32> = seg
            .labels()
            .iter()
            .map(|&l| {
                let (mu, sd) = truth(l, m);
                Normal::new(mu, sd).unwrap().sample(&mut rng) as f32
            })
            .collect();
        ScalarVolume::new(g, v).unwrap()
    });
    let case = MultimodalCase::new("n", vols, seg).unwrap();
    let model = estimate_intensity_model(&[case]).unwrap();
    for l in labels::FOREGROUND {
        for m in Modality::ALL {
            let (mu, sd) = truth(l, m);
            let s = model.get(l, m).unwrap();
            assert!((s.mean - mu).abs() < 3.0 * sd / (per_class as f64).sqrt(), "{l}/{m}: {} vs {mu}", s.mean);
            assert!((s.std - sd).abs() < 0.05 * sd);
        }
    }
}

fn case_with(values: Vec<f32>) -> MultimodalCase {
    let g = line_geometry(values.len());
    let seg = LabelVolume::from_fn(g, |_, _, _| labels::WHITE).unwrap();
    let v = ScalarVolume::new(g, values).unwrap();
    MultimodalCase::new("u", [v.clone(), v.clone(), v.clone(), v], seg).unwrap()
}

#[test]
fn uniform_reference_quantiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let values: Vec<f32> = (0..1_000_000).map(|_| rng.random::<f32>()).collect();
    let reference = build_reference(&[case_with(values)]).unwrap();
    let table = reference.table(Modality::T2);
    assert_eq!(table.len(), QUANTILES);
    for (j, &v) in table.iter().enumerate() {
        let q = j as f64 / (QUANTILES - 1) as f64;
        assert!((v - q).abs() < 0.01, "quantile {q}: {v}");
    }
}

fn synthetic_case(seed: u64, n: usize) -> MultimodalCase {
    let atlas = phantom::atlas(seed, 0, n, 160.0 / n as f32);
    let c = (n as f64 - 1.0) / 2.0;
    let seg = tumor_ball(&atlas.labels, [c + 3.0, c, c - 2.0], n as f64 * 0.1);
    let params = SynthParams { rng_seed: seed, ..SynthParams::default() };
    synthesize(&seg, None, &synthetic_model(), &params).unwrap()
}

fn brain_range(case: &MultimodalCase, m: Modality) -> f64 {
    let mask = case.brain_mask();
    let v: Vec<f32> = case.modality(m).values().iter().zip(mask.bits()).filter(|(_, &b)| b).map(|(&x, _)| x).collect();
    let (lo, hi) = v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    f64::from(hi - lo)
}

fn max_change(a: &MultimodalCase, b: &MultimodalCase, m: Modality) -> f64 {
    a.modality(m).values().iter().zip(b.modality(m).values()).map(|(x, y)| f64::from((x - y).abs())).fold(0.0, f64::max)
}

#[test]
fn self_adaptation_is_near_identity_and_idempotent() {
    let case = synthetic_case(3, 32);
    let reference = build_reference(std::slice::from_ref(&case)).unwrap();
    let (same, _) = adapt(&case, &reference).unwrap();
    for m in Modality::ALL {
        let tol = brain_range(&case, m) / QUANTILES as f64;
        assert!(max_change(&case, &same, m) < tol, "{m}: {}", max_change(&case, &same, m));
    }
    // idempotence needs many voxels per quantile so that the sparse tails
    // stay within one quantization step
    let case = synthetic_case(3, 64);
    let target = build_reference(&[synthetic_case(4, 64)]).unwrap();
    let (once, _) = adapt(&case, &target).unwrap();
    let (twice, _) = adapt(&once, &target).unwrap();
    for m in Modality::ALL {
        let tol = brain_range(&once, m) / QUANTILES as f64;
        assert!(max_change(&once, &twice, m) < tol, "{m}: {}", max_change(&once, &twice, m));
    }
}

#[test]
fn disjoint_reference_is_matched() {
    let case = synthetic_case(8, 32);
    let atlas = phantom::atlas(99, 1, 32, 5.0);
    let seg = tumor_ball(&atlas.labels, [14.0, 16.0, 17.0], 3.0);
    let real = synthesize(&seg, None, &reference_model(), &SynthParams { rng_seed: 1, ..SynthParams::default() }).unwrap();
    let reference = build_reference(&[real]).unwrap();
    let (out, report) = adapt(&case, &reference).unwrap();
    let mask = case.brain_mask();
    for m in Modality::ALL {
        let r = &report.modalities[&m];
        assert!(r.wasserstein1_after <= 0.1 * r.wasserstein1_before, "{m}: {r:?}");
        let before = case.modality(m).values();
        let after = out.modality(m).values();
        let mut idx: Vec<usize> = (0..before.len()).filter(|&k| mask.get(k)).collect();
        idx.sort_by(|&a, &b| before[a].total_cmp(&before[b]));
        assert!(idx.windows(2).all(|w| after[w[0]] <= after[w[1]]));
        for k in 0..before.len() {
            if !mask.get(k) {
                assert_eq!(before[k].to_bits(), after[k].to_bits());
            }
        }
    }
}

fn histogram(counts: Vec<f64>) -> Histogram {
    let mut h = Histogram::new(-2.0, 3.0, counts.len()).unwrap();
    h.counts = counts;
    h
}

proptest! {
    #[test]
    fn wasserstein_is_a_metric(
        a in proptest::collection::vec(0.0f64..10.0, 16),
        b in proptest::collection::vec(0.0f64..10.0, 16),
        c in proptest::collection::vec(0.0f64..10.0, 16),
    ) {
        prop_assume!(a.iter().sum::<f64>() > 0.0 && b.iter().sum::<f64>() > 0.0 && c.iter().sum::<f64>() > 0.0);
        let (ha, hb, hc) = (histogram(a), histogram(b), histogram(c));
        let ab = wasserstein1(&ha, &hb).unwrap();
        let ba = wasserstein1(&hb, &ha).unwrap();
        let bc = wasserstein1(&hb, &hc).unwrap();
        let ac = wasserstein1(&ha, &hc).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!(ac <= ab + bc + 1e-9);
        prop_assert!(wasserstein1(&ha, &ha).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn reference_tables_are_monotone(values in proptest::collection::vec(-1e4f32..1e4, 2..300)) {
        let values: Vec<f32> = values.into_iter().map(|v| if v == 0.0 { 1.0 } else { v }).collect();
        let r = build_reference(&[case_with(values)]).unwrap();
        for m in Modality::ALL {
            prop_assert!(r.table(m).windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

#[test]
fn model_tables_cover_every_pair() {
    let keys: BTreeMap<String, serde_json::Value> =
        serde_json::from_value(serde_json::to_value(synthetic_model()).unwrap()).unwrap();
    assert_eq!(keys.len(), 7 * 4);
}
