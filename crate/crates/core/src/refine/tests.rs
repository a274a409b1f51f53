use super::*;
use crate::testutil::{random_image, random_map};
use proptest::prelude::*;

fn params(labels: usize) -> (EnergyParams, EnergyParams) {
    (
        EnergyParams::coarse().with_labels(labels),
        EnergyParams::fine().with_labels(labels),
    )
}

/// Exhaustive minimum over all labelings (tiny instances only).
fn brute_force_min(model: &EnergyModel, n: usize, labels: usize) -> f64 {
    let mut lab = vec![0u16; n];
    let mut best = f64::INFINITY;
    loop {
        best = best.min(model.total_energy(&lab));
        let mut k = 0;
        loop {
            if k == n {
                return best;
            }
            lab[k] += 1;
            if (lab[k] as usize) < labels {
                break;
            }
            lab[k] = 0;
            k += 1;
        }
    }
}

#[test]
fn all_weights_zero_gives_zero_energy() {
    let mut p = EnergyParams::coarse().with_labels(8);
    p.w_u = 0.0;
    p.w_p = 0.0;
    p.w_h = 0.0;
    let d = random_map(5, 4, 1, 1.0, 3.0);
    let img = random_image(5, 4, 2);
    let model = EnergyModel::new(&d, &img, &p).unwrap();
    assert_eq!(model.total_energy(&[3; 20]), 0.0);
    assert_eq!(model.total_energy(model.reference_labels()), 0.0);
}

#[test]
fn two_pixel_energy_matches_hand_expansion() {
    let mut p = EnergyParams::fine().with_labels(2);
    p.theta_beta = 40.0;
    let d = ScalarMap::from_vec(2, 1, vec![1.0, 2.0]);
    let img = ImageBuffer::from_vec(2, 1, vec![0.2, 0.3, 0.4, 0.25, 0.3, 0.45]);
    let model = EnergyModel::new(&d, &img, &p).unwrap();
    let luma = img.luminance();
    // Both 2x1 windows cover both pixels: depth and luminance both increase,
    // so the window correlation is 1.
    let s = (2.0 + 0.0009) / (2.0 + 0.0009);
    assert_eq!(window_ssim(&d.map(|v| v - 1.0), &luma, 0, 0, 3), s);
    let gi = 0.5 * (luma.data[1] - luma.data[0]);
    // g_u is fixed by the input, whose normalized depth is (0, 1).
    let g_u = (-((gi - 0.5).powi(2) * 255.0 * 255.0) / (2.0 * 25.0)).exp();
    for labels in [[0u16, 0], [0, 1], [1, 0], [1, 1]] {
        let gd = 0.5 * (labels[1] as f64 - labels[0] as f64);
        let r2 = (gi - gd).powi(2);
        let reference = [0u16, 1];
        let mut e = 0.0;
        for k in 0..2 {
            let psi_u = if labels[k] == reference[k] {
                -s.clamp(1e-6, 1.0).ln()
            } else {
                -((1.0 - s) / 1.0f64).clamp(1e-6, 1.0).ln()
            };
            e += p.w_u * psi_u * g_u + p.w_h * r2;
        }
        let c0 = img.pixel(0, 0).map(|v| v * 255.0);
        let c1 = img.pixel(1, 0).map(|v| v * 255.0);
        // Identical gradients at both pixels, so g_p = 1.
        e += p.w_p * pairwise_cost(labels[0] as f64, labels[1] as f64, [0.0, 0.0], [1.0, 0.0], c0, c1, &p);
        let got = model.total_energy(&labels);
        assert!((got - e).abs() <= 1e-12 * e.abs().max(1.0), "{labels:?}: {got} vs {e}");
    }
}

#[test]
fn matched_edges_are_a_fixed_point() {
    // Two flat regions with very different colors and matching depth steps.
    let img = ImageBuffer::from_fn(3, 3, |x, _| if x == 0 { [0.0; 3] } else { [1.0; 3] });
    let d = ScalarMap::from_fn(3, 3, |x, _| if x == 0 { 1.0 } else { 4.0 });
    let (c, f) = params(8);
    let rep = refine_with_report(&d, &img, &c, &f).unwrap();
    assert_eq!(rep.depth, d);
    assert!(rep.final_energy < 1e-9);
}

#[test]
fn constant_depth_is_returned_unchanged() {
    let d = ScalarMap::filled(4, 4, 2.5);
    let img = random_image(4, 4, 3);
    let (c, f) = params(64);
    let rep = refine_with_report(&d, &img, &c, &f).unwrap();
    assert!(rep.degenerate);
    assert_eq!(rep.depth, d);
}

#[test]
fn outlier_is_relabeled_to_neighbors() {
    let img = ImageBuffer::from_fn(3, 3, |_, _| [0.5, 0.5, 0.5]);
    let d = ScalarMap::from_fn(3, 3, |x, y| if (x, y) == (1, 1) { 5.0 } else { 1.0 });
    let (c, f) = params(8);
    let out = refine(&d, &img, &c, &f).unwrap();
    assert!(out.data.iter().all(|&v| v == 1.0), "{:?}", out.data);
}

#[test]
fn mismatched_resolution_is_rejected() {
    let d = ScalarMap::filled(4, 4, 1.0);
    let img = random_image(4, 3, 3);
    let (c, f) = params(8);
    assert!(matches!(
        refine(&d, &img, &c, &f),
        Err(RefineError::ResolutionMismatch { .. })
    ));
}

#[test]
fn quantization_levels_span_the_range() {
    let d = random_map(6, 5, 4, -2.0, 7.0);
    let field = LabeledDepthField::quantize(&d, 64);
    let (lo, hi) = d.min_max();
    assert_eq!(field.level_values[0], lo);
    assert_eq!(field.level_values[63], hi);
    assert!(field.level_values.windows(2).all(|w| w[0] < w[1]));
    let dec = field.decode();
    let step = (hi - lo) / 63.0;
    for (a, b) in dec.data.iter().zip(&d.data) {
        assert!((a - b).abs() <= 0.5 * step + 1e-12);
    }
}

#[test]
fn noisy_ramp_traces_descend() {
    let img = ImageBuffer::from_fn(16, 12, |x, _| [x as f64 / 15.0, 0.3, 0.6]);
    let noise = random_map(16, 12, 9, -0.3, 0.3);
    let d = ScalarMap::from_fn(16, 12, |x, y| 1.0 + 0.2 * x as f64 + noise.get(x, y));
    let rep = refine_with_report(&d, &img, &EnergyParams::coarse(), &EnergyParams::fine()).unwrap();
    for t in [&rep.coarse_trace, &rep.fine_trace] {
        assert!(t.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs()), "{t:?}");
    }
    assert!(rep.final_energy <= rep.input_energy);
}

#[test]
fn restarts_only_lower_the_energy() {
    for seed in 0..10 {
        let d = random_map(5, 4, seed, 0.5, 3.0);
        let img = random_image(5, 4, seed + 100);
        let (c, mut f) = params(8);
        let with = refine_with_report(&d, &img, &c, &f).unwrap().final_energy;
        f.restarts = 0;
        let without = refine_with_report(&d, &img, &c, &f).unwrap().final_energy;
        assert!(with <= without, "seed {seed}: {with} > {without}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn output_within_input_range_and_deterministic(seed in 0u64..10_000) {
        let d = random_map(7, 6, seed, 0.5, 3.0);
        let img = random_image(7, 6, seed + 1);
        let (c, f) = params(16);
        let a = refine(&d, &img, &c, &f).unwrap();
        let b = refine(&d, &img, &c, &f).unwrap();
        prop_assert_eq!(&a, &b);
        let (lo, hi) = d.min_max();
        prop_assert!(a.data.iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn never_worse_than_input_and_usually_optimal(seed in 0u64..10_000) {
        let d = random_map(2, 2, seed, 0.0, 1.0);
        let img = ImageBuffer::from_fn(2, 2, |x, _| if x == 0 { [0.2, 0.2, 0.2] } else { [0.21, 0.2, 0.2] });
        let (c, f) = params(4);
        let rep = refine_with_report(&d, &img, &c, &f).unwrap();
        prop_assert!(rep.final_energy <= rep.input_energy);
        let model = EnergyModel::new(&d, &img, &f).unwrap();
        let min = brute_force_min(&model, 4, 4);
        prop_assert!(rep.final_energy >= min - 1e-9);
    }

    #[test]
    fn pairwise_is_symmetric(
        xi in -300.0f64..300.0, xj in -300.0f64..300.0,
        pi in proptest::array::uniform2(0.0f64..64.0), pj in proptest::array::uniform2(0.0f64..64.0),
        ci in proptest::array::uniform3(0.0f64..255.0), cj in proptest::array::uniform3(0.0f64..255.0),
    ) {
        let p = EnergyParams::coarse();
        prop_assert_eq!(pairwise_cost(xi, xj, pi, pj, ci, cj, &p), pairwise_cost(xj, xi, pj, pi, cj, ci, &p));
    }
}
