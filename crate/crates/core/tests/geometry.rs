mod common;

use common::*;
use kinemetric::geomcam::*;
use kinemetric::nalgebra::Vector3;
use kinemetric::synth::{ring_cameras, render_heatmaps, SynthSpec};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn aggregation_matches_naive_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let views = random_views(&mut rng, 3, 8, 4);
    let fused = aggregate(&views).unwrap();
    let (out, w) = softmax_oracle(&views);
    let n = out.len();
    for i in 0..n {
        assert!((fused.values[i] - out[i]).abs() < 1e-12);
        let mut sum = 0.0;
        for k in 0..3 {
            assert!((fused.weight(k, i) - w[k][i]).abs() < 1e-12);
            sum += fused.weight(k, i);
        }
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn single_view_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let views = random_views(&mut rng, 1, 4, 2);
    let fused = aggregate(&views).unwrap();
    assert_eq!(fused.values, views[0].values);
    assert!(fused.weights.iter().all(|&w| w == 1.0));
}

#[test]
fn empty_or_mismatched_views_are_rejected() {
    assert!(aggregate(&[]).is_err());
    let a = ViewVolume::zeros(2, 1);
    let b = ViewVolume::zeros(3, 1);
    assert!(aggregate(&[a, b]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn permuting_views_changes_nothing(seed in any::<u64>(), c in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let views = random_views(&mut rng, c, 3, 2);
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<ViewVolume> = order.iter().map(|&k| views[k].clone()).collect();
        let a = aggregate(&views).unwrap();
        let b = aggregate(&shuffled).unwrap();
        prop_assert_eq!(&a.values, &b.values);
        let n = a.values.len();
        for (pos, &k) in order.iter().enumerate() {
            prop_assert_eq!(&a.weights[k * n..(k + 1) * n], &b.weights[pos * n..(pos + 1) * n]);
        }
    }

    #[test]
    fn fused_value_lies_between_view_extremes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let views = random_views(&mut rng, 3, 2, 1);
        let fused = aggregate(&views).unwrap();
        for i in 0..fused.values.len() {
            let lo = views.iter().map(|v| v.values[i]).fold(f64::INFINITY, f64::min);
            let hi = views.iter().map(|v| v.values[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(fused.values[i] >= lo - 1e-12 && fused.values[i] <= hi + 1e-12);
        }
    }
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let views = random_views(&mut rng, 3, 2, 1);
    let fused = aggregate(&views).unwrap();
    let g = vec![1.0; fused.values.len()];
    let grads = aggregate_backward(&views, &fused, &g);
    let h = 1e-6;
    for k in 0..3 {
        for i in 0..fused.values.len() {
            let mut up = views.clone();
            up[k].values[i] += h;
            let mut dn = views.clone();
            dn[k].values[i] -= h;
            let fd = (aggregate(&up).unwrap().values[i] - aggregate(&dn).unwrap().values[i]) / (2.0 * h);
            assert!((fd - grads[k][i]).abs() < 1e-8, "{fd} vs {}", grads[k][i]);
        }
    }
}

#[test]
fn unprojected_point_peaks_at_its_voxel() {
    let spec = SynthSpec {
        width: 320,
        height: 240,
        ..SynthSpec::default()
    };
    let cams = ring_cameras(&spec, Vector3::new(0.0, 0.0, 0.0)).unwrap();
    let points = [Vector3::new(120.0, -300.0, 250.0), Vector3::new(-400.0, 350.0, -100.0)];
    let maps = cams.iter().map(|c| render_heatmaps(c, &points, 3.0)).collect();
    let stack = HeatmapStack::new(cams, maps).unwrap();
    let grid = build_grid(GridOrigin::Local, 1500.0, 24).unwrap();
    let fused = unproject(&stack, &grid).unwrap();
    for (c, p) in points.iter().enumerate() {
        let got = grid.unravel(fused.argmax(c));
        let want = grid.voxel_of(p).unwrap();
        for a in 0..3 {
            assert!((got[a] as i64 - want[a] as i64).abs() <= 1, "channel {c}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn grid_modes_differ_only_by_the_root_offset() {
    let root = Vector3::new(300.0, -20.0, 75.0);
    let g = build_grid(GridOrigin::for_mode(RootMode::Global, root), 1000.0, 4).unwrap();
    let l = build_grid(GridOrigin::for_mode(RootMode::Local, root), 1000.0, 4).unwrap();
    for (a, b) in g.coords.iter().zip(&l.coords) {
        assert!((a - b - root).amax() < 1e-12);
    }
    assert_eq!(g.voxel_of(&root), Some([2, 2, 2]));
    assert!(build_grid(GridOrigin::Local, 1000.0, 1).is_err());
}
