//! One pass/fail line per acceptance criterion, at the contract tolerances.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::*;
use kinemetric::compare::{compare_ik_vs_direct, CompareOptions, TABLE_COLUMNS};
use kinemetric::dataset::Target;
use kinemetric::geomcam::{aggregate, RootMode, ViewVolume};
use kinemetric::iksolve::*;
use kinemetric::kinmodel::*;
use kinemetric::learn::*;
use kinemetric::nalgebra::Matrix3;
use kinemetric::rotmath::*;
use kinemetric::synth::{generate, SynthSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const XYZ: EulerConvention = EulerConvention::XYZ;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn det_error(m: &Matrix3<f64>) -> f64 {
    (m.determinant() - 1.0).abs()
}

fn rotation_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    let (mut ortho, mut det, mut trip, mut antipodal_ok) = (0f64, 0f64, 0f64, true);
    for _ in 0..n {
        // Euler: angles -> matrix -> angles -> matrix.
        let e = EulerTriple::new(rng.gen_range(-180.0..180.0), rng.gen_range(-89.0..89.0), rng.gen_range(-180.0..180.0));
        let m = euler_to_matrix(&e, XYZ).unwrap();
        let back = matrix_to_euler(&m, XYZ);
        for (a, b) in e.as_array().iter().zip(back.as_array()) {
            trip = trip.max(wrap_diff_deg(a - b).abs());
        }
        trip = trip.max(max_abs_diff(m.matrix(), euler_to_matrix(&back, XYZ).unwrap().matrix()));
        ortho = ortho.max(ortho_error(m.matrix()));
        det = det.max(det_error(m.matrix()));

        // Quaternion: random unit quaternion -> matrix -> quaternion.
        let (raw, q) = loop {
            let raw: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            if let Ok(q) = UnitQuaternion::from_raw(raw) {
                break (raw, q);
            }
        };
        let mq = quat_to_matrix(&q);
        let q2 = matrix_to_quat(&mq);
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        for (a, b) in q.as_array().iter().zip(q2.as_array()) {
            trip = trip.max((s * a - b).abs());
        }
        ortho = ortho.max(ortho_error(mq.matrix()));
        det = det.max(det_error(mq.matrix()));
        let neg = UnitQuaternion::from_raw(raw.map(|v| -v)).unwrap();
        antipodal_ok &= quat_to_matrix(&neg) == mq;

        // 6D: random matrix -> 6D -> matrix, and random 6D -> matrix.
        let r = RotationMatrix::new(random_rotation(&mut rng)).unwrap();
        let m6 = sixd_to_matrix(&matrix_to_sixd(&r)).unwrap();
        trip = trip.max(max_abs_diff(r.matrix(), m6.matrix()));
        let v: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
        if let Ok(p) = sixd_to_matrix(&SixDRep::from_array(v)) {
            ortho = ortho.max(ortho_error(p.matrix()));
            det = det.max(det_error(p.matrix()));
            let again = sixd_to_matrix(&matrix_to_sixd(&p)).unwrap();
            trip = trip.max(max_abs_diff(p.matrix(), again.matrix()));
        }
    }
    let pass = ortho < 1e-9 && det < 1e-9 && trip < 1e-9 && antipodal_ok;
    check(
        pass,
        format!("orthogonality {ortho:.1e}, det {det:.1e}, round trip {trip:.1e}, antipodal exact {antipodal_ok}"),
    )
}

fn mpjae_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let j = rng.gen_range(1..6);
        let f = rng.gen_range(1..8);
        let a = random_angle_set(&mut rng, j, f);
        let b = random_angle_set(&mut rng, j, f);
        worst = worst.max((mpjae(&a, &b).unwrap() - mpjae_oracle(&a, &b)).abs());
    }
    let one = |x| AngleSet::new(vec!["j".into()], vec![0.0], vec![vec![EulerTriple::new(x, 0.0, 0.0)]]).unwrap();
    let wrap = mpjae(&one(179.0), &one(-179.0)).unwrap();
    check(
        worst < 1e-12 && wrap == 2.0 / 3.0,
        format!("max |metric - oracle| {worst:.1e}, wrap case {wrap}"),
    )
}

fn aggregation_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let views = random_views(&mut rng, 3, 8, 4);
    let fused = aggregate(&views).unwrap();
    let n = fused.values.len();
    let (oracle, ow) = softmax_oracle(&views);
    let (mut sum_err, mut oracle_err) = (0f64, 0f64);
    for i in 0..n {
        sum_err = sum_err.max(((0..3).map(|k| fused.weight(k, i)).sum::<f64>() - 1.0).abs());
        oracle_err = oracle_err.max((fused.values[i] - oracle[i]).abs());
        for k in 0..3 {
            oracle_err = oracle_err.max((fused.weight(k, i) - ow[k][i]).abs());
        }
    }
    let single = aggregate(&views[..1]).unwrap();
    let identity = single.values == views[0].values;
    let mut perm_exact = true;
    for _ in 0..20 {
        let mut order = vec![0, 1, 2];
        order.shuffle(&mut rng);
        let shuffled: Vec<ViewVolume> = order.iter().map(|&k| views[k].clone()).collect();
        let g = aggregate(&shuffled).unwrap();
        perm_exact &= g.values == fused.values;
        for (pos, &k) in order.iter().enumerate() {
            perm_exact &= g.weights[pos * n..(pos + 1) * n] == fused.weights[k * n..(k + 1) * n];
        }
    }
    check(
        sum_err < 1e-9 && identity && perm_exact && oracle_err < 1e-12,
        format!("weight sum {sum_err:.1e}, single view identity {identity}, permutation exact {perm_exact}, oracle {oracle_err:.1e}"),
    )
}

fn ik_suite() -> Outcome {
    let model = KinematicModel::humanoid();
    let spec = SynthSpec {
        duration_s: 3.0,
        seed: 11,
        ..SynthSpec::default()
    };
    let out = generate(&model, &spec).unwrap();
    let weights = IkWeights::from_json_str(HUMANOID_WEIGHTS_JSON).unwrap();
    let res = solve_sequence(&model, &out.markers, &weights, &IkOptions::default()).unwrap();
    let angles = results_to_angle_set(&model, &res, &out.angles.times).unwrap();
    let e = mpjae(&angles, &out.angles).unwrap();

    let hinge = KinematicModel::from_json_str(HINGE_JSON).unwrap();
    let mut worst: f64 = 0.0;
    for (seed, theta, w) in [(1, 37.0, [1.0, 1.0, 1.0]), (2, -120.0, [2.0, 0.5, 3.0]), (3, 170.0, [1.0, 4.0, 0.25])] {
        let obs = noisy_hinge_obs(theta, seed);
        let mut init = Pose::rest(&hinge);
        init.angles[0] = EulerTriple::new(0.0, 0.0, theta * 0.9);
        let r = solve_frame(&hinge, &hinge_frame(&obs), &hinge_weights(&w), &init, &IkOptions::default()).unwrap();
        worst = worst.max(wrap_diff_deg(r.pose.angles[0].z - hinge_brute_force(&obs, &w)).abs());
    }
    check(
        out.angles.len() == 300 && e < 0.1 && worst < 1e-4,
        format!("{} frames, MPJAE {e:.2e} deg, 1-DOF vs brute force {worst:.1e} deg", out.angles.len()),
    )
}

fn scaling_suite() -> Outcome {
    let base = KinematicModel::humanoid();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut truth = base.clone();
    let mut expected = BTreeMap::new();
    for seg in base.scale_pairs.keys() {
        let s = rng.gen_range(0.7..1.3);
        truth.scale_segment(base.segment_index(seg).unwrap(), s);
        expected.insert(seg.clone(), s);
    }
    let seq = MarkerSequence {
        names: truth.marker_names(),
        frames: (0..30)
            .map(|f| truth.marker_frame(&random_pose(&truth, &mut rng), f as f64 * 0.01).unwrap())
            .collect(),
    };
    let (_, factors) = scale_model(&base, &seq, &base.scale_pairs).unwrap();
    let worst = expected.iter().map(|(k, s)| (factors[k] - s).abs()).fold(0.0, f64::max);
    check(worst < 1e-6, format!("{} segments, max factor error {worst:.1e}", expected.len()))
}

/// Random positive views, and targets a few degrees from the network's own
/// prediction so the loss stays small enough for clean central differences.
fn micro_inputs(net: &Network, rng: &mut ChaCha8Rng, samples: usize) -> (Vec<Vec<ViewVolume>>, Vec<Target>) {
    let views: Vec<Vec<ViewVolume>> = (0..samples)
        .map(|_| {
            (0..3)
                .map(|_| ViewVolume::from_values(8, 2, (0..8 * 8 * 8 * 2).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
                .collect()
        })
        .collect();
    let fused: Vec<_> = views.iter().map(|v| aggregate(v).unwrap()).collect();
    let (out, _) = net.predict_batch(&fused.iter().collect::<Vec<_>>(), BnMode::Eval).unwrap();
    let targets = (0..samples)
        .map(|i| {
            let row: Vec<f64> = out.row(i).iter().copied().collect();
            let e: Vec<EulerTriple> = map_to_so3(&row, net.arch.representation, XYZ)
                .unwrap()
                .iter()
                .map(|r| {
                    let a = matrix_to_euler(r, XYZ).as_array();
                    EulerTriple::new(a[0] + rng.gen_range(-0.5..0.5), a[1] + rng.gen_range(-0.5..0.5), a[2] + rng.gen_range(-0.5..0.5))
                })
                .collect();
            Target::from_euler(&e, XYZ)
        })
        .collect();
    (views, targets)
}

fn gradient_suite() -> Outcome {
    let mut lines = Vec::new();
    let mut all = true;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let (mut entries, mut nontrivial) = (0, 0);
    for rep in Representation::ALL {
        for sup in Supervision::ALL {
            // Two independent random micro-models per combination; batch
            // normalization is off so finite differences stay clean.
            for model in 0..2 {
                let mut rng = ChaCha8Rng::seed_from_u64(60 + checked as u64);
                let arch = Architecture {
                    joints: 2,
                    side: 8,
                    hidden: 6,
                    representation: rep,
                    batch_norm: false,
                    euler_convention: XYZ.tag(),
                };
                let mut net = Network::init(arch, &mut rng).unwrap();
                // Positive biases keep every ReLU clear of its kink.
                for e in net.param_entries().to_vec() {
                    if e.name.ends_with("bias") && e.name != "head.bias" {
                        for v in &mut net.params[e.offset..e.offset + e.len()] {
                            *v = rng.gen_range(0.05..0.2);
                        }
                    }
                }
                let (views, targets) = micro_inputs(&net, &mut rng, 2);
                let spec = LossSpec {
                    representation: rep,
                    supervision: sup,
                    euler_targets: EulerTargetPolicy::NearestBranch,
                    convention: XYZ,
                };
                let r = gradient_check(&net, &views, &targets, &spec, 1e-6, 1e-6, 1e-8).unwrap();
                checked += 1;
                worst = worst.max(r.max_tol_ratio);
                entries += r.checked;
                nontrivial += r.nontrivial;
                if !r.passed() {
                    all = false;
                    lines.push(format!("{}/{}/model {model}: {} failures, worst {}", rep.name(), sup_name(sup), r.failures, r.worst));
                }
            }
        }
    }
    let mut detail = format!("{checked} configurations, {entries} entries ({nontrivial} above the 1e-8 floor), worst error/tolerance ratio {worst:.2}");
    if !lines.is_empty() {
        detail.push_str("; ");
        detail.push_str(&lines.join("; "));
    }
    check(all && checked == 12, detail)
}

fn sup_name(s: Supervision) -> &'static str {
    match s {
        Supervision::Direct => "direct",
        Supervision::So3 => "so3",
    }
}

fn overfit_suite() -> Outcome {
    let spec = SynthSpec {
        duration_s: 0.64,
        amplitude_deg: 40.0,
        frequency_hz: 1.0,
        root_amplitude_mm: 0.0,
        ..SynthSpec::default()
    };
    let data = generate(&arm(), &spec).unwrap().dataset;
    let cfg = TrainConfig {
        representation: Representation::SixD,
        supervision: Supervision::Direct,
        side: 8,
        side_mm: 1500.0,
        hidden: 256,
        batch_size: 8,
        epochs: 500,
        anneal_epoch: 350,
        anneal_factor: 0.1,
        val_fraction: 0.0,
        root_mode: RootMode::Global,
        seed: 0,
        ..TrainConfig::default()
    };
    let a = train_split(&data, &cfg, None).unwrap();
    let b = train_split(&data, &cfg, None).unwrap();
    let final_mpjae = a.metrics.last().unwrap().mpjae_train;
    let same = a.network.params == b.network.params && metrics_csv(&a.metrics) == metrics_csv(&b.metrics);
    check(
        data.len() == 64 && final_mpjae < 2.0 && same,
        format!("{} samples, final train MPJAE {final_mpjae:.3} deg, deterministic {same}", data.len()),
    )
}

fn continuity_suite() -> Outcome {
    let w = continuity_witness([175.0, 10.0, 20.0], [10.0, 20.0], 170.0, 190.0, 200).unwrap();
    let (raw, so3) = (w.max_jump_direct_raw(), w.max_jump_so3());
    check(raw > 100.0 && so3 < 0.1, format!("direct Euler jump {raw:.2}, SO(3) change {so3:.2e}"))
}

fn report_suite() -> Outcome {
    let model = KinematicModel::humanoid();
    let spec = SynthSpec {
        duration_s: 0.3,
        seed: 9,
        ..SynthSpec::default()
    };
    let data = generate(&model, &spec).unwrap().dataset;
    let cfg = TrainConfig {
        side: 8,
        side_mm: 2500.0,
        hidden: 16,
        epochs: 2,
        anneal_epoch: 1,
        val_fraction: 0.0,
        ..TrainConfig::default()
    };
    let trained = train_split(&data, &cfg, None).unwrap();
    let report = compare_ik_vs_direct(&model, &data, Some(&trained.checkpoint), &CompareOptions::default()).unwrap();
    let csv = report.table_csv();
    let header = csv.lines().next().unwrap_or("");
    let expected = std::iter::once("method").chain(TABLE_COLUMNS).collect::<Vec<_>>().join(",");
    let layout = header == expected && report.rows.iter().all(|r| r.values.len() == 9);
    let clean = mpjae(&report.ik_clean, &report.truth).unwrap();
    let noisy = mpjae(&report.ik_noisy, &report.truth).unwrap();
    check(
        layout && noisy > clean,
        format!("9-column layout {layout}, IK clean {clean:.3} deg < noisy {noisy:.3} deg"),
    )
}

fn frobenius_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (random_rotation(&mut rng), random_rotation(&mut rng));
        let theta = geodesic_deg(&RotationMatrix::new(a).unwrap(), &RotationMatrix::new(b).unwrap()).to_radians();
        worst = worst.max(((a - b).norm_squared() - 4.0 * (1.0 - theta.cos())).abs());
    }
    check(worst < 1e-9, format!("1000 pairs, max deviation {worst:.1e}"))
}

fn main() {
    type Suite = (usize, &'static str, f64, fn() -> Outcome);
    let suites: [Suite; 10] = [
        (1, "rotation conversions", 5.0, rotation_suite),
        (2, "MPJAE oracle", f64::INFINITY, mpjae_suite),
        (3, "softmax aggregation", f64::INFINITY, aggregation_suite),
        (4, "IK oracle", 60.0, ik_suite),
        (5, "scaling oracle", f64::INFINITY, scaling_suite),
        (6, "gradient checks", 120.0, gradient_suite),
        (7, "overfit fixture", 600.0, overfit_suite),
        (8, "continuity witness", f64::INFINITY, continuity_suite),
        (9, "comparison report", f64::INFINITY, report_suite),
        (10, "Frobenius-geodesic identity", f64::INFINITY, frobenius_suite),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, budget, f) in suites {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        let in_time = secs < budget;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        let limit = if budget.is_finite() { format!(" (limit {budget} s)") } else { String::new() };
        println!(
            "criterion {id:>2} [{}] {name}: {}; {secs:.2} s{limit}",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
