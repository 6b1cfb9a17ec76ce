use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use kinemetric::kinmodel::KinematicModel;
use kinemetric::rotmath::Axis;
use kinemetric_ffi::*;

fn last_error() -> String {
    let p = km_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn euler_matrix_round_trip() {
    let e = [30.0, -20.0, 75.0];
    let mut m = [0.0; 9];
    let mut back = [0.0; 3];
    unsafe {
        assert_eq!(km_euler_to_matrix(e.as_ptr(), m.as_mut_ptr()), KmStatus::Ok);
        assert_eq!(km_matrix_to_euler(m.as_ptr(), back.as_mut_ptr()), KmStatus::Ok);
    }
    for (a, b) in e.iter().zip(&back) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!(km_last_error_message().is_null());
}

#[test]
fn quaternion_and_sixd_agree() {
    let e = [10.0, 40.0, -120.0];
    let (mut m, mut q, mut s, mut mq, mut ms) = ([0.0; 9], [0.0; 4], [0.0; 6], [0.0; 9], [0.0; 9]);
    unsafe {
        km_euler_to_matrix(e.as_ptr(), m.as_mut_ptr());
        assert_eq!(km_matrix_to_quat(m.as_ptr(), q.as_mut_ptr()), KmStatus::Ok);
        assert_eq!(km_matrix_to_sixd(m.as_ptr(), s.as_mut_ptr()), KmStatus::Ok);
        let neg: Vec<f64> = q.iter().map(|v| -v).collect();
        assert_eq!(km_quat_to_matrix(neg.as_ptr(), mq.as_mut_ptr()), KmStatus::Ok);
        assert_eq!(km_sixd_to_matrix(s.as_ptr(), ms.as_mut_ptr()), KmStatus::Ok);
        let mut g = f64::NAN;
        assert_eq!(km_geodesic_deg(mq.as_ptr(), ms.as_ptr(), &mut g), KmStatus::Ok);
        assert!(g.abs() < 1e-6);
    }
    assert!(q[0] >= 0.0);
    for k in 0..9 {
        assert!((m[k] - mq[k]).abs() < 1e-9 && (m[k] - ms[k]).abs() < 1e-9);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut out = [0.0; 9];
    unsafe {
        assert_eq!(km_euler_to_matrix(ptr::null(), out.as_mut_ptr()), KmStatus::NullPointer);
        assert!(last_error().contains("euler"));
        let zero = [0.0; 6];
        assert_eq!(km_sixd_to_matrix(zero.as_ptr(), out.as_mut_ptr()), KmStatus::DegenerateRepresentation);
        assert!(!last_error().is_empty());
        let not_rot = [2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut e = [0.0; 3];
        assert_eq!(km_matrix_to_euler(not_rot.as_ptr(), e.as_mut_ptr()), KmStatus::InvalidArgument);
        // A successful call clears the message.
        km_euler_to_matrix([0.0; 3].as_ptr(), out.as_mut_ptr());
        assert!(km_last_error_message().is_null());
    }
}

#[test]
fn mpjae_wraps() {
    let a = [179.0, 0.0, 0.0];
    let b = [-179.0, 0.0, 0.0];
    let mut out = 0.0;
    unsafe {
        assert_eq!(km_mpjae(a.as_ptr(), b.as_ptr(), 1, 1, &mut out), KmStatus::Ok);
    }
    assert!((out - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn aggregate_single_view_is_identity() {
    let v: Vec<f64> = (0..8 * 2).map(|i| i as f64 * 0.1).collect();
    let mut out = vec![0.0; 16];
    unsafe {
        assert_eq!(km_aggregate(v.as_ptr(), 1, 2, 2, out.as_mut_ptr()), KmStatus::Ok);
        assert_eq!(km_aggregate(v.as_ptr(), 1, 0, 2, out.as_mut_ptr()), KmStatus::InvalidArgument);
    }
    for (a, b) in v.iter().zip(&out) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn skeleton_fk_then_ik() {
    let mut sk: *mut KmSkeleton = ptr::null_mut();
    unsafe {
        assert_eq!(km_skeleton_humanoid(&mut sk), KmStatus::Ok);
        let (mut j, mut m) = (0usize, 0usize);
        assert_eq!(km_skeleton_counts(sk, &mut j, &mut m), KmStatus::Ok);
        assert_eq!((j, m), (14, 40));
        let root = [15.0, -30.0, 40.0];
        let mut angles = vec![0.0; 3 * j];
        for (i, a) in angles.iter_mut().enumerate() {
            *a = ((i * 7) % 11) as f64 * 2.0 - 10.0;
        }
        // Locked components must stay zero for an exact fixed point.
        let model = KinematicModel::humanoid();
        for jj in 0..j {
            let dof = &model.joint_segment(jj).dof;
            for ax in [Axis::X, Axis::Y, Axis::Z] {
                if !dof.contains(&ax) {
                    angles[3 * jj + model.component_of(ax)] = 0.0;
                }
            }
        }
        let mut markers = vec![0.0; 3 * m];
        assert_eq!(km_forward_kinematics(sk, root.as_ptr(), angles.as_ptr(), markers.as_mut_ptr()), KmStatus::Ok);
        let (mut r, mut a, mut res, mut conv) = ([0.0; 3], vec![0.0; 3 * j], f64::NAN, 0i32);
        assert_eq!(
            km_ik_solve_frame(
                sk,
                markers.as_ptr(),
                ptr::null(),
                ptr::null(),
                ptr::null(),
                r.as_mut_ptr(),
                a.as_mut_ptr(),
                &mut res,
                &mut conv
            ),
            KmStatus::Ok
        );
        assert_eq!(conv, 1);
        assert!(res < 1e-12, "{res}");
        for (x, y) in a.iter().zip(&angles) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
        assert_eq!(
            km_ik_solve_frame(
                sk,
                markers.as_ptr(),
                ptr::null(),
                root.as_ptr(),
                ptr::null(),
                r.as_mut_ptr(),
                a.as_mut_ptr(),
                ptr::null_mut(),
                ptr::null_mut()
            ),
            KmStatus::InvalidArgument
        );
        km_skeleton_free(sk);
        km_skeleton_free(ptr::null_mut());
    }
}

#[test]
fn skeleton_from_bad_json() {
    let mut sk: *mut KmSkeleton = ptr::null_mut();
    let bad = CString::new("{\"segments\": 3}").unwrap();
    unsafe {
        assert_ne!(km_skeleton_from_json(bad.as_ptr(), &mut sk), KmStatus::Ok);
        assert!(sk.is_null());
        let good = CString::new(kinemetric::kinmodel::HUMANOID_SKELETON_JSON).unwrap();
        assert_eq!(km_skeleton_from_json(good.as_ptr(), &mut sk), KmStatus::Ok);
        km_skeleton_free(sk);
    }
    let v = unsafe { CStr::from_ptr(km_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/kinemetric.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "km_euler_to_matrix",
        "km_mpjae",
        "km_aggregate",
        "km_skeleton_free",
        "km_ik_solve_frame",
        "km_last_error_message",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"kinemetric.h\"\nint main(void) { double m[9]; KmStatus s = km_euler_to_matrix(0, m); return s == KM_STATUS_NULL_POINTER ? 0 : 1; }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "C compiler rejected the header"),
        Err(e) => eprintln!("skipping C compile check: {e}"),
    }
}
