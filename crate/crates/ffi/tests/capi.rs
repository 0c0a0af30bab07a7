use std::ffi::{CStr, CString};
use std::ptr;

use qtorhc_ffi::*;

fn configs() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/configs")
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    let n = unsafe { qto_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn from_file(name: &str) -> *mut QtoController {
    let path = CString::new(configs().join(name).to_str().unwrap()).unwrap();
    let mut ctl = ptr::null_mut();
    let s = unsafe { qto_controller_from_file(path.as_ptr(), &mut ctl) };
    assert_eq!(s, QtoStatus::Ok, "{}", last_error());
    assert!(!ctl.is_null());
    ctl
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(qto_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn terminal_data_of_the_cartpole() {
    let ctl = from_file("cartpole_lq.json");
    let (mut n, mut m) = (0usize, 0usize);
    assert_eq!(unsafe { qto_controller_dims(ctl, &mut n, &mut m) }, QtoStatus::Ok);
    assert_eq!((n, m), (4, 1));
    let mut k = [0.0; 4];
    let mut h = [0.0; 16];
    let mut alpha = 0.0;
    let s = unsafe { qto_controller_terminal(ctl, k.as_mut_ptr(), 4, h.as_mut_ptr(), 16, &mut alpha) };
    assert_eq!(s, QtoStatus::Ok);
    assert_eq!(alpha, 0.07);
    for (a, b) in k.iter().zip([13.24, -81.74, 43.65, -80.63]) {
        assert!((a - b).abs() <= 0.02 * b.abs(), "{k:?}");
    }
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(h[i * 4 + j], h[j * 4 + i]);
        }
    }
    let s = unsafe { qto_controller_terminal(ctl, k.as_mut_ptr(), 3, h.as_mut_ptr(), 16, &mut alpha) };
    assert_eq!(s, QtoStatus::BufferTooSmall);
    assert!(last_error().contains("gain"));
    unsafe { qto_controller_free(ctl) };
}

#[test]
fn lq_step_applies_saturated_feedback() {
    let ctl = from_file("cartpole_lq.json");
    let mut k = [0.0; 4];
    let mut h = [0.0; 16];
    let mut alpha = 0.0;
    unsafe { qto_controller_terminal(ctl, k.as_mut_ptr(), 4, h.as_mut_ptr(), 16, &mut alpha) };
    for x in [[0.0, 0.01, 0.0, 0.0], [0.0, 0.5, 0.0, 0.0]] {
        let mut u = [f64::NAN];
        let mut next = [0.0; 4];
        let mut info = QtoStepInfo::default();
        let s = unsafe { qto_controller_step(ctl, x.as_ptr(), 4, u.as_mut_ptr(), 1, next.as_mut_ptr(), &mut info) };
        assert_eq!(s, QtoStatus::Ok);
        let want = k.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().clamp(-3.9351, 3.9351);
        assert!((u[0] - want).abs() < 1e-12);
        assert!(next != x);
    }
    assert_eq!(unsafe { qto_controller_reset(ctl) }, QtoStatus::Ok);
    unsafe { qto_controller_free(ctl) };
}

#[test]
fn bad_input_is_reported() {
    let mut ctl = ptr::null_mut();
    let bad = CString::new(r#"{"plant": "pendulum"}"#).unwrap();
    assert_eq!(unsafe { qto_controller_from_json(bad.as_ptr(), &mut ctl) }, QtoStatus::Config);
    assert!(ctl.is_null());
    assert!(last_error().contains("delta"));

    assert_eq!(unsafe { qto_controller_from_json(ptr::null(), &mut ctl) }, QtoStatus::NullPointer);
    let (mut n, mut m) = (0usize, 0usize);
    assert_eq!(unsafe { qto_controller_dims(ptr::null(), &mut n, &mut m) }, QtoStatus::NullPointer);
    assert_eq!(unsafe { qto_run_len(ptr::null()) }, 0);
    unsafe { qto_controller_free(ptr::null_mut()) };
    unsafe { qto_run_free(ptr::null_mut()) };

    let ctl = from_file("cartpole_lq.json");
    let x = [0.0; 2];
    let mut u = [0.0];
    let s = unsafe { qto_controller_step(ctl, x.as_ptr(), 2, u.as_mut_ptr(), 1, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(s, QtoStatus::InvalidArgument);
    unsafe { qto_controller_free(ctl) };
}

#[test]
fn simulated_cartpole_run() {
    let ctl = from_file("cartpole_qto.json");
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { qto_controller_simulate(ctl, ptr::null(), 0, &mut run) }, QtoStatus::Ok);
    assert!(unsafe { qto_run_converged(run) });
    let len = unsafe { qto_run_len(run) };
    assert!(len > 1);
    let mut info = QtoStepInfo::default();
    let mut x = [0.0; 4];
    assert_eq!(unsafe { qto_run_sample(run, 0, &mut info, x.as_mut_ptr(), 4) }, QtoStatus::Ok);
    assert_eq!(x, [0.0, 0.04, 0.0, 0.0]);
    assert_eq!(info.t, 0.0);
    assert_eq!(info.epsilon, 0.05);
    assert!(info.horizon >= 1.3);
    assert!(info.terminal_level <= 0.07);
    assert_eq!(unsafe { qto_run_sample(run, len, &mut info, ptr::null_mut(), 0) }, QtoStatus::OutOfRange);
    let mut ts = 0.0;
    assert_eq!(unsafe { qto_run_settling_time(run, 0.01, &mut ts) }, QtoStatus::Ok);
    assert!(ts > 0.0);
    unsafe { qto_run_free(run) };
    unsafe { qto_controller_free(ctl) };
}

#[test]
fn scenario_file_writes_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CString::new(configs().join("cartpole_lq.json").to_str().unwrap()).unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut code = -1;
    assert_eq!(unsafe { qto_run_scenario_file(cfg.as_ptr(), out.as_ptr(), &mut code) }, QtoStatus::Ok);
    assert_eq!(code, 0);
    for f in ["trace.csv", "summary.json", "meta.json"] {
        assert!(dir.path().join(f).exists());
    }
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/qtorhc.h")).unwrap();
    let src = std::fs::read_to_string(std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 10);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct QtoController QtoController;"));
}
