use std::ffi::{CStr, CString};
use std::ptr;

use avsep::checkpoint::save_checkpoint;
use avsep::{AvSepNet, SeparatorConfig};
use avsep_ffi::*;

fn small() -> SeparatorConfig {
    SeparatorConfig {
        kernel_size: 4,
        chunk_size: 4,
        dim: 8,
        layers: 1,
        blocks: 1,
        heads: 2,
        ffn_width: 8,
        visual_dim: 8,
        dropout: 0.0,
        ..Default::default()
    }
}

fn last_error() -> String {
    let p = avsep_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_separate_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let net = AvSepNet::<f32>::new(&small()).unwrap();
    save_checkpoint(&net, &path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { avsep_model_load(cpath.as_ptr(), &mut model) }, AvsepStatus::Ok);
    assert!(avsep_last_error().is_null());
    let mut count = 0u64;
    assert_eq!(unsafe { avsep_model_num_params(model, &mut count) }, AvsepStatus::Ok);
    assert_eq!(count as usize, avsep::nn::Parameterized::num_params(&net));
    let mut sr = 0u32;
    assert_eq!(unsafe { avsep_model_sample_rate(model, &mut sr) }, AvsepStatus::Ok);
    assert_eq!(sr, 16000);

    let len = 64;
    let mix: Vec<f64> = (0..len).map(|i| (i as f64 * 0.2).sin()).collect();
    let visual = vec![0.5f32; 16 * 8];
    let mut out = vec![f64::NAN; 3 * len];
    let status = unsafe {
        avsep_model_separate(model, mix.as_ptr(), len, 16000, visual.as_ptr(), 1, 16, 8, 3, out.as_mut_ptr())
    };
    assert_eq!(status, AvsepStatus::Ok);
    assert!(out.iter().all(|v| v.is_finite()));

    let v = avsep::VisualFeatures::new(
        ndarray::Array3::from_elem((1, 16, 8), 0.5f32),
        25.0,
        vec![true, false, false],
    )
    .unwrap();
    let expect = net.separate(&avsep::Waveform::new(mix.clone(), 16000).unwrap(), &v, 3).unwrap();
    for (k, w) in expect.iter().enumerate() {
        assert_eq!(&out[k * len..(k + 1) * len], w.samples());
    }

    let status = unsafe {
        avsep_model_separate(model, mix.as_ptr(), len, 8000, ptr::null(), 0, 0, 8, 2, out.as_mut_ptr())
    };
    assert_eq!(status, AvsepStatus::Data);
    assert!(last_error().starts_with("data error"));
    unsafe { avsep_model_free(model) };
}

#[test]
fn load_errors_map_to_codes() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { avsep_model_load(missing.as_ptr(), &mut model) }, AvsepStatus::Io);
    assert!(model.is_null());
    assert!(last_error().starts_with("io error"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"nope").unwrap();
    let cbad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { avsep_model_load(cbad.as_ptr(), &mut model) }, AvsepStatus::Format);
    assert_eq!(unsafe { avsep_model_load(ptr::null(), &mut model) }, AvsepStatus::NullPointer);
    unsafe { avsep_model_free(ptr::null_mut()) };
}

#[test]
fn si_sdr_through_the_abi() {
    let est = [1.0, 0.0];
    let reference = [1.0, 1.0];
    let mut out = f64::NAN;
    assert_eq!(unsafe { avsep_si_sdr(est.as_ptr(), reference.as_ptr(), 2, &mut out) }, AvsepStatus::Ok);
    assert!(out.abs() <= 1e-9);
    let zero = [0.0, 0.0];
    assert_eq!(unsafe { avsep_si_sdr(est.as_ptr(), zero.as_ptr(), 2, &mut out) }, AvsepStatus::InvalidInput);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/avsep.h")).unwrap();
    for name in [
        "avsep_model_load",
        "avsep_model_free",
        "avsep_model_separate",
        "avsep_si_sdr",
        "avsep_last_error",
        "AVSEP_STATUS_DATA",
        "typedef struct AvsepModel AvsepModel",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
