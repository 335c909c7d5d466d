use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use asag::config::{GenConfig, ModelConfig, SynthConfig};
use asag::generator::generate;
use asag::predictor::PredictorBank;
use asag::synthdata::{gen_scene, render_pyramid};
use asag_ffi::*;

const MODEL: &str = r#"{"raw_channels":4,"channels":4,"hidden":[16],"k_fixed":6,"k_adapt":4}"#;

fn synth() -> SynthConfig {
    SynthConfig { raw_channels: 4, p3_size: 40, ..SynthConfig::default() }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(asag_last_error()) }.to_string_lossy().into_owned()
}

fn new_bank(json: &str, seed: u64) -> *mut AsagBank {
    let js = CString::new(json).unwrap();
    let mut bank = ptr::null_mut();
    let st = unsafe { asag_bank_new(js.as_ptr(), seed, false, &mut bank) };
    assert_eq!(st, AsagStatus::Ok, "{}", last_error());
    bank
}

#[test]
fn box_metrics() {
    let a = AsagBox { cx: 0.5, cy: 0.5, w: 0.2, h: 0.2 };
    let b = AsagBox { cx: 0.6, cy: 0.5, w: 0.2, h: 0.2 };
    let (mut iou, mut giou) = (0.0f32, 0.0f32);
    unsafe {
        assert_eq!(asag_iou(&a, &b, &mut iou), AsagStatus::Ok);
        assert_eq!(asag_giou(&a, &b, &mut giou), AsagStatus::Ok);
    }
    // overlap 0.1 x 0.2 over union 0.06
    assert!((iou - 1.0 / 3.0).abs() < 1e-5);
    // hull 0.3 x 0.2 = union, so giou == iou
    assert!((giou - iou).abs() < 1e-5);

    let st = unsafe { asag_iou(&a, ptr::null(), &mut iou) };
    assert_eq!(st, AsagStatus::InvalidArgument);
    assert!(last_error().contains("null"));
}

#[test]
fn weights() {
    let sig = |x: f32| 1.0 / (1.0 + (-x).exp());
    let n = asag_norm_weight(0.5, 0.5);
    assert!((n - sig(4.5 * (0.25 - 1.0 / 3.0)) / sig(3.0)).abs() < 1e-6);
    let (mut wp, mut wn) = (0.0, 0.0);
    assert_eq!(unsafe { asag_query_weights(0.0, 0.0, &mut wp, &mut wn) }, AsagStatus::Ok);
    assert!((0.191..0.192).contains(&wp), "{wp}");
    assert!((0.009..0.010).contains(&wn), "{wn}");
}

#[test]
fn hungarian() {
    let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
    let mut map = [9i64; 3];
    let mut total = 0.0;
    let st = unsafe { asag_hungarian(cost.as_ptr(), 3, 3, map.as_mut_ptr(), &mut total) };
    assert_eq!(st, AsagStatus::Ok);
    assert_eq!(map, [1, 0, 2]);
    assert_eq!(total, 5.0);

    // More rows than columns leaves a row unmatched.
    let cost = [1.0, 5.0, 0.0];
    let mut map = [9i64; 3];
    let st = unsafe { asag_hungarian(cost.as_ptr(), 3, 1, map.as_mut_ptr(), &mut total) };
    assert_eq!(st, AsagStatus::Ok);
    assert_eq!(map, [-1, -1, 0]);

    let cost = [f64::NAN, 1.0];
    let st = unsafe { asag_hungarian(cost.as_ptr(), 1, 2, map.as_mut_ptr(), &mut total) };
    assert_eq!(st, AsagStatus::Numeric);
}

#[test]
fn bad_config_is_reported() {
    let js = CString::new(r#"{"bogus":1}"#).unwrap();
    let mut bank = ptr::null_mut();
    let st = unsafe { asag_bank_new(js.as_ptr(), 0, false, &mut bank) };
    assert_eq!(st, AsagStatus::Config);
    assert!(bank.is_null());
    assert!(last_error().contains("bogus"));
}

#[test]
fn generate_matches_library() {
    let bank = new_bank(MODEL, 5);
    assert_eq!(unsafe { asag_bank_raw_channels(bank) }, 4);

    let pyr = render_pyramid(&gen_scene(0, 11, &synth()), &synth());
    let levels: Vec<AsagLevel> = pyr
        .maps
        .iter()
        .map(|m| AsagLevel {
            level: m.level,
            height: m.height as u32,
            width: m.width as u32,
            values: m.values.as_ptr(),
        })
        .collect();
    let mut res = ptr::null_mut();
    let st = unsafe { asag_generate(bank, ptr::null(), levels.as_ptr(), levels.len(), &mut res) };
    assert_eq!(st, AsagStatus::Ok, "{}", last_error());

    let model: ModelConfig = serde_json::from_str(MODEL).unwrap();
    let expect = generate(&pyr, &PredictorBank::init(&model, 5), &GenConfig::default()).unwrap();
    let n = unsafe { asag_result_len(res) };
    assert_eq!(n, expect.trace.valid);
    let mut buf = vec![AsagAnchor { bbox: AsagBox { cx: 0.0, cy: 0.0, w: 0.0, h: 0.0 }, score: 0.0, level: 0, patch: 0 }; n + 3];
    let mut written = 0;
    let st = unsafe { asag_result_anchors(res, buf.as_mut_ptr(), buf.len(), &mut written) };
    assert_eq!(st, AsagStatus::Ok);
    assert_eq!(written, n);
    for (got, want) in buf.iter().zip(expect.valid()) {
        assert_eq!(got.score, want.score);
        assert_eq!(got.bbox.cx, want.bbox.cx);
        assert_eq!(got.bbox.h, want.bbox.h);
        assert_eq!(got.level, want.origin_level);
        assert_eq!(got.patch as usize, want.origin_patch);
    }
    assert!(buf[..n].windows(2).all(|w| w[0].score >= w[1].score));
    assert_eq!(unsafe { asag_result_flops(res) }, expect.trace.flops.total());
    assert_eq!(unsafe { asag_result_deepest_level(res) }, expect.trace.deepest_level());

    // Missing P3 is a data error, not a crash.
    let st = unsafe { asag_generate(bank, ptr::null(), levels.as_ptr(), 2, &mut ptr::null_mut()) };
    assert_eq!(st, AsagStatus::Data, "{}", last_error());

    unsafe {
        asag_result_free(res);
        asag_bank_free(bank);
        asag_result_free(ptr::null_mut());
        asag_bank_free(ptr::null_mut());
    }
}

#[test]
fn bank_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("w.bin").to_str().unwrap()).unwrap();
    let bank = new_bank(MODEL, 1);
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(asag_bank_save(bank, path.as_ptr()), AsagStatus::Ok);
        assert_eq!(asag_bank_load(path.as_ptr(), &mut back), AsagStatus::Ok);
        assert_eq!(asag_bank_raw_channels(back), 4);
        asag_bank_free(bank);
        asag_bank_free(back);
    }
    let missing = CString::new(dir.path().join("nope.bin").to_str().unwrap()).unwrap();
    let st = unsafe { asag_bank_load(missing.as_ptr(), &mut back) };
    assert_eq!(st, AsagStatus::Data);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(asag_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = root.join("include/asag.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["asag_generate", "asag_hungarian", "asag_result_free", "ASAG_STATUS_NUMERIC"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"asag.h\"\nint main(void) {\n  AsagBank *b = 0;\n  AsagStatus s = asag_bank_new(0, 1, false, &b);\n  asag_bank_free(b);\n  return s == ASAG_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(root.join("include"))
        .arg(&src)
        .output();
    match out {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(_) => eprintln!("cc not found; header syntax check skipped"),
    }
}
