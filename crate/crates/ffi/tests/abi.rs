//! Exercises the C surface exactly as a foreign caller would: raw pointers
//! in, status codes and JSON strings out, everything freed through the ABI.

use std::ffi::{c_char, CString};
use std::ptr;

use transition_att::dgp;
use transition_att_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

/// Copies and releases a string returned through the ABI.
unsafe fn take(ptr: *mut c_char) -> String {
    assert!(!ptr.is_null());
    let s = std::ffi::CStr::from_ptr(ptr).to_str().unwrap().to_string();
    tatt_string_free(ptr);
    s
}

unsafe fn last_error() -> String {
    take(tatt_last_error())
}

fn mr_csv_text() -> CString {
    let mut bytes = Vec::new();
    dgp::mr_example().write_csv(&mut bytes).unwrap();
    CString::new(bytes).unwrap()
}

unsafe fn mr_panel() -> *mut TattPanel {
    let alphabet = cstr(r#"["unemployed","employed"]"#);
    let mut panel: *mut TattPanel = ptr::null_mut();
    let code = tatt_panel_parse_csv(
        mr_csv_text().as_ptr(),
        ptr::null(),
        alphabet.as_ptr(),
        &mut panel,
    );
    assert_eq!(code, TATT_OK, "{}", last_error());
    panel
}

unsafe fn call_json(
    f: unsafe extern "C" fn(*const TattPanel, *const c_char, *mut *mut c_char) -> i32,
    panel: *const TattPanel,
    options: &str,
) -> Result<serde_json::Value, (i32, String)> {
    let options = cstr(options);
    let mut out: *mut c_char = ptr::null_mut();
    let code = f(panel, options.as_ptr(), &mut out);
    if code == TATT_OK {
        Ok(serde_json::from_str(&take(out)).unwrap())
    } else {
        assert!(out.is_null());
        Err((code, last_error()))
    }
}

#[test]
fn worked_example_round_trip() {
    unsafe {
        let panel = mr_panel();

        let mut out: *mut c_char = ptr::null_mut();
        assert_eq!(tatt_panel_summary(panel, &mut out), TATT_OK);
        let summary: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(summary["n"], 48);
        assert_eq!(summary["t_pre"], 1);
        assert_eq!(summary["labels"][1], "employed");

        let mut out: *mut c_char = ptr::null_mut();
        assert_eq!(tatt_did(panel, &mut out), TATT_OK);
        let did: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(did["periods"][0]["effect"][1].as_f64().unwrap(), -0.125);

        let att = call_json(tatt_att, panel, r#"{"lag":1,"types":1}"#).unwrap();
        let effect = att["periods"][0]["effect"][1].as_f64().unwrap();
        assert!((effect - 1.0 / 24.0).abs() < 1e-12);
        let cf = att["periods"][0]["counterfactual"][1].as_f64().unwrap();
        assert!((cf - 5.0 / 6.0).abs() < 1e-12);

        // Identical request, identical bytes.
        let again = call_json(tatt_att, panel, r#"{"lag":1,"types":1}"#).unwrap();
        assert_eq!(att, again);

        tatt_panel_free(panel);
    }
}

#[test]
fn status_codes_and_messages() {
    unsafe {
        // Null pointers are invalid arguments, not crashes.
        let mut out: *mut c_char = ptr::null_mut();
        assert_eq!(tatt_did(ptr::null(), &mut out), TATT_INVALID_ARGUMENT);
        assert!(last_error().contains("null"));
        assert_eq!(
            tatt_panel_summary(ptr::null(), ptr::null_mut()),
            TATT_INVALID_ARGUMENT
        );

        // Non-UTF-8 bytes are invalid arguments.
        let bad = [0xffu8, 0xfe, 0x00];
        let mut panel: *mut TattPanel = ptr::null_mut();
        assert_eq!(
            tatt_panel_parse_csv(bad.as_ptr() as *const c_char, ptr::null(), ptr::null(), &mut panel),
            TATT_INVALID_ARGUMENT
        );
        assert!(last_error().contains("UTF-8"));

        // Unusable CSV is a validation error and the message names the problem.
        let text = cstr("unit,when,outcome,treated\nu1,1,a,0\n");
        assert_eq!(
            tatt_panel_parse_csv(text.as_ptr(), ptr::null(), ptr::null(), &mut panel),
            TATT_VALIDATION_ERROR
        );
        assert!(panel.is_null());
        assert!(last_error().contains("time"));

        // Unknown options keys are rejected loudly.
        let p = mr_panel();
        let (code, msg) = call_json(tatt_att, p, r#"{"lags":2}"#).unwrap_err();
        assert_eq!(code, TATT_VALIDATION_ERROR);
        assert!(msg.contains("lags"));

        // A treated history with no control counterpart fails as estimation.
        let thin = cstr("unit,time,outcome,treated\nu1,1,b,0\nu1,2,b,1\nu2,1,a,0\nu2,2,a,0\n");
        let mut thin_panel: *mut TattPanel = ptr::null_mut();
        assert_eq!(
            tatt_panel_parse_csv(thin.as_ptr(), ptr::null(), ptr::null(), &mut thin_panel),
            TATT_OK
        );
        let (code, _) = call_json(tatt_att, thin_panel, "{}").unwrap_err();
        assert_eq!(code, TATT_ESTIMATION_ERROR);

        tatt_panel_free(p);
        tatt_panel_free(thin_panel);
    }
}

#[test]
fn simulate_and_oracle_agree_with_the_library() {
    unsafe {
        let spec = cstr(&dgp::null_spec(500, 11).to_json());

        let mut out: *mut c_char = ptr::null_mut();
        assert_eq!(tatt_simulate(spec.as_ptr(), &mut out), TATT_OK);
        let csv = take(out);
        assert!(csv.starts_with("unit,time,outcome,treated\n"));

        let csv_c = CString::new(csv).unwrap();
        let mut panel: *mut TattPanel = ptr::null_mut();
        assert_eq!(
            tatt_panel_parse_csv(csv_c.as_ptr(), ptr::null(), ptr::null(), &mut panel),
            TATT_OK
        );
        let mut out: *mut c_char = ptr::null_mut();
        assert_eq!(tatt_panel_summary(panel, &mut out), TATT_OK);
        let summary: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(summary["n"], 500);
        assert_eq!(summary["t_total"], 4);
        tatt_panel_free(panel);

        // The oracle on the same spec reports exactly zero effects.
        let mut out: *mut c_char = ptr::null_mut();
        assert_eq!(tatt_true_att(spec.as_ptr(), &mut out), TATT_OK);
        let truth: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        for period in truth["aggregate"]["periods"].as_array().unwrap() {
            for v in period["effect"].as_array().unwrap() {
                assert_eq!(v.as_f64().unwrap(), 0.0);
            }
        }

        // Staggered specs simulate through the same entry point.
        let staggered = cstr(&serde_json::to_string(&dgp::staggered_null_spec(300, 2)).unwrap());
        let mut out: *mut c_char = ptr::null_mut();
        assert_eq!(tatt_simulate(staggered.as_ptr(), &mut out), TATT_OK);
        assert!(take(out).starts_with("unit,time,outcome,treated,cohort\n"));

        // A spec that is neither kind is a validation error.
        let junk = cstr(r#"{"n": 5}"#);
        let mut out: *mut c_char = ptr::null_mut();
        assert_eq!(tatt_simulate(junk.as_ptr(), &mut out), TATT_VALIDATION_ERROR);
        assert!(last_error().contains("params"));
    }
}

#[test]
fn estimation_calls_cover_every_pipeline() {
    unsafe {
        let spec = cstr(&dgp::null_spec(400, 21).to_json());
        let mut out: *mut c_char = ptr::null_mut();
        assert_eq!(tatt_simulate(spec.as_ptr(), &mut out), TATT_OK);
        let csv = CString::new(take(out)).unwrap();
        let mut panel: *mut TattPanel = ptr::null_mut();
        assert_eq!(
            tatt_panel_parse_csv(csv.as_ptr(), ptr::null(), ptr::null(), &mut panel),
            TATT_OK
        );

        let small = r#"{"types":2,"seed":1,"multistart":{"n_short":20,"n_long":2}}"#;
        let mixture = call_json(tatt_mixture, panel, small).unwrap();
        assert_eq!(mixture["params"]["J"], 2);
        assert_eq!(mixture["weights"].as_array().unwrap().len(), 2);
        assert!(mixture["loglik"].as_f64().unwrap() < 0.0);

        let selection = call_json(tatt_select_types, panel, r#"{"types":2,"seed":1,"multistart":{"n_short":20,"n_long":2}}"#).unwrap();
        assert_eq!(selection["table"].as_array().unwrap().len(), 2);

        let boot = call_json(tatt_bootstrap, panel, r#"{"seed":3,"bootstrap":{"b":15}}"#).unwrap();
        assert_eq!(boot["b"], 15);
        assert_eq!(boot["failures"], 0);
        let bands = boot["bands"].as_array().unwrap();
        assert_eq!(bands.len(), 2 * 2 * 2);
        for band in bands {
            let est = band["estimate"].as_f64().unwrap();
            assert!(band["pw_lo"].as_f64().unwrap() <= est);
            assert!(est <= band["pw_hi"].as_f64().unwrap());
        }

        let placebo = call_json(tatt_placebo, panel, "{}").unwrap();
        assert_eq!(placebo["lag"], 1);
        assert_eq!(placebo["placebo"]["effect"].as_array().unwrap().len(), 2);

        let pretest = call_json(tatt_pretest, panel, "{}").unwrap();
        assert_eq!(pretest["insufficient_pre_periods"], false);

        let flows = call_json(tatt_flows, panel, r#"{"focal":"up"}"#).unwrap();
        assert_eq!(flows["focal_label"], "up");
        assert!(!flows["decompositions"].as_array().unwrap().is_empty());

        tatt_panel_free(panel);

        // Staggered table straight from a simulated adoption panel.
        let spec = cstr(&serde_json::to_string(&dgp::staggered_effect_spec(1500, 4)).unwrap());
        let mut out: *mut c_char = ptr::null_mut();
        assert_eq!(tatt_simulate(spec.as_ptr(), &mut out), TATT_OK);
        let csv = CString::new(take(out)).unwrap();
        let mut panel: *mut TattPanel = ptr::null_mut();
        assert_eq!(
            tatt_panel_parse_csv(csv.as_ptr(), ptr::null(), ptr::null(), &mut panel),
            TATT_OK
        );
        let table = call_json(tatt_staggered, panel, r#"{"mode":"both"}"#).unwrap();
        assert_eq!(table["mode"], "both");
        assert!(!table["entries"].as_array().unwrap().is_empty());
        tatt_panel_free(panel);
    }
}

#[test]
fn version_is_static_and_header_is_fresh() {
    unsafe {
        let v = std::ffi::CStr::from_ptr(tatt_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
    // The committed header must match what this build generated.
    let header = std::fs::read_to_string(
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/transition_att.h"),
    )
    .unwrap();
    for symbol in [
        "tatt_panel_load_csv",
        "tatt_panel_parse_csv",
        "tatt_panel_free",
        "tatt_panel_summary",
        "tatt_did",
        "tatt_att",
        "tatt_mixture",
        "tatt_select_types",
        "tatt_bootstrap",
        "tatt_placebo",
        "tatt_pretest",
        "tatt_flows",
        "tatt_staggered",
        "tatt_simulate",
        "tatt_true_att",
        "tatt_last_error",
        "tatt_string_free",
        "tatt_version",
        "TATT_OK",
        "TATT_VALIDATION_ERROR",
    ] {
        assert!(header.contains(symbol), "header lacks {symbol}");
    }
}
