//! C ABI over the transition-att estimators.
//!
//! The surface is deliberately small: panels are opaque handles, every result
//! comes back as a JSON string in the same shape the CLI writes to disk, and
//! every call returns a status code. On failure the thread-local message
//! behind [`tatt_last_error`] says what went wrong.
//!
//! Ownership rules: handles from `tatt_panel_*` constructors are released with
//! `tatt_panel_free`; strings written through `char **out` parameters are
//! released with `tatt_string_free`. Handles are read-only after construction
//! and may be shared across threads; the last-error message is per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use serde::{Deserialize, Serialize};

use transition_att::cli::{with_workers, BootstrapConfig, ScheduleConfig, SchemaMap};
use transition_att::data::{load_panel_csv, load_panel_reader, PanelDataset};
use transition_att::dgp::{self, DgpSpec, StaggeredDgpSpec};
use transition_att::effects::{
    did_att, placebo_att, pre_transition_differences, ti_att, EmptyCellPolicy,
};
use transition_att::error::{Error, Result};
use transition_att::inference::{run_bootstrap, EstimationConfig, DEFAULT_ALPHA, DEFAULT_B};
use transition_att::mixture::{
    multistart_fit, select_num_types, EmFit, MultistartSchedule, DEFAULT_EPS_FLOOR,
};
use transition_att::mixture_effects::{second_stage, type_pre_transitions};
use transition_att::report::{
    band_rows, flow_series, panel_summary, BandRow, BootstrapSummary, FlowReport,
    MixtureEffectsReport, MixtureFitReport, PlaceboReport,
};
use transition_att::staggered::{cohort_effect_table, ControlMode};

/// Success.
pub const TATT_OK: i32 = 0;
/// A pointer was null, a string was not UTF-8, or a handle was misused.
pub const TATT_INVALID_ARGUMENT: i32 = 1;
/// The input data, options, or spec are unusable as given.
pub const TATT_VALIDATION_ERROR: i32 = 2;
/// Estimation started but could not produce a result.
pub const TATT_ESTIMATION_ERROR: i32 = 3;
/// A bug: the library panicked. The process is still in a defined state.
pub const TATT_INTERNAL_ERROR: i32 = 4;

/// An immutable loaded panel.
pub struct TattPanel {
    inner: PanelDataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("error message held NUL").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> i32 {
    if e.is_validation() {
        TATT_VALIDATION_ERROR
    } else {
        TATT_ESTIMATION_ERROR
    }
}

/// # Safety: `ptr` is null or a NUL-terminated string valid for the call.
unsafe fn opt_str<'a>(ptr: *const c_char) -> std::result::Result<Option<&'a str>, i32> {
    if ptr.is_null() {
        return Ok(None);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Some(s)),
        Err(_) => {
            set_error("string argument is not valid UTF-8".into());
            Err(TATT_INVALID_ARGUMENT)
        }
    }
}

unsafe fn req_str<'a>(ptr: *const c_char, what: &str) -> std::result::Result<&'a str, i32> {
    match opt_str(ptr)? {
        Some(s) => Ok(s),
        None => {
            set_error(format!("{what} must not be null"));
            Err(TATT_INVALID_ARGUMENT)
        }
    }
}

unsafe fn req_panel<'a>(ptr: *const TattPanel) -> std::result::Result<&'a PanelDataset, i32> {
    if ptr.is_null() {
        set_error("panel handle must not be null".into());
        return Err(TATT_INVALID_ARGUMENT);
    }
    Ok(&(*ptr).inner)
}

/// Runs `body`, catching panics, and writes its JSON result through `out`.
unsafe fn emit<F>(out: *mut *mut c_char, body: F) -> i32
where
    F: FnOnce() -> Result<String> + Send,
{
    if out.is_null() {
        set_error("output pointer must not be null".into());
        return TATT_INVALID_ARGUMENT;
    }
    *out = std::ptr::null_mut();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(json)) => match CString::new(json) {
            Ok(c) => {
                *out = c.into_raw();
                TATT_OK
            }
            Err(_) => {
                set_error("result contained a NUL byte".into());
                TATT_INTERNAL_ERROR
            }
        },
        Ok(Err(e)) => {
            let code = status_of(&e);
            set_error(e.to_string());
            code
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".into());
            set_error(format!("internal panic: {msg}"));
            TATT_INTERNAL_ERROR
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Config(format!("serializing result: {e}")))
}

/// Estimation options, identical to the CLI's config-file keys minus the I/O
/// fields. Absent keys take the documented defaults; unknown keys are
/// rejected.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateOptions {
    lag: Option<usize>,
    types: Option<usize>,
    eps: Option<f64>,
    multistart: Option<ScheduleConfig>,
    replicate_multistart: Option<ScheduleConfig>,
    bootstrap: Option<BootstrapConfig>,
    empty_cell: Option<EmptyCellPolicy>,
    mode: Option<ControlMode>,
    focal: Option<String>,
    seed: Option<u64>,
    workers: Option<usize>,
}

impl EstimateOptions {
    fn parse(text: Option<&str>) -> Result<Self> {
        match text {
            None | Some("") => Ok(Self::default()),
            Some(text) => serde_json::from_str(text)
                .map_err(|e| Error::Config(format!("options JSON: {e}"))),
        }
    }

    fn lag(&self) -> usize {
        self.lag.unwrap_or(1)
    }

    fn n_types(&self) -> usize {
        self.types.unwrap_or(1)
    }

    fn eps(&self) -> f64 {
        self.eps.unwrap_or(DEFAULT_EPS_FLOOR)
    }

    fn policy(&self) -> EmptyCellPolicy {
        self.empty_cell.unwrap_or_default()
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn bootstrap_seed(&self) -> u64 {
        self.bootstrap
            .as_ref()
            .and_then(|b| b.seed)
            .or(self.seed)
            .unwrap_or(0)
    }

    fn schedule(&self) -> MultistartSchedule {
        match &self.multistart {
            Some(c) => c.apply(MultistartSchedule::default()),
            None => MultistartSchedule::default(),
        }
    }

    fn replicate_schedule(&self) -> MultistartSchedule {
        let base = MultistartSchedule {
            n_short: 50,
            n_long: 5,
            ..MultistartSchedule::default()
        };
        match &self.replicate_multistart {
            Some(c) => c.apply(base),
            None => base,
        }
    }

    fn fit(&self, ds: &PanelDataset) -> Result<EmFit> {
        multistart_fit(
            ds,
            self.n_types(),
            self.lag(),
            &self.schedule(),
            self.seed(),
            None,
            self.eps(),
        )
    }
}

fn parse_schema(text: Option<&str>) -> Result<SchemaMap> {
    match text {
        None | Some("") => Ok(SchemaMap::default()),
        Some(text) => {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("schema JSON: {e}")))
        }
    }
}

fn parse_alphabet(text: Option<&str>) -> Result<Option<Vec<String>>> {
    match text {
        None | Some("") => Ok(None),
        Some(text) => serde_json::from_str(text)
            .map(Some)
            .map_err(|e| Error::Config(format!("alphabet JSON: {e}"))),
    }
}

unsafe fn emit_panel<F>(out: *mut *mut TattPanel, body: F) -> i32
where
    F: FnOnce() -> Result<PanelDataset> + Send,
{
    if out.is_null() {
        set_error("output pointer must not be null".into());
        return TATT_INVALID_ARGUMENT;
    }
    *out = std::ptr::null_mut();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(ds)) => {
            *out = Box::into_raw(Box::new(TattPanel { inner: ds }));
            TATT_OK
        }
        Ok(Err(e)) => {
            let code = status_of(&e);
            set_error(e.to_string());
            code
        }
        Err(_) => {
            set_error("internal panic while loading panel".into());
            TATT_INTERNAL_ERROR
        }
    }
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn tatt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for this thread's most recent failure, or null if none. The caller
/// owns the returned string and releases it with `tatt_string_free`.
#[no_mangle]
pub extern "C" fn tatt_last_error() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must be a pointer obtained from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tatt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a panel from a CSV file. `schema_json` optionally renames columns,
/// e.g. `{"unit":"person_id"}`; `alphabet_json` optionally fixes the category
/// order, e.g. `["unemployed","employed"]`. Both may be null.
///
/// # Safety
/// `path`, and the non-null optional arguments, are NUL-terminated strings
/// valid for the duration of the call; `out` is a valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tatt_panel_load_csv(
    path: *const c_char,
    schema_json: *const c_char,
    alphabet_json: *const c_char,
    out: *mut *mut TattPanel,
) -> i32 {
    let path = match req_str(path, "path") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let schema_text = match opt_str(schema_json) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let alphabet_text = match opt_str(alphabet_json) {
        Ok(s) => s,
        Err(code) => return code,
    };
    emit_panel(out, || {
        let schema = parse_schema(schema_text)?.into_csv_schema();
        let alphabet = parse_alphabet(alphabet_text)?;
        load_panel_csv(Path::new(path), &schema, alphabet.as_deref())
    })
}

/// Parses a panel from in-memory CSV text. Arguments as in
/// `tatt_panel_load_csv`.
///
/// # Safety
/// As for `tatt_panel_load_csv`, with `text` in place of `path`.
#[no_mangle]
pub unsafe extern "C" fn tatt_panel_parse_csv(
    text: *const c_char,
    schema_json: *const c_char,
    alphabet_json: *const c_char,
    out: *mut *mut TattPanel,
) -> i32 {
    let text = match req_str(text, "text") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let schema_text = match opt_str(schema_json) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let alphabet_text = match opt_str(alphabet_json) {
        Ok(s) => s,
        Err(code) => return code,
    };
    emit_panel(out, || {
        let schema = parse_schema(schema_text)?.into_csv_schema();
        let alphabet = parse_alphabet(alphabet_text)?;
        load_panel_reader(text.as_bytes(), &schema, alphabet.as_deref())
    })
}

/// Releases a panel handle. Null is a no-op.
///
/// # Safety
/// `panel` must come from a `tatt_panel_*` constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tatt_panel_free(panel: *mut TattPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Panel shape as JSON: unit counts, periods, categories, clusters, cohorts.
///
/// # Safety
/// `panel` is a live handle; `out` is a valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tatt_panel_summary(panel: *const TattPanel, out: *mut *mut c_char) -> i32 {
    let ds = match req_panel(panel) {
        Ok(ds) => ds,
        Err(code) => return code,
    };
    emit(out, || to_json(&panel_summary(ds)))
}

/// Difference-in-differences effect series as JSON. Options are ignored —
/// the comparator has no tuning knobs.
///
/// # Safety
/// As for `tatt_panel_summary`.
#[no_mangle]
pub unsafe extern "C" fn tatt_did(panel: *const TattPanel, out: *mut *mut c_char) -> i32 {
    let ds = match req_panel(panel) {
        Ok(ds) => ds,
        Err(code) => return code,
    };
    emit(out, || to_json(&did_att(ds)?))
}

macro_rules! options_call {
    ($panel:ident, $options_json:ident, $out:ident, |$ds:ident, $opt:ident| $body:expr) => {{
        let $ds = match req_panel($panel) {
            Ok(ds) => ds,
            Err(code) => return code,
        };
        let options_text = match opt_str($options_json) {
            Ok(s) => s,
            Err(code) => return code,
        };
        emit($out, || {
            let $opt = EstimateOptions::parse(options_text)?;
            with_workers($opt.workers, || $body)
        })
    }};
}

/// ATT as JSON. With `"types": 1` (the default) this is the nonparametric
/// estimator and returns an effect series; with more types it fits the
/// mixture and returns weights, per-type series, the aggregate, and theta.
///
/// # Safety
/// `panel` is a live handle; `options_json` is null or a NUL-terminated
/// string; `out` is a valid writable pointer.
#[no_mangle]
pub unsafe extern "C" fn tatt_att(
    panel: *const TattPanel,
    options_json: *const c_char,
    out: *mut *mut c_char,
) -> i32 {
    options_call!(panel, options_json, out, |ds, opt| {
        if opt.n_types() == 1 {
            to_json(&ti_att(ds, opt.lag(), opt.policy())?)
        } else {
            let fit = opt.fit(ds)?;
            let stage = second_stage(ds, &fit.posteriors, opt.lag(), opt.policy(), None)?;
            to_json(&MixtureEffectsReport::new(&stage))
        }
    })
}

/// Mixture fit as JSON: parameters, log-likelihood, BIC, and the second-stage
/// effects.
///
/// # Safety
/// As for `tatt_att`.
#[no_mangle]
pub unsafe extern "C" fn tatt_mixture(
    panel: *const TattPanel,
    options_json: *const c_char,
    out: *mut *mut c_char,
) -> i32 {
    options_call!(panel, options_json, out, |ds, opt| {
        let fit = opt.fit(ds)?;
        let stage = second_stage(ds, &fit.posteriors, opt.lag(), opt.policy(), None)?;
        to_json(&MixtureFitReport::new(ds, &fit, &stage))
    })
}

/// BIC model-selection table over 1..=types as JSON.
///
/// # Safety
/// As for `tatt_att`.
#[no_mangle]
pub unsafe extern "C" fn tatt_select_types(
    panel: *const TattPanel,
    options_json: *const c_char,
    out: *mut *mut c_char,
) -> i32 {
    options_call!(panel, options_json, out, |ds, opt| {
        let j_max = opt.types.unwrap_or(3);
        let (selection, _) =
            select_num_types(ds, opt.lag(), j_max, &opt.schedule(), opt.seed(), opt.eps())?;
        to_json(&selection)
    })
}

#[derive(Serialize)]
struct BootstrapFull<'a> {
    #[serde(flatten)]
    summary: BootstrapSummary<'a>,
    bands: &'a [BandRow],
}

/// Weighted bootstrap as JSON: run header plus one band row per coordinate
/// (pointwise and uniform).
///
/// # Safety
/// As for `tatt_att`.
#[no_mangle]
pub unsafe extern "C" fn tatt_bootstrap(
    panel: *const TattPanel,
    options_json: *const c_char,
    out: *mut *mut c_char,
) -> i32 {
    options_call!(panel, options_json, out, |ds, opt| {
        let mut cfg = EstimationConfig::new(opt.n_types(), opt.lag());
        cfg.schedule = opt.schedule();
        cfg.replicate_schedule = opt.replicate_schedule();
        cfg.eps = opt.eps();
        cfg.policy = opt.policy();
        let boot = opt.bootstrap.as_ref();
        cfg.cluster = boot.and_then(|b| b.cluster).unwrap_or(false);
        let b = boot.and_then(|b| b.b).unwrap_or(DEFAULT_B);
        let alpha = boot.and_then(|b| b.alpha).unwrap_or(DEFAULT_ALPHA);
        let run = run_bootstrap(ds, &cfg, b, opt.bootstrap_seed())?;
        let (crit_values, bands) = band_rows(ds, &run.draws, opt.n_types(), alpha)?;
        to_json(&BootstrapFull {
            summary: BootstrapSummary {
                b,
                seed: opt.bootstrap_seed(),
                alpha,
                failures: run.draws.failures,
                weights: &run.stage.type_weights,
                theta_hat: &run.draws.theta_hat,
                sigma: &run.draws.sigma,
                crit_values,
                pi_gaps: &run.draws.pi_gaps,
            },
            bands: &bands,
        })
    })
}

/// Placebo effect at the last pre-treatment period as JSON.
///
/// # Safety
/// As for `tatt_att`.
#[no_mangle]
pub unsafe extern "C" fn tatt_placebo(
    panel: *const TattPanel,
    options_json: *const c_char,
    out: *mut *mut c_char,
) -> i32 {
    options_call!(panel, options_json, out, |ds, opt| {
        let placebo = placebo_att(ds, opt.lag(), opt.policy())?;
        to_json(&PlaceboReport {
            lag: opt.lag(),
            placebo,
        })
    })
}

/// Pre-treatment transition-difference report as JSON; per type when
/// `"types"` exceeds 1.
///
/// # Safety
/// As for `tatt_att`.
#[no_mangle]
pub unsafe extern "C" fn tatt_pretest(
    panel: *const TattPanel,
    options_json: *const c_char,
    out: *mut *mut c_char,
) -> i32 {
    options_call!(panel, options_json, out, |ds, opt| {
        if opt.n_types() == 1 {
            to_json(&pre_transition_differences(ds))
        } else {
            let fit = opt.fit(ds)?;
            to_json(&type_pre_transitions(ds, &fit.posteriors, None)?)
        }
    })
}

/// Flow decomposition of one category's effect as JSON. `"focal"` selects the
/// category by label or 0-based index; the default is the last category.
///
/// # Safety
/// As for `tatt_att`.
#[no_mangle]
pub unsafe extern "C" fn tatt_flows(
    panel: *const TattPanel,
    options_json: *const c_char,
    out: *mut *mut c_char,
) -> i32 {
    options_call!(panel, options_json, out, |ds, opt| {
        let focal = match &opt.focal {
            None => ds.n_cats() - 1,
            Some(text) => match ds.alphabet().index_of(text) {
                Some(idx) => idx,
                None => text
                    .parse::<usize>()
                    .ok()
                    .filter(|idx| *idx < ds.n_cats())
                    .ok_or_else(|| {
                        Error::Config(format!("focal category '{text}' not in the alphabet"))
                    })?,
            },
        };
        let fit = if opt.n_types() == 1 {
            None
        } else {
            Some(opt.fit(ds)?)
        };
        let (weights, decompositions) = flow_series(ds, fit.as_ref(), focal)?;
        to_json(&FlowReport {
            focal,
            focal_label: ds.alphabet().label(focal),
            weights: weights.as_deref(),
            decompositions: &decompositions,
        })
    })
}

/// Staggered-adoption cohort effect table as JSON. `"mode"` selects the
/// control pool: `"never"`, `"not_yet"`, or `"both"`.
///
/// # Safety
/// As for `tatt_att`.
#[no_mangle]
pub unsafe extern "C" fn tatt_staggered(
    panel: *const TattPanel,
    options_json: *const c_char,
    out: *mut *mut c_char,
) -> i32 {
    options_call!(panel, options_json, out, |ds, opt| {
        let mode = opt.mode.unwrap_or(ControlMode::Never);
        to_json(&cohort_effect_table(ds, opt.lag(), mode)?)
    })
}

/// Draws a synthetic panel from a generative spec (JSON text, either a
/// mixture spec with `"params"` or a staggered spec with `"cohorts"`) and
/// returns the panel as CSV text.
///
/// # Safety
/// `spec_json` is a NUL-terminated string; `out_csv` is a valid writable
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn tatt_simulate(spec_json: *const c_char, out_csv: *mut *mut c_char) -> i32 {
    let text = match req_str(spec_json, "spec_json") {
        Ok(s) => s,
        Err(code) => return code,
    };
    emit(out_csv, || {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("spec JSON: {e}")))?;
        let ds = if value.get("params").is_some() {
            dgp::simulate(&DgpSpec::from_json(text)?)?.0
        } else if value.get("cohorts").is_some() {
            let spec: StaggeredDgpSpec = serde_json::from_str(text)
                .map_err(|e| Error::Config(format!("spec JSON: {e}")))?;
            spec.validate()?;
            dgp::simulate_staggered(&spec)?
        } else {
            return Err(Error::Config(
                "spec JSON has neither \"params\" (mixture) nor \"cohorts\" (staggered)".into(),
            ));
        };
        let mut bytes = Vec::new();
        ds.write_csv(&mut bytes)?;
        String::from_utf8(bytes).map_err(|e| Error::Config(format!("panel CSV: {e}")))
    })
}

/// Exact population effects implied by a mixture spec, as JSON.
///
/// # Safety
/// As for `tatt_simulate`.
#[no_mangle]
pub unsafe extern "C" fn tatt_true_att(spec_json: *const c_char, out: *mut *mut c_char) -> i32 {
    let text = match req_str(spec_json, "spec_json") {
        Ok(s) => s,
        Err(code) => return code,
    };
    emit(out, || {
        let spec = DgpSpec::from_json(text)?;
        to_json(&dgp::true_att(&spec)?)
    })
}
