//! Acceptance gate: eight end-to-end criteria covering the worked example,
//! algebraic identities on random panels, EM correctness, the second stage,
//! bootstrap coverage, staggered adoption, determinism across worker counts,
//! and model selection. Each test prints one PASS line with its runtime.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use transition_att::cli::with_workers;
use transition_att::data::{load_panel_reader, CsvSchema, PanelDataset};
use transition_att::dgp;
use transition_att::effects::{
    did_att, did_bias, flow_decomposition, history_contributions, ti_att, EmptyCellPolicy,
};
use transition_att::inference::{run_bootstrap, EstimationConfig};
use transition_att::mixture::{
    multistart_fit, param_count, select_num_types, single_type_frequencies, MarkovMixtureParams,
    MultistartSchedule, DEFAULT_EPS_FLOOR,
};
use transition_att::mixture_effects::{ltatt, second_stage, theta_layout};
use transition_att::report::{band_rows, flow_series};
use transition_att::rng::{derive_seed, derived_rng};
use transition_att::staggered::{cohort_effect_table, ControlMode};

const POLICY: EmptyCellPolicy = EmptyCellPolicy::Error;

fn small_schedule() -> MultistartSchedule {
    MultistartSchedule {
        n_short: 60,
        n_long: 5,
        short_iters: 8,
        tol: 1e-3,
        max_iter: 100,
    }
}

fn finish(criterion: usize, what: &str, t0: Instant, budget: Duration) {
    let elapsed = t0.elapsed();
    assert!(
        elapsed < budget,
        "criterion {criterion} overran its budget: {elapsed:.2?} ≥ {budget:?}"
    );
    println!("criterion {criterion} PASS ({elapsed:.2?}): {what}");
}

#[test]
fn criterion_1_worked_example_fixture() {
    let t0 = Instant::now();
    let ds = dgp::mr_example();
    let employed = ds.alphabet().index_of("employed").unwrap();

    let did = did_att(&ds).unwrap();
    assert_eq!(did.at(2).unwrap().effect[employed], -0.125);

    let ti = ti_att(&ds, 1, POLICY).unwrap();
    assert!((ti.at(2).unwrap().effect[employed] - 1.0 / 24.0).abs() < 1e-12);

    assert!(did.at(2).unwrap().effect[employed] < 0.0);
    assert!(ti.at(2).unwrap().effect[employed] > 0.0);

    finish(
        1,
        "did −0.125 exact, transition-independence ATT 1/24, opposite signs",
        t0,
        Duration::from_secs(1),
    );
}

/// Random panel with guaranteed control support: one constant-path control
/// unit per category occupies every lag-1 conditioning cell.
fn random_panel(rng: &mut ChaCha8Rng) -> PanelDataset {
    const LABELS: [&str; 4] = ["a", "b", "c", "d"];
    let k: usize = rng.gen_range(2..=4);
    let t_total: usize = rng.gen_range(2..=6);
    let t_pre: usize = rng.gen_range(1..t_total);
    let n_random: usize = rng.gen_range(20..=496);

    let mut csv = String::from("unit,time,outcome,treated\n");
    for c in 0..k {
        for t in 1..=t_total {
            csv.push_str(&format!("anchor{c},{t},{},0\n", LABELS[c]));
        }
    }
    let mut any_treated = false;
    for i in 0..n_random {
        let treated = if i == n_random - 1 && !any_treated {
            true
        } else {
            rng.gen_bool(0.5)
        };
        any_treated |= treated;
        for t in 1..=t_total {
            let y = LABELS[rng.gen_range(0..k)];
            let flag = (treated && t > t_pre) as u8;
            csv.push_str(&format!("u{i},{t},{y},{flag}\n"));
        }
    }
    load_panel_reader(csv.as_bytes(), &CsvSchema::default(), None).unwrap()
}

#[test]
fn criterion_2_algebraic_identities_on_random_panels() {
    let t0 = Instant::now();
    let mut rng = derived_rng(0x9d5a_11ce, &[2]);
    for rep in 0..100 {
        let ds = random_panel(&mut rng);
        let k = ds.n_cats();
        let did = did_att(&ds).unwrap();
        let ti = ti_att(&ds, 1, POLICY).unwrap();
        let bias = did_bias(&ds, 1, POLICY).unwrap();

        for (idx, t) in ds.post_periods().enumerate() {
            let d = &did.at(t).unwrap().effect;
            let ti_t = ti.at(t).unwrap();
            let b = &bias[idx].effect;

            // (a) DiD − TI = bias, coordinate-wise.
            for c in 0..k {
                assert!(
                    (d[c] - ti_t.effect[c] - b[c]).abs() < 1e-10,
                    "rep {rep} t {t}: decomposition broke"
                );
            }

            // (b) Weighted history contributions reproduce the ATT.
            let cells = history_contributions(&ds, 1, t, POLICY).unwrap();
            let total_w: f64 = cells.iter().map(|cell| cell.weight).sum();
            assert!((total_w - 1.0).abs() < 1e-10);
            for c in 0..k {
                let sum: f64 = cells.iter().map(|cell| cell.weight * cell.effect[c]).sum();
                assert!((sum - ti_t.effect[c]).abs() < 1e-10, "rep {rep}: contributions drifted");
            }

            // (c) Flow net equals the lag-1 ATT component, with no residual.
            for focal in 0..k {
                let flow = flow_decomposition(&ds, focal, t).unwrap();
                assert!((flow.net - ti_t.effect[focal]).abs() < 1e-10);
                assert!(flow.residual.abs() < 1e-10);
            }

            // (d) Effect vectors move probability around, never create it.
            for series in [d, &ti_t.effect, b] {
                assert!(series.iter().sum::<f64>().abs() < 1e-10);
            }

            // (e) Counterfactuals are distributions.
            let cf = ti_t.counterfactual.as_ref().unwrap();
            assert!((cf.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(cf.iter().all(|&p| (-1e-12..=1.0 + 1e-12).contains(&p)));
        }
    }
    finish(
        2,
        "decomposition, contribution, flow, zero-sum, simplex identities on 100 random panels",
        t0,
        Duration::from_secs(30),
    );
}

fn params_sup_dist(a: &MarkovMixtureParams, b: &MarkovMixtureParams, perm: &[usize]) -> f64 {
    let mut sup: f64 = 0.0;
    let mut push = |x: f64, y: f64| sup = sup.max((x - y).abs());
    for (j, &pj) in perm.iter().enumerate() {
        push(a.pi[j], b.pi[pj]);
        let (ta, tb) = (&a.types[j], &b.types[pj]);
        for (ra, rb) in ta.init_joint.iter().zip(&tb.init_joint) {
            for (x, y) in ra.iter().zip(rb) {
                push(*x, *y);
            }
        }
        for (kernels_a, kernels_b) in [
            (&ta.control_kernel, &tb.control_kernel),
            (&ta.treated_kernel, &tb.treated_kernel),
        ] {
            assert_eq!(kernels_a.keys().collect::<Vec<_>>(), kernels_b.keys().collect::<Vec<_>>());
            for (t, rows_a) in kernels_a {
                for (ra, rb) in rows_a.iter().zip(&kernels_b[t]) {
                    for (x, y) in ra.iter().zip(rb) {
                        push(*x, *y);
                    }
                }
            }
        }
    }
    sup
}

fn relabeled_dist(a: &MarkovMixtureParams, b: &MarkovMixtureParams) -> f64 {
    f64::min(
        params_sup_dist(a, b, &[0, 1]),
        params_sup_dist(a, b, &[1, 0]),
    )
}

#[test]
fn criterion_3_em_monotone_exact_and_recovering() {
    let t0 = Instant::now();

    // (a) The winning EM trace never decreases, across 200 randomized runs.
    let mut rng = derived_rng(0x9d5a_11ce, &[3]);
    let tiny = MultistartSchedule {
        n_short: 12,
        n_long: 2,
        short_iters: 6,
        tol: 1e-6,
        max_iter: 80,
    };
    for run in 0..200 {
        let ds = random_panel(&mut rng);
        let n_types = rng.gen_range(1..=3);
        let fit = multistart_fit(&ds, n_types, 1, &tiny, run, None, DEFAULT_EPS_FLOOR).unwrap();
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "run {run}: loglik fell {} → {}", w[0], w[1]);
        }
    }

    // (b) J=1 lands exactly on the empirical frequencies.
    let (ds, _) = dgp::simulate(&dgp::two_type_spec(2000, 31)).unwrap();
    let fit = multistart_fit(&ds, 1, 1, &small_schedule(), 0, None, DEFAULT_EPS_FLOOR).unwrap();
    let freq = single_type_frequencies(&ds, 1, DEFAULT_EPS_FLOOR, None).unwrap();
    assert!(relabeled_params_equal(&fit.params, &freq, 1e-10));

    // (c) J=2 recovers the shipped separated-kernel spec in ≥ 19 of 20 reps.
    let mut hits = 0;
    for rep in 0..20u64 {
        let spec = dgp::two_type_spec(5000, derive_seed(300, &[rep]));
        let (ds, _) = dgp::simulate(&spec).unwrap();
        let fit = multistart_fit(&ds, 2, 1, &small_schedule(), rep, None, DEFAULT_EPS_FLOOR).unwrap();
        if relabeled_dist(&fit.params, &spec.params) <= 0.05 {
            hits += 1;
        }
    }
    assert!(hits >= 19, "J=2 recovery succeeded in only {hits}/20 repetitions");

    finish(
        3,
        &format!("monotone EM, exact J=1 frequencies, J=2 recovery {hits}/20"),
        t0,
        Duration::from_secs(300),
    );
}

fn relabeled_params_equal(a: &MarkovMixtureParams, b: &MarkovMixtureParams, tol: f64) -> bool {
    params_sup_dist(a, b, &(0..a.pi.len()).collect::<Vec<_>>()) <= tol
}

#[test]
fn criterion_4_second_stage_identities_and_recovery() {
    let t0 = Instant::now();

    // (a) With one type the latent-type ATT is the plain estimator.
    let (ds, _) = dgp::simulate(&dgp::null_spec(1500, 41)).unwrap();
    let fit = multistart_fit(&ds, 1, 1, &small_schedule(), 0, None, DEFAULT_EPS_FLOOR).unwrap();
    let plain = ti_att(&ds, 1, POLICY).unwrap();
    let latent = ltatt(&ds, &fit.posteriors, 0, 1, POLICY, None).unwrap();
    for (p, l) in plain.periods.iter().zip(&latent.periods) {
        for c in 0..ds.n_cats() {
            assert!((p.effect[c] - l.effect[c]).abs() < 1e-12);
        }
    }

    // (b)+(c) Aggregation identities on a fitted two-type panel.
    let spec = dgp::two_type_spec(10_000, 43);
    let (ds2, _) = dgp::simulate(&spec).unwrap();
    let fit2 = multistart_fit(&ds2, 2, 1, &small_schedule(), 2, None, DEFAULT_EPS_FLOOR).unwrap();
    let stage = second_stage(&ds2, &fit2.posteriors, 1, POLICY, None).unwrap();
    assert!((stage.type_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for idx in 0..stage.aggregate.periods.len() {
        for c in 0..ds2.n_cats() {
            let mixed: f64 = stage
                .type_weights
                .iter()
                .zip(&stage.types)
                .map(|(w, series)| w * series.periods[idx].effect[c])
                .sum();
            assert!((stage.aggregate.periods[idx].effect[c] - mixed).abs() < 1e-12);
        }
    }
    for focal in 0..ds2.n_cats() {
        let (_, flows) = flow_series(&ds2, Some(&fit2), focal).unwrap();
        for flow in flows.iter().filter(|f| f.type_index.is_none()) {
            let att = stage.aggregate.at(flow.period).unwrap().effect[focal];
            assert!((flow.net + flow.residual - att).abs() < 1e-10);
        }
    }

    // (d) Per-type effects recover the two-type oracle at n = 10⁴.
    let truth = dgp::true_att(&spec).unwrap();
    // Fitted types are relabeled ascending in π; align to the oracle by
    // whichever pairing matches better.
    let dist = |perm: &[usize; 2]| -> f64 {
        let mut sup: f64 = 0.0;
        for (j, &pj) in perm.iter().enumerate() {
            for (est, tru) in stage.types[j].periods.iter().zip(&truth.types[pj].periods) {
                for c in 0..ds2.n_cats() {
                    sup = sup.max((est.effect[c] - tru.effect[c]).abs());
                }
            }
        }
        sup
    };
    let sup = f64::min(dist(&[0, 1]), dist(&[1, 0]));
    assert!(sup <= 0.03, "per-type oracle recovery off by {sup}");
    for (est, tru) in stage.aggregate.periods.iter().zip(&truth.aggregate.periods) {
        for c in 0..ds2.n_cats() {
            assert!((est.effect[c] - tru.effect[c]).abs() <= 0.03);
        }
    }

    finish(
        4,
        "single-type equivalence, aggregation identities, two-type oracle recovery",
        t0,
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_5_bootstrap_bands_and_coverage() {
    let t0 = Instant::now();
    with_workers(Some(8), || {
        // (a) The equal-weight replicate reproduces the point estimate.
        let (ds, _) = dgp::simulate(&dgp::null_spec(2000, 51)).unwrap();
        let cfg = EstimationConfig::new(1, 1);
        let run = run_bootstrap(&ds, &cfg, 60, 7).unwrap();
        let fit = multistart_fit(&ds, 1, 1, &cfg.schedule, 7, None, cfg.eps).unwrap();
        let direct = second_stage(&ds, &fit.posteriors, 1, POLICY, None).unwrap();
        assert_eq!(direct.theta.len(), run.draws.theta_hat.len());
        for (a, b) in direct.theta.iter().zip(&run.draws.theta_hat) {
            assert!((a - b).abs() < 1e-8, "θ̂ drifted: {a} vs {b}");
        }

        // (b) The uniform band contains the pointwise band everywhere.
        let (_, rows) = band_rows(&ds, &run.draws, 1, 0.05).unwrap();
        for row in &rows {
            assert!(row.unif_lo <= row.pw_lo && row.pw_hi <= row.unif_hi);
        }

        // (c) Simultaneous coverage of the zero effect across 200 panels.
        let layout = theta_layout(1, ds.t_pre(), ds.t_total(), ds.n_cats());
        let aggregate: Vec<usize> = layout
            .iter()
            .enumerate()
            .filter(|(_, c)| c.series == "aggregate")
            .map(|(i, _)| i)
            .collect();
        let mut covered = 0;
        for rep in 0..200u64 {
            let (panel, _) = dgp::simulate(&dgp::null_spec(2000, derive_seed(500, &[rep]))).unwrap();
            let run = run_bootstrap(&panel, &cfg, 300, derive_seed(501, &[rep])).unwrap();
            let bands = transition_att::inference::uniform_bands(&run.draws, 0.05, &aggregate).unwrap();
            if bands.coords.iter().all(|c| c.unif_lo <= 0.0 && 0.0 <= c.unif_hi) {
                covered += 1;
            }
        }
        let rate = covered as f64 / 200.0;
        assert!(
            (0.90..=0.99).contains(&rate),
            "simultaneous coverage {rate} outside [0.90, 0.99]"
        );
        println!("  (coverage {covered}/200 = {rate})");
        Ok(())
    })
    .unwrap();
    finish(
        5,
        "θ̂ reproduction, band nesting, simultaneous coverage in range",
        t0,
        Duration::from_secs(1200),
    );
}

#[test]
fn criterion_6_staggered_reduction_null_and_weights() {
    let t0 = Instant::now();

    // (a) One adopting cohort: the staggered cells equal the flat estimator.
    let mut spec = dgp::staggered_effect_spec(4000, 61);
    spec.cohorts = BTreeMap::from([(0usize, 0.5), (3usize, 0.5)]);
    spec.validate().unwrap();
    let ds = dgp::simulate_staggered(&spec).unwrap();
    let table = cohort_effect_table(&ds, 1, ControlMode::Never).unwrap();

    let mut csv = Vec::new();
    ds.write_csv(&mut csv).unwrap();
    let flat_text: String = String::from_utf8(csv)
        .unwrap()
        .lines()
        .map(|line| {
            let cut = line.rfind(',').unwrap();
            format!("{}\n", &line[..cut])
        })
        .collect();
    let flat = load_panel_reader(flat_text.as_bytes(), &CsvSchema::default(), Some(&spec.labels)).unwrap();
    let plain = ti_att(&flat, 1, POLICY).unwrap();
    for cell in &table.entries {
        assert_eq!(cell.cohort, 3);
        let reference = plain.at(cell.period).unwrap();
        for c in 0..ds.n_cats() {
            assert!((cell.effect[c] - reference.effect[c]).abs() < 1e-12);
        }
    }

    // (b) Null adoption DGP: every cohort-period estimate is near zero.
    let null = dgp::simulate_staggered(&dgp::staggered_null_spec(100_000, 62)).unwrap();
    let null_table = cohort_effect_table(&null, 1, ControlMode::Never).unwrap();
    assert!(!null_table.entries.is_empty());
    for cell in &null_table.entries {
        for c in 0..null.n_cats() {
            assert!(
                cell.effect[c].abs() < 0.01,
                "null cohort g={} t={} effect {}",
                cell.cohort,
                cell.period,
                cell.effect[c]
            );
        }
    }

    // (c) Calendar-time aggregation uses weights that sum to one.
    for row in table.aggregate.iter().chain(&null_table.aggregate) {
        let sum: f64 = row.weights.iter().map(|w| w.weight).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    finish(
        6,
        "single-cohort reduction, null staggered oracle, cohort weights",
        t0,
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_7_bit_identical_across_worker_counts() {
    let t0 = Instant::now();
    let worker_counts = [1usize, 4, 8];

    let (panel, _) = dgp::simulate(&dgp::two_type_spec(2000, 71)).unwrap();
    let schedule = MultistartSchedule {
        n_short: 20,
        n_long: 2,
        short_iters: 6,
        tol: 1e-4,
        max_iter: 60,
    };
    let fits: Vec<String> = worker_counts
        .iter()
        .map(|&w| {
            with_workers(Some(w), || {
                let fit = multistart_fit(&panel, 2, 1, &schedule, 5, None, DEFAULT_EPS_FLOOR)?;
                Ok(fit.params.to_json())
            })
            .unwrap()
        })
        .collect();
    assert_eq!(fits[0], fits[1]);
    assert_eq!(fits[0], fits[2]);

    let (small, _) = dgp::simulate(&dgp::null_spec(500, 72)).unwrap();
    let cfg = EstimationConfig::new(1, 1);
    let boots: Vec<String> = worker_counts
        .iter()
        .map(|&w| {
            with_workers(Some(w), || {
                let run = run_bootstrap(&small, &cfg, 50, 9)?;
                Ok(serde_json::to_string(&run.draws).unwrap())
            })
            .unwrap()
        })
        .collect();
    assert_eq!(boots[0], boots[1]);
    assert_eq!(boots[0], boots[2]);

    let sims: Vec<Vec<u8>> = worker_counts
        .iter()
        .map(|&w| {
            with_workers(Some(w), || {
                let (ds, _) = dgp::simulate(&dgp::mr_spec(20_000, 9))?;
                let mut bytes = Vec::new();
                ds.write_csv(&mut bytes)?;
                Ok(bytes)
            })
            .unwrap()
        })
        .collect();
    assert_eq!(sims[0], sims[1]);
    assert_eq!(sims[0], sims[2]);

    finish(
        7,
        "multistart, bootstrap, and simulation bytes identical at 1/4/8 workers",
        t0,
        Duration::from_secs(300),
    );
}

#[test]
fn criterion_8_model_selection_and_parameter_count() {
    let t0 = Instant::now();

    // BIC parameter count against the closed form; the worked example gives 7.
    assert_eq!(param_count(1, 2, 1, 2, 1), 7);
    for (j, k, l, t, t0_) in [
        (1usize, 2usize, 1usize, 4usize, 2usize),
        (2, 3, 1, 6, 3),
        (3, 2, 2, 5, 3),
        (2, 4, 1, 4, 1),
    ] {
        let kl = k.pow(l as u32);
        let expected = (j - 1) + j * ((2 * kl - 1) + (t - l) * kl * (k - 1) + (t - t0_) * kl * (k - 1));
        assert_eq!(param_count(j, k, l, t, t0_), expected, "({j},{k},{l},{t},{t0_})");
    }

    // BIC picks J=2 on the two-type spec in ≥ 45 of 50 repetitions.
    let mut chose_two = 0;
    for rep in 0..50u64 {
        let spec = dgp::two_type_spec(5000, derive_seed(800, &[rep]));
        let (ds, _) = dgp::simulate(&spec).unwrap();
        let (selection, _) =
            select_num_types(&ds, 1, 3, &small_schedule(), rep, DEFAULT_EPS_FLOOR).unwrap();
        if selection.chosen == 2 {
            chose_two += 1;
        }
    }
    assert!(chose_two >= 45, "BIC chose J=2 in only {chose_two}/50 repetitions");

    finish(
        8,
        &format!("parameter-count audit, BIC selection {chose_two}/50"),
        t0,
        Duration::from_secs(600),
    );
}
