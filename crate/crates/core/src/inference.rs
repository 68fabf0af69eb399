//! Weighted-bootstrap inference for the flattened effect vector θ: Exp(1)
//! unit or cluster weights, per-replicate weighted EM (warm-started at the
//! point estimate plus a short multistart top-up), relabeling, ζτ-weighted
//! second stage, covariance, and pointwise plus uniform sup-t bands.
//!
//! Replicates are independently seeded from (base seed, replicate index), so
//! the full run is bit-identical at any worker count.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Clusters, PanelDataset};
use crate::effects::EmptyCellPolicy;
use crate::error::{Error, Result};
use crate::mixture::{
    log_likelihood, multistart_with_extras, run_em, single_type_frequencies, EmFit,
    MarkovMixtureParams, MultistartSchedule, DEFAULT_EPS_FLOOR,
};
use crate::mixture_effects::{second_stage, SecondStage};
use crate::rng::{derive_seed, derived_rng};

const TAG_POINT: u64 = 0x706f_696e_74; // seed namespaces: point fit, θ̂ pass,
const TAG_HAT: u64 = 0x6861_74; // replicate weights, replicate EM
const TAG_WEIGHTS: u64 = 0x7765_6967_6874;
const TAG_REPLICATE: u64 = 0x7265_706c;

pub const DEFAULT_B: usize = 500;
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Everything a bootstrap replicate needs to re-estimate θ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimationConfig {
    pub n_types: usize,
    pub lag: usize,
    /// Multistart schedule for the point estimate.
    pub schedule: MultistartSchedule,
    /// Reduced schedule for each replicate's top-up around the warm start.
    pub replicate_schedule: MultistartSchedule,
    pub eps: f64,
    pub policy: EmptyCellPolicy,
    /// Draw one weight per cluster instead of per unit.
    pub cluster: bool,
}

impl EstimationConfig {
    pub fn new(n_types: usize, lag: usize) -> Self {
        Self {
            n_types,
            lag,
            schedule: MultistartSchedule::default(),
            replicate_schedule: MultistartSchedule {
                n_short: 50,
                n_long: 5,
                ..MultistartSchedule::default()
            },
            eps: DEFAULT_EPS_FLOOR,
            policy: EmptyCellPolicy::Error,
            cluster: false,
        }
    }
}

/// Bootstrap weights: unit mode draws n independent Exp(1) weights
/// (unnormalized); cluster mode draws one Exp(1) per cluster and normalizes
/// the cluster weights to sum to 1, each unit inheriting its cluster's weight.
pub fn draw_weights(n: usize, clusters: Option<&Clusters>, seed: u64) -> Vec<f64> {
    let mut rng = derived_rng(seed, &[]);
    match clusters {
        None => (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect(),
        Some(c) => {
            let raw: Vec<f64> = (0..c.len()).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let total: f64 = raw.iter().sum();
            (0..n).map(|i| raw[c.of_unit(i)] / total).collect()
        }
    }
}

/// One weighted re-estimation: weighted mixture fit (warm start plus top-up,
/// relabeled ascending in π) and the ζτ-weighted second stage.
pub fn bootstrap_replicate(
    ds: &PanelDataset,
    zeta: &[f64],
    cfg: &EstimationConfig,
    warm: &MarkovMixtureParams,
    seed: u64,
) -> Result<(SecondStage, EmFit)> {
    if zeta.len() != ds.n() || zeta.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::DimensionMismatch(
            "replicate weights must be positive, finite, and one per unit".into(),
        ));
    }
    let weights = Some(zeta);
    let fit = if cfg.n_types == 1 {
        // The weighted single-type MLE is one closed-form M-step from any
        // start; the warm start alone reaches it.
        run_em(
            ds,
            warm.clone(),
            cfg.replicate_schedule.tol,
            cfg.replicate_schedule.max_iter,
            weights,
        )?
    } else {
        let base = single_type_frequencies(ds, cfg.lag, cfg.eps, weights)?;
        multistart_with_extras(
            ds,
            &base,
            cfg.n_types,
            &cfg.replicate_schedule,
            seed,
            weights,
            std::slice::from_ref(warm),
        )?
    };
    // Relabeling must not move the likelihood.
    let ll = log_likelihood(ds, &fit.params, weights)?;
    if (ll - fit.loglik()).abs() > 1e-10 * (1.0 + fit.loglik().abs()) {
        return Err(Error::ReplicateFailed {
            replicate: 0,
            reason: format!(
                "likelihood changed under relabeling: {} → {ll}",
                fit.loglik()
            ),
        });
    }
    let stage = second_stage(ds, &fit.posteriors, cfg.lag, cfg.policy, weights)?;
    Ok((stage, fit))
}

/// The bootstrap distribution of θ̂ plus everything needed for bands.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapDraws {
    /// Requested replicate count B.
    pub b: usize,
    pub theta_hat: Vec<f64>,
    /// Successful replicates in replicate-index order; B − failures rows.
    pub draws: Vec<Vec<f64>>,
    /// Per-coordinate bootstrap standard errors.
    pub sigma: Vec<f64>,
    pub failures: usize,
    pub seed: u64,
    /// Smallest adjacent π gap per successful replicate (empty when J=1) —
    /// small gaps warn that π-ordered labels may switch across replicates.
    pub pi_gaps: Vec<f64>,
}

/// A full bootstrap run: the point estimate it centered on and the draws.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapRun {
    pub fit: EmFit,
    pub stage: SecondStage,
    pub draws: BootstrapDraws,
}

fn min_adjacent_gap(pi: &[f64]) -> Option<f64> {
    pi.windows(2)
        .map(|w| w[1] - w[0])
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}

/// Runs the full pipeline: point fit, θ̂ via an equal-weight pass through the
/// replicate machinery (so an equal-weight replicate reproduces it exactly),
/// then B weighted replicates with ≤ 3 retries each.
pub fn run_bootstrap(
    ds: &PanelDataset,
    cfg: &EstimationConfig,
    b: usize,
    seed: u64,
) -> Result<BootstrapRun> {
    if b < 2 {
        return Err(Error::Config(format!("B={b} but at least 2 replicates required")));
    }
    let clusters = if cfg.cluster {
        Some(
            ds.clusters()
                .ok_or_else(|| Error::MissingColumn("cluster".into()))?,
        )
    } else {
        None
    };
    let point = {
        let base = single_type_frequencies(ds, cfg.lag, cfg.eps, None)?;
        if cfg.n_types == 1 {
            run_em(ds, base, cfg.schedule.tol, cfg.schedule.max_iter, None)?
        } else {
            multistart_with_extras(
                ds,
                &base,
                cfg.n_types,
                &cfg.schedule,
                derive_seed(seed, &[TAG_POINT]),
                None,
                &[],
            )?
        }
    };
    let ones = vec![1.0; ds.n()];
    let (stage_hat, fit_hat) =
        bootstrap_replicate(ds, &ones, cfg, &point.params, derive_seed(seed, &[TAG_HAT]))?;
    let theta_hat = stage_hat.theta.clone();

    let results: Vec<Option<(Vec<f64>, Option<f64>)>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            for attempt in 0..4u64 {
                let wseed = derive_seed(seed, &[TAG_WEIGHTS, rep as u64, attempt]);
                let zeta = draw_weights(ds.n(), clusters, wseed);
                let rseed = derive_seed(seed, &[TAG_REPLICATE, rep as u64, attempt]);
                match bootstrap_replicate(ds, &zeta, cfg, &fit_hat.params, rseed) {
                    Ok((stage, fit)) => {
                        return Some((stage.theta, min_adjacent_gap(&fit.params.pi)))
                    }
                    Err(err) => {
                        log::debug!("replicate {rep} attempt {attempt} failed: {err}");
                    }
                }
            }
            None
        })
        .collect();

    let failures = results.iter().filter(|r| r.is_none()).count();
    if failures * 20 > b {
        return Err(Error::TooManyFailures {
            failures,
            total: b,
        });
    }
    let mut draws = Vec::with_capacity(b - failures);
    let mut pi_gaps = Vec::new();
    for r in results.into_iter().flatten() {
        debug_assert_eq!(r.0.len(), theta_hat.len());
        draws.push(r.0);
        if let Some(g) = r.1 {
            pi_gaps.push(g);
        }
    }
    if draws.len() < 2 {
        return Err(Error::InsufficientReplicates { have: draws.len() });
    }
    let sigma = column_sds(&draws);
    Ok(BootstrapRun {
        fit: fit_hat,
        stage: stage_hat,
        draws: BootstrapDraws {
            b,
            theta_hat,
            draws,
            sigma,
            failures,
            seed,
            pi_gaps,
        },
    })
}

fn column_means(draws: &[Vec<f64>]) -> Vec<f64> {
    let dim = draws[0].len();
    let mut mean = vec![0.0; dim];
    for row in draws {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= draws.len() as f64;
    }
    mean
}

fn column_sds(draws: &[Vec<f64>]) -> Vec<f64> {
    let mean = column_means(draws);
    let dim = mean.len();
    let mut ss = vec![0.0; dim];
    for row in draws {
        for ((s, x), m) in ss.iter_mut().zip(row).zip(&mean) {
            let d = x - m;
            *s += d * d;
        }
    }
    ss.iter()
        .map(|s| (s / (draws.len() as f64 - 1.0)).sqrt())
        .collect()
}

/// Bootstrap covariance V̂ = (B′−1)⁻¹ Σ_b (θ⁽ᵇ⁾−θ̄)(θ⁽ᵇ⁾−θ̄)ᵀ.
pub fn covariance(draws: &BootstrapDraws) -> Result<Vec<Vec<f64>>> {
    let b = draws.draws.len();
    if b < 2 {
        return Err(Error::InsufficientReplicates { have: b });
    }
    let mean = column_means(&draws.draws);
    let dim = mean.len();
    let mut v = vec![vec![0.0; dim]; dim];
    for row in &draws.draws {
        let centered: Vec<f64> = row.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for (i, ci) in centered.iter().enumerate() {
            for (j, cj) in centered.iter().enumerate().skip(i) {
                v[i][j] += ci * cj;
            }
        }
    }
    let denom = (b - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            v[i][j] /= denom;
            v[j][i] = v[i][j];
        }
    }
    Ok(v)
}

/// One θ coordinate's point estimate, standard error, and both bands.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandCoord {
    /// Index into θ.
    pub index: usize,
    pub estimate: f64,
    pub se: f64,
    pub pw_lo: f64,
    pub pw_hi: f64,
    pub unif_lo: f64,
    pub unif_hi: f64,
}

/// Pointwise and uniform sup-t bands over one coordinate subset of θ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceBands {
    pub alpha: f64,
    /// Sup-t critical value c_{1−α}; uniform bands are θ̂ ± c·σ̂.
    pub crit_value: f64,
    pub coords: Vec<BandCoord>,
}

/// The ceil(B·(1−α))-th order statistic (1-based) of `values`.
fn upper_order_statistic(mut values: Vec<f64>, alpha: f64) -> f64 {
    let b = values.len();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((b as f64) * (1.0 - alpha)).ceil() as usize;
    values[rank.clamp(1, b) - 1]
}

/// Builds bands for the θ coordinates in `subset` (e.g. one effect series).
/// Coordinates with σ̂=0 get degenerate bands at θ̂ and stay out of the sup.
pub fn uniform_bands(
    draws: &BootstrapDraws,
    alpha: f64,
    subset: &[usize],
) -> Result<ConfidenceBands> {
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(Error::Config(format!("alpha={alpha} outside (0, 1)")));
    }
    let b = draws.draws.len();
    if b < 2 {
        return Err(Error::InsufficientReplicates { have: b });
    }
    let dim = draws.theta_hat.len();
    if subset.is_empty() {
        return Err(Error::Config("empty coordinate subset".into()));
    }
    for &c in subset {
        if c >= dim {
            return Err(Error::IndexOutOfRange { index: c, bound: dim });
        }
    }
    let active: Vec<usize> = subset
        .iter()
        .copied()
        .filter(|&c| draws.sigma[c] > 0.0)
        .collect();
    let crit_value = if active.is_empty() {
        0.0
    } else {
        let sup: Vec<f64> = draws
            .draws
            .iter()
            .map(|row| {
                active
                    .iter()
                    .map(|&c| ((row[c] - draws.theta_hat[c]) / draws.sigma[c]).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        upper_order_statistic(sup, alpha)
    };
    let coords = subset
        .iter()
        .map(|&c| {
            let estimate = draws.theta_hat[c];
            let se = draws.sigma[c];
            if se == 0.0 {
                return BandCoord {
                    index: c,
                    estimate,
                    se,
                    pw_lo: estimate,
                    pw_hi: estimate,
                    unif_lo: estimate,
                    unif_hi: estimate,
                };
            }
            let ts: Vec<f64> = draws
                .draws
                .iter()
                .map(|row| ((row[c] - estimate) / se).abs())
                .collect();
            let c_pw = upper_order_statistic(ts, alpha);
            BandCoord {
                index: c,
                estimate,
                se,
                pw_lo: estimate - c_pw * se,
                pw_hi: estimate + c_pw * se,
                unif_lo: estimate - crit_value * se,
                unif_hi: estimate + crit_value * se,
            }
        })
        .collect();
    Ok(ConfidenceBands {
        alpha,
        crit_value,
        coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CsvSchema, load_panel_reader};
    use crate::dgp::mr_example;

    #[test]
    fn unit_weights_are_positive_and_reproducible() {
        let a = draw_weights(10_000, None, 11);
        let b = draw_weights(10_000, None, 11);
        let c = draw_weights(10_000, None, 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&w| w > 0.0));
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn cluster_weights_share_and_normalize() {
        let text = "unit,time,outcome,treated,cluster\n\
                    a,1,x,0,c1\na,2,y,1,c1\n\
                    b,1,x,0,c1\nb,2,x,0,c1\n\
                    c,1,y,0,c1\nc,2,y,0,c1\n\
                    d,1,x,0,c2\nd,2,y,0,c2\n";
        let ds = load_panel_reader(text.as_bytes(), &CsvSchema::default(), None).unwrap();
        let clusters = ds.clusters().unwrap();
        assert_eq!(clusters.len(), 2);
        let w = draw_weights(ds.n(), Some(clusters), 3);
        // Units a, b, c share cluster c1's weight; d has c2's.
        assert_eq!(w[0], w[1]);
        assert_eq!(w[1], w[2]);
        assert_ne!(w[0], w[3]);
        // The distinct cluster weights sum to 1.
        assert!((w[0] + w[3] - 1.0).abs() < 1e-12);
    }

    fn mr_cfg() -> EstimationConfig {
        let mut cfg = EstimationConfig::new(1, 1);
        cfg.schedule = MultistartSchedule {
            n_short: 4,
            n_long: 2,
            short_iters: 4,
            tol: 1e-8,
            max_iter: 50,
        };
        cfg.replicate_schedule = MultistartSchedule {
            n_short: 4,
            n_long: 2,
            short_iters: 4,
            tol: 1e-8,
            max_iter: 50,
        };
        cfg
    }

    #[test]
    fn equal_weight_replicate_reproduces_theta_hat() {
        let ds = mr_example();
        let cfg = mr_cfg();
        let run = run_bootstrap(&ds, &cfg, 8, 99).unwrap();
        assert_eq!(run.draws.draws.len() + run.draws.failures, 8);
        // Fresh equal-weight replicate, unrelated seed.
        let ones = vec![1.0; ds.n()];
        let (stage, _) = bootstrap_replicate(&ds, &ones, &cfg, &run.fit.params, 123_456).unwrap();
        for (a, b) in stage.theta.iter().zip(&run.draws.theta_hat) {
            assert!((a - b).abs() < 1e-8);
        }
        // MR θ̂: type1 series equals the aggregate for J=1; ATT on employed 1/24.
        assert_eq!(run.draws.theta_hat.len(), 4);
        assert!((run.draws.theta_hat[1] - 1.0 / 24.0).abs() < 1e-9);
    }

    #[test]
    fn reweighting_moves_the_counterfactual_the_right_way() {
        let ds = mr_example();
        let cfg = mr_cfg();
        let ones = vec![1.0; ds.n()];
        let warm = single_type_frequencies(&ds, 1, cfg.eps, None).unwrap();
        let (base, _) = bootstrap_replicate(&ds, &ones, &cfg, &warm, 1).unwrap();
        // Double the weight on control units that stay unemployed (0→0).
        let zeta: Vec<f64> = (0..ds.n())
            .map(|i| {
                let stay_unemployed =
                    !ds.is_treated(i) && ds.outcome(i, 1) == 0 && ds.outcome(i, 2) == 0;
                if stay_unemployed {
                    2.0
                } else {
                    1.0
                }
            })
            .collect();
        let (tilted, _) = bootstrap_replicate(&ds, &zeta, &cfg, &warm, 2).unwrap();
        let cf_base = base.aggregate.periods[0].counterfactual.as_ref().unwrap()[1];
        let cf_tilted = tilted.aggregate.periods[0].counterfactual.as_ref().unwrap()[1];
        assert!(cf_tilted < cf_base);
        assert!(tilted.aggregate.periods[0].effect[1] > base.aggregate.periods[0].effect[1]);
        // Exact values: control 0→1 rate becomes 12/24, counterfactual 0.75.
        assert!((cf_tilted - 0.75).abs() < 1e-9);
        assert!((tilted.aggregate.periods[0].effect[1] - 0.125).abs() < 1e-9);
    }

    #[test]
    fn bootstrap_run_is_deterministic() {
        let ds = mr_example();
        let cfg = mr_cfg();
        let a = run_bootstrap(&ds, &cfg, 6, 5).unwrap();
        let b = run_bootstrap(&ds, &cfg, 6, 5).unwrap();
        assert_eq!(a, b);
        let c = run_bootstrap(&ds, &cfg, 6, 6).unwrap();
        assert_ne!(a.draws.draws, c.draws.draws);
    }

    fn toy_draws(rows: Vec<Vec<f64>>, theta_hat: Vec<f64>) -> BootstrapDraws {
        let sigma = column_sds(&rows);
        BootstrapDraws {
            b: rows.len(),
            theta_hat,
            draws: rows,
            sigma,
            failures: 0,
            seed: 0,
            pi_gaps: Vec::new(),
        }
    }

    #[test]
    fn covariance_matches_hand_computation() {
        let draws = toy_draws(vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![2.0, 3.0]);
        let v = covariance(&draws).unwrap();
        assert_eq!(v, vec![vec![2.0, 2.0], vec![2.0, 2.0]]);
        for (i, s) in draws.sigma.iter().enumerate() {
            assert!((v[i][i] - s * s).abs() < 1e-12);
        }
        // Quadratic forms stay nonnegative (Gram structure).
        for x in [[1.0, 0.0], [0.3, -0.7], [-2.0, 1.0]] {
            let q: f64 = (0..2)
                .flat_map(|i| (0..2).map(move |j| (i, j)))
                .map(|(i, j)| x[i] * v[i][j] * x[j])
                .sum();
            assert!(q >= -1e-10);
        }
        let same = toy_draws(vec![vec![1.0, 1.0]; 5], vec![1.0, 1.0]);
        let v0 = covariance(&same).unwrap();
        assert!(v0.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn band_construction_and_containment() {
        // 4 replicates around θ̂ = (0, 10); second coordinate never moves.
        let draws = toy_draws(
            vec![
                vec![-2.0, 10.0],
                vec![-1.0, 10.0],
                vec![1.0, 10.0],
                vec![2.0, 10.0],
            ],
            vec![0.0, 10.0],
        );
        let bands = uniform_bands(&draws, 0.05, &[0, 1]).unwrap();
        // σ₂ = 0 → degenerate band, excluded from the sup.
        assert_eq!(bands.coords[1].pw_lo, 10.0);
        assert_eq!(bands.coords[1].unif_hi, 10.0);
        let c0 = &bands.coords[0];
        assert!(c0.unif_lo <= c0.pw_lo && c0.pw_hi <= c0.unif_hi);
        assert!(c0.pw_lo < 0.0 && c0.pw_hi > 0.0);

        // Single-coordinate subset: uniform equals pointwise exactly.
        let single = uniform_bands(&draws, 0.2, &[0]).unwrap();
        let c = &single.coords[0];
        assert_eq!(c.pw_lo, c.unif_lo);
        assert_eq!(c.pw_hi, c.unif_hi);

        // Order-statistic convention: B=4, α=0.5 → rank ceil(2)=2 of sorted sups.
        let sups: Vec<f64> = draws
            .draws
            .iter()
            .map(|r| (r[0] / draws.sigma[0]).abs())
            .collect();
        let mut sorted = sups;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let half = uniform_bands(&draws, 0.5, &[0]).unwrap();
        assert_eq!(half.crit_value, sorted[1]);
    }

    #[test]
    fn band_errors() {
        let draws = toy_draws(vec![vec![0.0], vec![1.0]], vec![0.5]);
        assert!(matches!(
            uniform_bands(&draws, 0.0, &[0]).unwrap_err(),
            Error::Config(_)
        ));
        assert!(matches!(
            uniform_bands(&draws, 0.05, &[3]).unwrap_err(),
            Error::IndexOutOfRange { .. }
        ));
        let empty = toy_draws(vec![vec![0.0]], vec![0.0]);
        assert!(matches!(
            covariance(&empty).unwrap_err(),
            Error::InsufficientReplicates { have: 1 }
        ));
    }
}
