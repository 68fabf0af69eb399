//! Second-stage estimators on top of a fitted mixture: type-specific ATTs,
//! their aggregate, type-specific flow decompositions, and type-specific
//! pre-treatment transition diagnostics.
//!
//! Every sum over units is weighted by the posterior type probability τᵢʲ
//! (times an optional bootstrap weight ζᵢ), so with J=1 — where every τ is
//! 1 — each estimator collapses exactly to its nonparametric counterpart.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{HistoryKey, PanelDataset};
use crate::effects::{
    pre_transition_cells, EffectSeries, EmptyCellPolicy, FlowChannel, FlowDecomposition, Method,
    PeriodEffect, PreTrendLayer, PreTrendReport,
};
use crate::error::{Error, Result};
use crate::mixture::PosteriorMatrix;

/// Weighted-count threshold below which a cell counts as empty.
pub const WEIGHT_THRESHOLD: f64 = 1e-10;

fn check_posteriors(ds: &PanelDataset, posteriors: &PosteriorMatrix) -> Result<()> {
    if posteriors.n() != ds.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} posterior rows for {} units",
            posteriors.n(),
            ds.n()
        )));
    }
    Ok(())
}

/// Per-unit weights ζᵢ·τᵢʲ for one type.
fn unit_type_weights(
    ds: &PanelDataset,
    posteriors: &PosteriorMatrix,
    type_index: usize,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    check_posteriors(ds, posteriors)?;
    if type_index >= posteriors.n_types() {
        return Err(Error::IndexOutOfRange {
            index: type_index,
            bound: posteriors.n_types(),
        });
    }
    if let Some(w) = weights {
        if w.len() != ds.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} units",
                w.len(),
                ds.n()
            )));
        }
    }
    Ok((0..ds.n())
        .map(|i| posteriors.row(i)[type_index] * weights.map_or(1.0, |w| w[i]))
        .collect())
}

/// One conditioning history's weighted cell: τζ-masses and weighted means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedHistoryCell {
    pub history: HistoryKey,
    /// Share of treated τζ-mass on this history (renormalized after drops).
    pub weight: f64,
    pub effect: Vec<f64>,
    pub control_mean: Vec<f64>,
    pub treated_mass: f64,
    pub control_mass: f64,
}

#[derive(Default, Clone)]
struct Accum {
    treated_mass: f64,
    control_mass: f64,
    treated_sums: Vec<f64>,
    control_sums: Vec<f64>,
}

/// Weighted per-history comparison at one outcome period; mirrors the
/// unweighted cell construction so that all-ones weights reproduce it exactly.
fn weighted_history_cells(
    ds: &PanelDataset,
    unit_w: &[f64],
    lag: usize,
    anchor: usize,
    outcome_period: usize,
    policy: EmptyCellPolicy,
) -> Result<(Vec<WeightedHistoryCell>, f64)> {
    let k = ds.n_cats();
    let mut cells: BTreeMap<usize, Accum> = BTreeMap::new();
    for i in 0..ds.n() {
        let w = unit_w[i];
        if w == 0.0 {
            continue;
        }
        let code = ds.history_code(i, anchor, lag)?;
        let y = ds.outcome(i, outcome_period);
        let cell = cells.entry(code).or_insert_with(|| Accum {
            treated_sums: vec![0.0; k],
            control_sums: vec![0.0; k],
            ..Default::default()
        });
        if ds.is_treated(i) {
            cell.treated_mass += w;
            cell.treated_sums[y] += w;
        } else {
            cell.control_mass += w;
            cell.control_sums[y] += w;
        }
    }
    let treated_total: f64 = cells.values().map(|c| c.treated_mass).sum();
    if treated_total <= WEIGHT_THRESHOLD {
        return Err(Error::NoTreatedUnits);
    }
    let mut out = Vec::new();
    let mut dropped = 0.0;
    for (&code, cell) in &cells {
        if cell.treated_mass <= WEIGHT_THRESHOLD {
            continue;
        }
        let weight = cell.treated_mass / treated_total;
        if cell.control_mass <= WEIGHT_THRESHOLD {
            let history = HistoryKey::from_code(code, lag, k);
            match policy {
                EmptyCellPolicy::Error => {
                    return Err(Error::EmptyWeightedCell {
                        history: history.label(ds.alphabet()),
                        period: anchor,
                        arm: "control",
                    })
                }
                EmptyCellPolicy::Drop => {
                    dropped += weight;
                    continue;
                }
            }
        }
        let treated_mean: Vec<f64> = cell
            .treated_sums
            .iter()
            .map(|s| s / cell.treated_mass)
            .collect();
        let control_mean: Vec<f64> = cell
            .control_sums
            .iter()
            .map(|s| s / cell.control_mass)
            .collect();
        let effect = treated_mean
            .iter()
            .zip(&control_mean)
            .map(|(a, b)| a - b)
            .collect();
        out.push(WeightedHistoryCell {
            history: HistoryKey::from_code(code, lag, k),
            weight,
            effect,
            control_mean,
            treated_mass: cell.treated_mass,
            control_mass: cell.control_mass,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyWeightedCell {
            history: "*".into(),
            period: anchor,
            arm: "control",
        });
    }
    if dropped > 0.0 {
        let kept = 1.0 - dropped;
        for cell in &mut out {
            cell.weight /= kept;
        }
    }
    Ok((out, dropped))
}

/// Latent-type-specific ATT: the transition-based ATT with every sum weighted
/// by ζ·τʲ. Periods carry the type's counterfactual mean as well.
pub fn ltatt(
    ds: &PanelDataset,
    posteriors: &PosteriorMatrix,
    type_index: usize,
    lag: usize,
    policy: EmptyCellPolicy,
    weights: Option<&[f64]>,
) -> Result<EffectSeries> {
    if lag == 0 || lag > ds.t_pre() {
        return Err(Error::LagExceedsHistory {
            lag,
            anchor: ds.t_pre(),
        });
    }
    let unit_w = unit_type_weights(ds, posteriors, type_index, weights)?;
    let k = ds.n_cats();
    let mut periods = Vec::new();
    for t in ds.post_periods() {
        let (cells, _) = weighted_history_cells(ds, &unit_w, lag, ds.t_pre(), t, policy)?;
        let mut effect = vec![0.0; k];
        let mut counterfactual = vec![0.0; k];
        for cell in &cells {
            for j in 0..k {
                effect[j] += cell.weight * cell.effect[j];
                counterfactual[j] += cell.weight * cell.control_mean[j];
            }
        }
        periods.push(PeriodEffect {
            period: t,
            effect,
            counterfactual: Some(counterfactual),
        });
    }
    Ok(EffectSeries {
        method: Method::Mixture,
        lag,
        type_index: Some(type_index),
        periods,
    })
}

/// Treated-share weights ŵⱼ = Σᵢ ζᵢτᵢʲ·1{Dᵢ=1} / Σᵢ ζᵢ·1{Dᵢ=1}; sum to 1.
pub fn type_weights(
    ds: &PanelDataset,
    posteriors: &PosteriorMatrix,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    check_posteriors(ds, posteriors)?;
    let j = posteriors.n_types();
    let mut num = vec![0.0; j];
    let mut denom = 0.0;
    for i in 0..ds.n() {
        if !ds.is_treated(i) {
            continue;
        }
        let zeta = weights.map_or(1.0, |w| w[i]);
        denom += zeta;
        for (njj, tau) in num.iter_mut().zip(posteriors.row(i)) {
            *njj += zeta * tau;
        }
    }
    if denom <= WEIGHT_THRESHOLD {
        return Err(Error::NoTreatedUnits);
    }
    Ok(num.into_iter().map(|x| x / denom).collect())
}

/// Aggregate ATT: the ŵ-weighted combination of the per-type series.
pub fn att_aggregate(
    ds: &PanelDataset,
    posteriors: &PosteriorMatrix,
    ltatts: &[EffectSeries],
    weights: Option<&[f64]>,
) -> Result<EffectSeries> {
    if ltatts.len() != posteriors.n_types() {
        return Err(Error::DimensionMismatch(format!(
            "{} type series for {} types",
            ltatts.len(),
            posteriors.n_types()
        )));
    }
    let w = type_weights(ds, posteriors, weights)?;
    let k = ds.n_cats();
    let lag = ltatts.first().map_or(1, |s| s.lag);
    let mut periods = Vec::new();
    for (idx, t) in ds.post_periods().enumerate() {
        let mut effect = vec![0.0; k];
        let mut counterfactual = vec![0.0; k];
        for (series, &wj) in ltatts.iter().zip(&w) {
            let p = &series.periods[idx];
            if p.period != t {
                return Err(Error::DimensionMismatch(
                    "type series cover different periods".into(),
                ));
            }
            for j in 0..k {
                effect[j] += wj * p.effect[j];
                counterfactual[j] += wj * p.counterfactual.as_ref().expect("ltatt sets it")[j];
            }
        }
        periods.push(PeriodEffect {
            period: t,
            effect,
            counterfactual: Some(counterfactual),
        });
    }
    Ok(EffectSeries {
        method: Method::Mixture,
        lag,
        type_index: None,
        periods,
    })
}

/// The complete second stage for one fitted model: per-type series, their
/// aggregate, the type weights, and the flattened estimand vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondStage {
    pub type_weights: Vec<f64>,
    pub types: Vec<EffectSeries>,
    pub aggregate: EffectSeries,
    /// Flattened per the contract: (type 1..J, aggregate) × periods × categories.
    pub theta: Vec<f64>,
}

pub fn second_stage(
    ds: &PanelDataset,
    posteriors: &PosteriorMatrix,
    lag: usize,
    policy: EmptyCellPolicy,
    weights: Option<&[f64]>,
) -> Result<SecondStage> {
    let types: Vec<EffectSeries> = (0..posteriors.n_types())
        .map(|j| ltatt(ds, posteriors, j, lag, policy, weights))
        .collect::<Result<_>>()?;
    let aggregate = att_aggregate(ds, posteriors, &types, weights)?;
    let theta = assemble_theta(&types, &aggregate);
    Ok(SecondStage {
        type_weights: type_weights(ds, posteriors, weights)?,
        types,
        aggregate,
        theta,
    })
}

/// Flattens effect series into θ: series-major (types in label order, then the
/// aggregate), post periods ascending within a series, categories ascending
/// within a period. Length (J+1)·(T−T0)·K.
pub fn assemble_theta(ltatts: &[EffectSeries], aggregate: &EffectSeries) -> Vec<f64> {
    let mut theta = Vec::new();
    for series in ltatts.iter().chain(std::iter::once(aggregate)) {
        for p in &series.periods {
            theta.extend_from_slice(&p.effect);
        }
    }
    theta
}

/// Human-readable coordinate labels for θ, in flattening order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaCoord {
    /// "type1".."typeJ" or "aggregate".
    pub series: String,
    pub period: usize,
    pub category: usize,
}

pub fn theta_layout(n_types: usize, t_pre: usize, t_total: usize, k: usize) -> Vec<ThetaCoord> {
    let mut coords = Vec::with_capacity((n_types + 1) * (t_total - t_pre) * k);
    let labels = (1..=n_types)
        .map(|j| format!("type{j}"))
        .chain(std::iter::once("aggregate".into()));
    for series in labels {
        for period in t_pre + 1..=t_total {
            for category in 0..k {
                coords.push(ThetaCoord {
                    series: series.clone(),
                    period,
                    category,
                });
            }
        }
    }
    coords
}

/// Type-specific flow decomposition of a focal category's ATT (first-order
/// conditioning), all probabilities τζ-weighted.
pub fn type_flow_decomposition(
    ds: &PanelDataset,
    posteriors: &PosteriorMatrix,
    type_index: usize,
    focal: usize,
    t: usize,
    weights: Option<&[f64]>,
) -> Result<FlowDecomposition> {
    let k = ds.n_cats();
    if focal >= k {
        return Err(Error::IndexOutOfRange {
            index: focal,
            bound: k,
        });
    }
    if !ds.post_periods().contains(&t) {
        return Err(Error::IndexOutOfRange {
            index: t,
            bound: ds.t_total() + 1,
        });
    }
    let unit_w = unit_type_weights(ds, posteriors, type_index, weights)?;
    let t0 = ds.t_pre();
    let mut occupancy = vec![[0.0f64; 2]; k];
    let mut moves = vec![vec![[0.0f64; 2]; k]; k];
    for i in 0..ds.n() {
        let w = unit_w[i];
        if w == 0.0 {
            continue;
        }
        let arm = ds.is_treated(i) as usize;
        let from = ds.outcome(i, t0);
        occupancy[from][arm] += w;
        moves[from][ds.outcome(i, t)][arm] += w;
    }
    let treated_total: f64 = occupancy.iter().map(|o| o[1]).sum();
    if treated_total <= WEIGHT_THRESHOLD {
        return Err(Error::NoTreatedUnits);
    }
    for s in 0..k {
        if occupancy[s][1] > WEIGHT_THRESHOLD && occupancy[s][0] <= WEIGHT_THRESHOLD {
            return Err(Error::EmptyWeightedCell {
                history: ds.alphabet().label(s).to_string(),
                period: t0,
                arm: "control",
            });
        }
    }
    let share1: Vec<f64> = (0..k).map(|s| occupancy[s][1] / treated_total).collect();
    let prob = |from: usize, to: usize, arm: usize| -> f64 {
        if occupancy[from][arm] > WEIGHT_THRESHOLD {
            moves[from][to][arm] / occupancy[from][arm]
        } else {
            0.0
        }
    };
    let mut channels = Vec::new();
    for y in 0..k {
        if y == focal {
            continue;
        }
        let inflow = if occupancy[y][1] > WEIGHT_THRESHOLD {
            (prob(y, focal, 1) - prob(y, focal, 0)) * share1[y]
        } else {
            0.0
        };
        let outflow = if occupancy[focal][1] > WEIGHT_THRESHOLD {
            (prob(focal, y, 1) - prob(focal, y, 0)) * share1[focal]
        } else {
            0.0
        };
        channels.push(FlowChannel { state: y, inflow, outflow });
    }
    let net: f64 = channels.iter().map(|c| c.inflow - c.outflow).sum();
    let series = ltatt(ds, posteriors, type_index, 1, EmptyCellPolicy::Error, weights)?;
    let residual = series.at(t).expect("post period present").effect[focal] - net;
    Ok(FlowDecomposition {
        focal,
        period: t,
        type_index: Some(type_index),
        channels,
        net,
        residual,
    })
}

/// Pre-treatment transition diagnostics per latent type: the τζ-weighted arm
/// comparison of every pre-period transition probability.
pub fn type_pre_transitions(
    ds: &PanelDataset,
    posteriors: &PosteriorMatrix,
    weights: Option<&[f64]>,
) -> Result<PreTrendReport> {
    check_posteriors(ds, posteriors)?;
    if ds.t_pre() < 2 {
        return Ok(PreTrendReport {
            insufficient_pre_periods: true,
            layers: Vec::new(),
        });
    }
    let layers = (0..posteriors.n_types())
        .map(|j| {
            let uw = unit_type_weights(ds, posteriors, j, weights)?;
            Ok(PreTrendLayer {
                type_index: Some(j),
                cells: pre_transition_cells(ds, &uw),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PreTrendReport {
        insufficient_pre_periods: false,
        layers,
    })
}
