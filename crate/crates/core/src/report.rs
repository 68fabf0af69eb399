//! Serializable result views shared by the CLI and the C ABI, so both front
//! ends emit the same JSON for the same computation.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::PanelDataset;
use crate::effects::{flow_decomposition, EffectSeries, FlowChannel, FlowDecomposition, PeriodEffect};
use crate::error::Result;
use crate::inference::{uniform_bands, BootstrapDraws};
use crate::mixture::{EmFit, MarkovMixtureParams};
use crate::mixture_effects::{theta_layout, type_flow_decomposition, type_weights, SecondStage};

/// Shape of a loaded panel, with no estimation attached.
#[derive(Debug, Clone, Serialize)]
pub struct PanelSummary {
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub t_total: usize,
    pub t_pre: usize,
    pub n_categories: usize,
    pub labels: Vec<String>,
    pub n_clusters: Option<usize>,
    pub cohorts: Vec<usize>,
}

pub fn panel_summary(ds: &PanelDataset) -> PanelSummary {
    PanelSummary {
        n: ds.n(),
        n_treated: ds.n_treated(),
        n_control: ds.n() - ds.n_treated(),
        t_total: ds.t_total(),
        t_pre: ds.t_pre(),
        n_categories: ds.n_cats(),
        labels: ds.alphabet().labels().to_vec(),
        n_clusters: ds.clusters().map(|c| c.len()),
        cohorts: ds.cohort_values(),
    }
}

/// Second-stage effects under the names downstream consumers expect.
#[derive(Serialize)]
pub struct MixtureEffectsReport<'a> {
    pub weights: &'a [f64],
    pub types: &'a [EffectSeries],
    pub aggregate: &'a EffectSeries,
    pub theta: &'a [f64],
}

impl<'a> MixtureEffectsReport<'a> {
    pub fn new(stage: &'a SecondStage) -> Self {
        Self {
            weights: &stage.type_weights,
            types: &stage.types,
            aggregate: &stage.aggregate,
            theta: &stage.theta,
        }
    }
}

/// Fitted mixture plus its second-stage effects.
#[derive(Serialize)]
pub struct MixtureFitReport<'a> {
    pub params: &'a MarkovMixtureParams,
    pub loglik: f64,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub weights: &'a [f64],
    pub types: &'a [EffectSeries],
    pub aggregate: &'a EffectSeries,
    pub theta: &'a [f64],
}

impl<'a> MixtureFitReport<'a> {
    pub fn new(ds: &PanelDataset, fit: &'a EmFit, stage: &'a SecondStage) -> Self {
        Self {
            params: &fit.params,
            loglik: fit.loglik(),
            bic: crate::mixture::bic(ds, fit),
            converged: fit.converged,
            iterations: fit.iterations,
            weights: &stage.type_weights,
            types: &stage.types,
            aggregate: &stage.aggregate,
            theta: &stage.theta,
        }
    }
}

/// One bootstrap band coordinate, labeled for direct emission.
#[derive(Debug, Clone, Serialize)]
pub struct BandRow {
    pub series: String,
    pub period: usize,
    pub category: String,
    pub estimate: f64,
    pub se: f64,
    pub pw_lo: f64,
    pub pw_hi: f64,
    pub unif_lo: f64,
    pub unif_hi: f64,
    pub crit_value: f64,
}

/// Sup-t bands per series, flattened into layout order. Returns the critical
/// value per series alongside the rows.
pub fn band_rows(
    ds: &PanelDataset,
    draws: &BootstrapDraws,
    n_types: usize,
    alpha: f64,
) -> Result<(BTreeMap<String, f64>, Vec<BandRow>)> {
    let layout = theta_layout(n_types, ds.t_pre(), ds.t_total(), ds.n_cats());
    let mut series_names: Vec<&String> = Vec::new();
    for coord in &layout {
        if series_names.last() != Some(&&coord.series) {
            series_names.push(&coord.series);
        }
    }
    let mut crit_values = BTreeMap::new();
    let mut rows = Vec::with_capacity(layout.len());
    for series in series_names {
        let subset: Vec<usize> = layout
            .iter()
            .enumerate()
            .filter(|(_, c)| &c.series == series)
            .map(|(i, _)| i)
            .collect();
        let bands = uniform_bands(draws, alpha, &subset)?;
        crit_values.insert(series.clone(), bands.crit_value);
        for coord in &bands.coords {
            let at = &layout[coord.index];
            rows.push(BandRow {
                series: at.series.clone(),
                period: at.period,
                category: ds.alphabet().label(at.category).to_string(),
                estimate: coord.estimate,
                se: coord.se,
                pw_lo: coord.pw_lo,
                pw_hi: coord.pw_hi,
                unif_lo: coord.unif_lo,
                unif_hi: coord.unif_hi,
                crit_value: bands.crit_value,
            });
        }
    }
    Ok((crit_values, rows))
}

/// Bootstrap run header: sizes, seed, spread, and diagnostics.
#[derive(Serialize)]
pub struct BootstrapSummary<'a> {
    pub b: usize,
    pub seed: u64,
    pub alpha: f64,
    pub failures: usize,
    pub weights: &'a [f64],
    pub theta_hat: &'a [f64],
    pub sigma: &'a [f64],
    /// Sup-t critical value per series, keyed "type1".."typeJ", "aggregate".
    pub crit_values: BTreeMap<String, f64>,
    /// Smallest adjacent pi gap per replicate (label-switching diagnostic).
    pub pi_gaps: &'a [f64],
}

#[derive(Serialize)]
pub struct PlaceboReport {
    pub lag: usize,
    pub placebo: PeriodEffect,
}

/// Flow decompositions for every post period: the aggregate series first
/// (type_index absent), then each type's series when a mixture fit is given.
/// The companion type weights come back with the series.
pub fn flow_series(
    ds: &PanelDataset,
    fit: Option<&EmFit>,
    focal: usize,
) -> Result<(Option<Vec<f64>>, Vec<FlowDecomposition>)> {
    match fit {
        None => {
            let flows: Vec<FlowDecomposition> = ds
                .post_periods()
                .map(|t| flow_decomposition(ds, focal, t))
                .collect::<Result<_>>()?;
            Ok((None, flows))
        }
        Some(fit) => {
            let n_types = fit.params.n_types;
            let w = type_weights(ds, &fit.posteriors, None)?;
            let mut per_type: Vec<Vec<FlowDecomposition>> = Vec::with_capacity(n_types);
            for j in 0..n_types {
                per_type.push(
                    ds.post_periods()
                        .map(|t| type_flow_decomposition(ds, &fit.posteriors, j, focal, t, None))
                        .collect::<Result<_>>()?,
                );
            }
            let mut all = Vec::new();
            for (idx, t) in ds.post_periods().enumerate() {
                let at_t: Vec<&FlowDecomposition> = per_type.iter().map(|f| &f[idx]).collect();
                all.push(aggregate_flow(&at_t, &w, focal, t));
            }
            for flows in per_type {
                all.extend(flows);
            }
            Ok((Some(w), all))
        }
    }
}

/// Treated-type-share-weighted combination of per-type flows; its net plus
/// residual reproduces the aggregate ATT in the focal category.
fn aggregate_flow(at_t: &[&FlowDecomposition], weights: &[f64], focal: usize, t: usize) -> FlowDecomposition {
    let channels: Vec<FlowChannel> = at_t[0]
        .channels
        .iter()
        .enumerate()
        .map(|(c, base)| FlowChannel {
            state: base.state,
            inflow: at_t.iter().zip(weights).map(|(f, w)| w * f.channels[c].inflow).sum(),
            outflow: at_t.iter().zip(weights).map(|(f, w)| w * f.channels[c].outflow).sum(),
        })
        .collect();
    let net: f64 = channels.iter().map(|c| c.inflow - c.outflow).sum();
    let att: f64 = at_t.iter().zip(weights).map(|(f, w)| w * (f.net + f.residual)).sum();
    FlowDecomposition {
        focal,
        period: t,
        type_index: None,
        channels,
        net,
        residual: att - net,
    }
}

#[derive(Serialize)]
pub struct FlowReport<'a> {
    pub focal: usize,
    pub focal_label: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<&'a [f64]>,
    pub decompositions: &'a [FlowDecomposition],
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp;
    use crate::effects::EmptyCellPolicy;
    use crate::mixture::{multistart_fit, MultistartSchedule};
    use crate::mixture_effects::second_stage;

    #[test]
    fn aggregate_flow_net_matches_aggregate_att() {
        let (ds, _) = dgp::simulate(&dgp::two_type_spec(600, 5)).unwrap();
        let schedule = MultistartSchedule {
            n_short: 30,
            n_long: 3,
            ..MultistartSchedule::default()
        };
        let fit = multistart_fit(&ds, 2, 1, &schedule, 1, None, 1e-6).unwrap();
        let stage = second_stage(&ds, &fit.posteriors, 1, EmptyCellPolicy::Error, None).unwrap();
        let focal = 2;
        let (weights, flows) = flow_series(&ds, Some(&fit), focal).unwrap();
        let weights = weights.unwrap();
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let aggregates: Vec<&FlowDecomposition> =
            flows.iter().filter(|f| f.type_index.is_none()).collect();
        let n_post = ds.t_total() - ds.t_pre();
        assert_eq!(aggregates.len(), n_post);
        assert_eq!(flows.len(), n_post * 3);
        for flow in aggregates {
            let att = stage.aggregate.at(flow.period).unwrap().effect[focal];
            assert!((flow.net + flow.residual - att).abs() < 1e-10);
        }
    }

    #[test]
    fn band_rows_tile_the_layout_per_series() {
        let (ds, _) = dgp::simulate(&dgp::null_spec(300, 2)).unwrap();
        let cfg = crate::inference::EstimationConfig::new(1, 1);
        let run = crate::inference::run_bootstrap(&ds, &cfg, 20, 3).unwrap();
        let (crit, rows) = band_rows(&ds, &run.draws, 1, 0.05).unwrap();
        assert_eq!(crit.len(), 2); // type1 + aggregate
        let n_post = ds.t_total() - ds.t_pre();
        assert_eq!(rows.len(), 2 * n_post * ds.n_cats());
        for row in &rows {
            assert!(row.pw_lo <= row.estimate && row.estimate <= row.pw_hi);
            assert!(row.unif_lo <= row.pw_lo && row.pw_hi <= row.unif_hi);
            assert_eq!(row.crit_value, crit[&row.series]);
        }
    }
}
