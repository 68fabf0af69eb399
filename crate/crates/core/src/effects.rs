//! Nonparametric (single-type) estimators: the transition-based ATT that
//! conditions on each treated unit's last ℓ pre-treatment outcomes, the
//! difference-in-differences comparator, the exact decomposition of the gap
//! between them, flow decompositions, the placebo estimate at the last
//! pre-treatment period, and pre-treatment transition diagnostics.
//!
//! All effects are differences of one-hot means, so a K-category effect vector
//! always sums to zero and K=2 is not a special case.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{HistoryKey, PanelDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ti,
    Did,
    Mixture,
}

/// What to do when a treated history has no control units carrying it: refuse
/// (common support is an identifying condition) or drop that treated mass and
/// renormalize, reporting how much was removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyCellPolicy {
    #[default]
    Error,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodEffect {
    #[serde(rename = "t")]
    pub period: usize,
    /// K-vector of effects on category shares; sums to 0.
    pub effect: Vec<f64>,
    /// Counterfactual mean outcome vector (in the simplex), when the method has one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counterfactual: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSeries {
    pub method: Method,
    pub lag: usize,
    /// Present on the per-latent-type layers of a mixture fit.
    #[serde(rename = "type", skip_serializing_if = "Option::is_none")]
    pub type_index: Option<usize>,
    /// Post periods T0+1..=T in ascending order.
    pub periods: Vec<PeriodEffect>,
}

impl EffectSeries {
    pub fn at(&self, period: usize) -> Option<&PeriodEffect> {
        self.periods.iter().find(|p| p.period == period)
    }
}

/// One conditioning history's cell in the matched comparison at some outcome
/// period: who carries it, and what each arm's mean outcome looks like.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryCell {
    pub history: HistoryKey,
    /// Share of treated units with this history (renormalized after drops).
    pub weight: f64,
    /// Treated mean minus control mean of the outcome vector.
    pub effect: Vec<f64>,
    pub control_mean: Vec<f64>,
    pub n_treated: usize,
    pub n_control: usize,
}

/// Counterfactual mean outcome for the treated at one post period, with the
/// per-history table it aggregates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterfactualMean {
    pub period: usize,
    /// Probability vector over categories.
    pub mean: Vec<f64>,
    pub cells: Vec<HistoryCell>,
    /// Treated probability mass removed under the drop policy.
    pub dropped_mass: f64,
}

fn check_arms(ds: &PanelDataset) -> Result<()> {
    let treated = ds.n_treated();
    if treated == 0 {
        return Err(Error::NoTreatedUnits);
    }
    if treated == ds.n() {
        return Err(Error::NoControlUnits);
    }
    Ok(())
}

#[derive(Default, Clone)]
struct CellAccum {
    n_treated: usize,
    n_control: usize,
    treated_counts: Vec<usize>,
    control_counts: Vec<usize>,
}

/// Per-history comparison of outcome-period means between arms, conditioning on
/// the length-`lag` history ending at `anchor`. The workhorse behind the
/// counterfactual mean, the ATT, the contribution table, and the placebo.
fn history_cells(
    ds: &PanelDataset,
    lag: usize,
    anchor: usize,
    outcome_period: usize,
    policy: EmptyCellPolicy,
) -> Result<(Vec<HistoryCell>, f64)> {
    let k = ds.n_cats();
    let mut cells: BTreeMap<usize, CellAccum> = BTreeMap::new();
    for i in 0..ds.n() {
        let code = ds.history_code(i, anchor, lag)?;
        let y = ds.outcome(i, outcome_period);
        let cell = cells.entry(code).or_insert_with(|| CellAccum {
            treated_counts: vec![0; k],
            control_counts: vec![0; k],
            ..Default::default()
        });
        if ds.is_treated(i) {
            cell.n_treated += 1;
            cell.treated_counts[y] += 1;
        } else {
            cell.n_control += 1;
            cell.control_counts[y] += 1;
        }
    }
    let n_treated_total = cells.values().map(|c| c.n_treated).sum::<usize>();
    debug_assert_eq!(n_treated_total, ds.n_treated());

    let mut out = Vec::new();
    let mut dropped = 0.0;
    for (&code, cell) in &cells {
        if cell.n_treated == 0 {
            continue;
        }
        let weight = cell.n_treated as f64 / n_treated_total as f64;
        if cell.n_control == 0 {
            let history = HistoryKey::from_code(code, lag, k);
            match policy {
                EmptyCellPolicy::Error => {
                    return Err(Error::EmptyControlCell {
                        history: history.label(ds.alphabet()),
                        period: anchor,
                    })
                }
                EmptyCellPolicy::Drop => {
                    dropped += weight;
                    continue;
                }
            }
        }
        let treated_mean: Vec<f64> = cell
            .treated_counts
            .iter()
            .map(|&c| c as f64 / cell.n_treated as f64)
            .collect();
        let control_mean: Vec<f64> = cell
            .control_counts
            .iter()
            .map(|&c| c as f64 / cell.n_control as f64)
            .collect();
        let effect = treated_mean
            .iter()
            .zip(&control_mean)
            .map(|(a, b)| a - b)
            .collect();
        out.push(HistoryCell {
            history: HistoryKey::from_code(code, lag, k),
            weight,
            effect,
            control_mean,
            n_treated: cell.n_treated,
            n_control: cell.n_control,
        });
    }
    if out.is_empty() {
        // Every treated history lacked control support; nothing to renormalize to.
        return Err(Error::EmptyControlCell {
            history: "*".into(),
            period: anchor,
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

fn check_lag(ds: &PanelDataset, lag: usize) -> Result<()> {
    if lag == 0 {
        return Err(Error::DimensionMismatch("lag must be ≥ 1".into()));
    }
    if lag > ds.t_pre() {
        return Err(Error::LagExceedsHistory {
            lag,
            anchor: ds.t_pre(),
        });
    }
    Ok(())
}

/// The control-law prediction of the treated group's outcome distribution at
/// post period `t`: control-arm conditional means pooled over the treated
/// history distribution.
pub fn conditional_counterfactual_mean(
    ds: &PanelDataset,
    lag: usize,
    t: usize,
    policy: EmptyCellPolicy,
) -> Result<CounterfactualMean> {
    check_arms(ds)?;
    check_lag(ds, lag)?;
    if !ds.post_periods().contains(&t) {
        return Err(Error::IndexOutOfRange {
            index: t,
            bound: ds.t_total() + 1,
        });
    }
    let (cells, dropped_mass) = history_cells(ds, lag, ds.t_pre(), t, policy)?;
    let mut mean = vec![0.0; ds.n_cats()];
    for cell in &cells {
        for (m, c) in mean.iter_mut().zip(&cell.control_mean) {
            *m += cell.weight * c;
        }
    }
    Ok(CounterfactualMean {
        period: t,
        mean,
        cells,
        dropped_mass,
    })
}

/// ATT under transition independence: per post period, the treated group's mean
/// outcome minus its history-matched counterfactual.
pub fn ti_att(ds: &PanelDataset, lag: usize, policy: EmptyCellPolicy) -> Result<EffectSeries> {
    check_arms(ds)?;
    check_lag(ds, lag)?;
    let mut periods = Vec::new();
    for t in ds.post_periods() {
        let (cells, _) = history_cells(ds, lag, ds.t_pre(), t, policy)?;
        let k = ds.n_cats();
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
        method: Method::Ti,
        lag,
        type_index: None,
        periods,
    })
}

/// Per-history contributions whose weighted sum is exactly the ATT at `t`.
pub fn history_contributions(
    ds: &PanelDataset,
    lag: usize,
    t: usize,
    policy: EmptyCellPolicy,
) -> Result<Vec<HistoryCell>> {
    check_arms(ds)?;
    check_lag(ds, lag)?;
    if !ds.post_periods().contains(&t) {
        return Err(Error::IndexOutOfRange {
            index: t,
            bound: ds.t_total() + 1,
        });
    }
    Ok(history_cells(ds, lag, ds.t_pre(), t, policy)?.0)
}

fn arm_mean(ds: &PanelDataset, t: usize, treated: bool) -> Vec<f64> {
    let k = ds.n_cats();
    let mut counts = vec![0usize; k];
    let mut n = 0usize;
    for i in 0..ds.n() {
        if ds.is_treated(i) == treated {
            counts[ds.outcome(i, t)] += 1;
            n += 1;
        }
    }
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

/// Difference-in-differences on category shares: change from the last
/// pre-treatment period, differenced between arms.
pub fn did_att(ds: &PanelDataset) -> Result<EffectSeries> {
    check_arms(ds)?;
    let t0 = ds.t_pre();
    let base_treated = arm_mean(ds, t0, true);
    let base_control = arm_mean(ds, t0, false);
    let mut periods = Vec::new();
    for t in ds.post_periods() {
        let mt = arm_mean(ds, t, true);
        let mc = arm_mean(ds, t, false);
        let effect = (0..ds.n_cats())
            .map(|k| (mt[k] - base_treated[k]) - (mc[k] - base_control[k]))
            .collect();
        periods.push(PeriodEffect {
            period: t,
            effect,
            counterfactual: None,
        });
    }
    Ok(EffectSeries {
        method: Method::Did,
        lag: 0,
        type_index: None,
        periods,
    })
}

/// The bias the parallel-trends comparison carries when transitions, not trends,
/// are common: control-arm mean trends weighted by the treated-minus-control
/// gap in history frequencies. Equals `did_att − ti_att` exactly on data with
/// full common support at the same lag.
pub fn did_bias(
    ds: &PanelDataset,
    lag: usize,
    policy: EmptyCellPolicy,
) -> Result<Vec<PeriodEffect>> {
    check_arms(ds)?;
    check_lag(ds, lag)?;
    let k = ds.n_cats();
    let anchor = ds.t_pre();

    // Arm-specific history counts and, per outcome period, control conditional means.
    let mut treated_counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut control_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..ds.n() {
        let code = ds.history_code(i, anchor, lag)?;
        if ds.is_treated(i) {
            *treated_counts.entry(code).or_default() += 1;
        } else {
            *control_counts.entry(code).or_default() += 1;
        }
    }
    let n1: usize = treated_counts.values().sum();
    let n0: usize = control_counts.values().sum();

    // Treated mass on histories without control support, per policy.
    let mut dropped = 0.0;
    for (&code, &c1) in &treated_counts {
        if !control_counts.contains_key(&code) {
            let history = HistoryKey::from_code(code, lag, k).label(ds.alphabet());
            match policy {
                EmptyCellPolicy::Error => {
                    return Err(Error::EmptyControlCell {
                        history,
                        period: anchor,
                    })
                }
                EmptyCellPolicy::Drop => dropped += c1 as f64 / n1 as f64,
            }
        }
    }
    let kept = 1.0 - dropped;
    if kept <= 0.0 {
        return Err(Error::EmptyControlCell {
            history: "*".into(),
            period: anchor,
        });
    }

    let mut periods = Vec::new();
    for t in ds.post_periods() {
        // Control mean of X_t within each control-occupied history.
        let mut sums: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..ds.n() {
            if ds.is_treated(i) {
                continue;
            }
            let code = ds.history_code(i, anchor, lag)?;
            sums.entry(code).or_insert_with(|| vec![0; k])[ds.outcome(i, t)] += 1;
        }
        let mut effect = vec![0.0; k];
        for (&code, counts) in &sums {
            let n_c = control_counts[&code];
            let p1 = treated_counts
                .get(&code)
                .map(|&c| c as f64 / n1 as f64 / kept)
                .unwrap_or(0.0);
            let p0 = n_c as f64 / n0 as f64;
            let gap = p1 - p0;
            let last_state = HistoryKey::from_code(code, lag, k).states[lag - 1];
            for j in 0..k {
                let trend = counts[j] as f64 / n_c as f64 - if j == last_state { 1.0 } else { 0.0 };
                effect[j] += trend * gap;
            }
        }
        periods.push(PeriodEffect {
            period: t,
            effect,
            counterfactual: None,
        });
    }
    Ok(periods)
}

/// One inflow/outflow channel of a focal category's ATT.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowChannel {
    /// The non-focal state the flow comes from / goes to.
    pub state: usize,
    pub inflow: f64,
    pub outflow: f64,
}

/// A focal category's ATT split into treatment-induced inflows from and
/// outflows to every other state (first-order conditioning).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowDecomposition {
    pub focal: usize,
    pub period: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub type_index: Option<usize>,
    pub channels: Vec<FlowChannel>,
    /// Σ inflows − Σ outflows; equals the focal ATT component.
    pub net: f64,
    /// Focal ATT component minus `net`; zero up to rounding.
    pub residual: f64,
}

/// Transition frequencies from the last pre-treatment state, per arm.
fn first_order_transitions(
    ds: &PanelDataset,
    t: usize,
) -> Result<(Vec<f64>, Vec<Option<Vec<f64>>>, Vec<Option<Vec<f64>>>)> {
    let k = ds.n_cats();
    let t0 = ds.t_pre();
    let mut counts = vec![[0usize; 2]; k]; // per state: [control, treated] conditioning counts
    let mut trans = vec![vec![[0usize; 2]; k]; k]; // [from][to][arm]
    let n1 = ds.n_treated() as f64;
    for i in 0..ds.n() {
        let from = ds.outcome(i, t0);
        let to = ds.outcome(i, t);
        let arm = ds.is_treated(i) as usize;
        counts[from][arm] += 1;
        trans[from][to][arm] += 1;
    }
    let share1: Vec<f64> = (0..k).map(|s| counts[s][1] as f64 / n1).collect();
    let row = |from: usize, arm: usize| -> Option<Vec<f64>> {
        let n = counts[from][arm];
        (n > 0).then(|| (0..k).map(|to| trans[from][to][arm] as f64 / n as f64).collect())
    };
    let control: Vec<Option<Vec<f64>>> = (0..k).map(|s| row(s, 0)).collect();
    let treated: Vec<Option<Vec<f64>>> = (0..k).map(|s| row(s, 1)).collect();
    // Every state carrying treated mass needs a control law to compare against.
    for s in 0..k {
        if counts[s][1] > 0 && control[s].is_none() {
            return Err(Error::EmptyControlCell {
                history: ds.alphabet().label(s).to_string(),
                period: t0,
            });
        }
    }
    Ok((share1, control, treated))
}

/// Splits category `focal`'s ATT at post period `t` into flow channels.
pub fn flow_decomposition(ds: &PanelDataset, focal: usize, t: usize) -> Result<FlowDecomposition> {
    check_arms(ds)?;
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
    let (share1, control, treated) = first_order_transitions(ds, t)?;
    let prob = |rows: &[Option<Vec<f64>>], from: usize, to: usize| -> f64 {
        rows[from].as_ref().map(|r| r[to]).unwrap_or(0.0)
    };
    let mut channels = Vec::new();
    for y in 0..k {
        if y == focal {
            continue;
        }
        let inflow = if share1[y] > 0.0 {
            (prob(&treated, y, focal) - prob(&control, y, focal)) * share1[y]
        } else {
            0.0
        };
        let outflow = if share1[focal] > 0.0 {
            (prob(&treated, focal, y) - prob(&control, focal, y)) * share1[focal]
        } else {
            0.0
        };
        channels.push(FlowChannel { state: y, inflow, outflow });
    }
    let net: f64 = channels.iter().map(|c| c.inflow - c.outflow).sum();
    let att = ti_att(ds, 1, EmptyCellPolicy::Error)?;
    let residual = att.at(t).expect("post period present").effect[focal] - net;
    Ok(FlowDecomposition {
        focal,
        period: t,
        type_index: None,
        channels,
        net,
        residual,
    })
}

/// ATT machinery aimed at the last pre-treatment period, where the true effect
/// is zero: outcome period T0, conditioning histories ending at T0−1.
pub fn placebo_att(
    ds: &PanelDataset,
    lag: usize,
    policy: EmptyCellPolicy,
) -> Result<PeriodEffect> {
    check_arms(ds)?;
    let t0 = ds.t_pre();
    if lag == 0 {
        return Err(Error::DimensionMismatch("lag must be ≥ 1".into()));
    }
    if t0 < lag + 1 {
        return Err(Error::InsufficientPrePeriods {
            t_pre: t0,
            needed: lag + 1,
        });
    }
    let (cells, _) = history_cells(ds, lag, t0 - 1, t0, policy)?;
    let k = ds.n_cats();
    let mut effect = vec![0.0; k];
    let mut counterfactual = vec![0.0; k];
    for cell in &cells {
        for j in 0..k {
            effect[j] += cell.weight * cell.effect[j];
            counterfactual[j] += cell.weight * cell.control_mean[j];
        }
    }
    Ok(PeriodEffect {
        period: t0,
        effect,
        counterfactual: Some(counterfactual),
    })
}

/// One pre-treatment transition cell: the arms' conditional transition
/// probabilities and their difference. `None` marks an arm with no units in
/// the conditioning state — flagged, never fabricated as zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreTrendCell {
    pub period: usize,
    pub from: usize,
    pub to: usize,
    pub p_treated: Option<f64>,
    pub p_control: Option<f64>,
    /// p_treated − p_control when both arms have the conditioning state.
    pub diff: Option<f64>,
    /// Conditioning-state occupancy per arm (weighted counts under type weights).
    pub n_treated: f64,
    pub n_control: f64,
    /// Optional bootstrap band around `diff`, filled by callers that have one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreTrendLayer {
    /// `None` for the aggregate (single-type) report.
    #[serde(rename = "type", skip_serializing_if = "Option::is_none")]
    pub type_index: Option<usize>,
    pub cells: Vec<PreTrendCell>,
}

/// Pre-treatment transition comparison between arms — the testable implication
/// of transition independence on observed pre-period data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreTrendReport {
    /// True when T0 < 2 leaves no pre-treatment transitions to compare.
    pub insufficient_pre_periods: bool,
    pub layers: Vec<PreTrendLayer>,
}

/// Weighted pre-treatment transition cells; `weight[i]` scales unit i's counts.
/// The unweighted report uses all-ones; type-specific reports pass posteriors.
pub(crate) fn pre_transition_cells(ds: &PanelDataset, weight: &[f64]) -> Vec<PreTrendCell> {
    let k = ds.n_cats();
    let mut cells = Vec::new();
    for t in 2..=ds.t_pre() {
        // occupancy[from][arm], moves[from][to][arm]
        let mut occupancy = vec![[0.0f64; 2]; k];
        let mut moves = vec![vec![[0.0f64; 2]; k]; k];
        for i in 0..ds.n() {
            let w = weight[i];
            if w == 0.0 {
                continue;
            }
            let arm = ds.is_treated(i) as usize;
            let from = ds.outcome(i, t - 1);
            occupancy[from][arm] += w;
            moves[from][ds.outcome(i, t)][arm] += w;
        }
        for from in 0..k {
            for to in 0..k {
                let p = |arm: usize| -> Option<f64> {
                    (occupancy[from][arm] > 0.0).then(|| moves[from][to][arm] / occupancy[from][arm])
                };
                let (p_control, p_treated) = (p(0), p(1));
                cells.push(PreTrendCell {
                    period: t,
                    from,
                    to,
                    p_treated,
                    p_control,
                    diff: match (p_treated, p_control) {
                        (Some(a), Some(b)) => Some(a - b),
                        _ => None,
                    },
                    n_treated: occupancy[from][1],
                    n_control: occupancy[from][0],
                    band: None,
                });
            }
        }
    }
    cells
}

/// Arm differences of every pre-treatment transition probability, per period
/// and conditioning state.
pub fn pre_transition_differences(ds: &PanelDataset) -> PreTrendReport {
    if ds.t_pre() < 2 {
        return PreTrendReport {
            insufficient_pre_periods: true,
            layers: Vec::new(),
        };
    }
    let ones = vec![1.0; ds.n()];
    PreTrendReport {
        insufficient_pre_periods: false,
        layers: vec![PreTrendLayer {
            type_index: None,
            cells: pre_transition_cells(ds, &ones),
        }],
    }
}
