//! Cohort-specific ATT estimation under staggered adoption: each treatment
//! cohort g (the period its units first receive treatment; 0 = never treated)
//! is compared, history-matched, against never-treated and/or not-yet-treated
//! cohorts, and the cohort effects aggregate by adoption shares.
//!
//! The counterfactual transition law pools the control cohorts' conditional
//! means with global cohort-share weights. A history can be unobserved in some
//! control cohort; the pooling then renormalizes over the cohorts that carry
//! it, and the cell reports how many histories needed that adjustment.
//!
//! Estimation here is nonparametric (no latent types).

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{HistoryKey, PanelDataset};
use crate::error::{Error, Result};

/// Which cohorts may serve as controls for cohort g at period t: the
/// never-treated cohort, the not-yet-treated cohorts {g′ > t}, or their union.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Never,
    NotYet,
    Both,
}

impl std::fmt::Display for ControlMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControlMode::Never => "never",
            ControlMode::NotYet => "not_yet",
            ControlMode::Both => "both",
        })
    }
}

impl FromStr for ControlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "never" => Ok(ControlMode::Never),
            "not_yet" => Ok(ControlMode::NotYet),
            "both" => Ok(ControlMode::Both),
            _ => Err(Error::Config(format!(
                "control mode {s:?} is not one of never, not_yet, both"
            ))),
        }
    }
}

/// One cohort-by-period comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortCell {
    #[serde(rename = "g")]
    pub cohort: usize,
    #[serde(rename = "t")]
    pub period: usize,
    /// K-vector effect on category shares; sums to 0.
    pub effect: Vec<f64>,
    /// Counterfactual mean outcome of the cohort (in the simplex).
    pub counterfactual: Vec<f64>,
    /// Control cohorts pooled into the counterfactual, ascending.
    pub control_cohorts: Vec<usize>,
    pub n_treated: usize,
    pub n_control: usize,
    /// Histories missing from some control cohort, where the pooling weights
    /// were renormalized over the cohorts with support.
    pub renormalized_histories: usize,
}

/// Share of one adopted cohort in an aggregate row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortWeight {
    #[serde(rename = "g")]
    pub cohort: usize,
    pub weight: f64,
}

/// Cohort-share-weighted average effect at one period, over the cohorts
/// already treated by then.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    #[serde(rename = "t")]
    pub period: usize,
    pub effect: Vec<f64>,
    /// Adoption shares among cohorts with g ≤ t; sum to 1.
    pub weights: Vec<CohortWeight>,
}

/// Every estimable cohort-by-period cell plus the per-period aggregates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortEffectTable {
    pub mode: ControlMode,
    pub lag: usize,
    /// Latest period with any control group available.
    pub last_period: usize,
    /// Ordered by (cohort, period); cells whose control set is empty are
    /// omitted.
    pub entries: Vec<CohortCell>,
    /// Ordered by period; a period appears only when every adopted cohort has
    /// an entry there.
    pub aggregate: Vec<AggregateRow>,
}

/// Adoption-period cohorts present in the data (0 excluded), ascending.
fn treated_cohorts(ds: &PanelDataset) -> Result<Vec<usize>> {
    if !ds.has_cohorts() {
        return Err(Error::MissingColumn("cohort".into()));
    }
    let gs: Vec<usize> = ds.cohort_values().into_iter().filter(|&g| g != 0).collect();
    if gs.is_empty() {
        return Err(Error::NoTreatedUnits);
    }
    Ok(gs)
}

fn has_never_treated(ds: &PanelDataset) -> bool {
    ds.cohort_values().first() == Some(&0)
}

/// The latest period at which any control group can exist: T when a
/// never-treated cohort is present, otherwise one period before the last
/// adoption (from then on every unit is treated).
pub fn latest_estimable_period(ds: &PanelDataset) -> Result<usize> {
    let gs = treated_cohorts(ds)?;
    Ok(if has_never_treated(ds) {
        ds.t_total()
    } else {
        gs[gs.len() - 1] - 1
    })
}

/// The control cohorts for cohort `g` at period `t` under `mode`, ascending.
pub fn control_set(
    ds: &PanelDataset,
    g: usize,
    t: usize,
    mode: ControlMode,
) -> Result<Vec<usize>> {
    let gs = treated_cohorts(ds)?;
    if !gs.contains(&g) {
        return Err(Error::Config(format!("no treatment cohort adopts at {g}")));
    }
    if t < g || t > ds.t_total() {
        return Err(Error::IndexOutOfRange {
            index: t,
            bound: ds.t_total() + 1,
        });
    }
    let mut set = Vec::new();
    if matches!(mode, ControlMode::Never | ControlMode::Both) && has_never_treated(ds) {
        set.push(0);
    }
    if matches!(mode, ControlMode::NotYet | ControlMode::Both) {
        set.extend(gs.iter().copied().filter(|&g2| g2 > t));
    }
    if set.is_empty() {
        return Err(Error::EmptyControlSet {
            cohort: g,
            period: t,
        });
    }
    Ok(set)
}

#[derive(Clone, Default)]
struct CohortCellAccum {
    n_treated: usize,
    treated_counts: Vec<usize>,
    /// control cohort → (units with this history, outcome counts at t)
    control: BTreeMap<usize, (usize, Vec<usize>)>,
}

/// Effect of adoption at `g` on cohort g's period-`t` outcome distribution:
/// observed mean minus the counterfactual built from the control cohorts'
/// transition laws, conditioning on the `lag` outcomes ending at g−1.
pub fn cohort_att(
    ds: &PanelDataset,
    g: usize,
    t: usize,
    lag: usize,
    mode: ControlMode,
) -> Result<CohortCell> {
    let controls = control_set(ds, g, t, mode)?;
    let anchor = g - 1;
    if lag == 0 {
        return Err(Error::DimensionMismatch("lag must be ≥ 1".into()));
    }
    if lag > anchor {
        return Err(Error::LagExceedsHistory { lag, anchor });
    }
    let k = ds.n_cats();
    let mut cohort_sizes: BTreeMap<usize, usize> = controls.iter().map(|&g2| (g2, 0)).collect();
    let mut cells: BTreeMap<usize, CohortCellAccum> = BTreeMap::new();
    for i in 0..ds.n() {
        let gi = ds.cohort(i).expect("cohorts checked present");
        let is_focal = gi == g;
        if !is_focal && !cohort_sizes.contains_key(&gi) {
            continue;
        }
        let code = ds.history_code_unchecked(i, anchor, lag);
        let y = ds.outcome(i, t);
        let cell = cells.entry(code).or_insert_with(|| CohortCellAccum {
            treated_counts: vec![0; k],
            ..Default::default()
        });
        if is_focal {
            cell.n_treated += 1;
            cell.treated_counts[y] += 1;
        } else {
            *cohort_sizes.get_mut(&gi).expect("control cohort") += 1;
            let (n, counts) = cell
                .control
                .entry(gi)
                .or_insert_with(|| (0, vec![0; k]));
            *n += 1;
            counts[y] += 1;
        }
    }
    let n_treated: usize = cells.values().map(|c| c.n_treated).sum();
    let n_control: usize = cohort_sizes.values().sum();
    debug_assert!(n_treated > 0, "cohort {g} came from cohort_values");
    // Global pooling weights: each control cohort's share of the control sample.
    let share: BTreeMap<usize, f64> = cohort_sizes
        .iter()
        .map(|(&g2, &n)| (g2, n as f64 / n_control as f64))
        .collect();

    let mut effect = vec![0.0; k];
    let mut counterfactual = vec![0.0; k];
    let mut renormalized_histories = 0;
    for (&code, cell) in &cells {
        if cell.n_treated == 0 {
            continue;
        }
        let weight = cell.n_treated as f64 / n_treated as f64;
        if cell.control.is_empty() {
            return Err(Error::EmptyControlCell {
                history: HistoryKey::from_code(code, lag, k).label(ds.alphabet()),
                period: t,
            });
        }
        if cell.control.len() < controls.len() {
            renormalized_histories += 1;
        }
        let renorm: f64 = cell.control.keys().map(|g2| share[g2]).sum();
        let mut cf = vec![0.0; k];
        for (g2, (n, counts)) in &cell.control {
            let w = share[g2] / renorm;
            for (c, &count) in cf.iter_mut().zip(counts) {
                *c += w * (count as f64 / *n as f64);
            }
        }
        for j in 0..k {
            let treated_mean = cell.treated_counts[j] as f64 / cell.n_treated as f64;
            effect[j] += weight * (treated_mean - cf[j]);
            counterfactual[j] += weight * cf[j];
        }
    }
    Ok(CohortCell {
        cohort: g,
        period: t,
        effect,
        counterfactual,
        control_cohorts: controls,
        n_treated,
        n_control,
        renormalized_histories,
    })
}

fn cohort_size(ds: &PanelDataset, g: usize) -> usize {
    (0..ds.n()).filter(|&i| ds.cohort(i) == Some(g)).count()
}

fn combine(adopted: &[usize], sizes: &[usize], cells: &[&CohortCell], k: usize) -> AggregateRow {
    let total: usize = sizes.iter().sum();
    let mut effect = vec![0.0; k];
    let mut weights = Vec::with_capacity(adopted.len());
    for ((&g, &size), cell) in adopted.iter().zip(sizes).zip(cells) {
        let w = size as f64 / total as f64;
        for (e, x) in effect.iter_mut().zip(&cell.effect) {
            *e += w * x;
        }
        weights.push(CohortWeight { cohort: g, weight: w });
    }
    AggregateRow {
        period: cells[0].period,
        effect,
        weights,
    }
}

/// Average effect at period `t` over the cohorts treated by then, weighted by
/// their adoption shares.
pub fn aggregate_staggered(
    ds: &PanelDataset,
    t: usize,
    lag: usize,
    mode: ControlMode,
) -> Result<AggregateRow> {
    let gs = treated_cohorts(ds)?;
    let adopted: Vec<usize> = gs.into_iter().filter(|&g| g <= t).collect();
    if adopted.is_empty() {
        return Err(Error::Config(format!(
            "no treatment cohort has adopted by period {t}"
        )));
    }
    let cells = adopted
        .iter()
        .map(|&g| cohort_att(ds, g, t, lag, mode))
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = adopted.iter().map(|&g| cohort_size(ds, g)).collect();
    let refs: Vec<&CohortCell> = cells.iter().collect();
    Ok(combine(&adopted, &sizes, &refs, ds.n_cats()))
}

/// Builds the full table: every (cohort, period) cell with a non-empty control
/// set, plus aggregates for the periods where all adopted cohorts are covered.
/// Cells are independent and computed in parallel.
pub fn cohort_effect_table(
    ds: &PanelDataset,
    lag: usize,
    mode: ControlMode,
) -> Result<CohortEffectTable> {
    let gs = treated_cohorts(ds)?;
    let last_period = latest_estimable_period(ds)?;
    let pairs: Vec<(usize, usize)> = gs
        .iter()
        .flat_map(|&g| (g..=last_period).map(move |t| (g, t)))
        .collect();
    let entries: Vec<CohortCell> = pairs
        .into_par_iter()
        .map(|(g, t)| match cohort_att(ds, g, t, lag, mode) {
            Ok(cell) => Ok(Some(cell)),
            Err(Error::EmptyControlSet { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let by_key: BTreeMap<(usize, usize), &CohortCell> = entries
        .iter()
        .map(|cell| ((cell.cohort, cell.period), cell))
        .collect();
    let sizes: BTreeMap<usize, usize> = gs.iter().map(|&g| (g, cohort_size(ds, g))).collect();
    let mut aggregate = Vec::new();
    'periods: for t in gs[0]..=last_period {
        let adopted: Vec<usize> = gs.iter().copied().filter(|&g| g <= t).collect();
        let mut cells = Vec::with_capacity(adopted.len());
        for &g in &adopted {
            match by_key.get(&(g, t)) {
                Some(cell) => cells.push(*cell),
                None => continue 'periods,
            }
        }
        let adopted_sizes: Vec<usize> = adopted.iter().map(|g| sizes[g]).collect();
        aggregate.push(combine(&adopted, &adopted_sizes, &cells, ds.n_cats()));
    }
    Ok(CohortEffectTable {
        mode,
        lag,
        last_period,
        entries,
        aggregate,
    })
}
