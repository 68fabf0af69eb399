//! Panel data model: outcome alphabet, balanced discrete-outcome panels, and the
//! outcome histories every estimator conditions on.
//!
//! A dataset is a balanced n×T grid of category indices plus a treatment arm per
//! unit. The pre-treatment period count T0 is inferred from the treated flag: in
//! the simultaneous case all treated units switch 0→1 at the same period T0+1; a
//! cohort column marks staggered adoption, where T0 is the last period before the
//! earliest cohort adopts. Datasets are immutable after construction and safe to
//! share across threads.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Ordered set of the K outcome categories; index order fixes the meaning of
/// every probability vector in the crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomeAlphabet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl OutcomeAlphabet {
    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::InvalidAlphabet(format!(
                "need at least 2 categories, got {}",
                labels.len()
            )));
        }
        if labels.len() > u16::MAX as usize {
            return Err(Error::InvalidAlphabet(format!(
                "{} categories exceed the supported maximum",
                labels.len()
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (k, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(Error::InvalidAlphabet("empty label".into()));
            }
            if index.insert(label.clone(), k).is_some() {
                return Err(Error::InvalidAlphabet(format!("duplicate label {label:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false // K ≥ 2 by construction
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, k: usize) -> &str {
        &self.labels[k]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

/// One-hot encoding of a category index: 1 at position `y`, 0 elsewhere.
pub fn one_hot(y: usize, k: usize) -> Result<Vec<f64>> {
    if y >= k {
        return Err(Error::IndexOutOfRange { index: y, bound: k });
    }
    let mut v = vec![0.0; k];
    v[y] = 1.0;
    Ok(v)
}

/// The last ℓ outcomes before (and including) an anchor period — the
/// conditioning object of every transition-based estimator.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize)]
pub struct HistoryKey {
    pub lag: usize,
    /// Category indices, earliest period first.
    pub states: Vec<usize>,
}

impl HistoryKey {
    /// Base-K integer code; the earliest period is the lowest digit. All history
    /// indexing in the crate (kernel rows, cell maps) uses this convention.
    pub fn code(&self, k: usize) -> usize {
        let mut code = 0usize;
        for &s in self.states.iter().rev() {
            code = code * k + s;
        }
        code
    }

    pub fn from_code(mut code: usize, lag: usize, k: usize) -> Self {
        let mut states = Vec::with_capacity(lag);
        for _ in 0..lag {
            states.push(code % k);
            code /= k;
        }
        Self { lag, states }
    }

    /// Human-readable form, labels joined oldest→newest.
    pub fn label(&self, alphabet: &OutcomeAlphabet) -> String {
        self.states
            .iter()
            .map(|&s| alphabet.label(s))
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Number of distinct length-`lag` histories over `k` categories.
pub fn n_histories(k: usize, lag: usize) -> Result<usize> {
    k.checked_pow(lag as u32)
        .ok_or(Error::EnumerationTooLarge {
            size: usize::MAX,
            cap: usize::MAX,
        })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clusters {
    labels: Vec<String>,
    of_unit: Vec<usize>,
}

impl Clusters {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn of_unit(&self, unit: usize) -> usize {
        self.of_unit[unit]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Column-name mapping for the long CSV format. `cluster`/`cohort` of `None`
/// auto-detect the standard names and stay optional; explicit names are required.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub unit: Option<String>,
    pub time: Option<String>,
    pub outcome: Option<String>,
    pub treated: Option<String>,
    pub cluster: Option<String>,
    pub cohort: Option<String>,
}

/// Balanced discrete-outcome panel. Periods are 1-based (re-indexed from the
/// source file's time tokens); category indices are 0-based alphabet positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    alphabet: OutcomeAlphabet,
    unit_ids: Vec<String>,
    outcomes: Vec<u16>, // n×T row-major
    treated: Vec<bool>,
    t_total: usize,
    t_pre: usize,
    clusters: Option<Clusters>,
    cohorts: Option<Vec<usize>>, // 0 = never treated, else adoption period in 2..=T
}

impl PanelDataset {
    /// Validated in-memory construction. `outcomes` is n×T row-major; `cohorts`
    /// entries are 0 (never treated) or an adoption period in 2..=T.
    pub fn new(
        alphabet: OutcomeAlphabet,
        unit_ids: Vec<String>,
        outcomes: Vec<u16>,
        treated: Vec<bool>,
        t_pre: usize,
        cluster_ids: Option<Vec<String>>,
        cohorts: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = unit_ids.len();
        if n == 0 {
            return Err(Error::DimensionMismatch("dataset has no units".into()));
        }
        if outcomes.len() % n != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} outcomes do not fill an n×T grid for n={n}",
                outcomes.len()
            )));
        }
        let t_total = outcomes.len() / n;
        if t_total < 2 {
            return Err(Error::DimensionMismatch(
                "panel needs at least 2 periods".into(),
            ));
        }
        if !(1..t_total).contains(&t_pre) {
            return Err(Error::DimensionMismatch(format!(
                "pre-period count {t_pre} must satisfy 1 ≤ T0 < T={t_total}"
            )));
        }
        if treated.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} treated flags for {n} units",
                treated.len()
            )));
        }
        let k = alphabet.len();
        if let Some(bad) = outcomes.iter().find(|&&y| (y as usize) >= k) {
            return Err(Error::IndexOutOfRange {
                index: *bad as usize,
                bound: k,
            });
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &unit_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateObservation {
                    unit: id.clone(),
                    time: "*".into(),
                });
            }
        }
        let clusters = match cluster_ids {
            None => None,
            Some(ids) => {
                if ids.len() != n {
                    return Err(Error::DimensionMismatch(format!(
                        "{} cluster ids for {n} units",
                        ids.len()
                    )));
                }
                Some(build_clusters(&ids))
            }
        };
        if let Some(g) = &cohorts {
            if g.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} cohort values for {n} units",
                    g.len()
                )));
            }
            for (i, &gi) in g.iter().enumerate() {
                if gi != 0 && !(2..=t_total).contains(&gi) {
                    return Err(Error::UnknownCohort {
                        unit: unit_ids[i].clone(),
                        value: gi.to_string(),
                    });
                }
                if treated[i] != (gi != 0) {
                    return Err(Error::CohortFlagMismatch {
                        unit: unit_ids[i].clone(),
                    });
                }
            }
        }
        Ok(Self {
            alphabet,
            unit_ids,
            outcomes,
            treated,
            t_total,
            t_pre,
            clusters,
            cohorts,
        })
    }

    pub fn n(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn t_total(&self) -> usize {
        self.t_total
    }

    pub fn t_pre(&self) -> usize {
        self.t_pre
    }

    pub fn n_cats(&self) -> usize {
        self.alphabet.len()
    }

    pub fn alphabet(&self) -> &OutcomeAlphabet {
        &self.alphabet
    }

    pub fn unit_id(&self, unit: usize) -> &str {
        &self.unit_ids[unit]
    }

    /// Category index of `unit`'s outcome in 1-based `period`.
    pub fn outcome(&self, unit: usize, period: usize) -> usize {
        debug_assert!((1..=self.t_total).contains(&period));
        self.outcomes[unit * self.t_total + (period - 1)] as usize
    }

    pub fn is_treated(&self, unit: usize) -> bool {
        self.treated[unit]
    }

    pub fn n_treated(&self) -> usize {
        self.treated.iter().filter(|&&d| d).count()
    }

    pub fn clusters(&self) -> Option<&Clusters> {
        self.clusters.as_ref()
    }

    /// Adoption period of `unit` (0 = never treated), when cohorts are present.
    pub fn cohort(&self, unit: usize) -> Option<usize> {
        self.cohorts.as_ref().map(|g| g[unit])
    }

    pub fn has_cohorts(&self) -> bool {
        self.cohorts.is_some()
    }

    /// Distinct cohort values present, ascending (0 first when present).
    pub fn cohort_values(&self) -> Vec<usize> {
        match &self.cohorts {
            None => Vec::new(),
            Some(g) => {
                let mut v: Vec<usize> = g.iter().copied().collect::<HashSet<_>>().into_iter().collect();
                v.sort_unstable();
                v
            }
        }
    }

    /// Post-treatment periods T0+1..=T.
    pub fn post_periods(&self) -> std::ops::RangeInclusive<usize> {
        (self.t_pre + 1)..=self.t_total
    }

    /// The unit's outcomes at periods anchor−lag+1..=anchor.
    pub fn history_key(&self, unit: usize, anchor: usize, lag: usize) -> Result<HistoryKey> {
        self.check_history(anchor, lag)?;
        let states = (anchor - lag + 1..=anchor)
            .map(|t| self.outcome(unit, t))
            .collect();
        Ok(HistoryKey { lag, states })
    }

    /// Base-K code of the unit's length-`lag` history ending at `anchor`;
    /// the allocation-free form of [`history_key`](Self::history_key).
    pub fn history_code(&self, unit: usize, anchor: usize, lag: usize) -> Result<usize> {
        self.check_history(anchor, lag)?;
        Ok(self.history_code_unchecked(unit, anchor, lag))
    }

    #[inline]
    pub(crate) fn history_code_unchecked(&self, unit: usize, anchor: usize, lag: usize) -> usize {
        let k = self.alphabet.len();
        let mut code = 0usize;
        for t in (anchor - lag + 1..=anchor).rev() {
            code = code * k + self.outcome(unit, t);
        }
        code
    }

    fn check_history(&self, anchor: usize, lag: usize) -> Result<()> {
        if lag == 0 {
            return Err(Error::DimensionMismatch("lag must be ≥ 1".into()));
        }
        if anchor > self.t_total {
            return Err(Error::IndexOutOfRange {
                index: anchor,
                bound: self.t_total + 1,
            });
        }
        if lag > anchor {
            return Err(Error::LagExceedsHistory { lag, anchor });
        }
        Ok(())
    }

    /// Writes the panel in normalized long form: rows sorted by (unit, period),
    /// periods re-indexed 1..T, outcomes as labels. Loading the output and
    /// writing again reproduces the same bytes.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("unit,time,outcome,treated");
        if self.clusters.is_some() {
            header.push_str(",cluster");
        }
        if self.cohorts.is_some() {
            header.push_str(",cohort");
        }
        header.push('\n');
        w.write_all(header.as_bytes())?;
        let mut line = String::new();
        for i in 0..self.n() {
            for t in 1..=self.t_total {
                let flag = match &self.cohorts {
                    Some(g) => g[i] != 0 && t >= g[i],
                    None => self.treated[i] && t > self.t_pre,
                };
                line.clear();
                line.push_str(&self.unit_ids[i]);
                line.push(',');
                line.push_str(&t.to_string());
                line.push(',');
                line.push_str(self.alphabet.label(self.outcome(i, t)));
                line.push(',');
                line.push(if flag { '1' } else { '0' });
                if let Some(c) = &self.clusters {
                    line.push(',');
                    line.push_str(&c.labels()[c.of_unit(i)]);
                }
                if let Some(g) = &self.cohorts {
                    line.push(',');
                    line.push_str(&g[i].to_string());
                }
                line.push('\n');
                w.write_all(line.as_bytes())?;
            }
        }
        Ok(())
    }

    pub fn write_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn build_clusters(ids: &[String]) -> Clusters {
    let labels = sort_tokens(ids.iter().cloned().collect::<HashSet<_>>());
    let index: HashMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let of_unit = ids.iter().map(|s| index[s.as_str()]).collect();
    Clusters { labels, of_unit }
}

/// Sort distinct tokens numerically when every token parses as an integer,
/// lexicographically otherwise; only the resulting order matters downstream.
fn sort_tokens(set: HashSet<String>) -> Vec<String> {
    let mut v: Vec<String> = set.into_iter().collect();
    let as_int: Option<Vec<i64>> = v.iter().map(|s| s.parse::<i64>().ok()).collect();
    match as_int {
        Some(ints) => {
            let mut pairs: Vec<(i64, String)> = ints.into_iter().zip(v).collect();
            pairs.sort();
            pairs.into_iter().map(|(_, s)| s).collect()
        }
        None => {
            v.sort();
            v
        }
    }
}

/// Loads the long CSV format `unit,time,outcome,treated[,cluster][,cohort]`.
/// Categories are indexed by `alphabet` when given, else by the lexicographic
/// order of the distinct outcome labels; periods are re-indexed 1..T following
/// the sorted distinct time tokens.
pub fn load_panel_csv<P: AsRef<Path>>(
    path: P,
    schema: &CsvSchema,
    alphabet: Option<&[String]>,
) -> Result<PanelDataset> {
    let file = std::fs::File::open(path)?;
    load_panel_reader(file, schema, alphabet)
}

pub fn load_panel_reader<R: std::io::Read>(
    reader: R,
    schema: &CsvSchema,
    alphabet: Option<&[String]>,
) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let require = |explicit: &Option<String>, default: &str| -> Result<usize> {
        let name = explicit.as_deref().unwrap_or(default);
        col(name).ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let unit_col = require(&schema.unit, "unit")?;
    let time_col = require(&schema.time, "time")?;
    let outcome_col = require(&schema.outcome, "outcome")?;
    let treated_col = require(&schema.treated, "treated")?;
    let optional = |explicit: &Option<String>, default: &str| -> Result<Option<usize>> {
        match explicit {
            Some(name) => Ok(Some(
                col(name).ok_or_else(|| Error::MissingColumn(name.clone()))?,
            )),
            None => Ok(col(default)),
        }
    };
    let cluster_col = optional(&schema.cluster, "cluster")?;
    let cohort_col = optional(&schema.cohort, "cohort")?;

    struct Row {
        unit: String,
        time: String,
        outcome: String,
        treated: bool,
        cluster: Option<String>,
        cohort: Option<String>,
    }
    let mut rows = Vec::new();
    for (ridx, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
        let treated_raw = field(treated_col);
        let treated = match treated_raw.as_str() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::MalformedField {
                    field: "treated",
                    row: ridx + 2,
                    message: format!("expected 0 or 1, got {other:?}"),
                })
            }
        };
        rows.push(Row {
            unit: field(unit_col),
            time: field(time_col),
            outcome: field(outcome_col),
            treated,
            cluster: cluster_col.map(field),
            cohort: cohort_col.map(field),
        });
    }
    if rows.is_empty() {
        return Err(Error::DimensionMismatch("file has no data rows".into()));
    }

    let unit_ids = sort_tokens(rows.iter().map(|r| r.unit.clone()).collect());
    let time_tokens = sort_tokens(rows.iter().map(|r| r.time.clone()).collect());
    let n = unit_ids.len();
    let t_total = time_tokens.len();
    if t_total < 2 {
        return Err(Error::DimensionMismatch(
            "panel needs at least 2 periods".into(),
        ));
    }
    let unit_index: HashMap<&str, usize> = unit_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let time_index: HashMap<&str, usize> = time_tokens
        .iter()
        .enumerate()
        .map(|(t, s)| (s.as_str(), t + 1))
        .collect();

    let alphabet = match alphabet {
        Some(labels) => OutcomeAlphabet::from_labels(labels.iter().cloned())?,
        None => {
            let labels = rows
                .iter()
                .map(|r| r.outcome.clone())
                .collect::<HashSet<_>>();
            let mut labels: Vec<String> = labels.into_iter().collect();
            labels.sort();
            OutcomeAlphabet::from_labels(labels)?
        }
    };

    const EMPTY: u16 = u16::MAX;
    let mut outcomes = vec![EMPTY; n * t_total];
    let mut flags = vec![false; n * t_total];
    let mut cluster_of: Vec<Option<String>> = vec![None; n];
    let mut cohort_of: Vec<Option<String>> = vec![None; n];
    for row in &rows {
        let i = unit_index[row.unit.as_str()];
        let t = time_index[row.time.as_str()];
        let y = alphabet
            .index_of(&row.outcome)
            .ok_or_else(|| Error::UnknownLabel {
                label: row.outcome.clone(),
                unit: row.unit.clone(),
                time: row.time.clone(),
            })?;
        let cell = i * t_total + (t - 1);
        if outcomes[cell] != EMPTY {
            return Err(Error::DuplicateObservation {
                unit: row.unit.clone(),
                time: row.time.clone(),
            });
        }
        outcomes[cell] = y as u16;
        flags[cell] = row.treated;
        for (slot, value, field) in [
            (&mut cluster_of[i], &row.cluster, "cluster"),
            (&mut cohort_of[i], &row.cohort, "cohort"),
        ] {
            if let Some(v) = value {
                match slot {
                    None => *slot = Some(v.clone()),
                    Some(prev) if prev == v => {}
                    Some(_) => {
                        return Err(Error::MalformedField {
                            field: if field == "cluster" { "cluster" } else { "cohort" },
                            row: 0,
                            message: format!("{field} varies within unit {:?}", row.unit),
                        })
                    }
                }
            }
        }
    }
    for i in 0..n {
        if outcomes[i * t_total..(i + 1) * t_total].contains(&EMPTY) {
            return Err(Error::UnbalancedPanel {
                unit: unit_ids[i].clone(),
            });
        }
    }

    // Adoption structure: the flag pattern per unit must be 0…0 1…1.
    let mut switch: Vec<Option<usize>> = vec![None; n]; // first treated period
    for i in 0..n {
        let row = &flags[i * t_total..(i + 1) * t_total];
        let first = row.iter().position(|&f| f);
        if let Some(s0) = first {
            if row[s0..].iter().any(|&f| !f) {
                return Err(Error::NonAbsorbingTreatment {
                    unit: unit_ids[i].clone(),
                });
            }
            switch[i] = Some(s0 + 1);
        }
    }

    let (treated, t_pre, cohorts) = if cohort_col.is_some() {
        let mut cohorts = Vec::with_capacity(n);
        for i in 0..n {
            let raw = cohort_of[i].clone().unwrap_or_default();
            let g = parse_cohort(&raw, &time_index, t_total).ok_or_else(|| Error::UnknownCohort {
                unit: unit_ids[i].clone(),
                value: raw.clone(),
            })?;
            let expected = if g == 0 { None } else { Some(g) };
            if switch[i] != expected {
                return Err(Error::CohortFlagMismatch {
                    unit: unit_ids[i].clone(),
                });
            }
            cohorts.push(g);
        }
        let g_min = cohorts.iter().copied().filter(|&g| g != 0).min();
        let g_min = g_min.ok_or(Error::NoTreatedUnits)?;
        let treated = cohorts.iter().map(|&g| g != 0).collect();
        (treated, g_min - 1, Some(cohorts))
    } else {
        let mut adoption = None;
        for i in 0..n {
            if let Some(s) = switch[i] {
                if s == 1 {
                    return Err(Error::NoPrePeriod {
                        unit: unit_ids[i].clone(),
                    });
                }
                match adoption {
                    None => adoption = Some(s),
                    Some(expected) if expected == s => {}
                    Some(expected) => {
                        return Err(Error::InconsistentAdoption {
                            unit: unit_ids[i].clone(),
                            expected,
                            found: s,
                        })
                    }
                }
            }
        }
        let adoption = adoption.ok_or(Error::NoTreatedUnits)?;
        let treated = switch.iter().map(|s| s.is_some()).collect();
        (treated, adoption - 1, None)
    };

    let cluster_ids = if cluster_col.is_some() {
        Some(
            cluster_of
                .into_iter()
                .map(|c| c.unwrap_or_default())
                .collect(),
        )
    } else {
        None
    };

    PanelDataset::new(
        alphabet, unit_ids, outcomes, treated, t_pre, cluster_ids, cohorts,
    )
}

/// Cohort tokens: "0" means never treated; otherwise a time token of the file
/// (mapped through re-indexing) or directly a re-indexed period in 2..=T.
fn parse_cohort(raw: &str, time_index: &HashMap<&str, usize>, t_total: usize) -> Option<usize> {
    if raw == "0" {
        return Some(0);
    }
    let g = match time_index.get(raw) {
        Some(&t) => t,
        None => raw.parse::<usize>().ok()?,
    };
    (2..=t_total).contains(&g).then_some(g)
}
