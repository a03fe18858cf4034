//! Panel data ingestion and design-matrix construction.
//!
//! The input format is a UTF-8 CSV with reserved columns
//! `beneficiary_id, practice_id, year, outcome, treated`; every other column
//! is matched by name against a [`CovariateSchema`] supplied as a JSON
//! sidecar. Covariates live either at the practice level (constant within a
//! practice) or at the beneficiary level; the scope can be declared in the
//! schema or is auto-detected from the data.
//!
//! Design matrices keep categorical covariates as single native columns
//! with integer level codes. In particular the practice identifier enters
//! beneficiary-level designs as one categorical column, never as hundreds
//! of dummy indicators.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Errors raised while loading or validating panel data.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("duplicate observation for beneficiary {beneficiary} in year {year}")]
    DuplicateObservation { beneficiary: String, year: u8 },
    #[error("inconsistent treatment within practice {practice}")]
    InconsistentTreatment { practice: String },
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("propensity estimate required when building the mu design")]
    MissingPropensity,
    #[error("no rows for practice {practice} in year {year}")]
    EmptyPracticeYear { practice: String, year: u8 },
    #[error("missing value for covariate {name} (imputation is unsupported)")]
    MissingValue { name: String },
}

/// Kind of a covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum CovariateKind {
    Continuous,
    Binary,
    Categorical { levels: Vec<String> },
}

/// Whether a covariate is constant within practices or varies by
/// beneficiary. `Auto` defers the decision to observed data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateScope {
    Practice,
    Beneficiary,
    Auto,
}

/// One declared covariate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaEntry {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
    #[serde(default = "default_scope")]
    pub scope: CovariateScope,
}

fn default_scope() -> CovariateScope {
    CovariateScope::Auto
}

/// Ordered covariate declarations for a panel file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub entries: Vec<SchemaEntry>,
}

impl CovariateSchema {
    pub fn new(entries: Vec<SchemaEntry>) -> Result<Self, DataError> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.clone()) {
                return Err(DataError::Schema(format!("duplicate covariate name {}", e.name)));
            }
            if let CovariateKind::Categorical { levels } = &e.kind {
                if levels.len() < 2 {
                    return Err(DataError::Schema(format!(
                        "categorical covariate {} needs at least 2 levels",
                        e.name
                    )));
                }
                let mut lv = std::collections::HashSet::new();
                for l in levels {
                    if !lv.insert(l.clone()) {
                        return Err(DataError::Schema(format!(
                            "duplicate level {} in covariate {}",
                            l, e.name
                        )));
                    }
                }
            }
        }
        Ok(CovariateSchema { entries })
    }

    pub fn from_json_file(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        let entries: Vec<SchemaEntry> = serde_json::from_str(&text)
            .map_err(|e| DataError::Schema(format!("schema json: {e}")))?;
        CovariateSchema::new(entries)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(&self.entries)
            .map_err(|e| DataError::Schema(format!("schema json: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Number of levels a covariate can take (2 for binary).
    pub fn level_count(&self, idx: usize) -> Option<usize> {
        match &self.entries[idx].kind {
            CovariateKind::Continuous => None,
            CovariateKind::Binary => Some(2),
            CovariateKind::Categorical { levels } => Some(levels.len()),
        }
    }
}

/// A single covariate value: a real or a level code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovValue {
    Continuous(f64),
    Level(u32),
}

impl CovValue {
    pub fn as_f64(&self) -> f64 {
        match self {
            CovValue::Continuous(v) => *v,
            CovValue::Level(l) => *l as f64,
        }
    }
}

/// One beneficiary-year observation. Identifiers are interned; see
/// [`PanelDataset`] for the lookup tables.
#[derive(Debug, Clone)]
pub struct PanelRow {
    pub beneficiary: u32,
    pub practice: u32,
    pub year: u8,
    pub outcome: f64,
    pub treated: bool,
    pub covariates: Vec<CovValue>,
}

/// Longitudinal beneficiary-by-year panel with practice identifiers.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    pub schema: CovariateSchema,
    pub beneficiary_ids: Vec<String>,
    pub practice_ids: Vec<String>,
    pub rows: Vec<PanelRow>,
}

impl PanelDataset {
    /// Validate panel invariants: unique (beneficiary, year), constant
    /// treatment within practice, years in 1..=4.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::HashSet::with_capacity(self.rows.len());
        let mut practice_z: Vec<Option<bool>> = vec![None; self.practice_ids.len()];
        for (i, r) in self.rows.iter().enumerate() {
            if !(1..=4).contains(&r.year) {
                return Err(DataError::MalformedRow {
                    row: i,
                    reason: format!("year {} outside 1..=4", r.year),
                });
            }
            if !seen.insert((r.beneficiary, r.year)) {
                return Err(DataError::DuplicateObservation {
                    beneficiary: self.beneficiary_ids[r.beneficiary as usize].clone(),
                    year: r.year,
                });
            }
            match practice_z[r.practice as usize] {
                None => practice_z[r.practice as usize] = Some(r.treated),
                Some(z) if z != r.treated => {
                    return Err(DataError::InconsistentTreatment {
                        practice: self.practice_ids[r.practice as usize].clone(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn n_practices(&self) -> usize {
        self.practice_ids.len()
    }

    /// Per-practice treatment flag.
    pub fn practice_treated(&self) -> Vec<bool> {
        let mut z = vec![false; self.practice_ids.len()];
        for r in &self.rows {
            z[r.practice as usize] = r.treated;
        }
        z
    }

    /// Resolve covariate scopes: declared scope wins, `Auto` falls back to
    /// checking whether the covariate is constant within every practice.
    pub fn resolve_scopes(&self) -> Vec<CovariateScope> {
        self.schema
            .entries
            .iter()
            .enumerate()
            .map(|(k, e)| match e.scope {
                CovariateScope::Auto => {
                    let mut per_practice: Vec<Option<CovValue>> =
                        vec![None; self.practice_ids.len()];
                    let mut practice_level = true;
                    'rows: for r in &self.rows {
                        let v = r.covariates[k];
                        match per_practice[r.practice as usize] {
                            None => per_practice[r.practice as usize] = Some(v),
                            Some(prev) => {
                                let eq = match (prev, v) {
                                    (CovValue::Continuous(a), CovValue::Continuous(b)) => a == b,
                                    (CovValue::Level(a), CovValue::Level(b)) => a == b,
                                    _ => false,
                                };
                                if !eq {
                                    practice_level = false;
                                    break 'rows;
                                }
                            }
                        }
                    }
                    if practice_level {
                        CovariateScope::Practice
                    } else {
                        CovariateScope::Beneficiary
                    }
                }
                s => s,
            })
            .collect()
    }

    /// Write the dataset in the reserved-column CSV format.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![
            "beneficiary_id".to_string(),
            "practice_id".to_string(),
            "year".to_string(),
            "outcome".to_string(),
            "treated".to_string(),
        ];
        header.extend(self.schema.entries.iter().map(|e| e.name.clone()));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                self.beneficiary_ids[r.beneficiary as usize].clone(),
                self.practice_ids[r.practice as usize].clone(),
                r.year.to_string(),
                format!("{}", r.outcome),
                if r.treated { "1".into() } else { "0".into() },
            ];
            for (k, v) in r.covariates.iter().enumerate() {
                rec.push(match (v, &self.schema.entries[k].kind) {
                    (CovValue::Continuous(x), _) => format!("{x}"),
                    (CovValue::Level(l), CovariateKind::Categorical { levels }) => {
                        levels[*l as usize].clone()
                    }
                    (CovValue::Level(l), _) => l.to_string(),
                });
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Load and validate a panel CSV against `schema`.
pub fn load_panel(path: &Path, schema: &CovariateSchema) -> Result<PanelDataset, DataError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let c_ben = col("beneficiary_id")?;
    let c_prac = col("practice_id")?;
    let c_year = col("year")?;
    let c_out = col("outcome")?;
    let c_trt = col("treated")?;
    let cov_cols: Vec<usize> = schema
        .entries
        .iter()
        .map(|e| col(&e.name))
        .collect::<Result<_, _>>()?;

    let mut ben_index: HashMap<String, u32> = HashMap::new();
    let mut prac_index: HashMap<String, u32> = HashMap::new();
    let mut beneficiary_ids = Vec::new();
    let mut practice_ids = Vec::new();
    let mut rows = Vec::new();

    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let intern = |map: &mut HashMap<String, u32>, ids: &mut Vec<String>, s: &str| -> u32 {
            *map.entry(s.to_string()).or_insert_with(|| {
                ids.push(s.to_string());
                (ids.len() - 1) as u32
            })
        };
        let beneficiary = intern(&mut ben_index, &mut beneficiary_ids, &rec[c_ben]);
        let practice = intern(&mut prac_index, &mut practice_ids, &rec[c_prac]);
        let year: u8 = rec[c_year].parse().map_err(|_| DataError::MalformedRow {
            row: i,
            reason: format!("bad year {:?}", &rec[c_year]),
        })?;
        let outcome: f64 = rec[c_out].parse().map_err(|_| DataError::MalformedRow {
            row: i,
            reason: format!("bad outcome {:?}", &rec[c_out]),
        })?;
        let treated = match &rec[c_trt] {
            "0" => false,
            "1" => true,
            other => {
                return Err(DataError::MalformedRow {
                    row: i,
                    reason: format!("bad treated flag {other:?}"),
                })
            }
        };
        let mut covariates = Vec::with_capacity(schema.entries.len());
        for (k, &c) in cov_cols.iter().enumerate() {
            let raw = &rec[c];
            if raw.is_empty() {
                return Err(DataError::MissingValue {
                    name: schema.entries[k].name.clone(),
                });
            }
            let v = match &schema.entries[k].kind {
                CovariateKind::Continuous => CovValue::Continuous(raw.parse().map_err(|_| {
                    DataError::MalformedRow {
                        row: i,
                        reason: format!("bad continuous value {raw:?} for {}", schema.entries[k].name),
                    }
                })?),
                CovariateKind::Binary => match raw {
                    "0" => CovValue::Level(0),
                    "1" => CovValue::Level(1),
                    _ => {
                        return Err(DataError::MalformedRow {
                            row: i,
                            reason: format!("bad binary value {raw:?} for {}", schema.entries[k].name),
                        })
                    }
                },
                CovariateKind::Categorical { levels } => {
                    match levels.iter().position(|l| l == raw) {
                        Some(l) => CovValue::Level(l as u32),
                        None => {
                            return Err(DataError::MalformedRow {
                                row: i,
                                reason: format!(
                                    "unknown level {raw:?} for {}",
                                    schema.entries[k].name
                                ),
                            })
                        }
                    }
                }
            };
            covariates.push(v);
        }
        rows.push(PanelRow {
            beneficiary,
            practice,
            year,
            outcome,
            treated,
            covariates,
        });
    }

    let ds = PanelDataset {
        schema: schema.clone(),
        beneficiary_ids,
        practice_ids,
        rows,
    };
    ds.validate()?;
    Ok(ds)
}

/// Which forest a design matrix feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignTarget {
    Mu,
    Tau,
}

/// Granularity of the analysis rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisLevel {
    Practice,
    Beneficiary,
}

impl fmt::Display for AnalysisLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisLevel::Practice => write!(f, "practice"),
            AnalysisLevel::Beneficiary => write!(f, "beneficiary"),
        }
    }
}

/// One stored design column.
#[derive(Debug, Clone)]
pub enum DesignColumn {
    Continuous {
        name: String,
        values: Vec<f64>,
        cutpoints: Vec<f64>,
    },
    Categorical {
        name: String,
        n_levels: u32,
        values: Vec<u32>,
    },
}

impl DesignColumn {
    pub fn name(&self) -> &str {
        match self {
            DesignColumn::Continuous { name, .. } => name,
            DesignColumn::Categorical { name, .. } => name,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            DesignColumn::Continuous { values, .. } => values.len(),
            DesignColumn::Categorical { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoded covariate matrix for one forest.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub n: usize,
    pub columns: Vec<DesignColumn>,
    pub row_weights: Option<Vec<f64>>,
}

impl DesignMatrix {
    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name() == name)
    }

    /// Continuous value at (row, var); panics if the column is categorical.
    pub fn continuous_value(&self, row: usize, var: usize) -> f64 {
        match &self.columns[var] {
            DesignColumn::Continuous { values, .. } => values[row],
            DesignColumn::Categorical { name, .. } => {
                panic!("column {name} is categorical, not continuous")
            }
        }
    }

    /// Level code at (row, var); panics if the column is continuous.
    pub fn level(&self, row: usize, var: usize) -> u32 {
        match &self.columns[var] {
            DesignColumn::Categorical { values, .. } => values[row],
            DesignColumn::Continuous { name, .. } => {
                panic!("column {name} is continuous, not categorical")
            }
        }
    }

    /// Approximate heap footprint of the stored columns, in bytes.
    pub fn heap_bytes(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                DesignColumn::Continuous {
                    values, cutpoints, ..
                } => values.len() * 8 + cutpoints.len() * 8,
                DesignColumn::Categorical { values, .. } => values.len() * 4,
            })
            .sum::<usize>()
            + self.row_weights.as_ref().map_or(0, |w| w.len() * 8)
    }

    fn validate(&self) -> Result<(), DataError> {
        for c in &self.columns {
            if c.len() != self.n {
                return Err(DataError::Schema(format!(
                    "column {} has length {} != n {}",
                    c.name(),
                    c.len(),
                    self.n
                )));
            }
            match c {
                DesignColumn::Continuous {
                    name,
                    values,
                    cutpoints,
                } => {
                    if !cutpoints.windows(2).all(|w| w[0] < w[1]) {
                        return Err(DataError::Schema(format!(
                            "cutpoint grid for {name} not strictly increasing"
                        )));
                    }
                    if let (Some(first), Some(last)) = (cutpoints.first(), cutpoints.last()) {
                        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        if *first < lo || *last > hi {
                            return Err(DataError::Schema(format!(
                                "cutpoints for {name} outside observed range"
                            )));
                        }
                    }
                }
                DesignColumn::Categorical {
                    name,
                    n_levels,
                    values,
                } => {
                    if values.iter().any(|&v| v >= *n_levels) {
                        return Err(DataError::Schema(format!(
                            "level index out of range in {name}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Candidate cutpoints for one continuous column.
///
/// With few distinct values, midpoints between consecutive distinct values;
/// otherwise `max_cuts` empirical quantiles, deduplicated and kept strictly
/// inside the observed range. A constant column yields an empty grid.
pub fn cutpoint_grid(column: &[f64], max_cuts: usize) -> Vec<f64> {
    assert!(max_cuts >= 1, "max_cuts must be >= 1");
    assert!(!column.is_empty(), "column must be nonempty");
    let mut sorted: Vec<f64> = column.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct: Vec<f64> = Vec::new();
    for &v in &sorted {
        if distinct.last() != Some(&v) {
            distinct.push(v);
        }
    }
    if distinct.len() < 2 {
        return Vec::new();
    }
    if distinct.len() - 1 <= max_cuts {
        return distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let n = sorted.len();
    let mut cuts = Vec::with_capacity(max_cuts);
    for i in 1..=max_cuts {
        let pos = i as f64 / (max_cuts + 1) as f64 * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let q = if lo + 1 < n {
            sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
        } else {
            sorted[lo]
        };
        if q > *sorted.first().unwrap() && q < *sorted.last().unwrap() {
            if cuts.last().map_or(true, |&last| q > last) {
                cuts.push(q);
            }
        }
    }
    cuts
}

pub const DEFAULT_MAX_CUTS: usize = 100;

/// Row-aligned response vectors for a design at a given level.
#[derive(Debug, Clone)]
pub struct ResponseVectors {
    pub y: Vec<f64>,
    /// 1 iff treated practice and year > 2.
    pub zmask: Vec<bool>,
    /// Practice sizes at practice level; ones at beneficiary level.
    pub weights: Vec<f64>,
    /// (practice index, year) per row.
    pub keys: Vec<(u32, u8)>,
}

/// Canonical row order for a level: beneficiary level keeps dataset row
/// order; practice level sorts by (practice index, year).
fn practice_year_cells(data: &PanelDataset) -> Vec<((u32, u8), Vec<u32>)> {
    let mut map: HashMap<(u32, u8), Vec<u32>> = HashMap::new();
    for (i, r) in data.rows.iter().enumerate() {
        map.entry((r.practice, r.year)).or_default().push(i as u32);
    }
    let mut cells: Vec<_> = map.into_iter().collect();
    cells.sort_by_key(|(k, _)| *k);
    cells
}

/// Outcome, treatment mask, and weights aligned with [`build_design`] rows.
pub fn build_response(data: &PanelDataset, level: AnalysisLevel) -> ResponseVectors {
    match level {
        AnalysisLevel::Beneficiary => {
            let y = data.rows.iter().map(|r| r.outcome).collect();
            let zmask = data.rows.iter().map(|r| r.treated && r.year > 2).collect();
            let weights = vec![1.0; data.rows.len()];
            let keys = data.rows.iter().map(|r| (r.practice, r.year)).collect();
            ResponseVectors {
                y,
                zmask,
                weights,
                keys,
            }
        }
        AnalysisLevel::Practice => {
            let z = data.practice_treated();
            let cells = practice_year_cells(data);
            let mut y = Vec::with_capacity(cells.len());
            let mut zmask = Vec::with_capacity(cells.len());
            let mut weights = Vec::with_capacity(cells.len());
            let mut keys = Vec::with_capacity(cells.len());
            for ((p, t), members) in &cells {
                let sum: f64 = members.iter().map(|&i| data.rows[i as usize].outcome).sum();
                y.push(sum / members.len() as f64);
                zmask.push(z[*p as usize] && *t > 2);
                weights.push(members.len() as f64);
                keys.push((*p, *t));
            }
            ResponseVectors {
                y,
                zmask,
                weights,
                keys,
            }
        }
    }
}

/// Per-practice-year averages of beneficiary-scope covariates.
///
/// Continuous covariates average to their mean, binary covariates to the
/// fraction of ones, and categorical covariates to one share column per
/// level.
struct PracticeYearAverages {
    /// columns[avg_col][(practice, year)] -> value
    names: Vec<String>,
    values: Vec<HashMap<(u32, u8), f64>>,
}

fn compute_averages(
    data: &PanelDataset,
    scopes: &[CovariateScope],
) -> Result<PracticeYearAverages, DataError> {
    let mut names = Vec::new();
    // (schema idx, level or None) per average column
    let mut sources: Vec<(usize, Option<u32>)> = Vec::new();
    for (k, e) in data.schema.entries.iter().enumerate() {
        if scopes[k] != CovariateScope::Beneficiary {
            continue;
        }
        match &e.kind {
            CovariateKind::Continuous | CovariateKind::Binary => {
                names.push(format!("{}_avg", e.name));
                sources.push((k, None));
            }
            CovariateKind::Categorical { levels } => {
                for (l, label) in levels.iter().enumerate() {
                    names.push(format!("{}_share_{}", e.name, label));
                    sources.push((k, Some(l as u32)));
                }
            }
        }
    }
    let mut sums: Vec<HashMap<(u32, u8), (f64, u64)>> = vec![HashMap::new(); sources.len()];
    for r in &data.rows {
        for (c, &(k, level)) in sources.iter().enumerate() {
            let v = match (r.covariates[k], level) {
                (CovValue::Continuous(x), None) => x,
                (CovValue::Level(l), None) => l as f64,
                (CovValue::Level(l), Some(target)) => {
                    if l == target {
                        1.0
                    } else {
                        0.0
                    }
                }
                (CovValue::Continuous(_), Some(_)) => unreachable!(),
            };
            let e = sums[c].entry((r.practice, r.year)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let values = sums
        .into_iter()
        .map(|m| {
            m.into_iter()
                .map(|(k, (s, n))| (k, s / n as f64))
                .collect::<HashMap<_, _>>()
        })
        .collect();
    Ok(PracticeYearAverages { names, values })
}

/// Build the design matrix for one forest.
///
/// The mu design gets practice covariates, pre-treatment (years 1-2)
/// patient-covariate averages, the year index, and the propensity estimate.
/// The tau design drops the propensity column and extends the averages to
/// all four years. At the beneficiary level each row also carries its own
/// beneficiary covariates plus the practice identifier as a single native
/// categorical column.
///
/// `ps` is a per-practice propensity estimate indexed like
/// `PanelDataset::practice_ids`; it is required when `target` is mu.
pub fn build_design(
    data: &PanelDataset,
    target: DesignTarget,
    level: AnalysisLevel,
    ps: Option<&[f64]>,
    max_cuts: usize,
) -> Result<DesignMatrix, DataError> {
    if target == DesignTarget::Mu && ps.is_none() {
        return Err(DataError::MissingPropensity);
    }
    let scopes = data.resolve_scopes();
    let averages = compute_averages(data, &scopes)?;
    let avg_years: &[u8] = match target {
        DesignTarget::Mu => &[1, 2],
        DesignTarget::Tau => &[1, 2, 3, 4],
    };

    // Row keys in canonical order for the level.
    let row_keys: Vec<(u32, u8)> = match level {
        AnalysisLevel::Beneficiary => data.rows.iter().map(|r| (r.practice, r.year)).collect(),
        AnalysisLevel::Practice => practice_year_cells(data).iter().map(|(k, _)| *k).collect(),
    };
    let n = row_keys.len();
    // For practice-level rows we pull practice-scope covariates from the
    // first observed row of that practice.
    let mut practice_repr: Vec<Option<u32>> = vec![None; data.practice_ids.len()];
    for (i, r) in data.rows.iter().enumerate() {
        if practice_repr[r.practice as usize].is_none() {
            practice_repr[r.practice as usize] = Some(i as u32);
        }
    }

    let mut columns: Vec<DesignColumn> = Vec::new();

    let row_source: Box<dyn Fn(usize) -> usize> = match level {
        AnalysisLevel::Beneficiary => Box::new(|row| row),
        AnalysisLevel::Practice => {
            let keys = row_keys.clone();
            let repr = practice_repr.clone();
            Box::new(move |row| repr[keys[row].0 as usize].unwrap() as usize)
        }
    };

    // Covariates from the schema. At the practice level only practice-scope
    // covariates are usable; at the beneficiary level everything enters.
    for (k, e) in data.schema.entries.iter().enumerate() {
        if level == AnalysisLevel::Practice && scopes[k] != CovariateScope::Practice {
            continue;
        }
        match &e.kind {
            CovariateKind::Continuous => {
                let values: Vec<f64> = (0..n)
                    .map(|row| data.rows[row_source(row)].covariates[k].as_f64())
                    .collect();
                let cutpoints = cutpoint_grid(&values, max_cuts);
                columns.push(DesignColumn::Continuous {
                    name: e.name.clone(),
                    values,
                    cutpoints,
                });
            }
            CovariateKind::Binary => {
                let values: Vec<u32> = (0..n)
                    .map(|row| match data.rows[row_source(row)].covariates[k] {
                        CovValue::Level(l) => l,
                        CovValue::Continuous(_) => unreachable!(),
                    })
                    .collect();
                columns.push(DesignColumn::Categorical {
                    name: e.name.clone(),
                    n_levels: 2,
                    values,
                });
            }
            CovariateKind::Categorical { levels } => {
                let values: Vec<u32> = (0..n)
                    .map(|row| match data.rows[row_source(row)].covariates[k] {
                        CovValue::Level(l) => l,
                        CovValue::Continuous(_) => unreachable!(),
                    })
                    .collect();
                columns.push(DesignColumn::Categorical {
                    name: e.name.clone(),
                    n_levels: levels.len() as u32,
                    values,
                });
            }
        }
    }

    // Practice-composition averages per year.
    for (c, name) in averages.names.iter().enumerate() {
        for &yr in avg_years {
            let mut values = Vec::with_capacity(n);
            for &(p, _) in &row_keys {
                match averages.values[c].get(&(p, yr)) {
                    Some(&v) => values.push(v),
                    None => {
                        return Err(DataError::EmptyPracticeYear {
                            practice: data.practice_ids[p as usize].clone(),
                            year: yr,
                        })
                    }
                }
            }
            let cutpoints = cutpoint_grid(&values, max_cuts);
            columns.push(DesignColumn::Continuous {
                name: format!("{name}_y{yr}"),
                values,
                cutpoints,
            });
        }
    }

    // Year index.
    {
        let values: Vec<f64> = row_keys.iter().map(|&(_, t)| t as f64).collect();
        let cutpoints = cutpoint_grid(&values, max_cuts);
        columns.push(DesignColumn::Continuous {
            name: "year".to_string(),
            values,
            cutpoints,
        });
    }

    // Propensity score (mu only).
    if target == DesignTarget::Mu {
        let ps = ps.unwrap();
        if ps.len() != data.practice_ids.len() {
            return Err(DataError::Schema(format!(
                "propensity vector length {} != practice count {}",
                ps.len(),
                data.practice_ids.len()
            )));
        }
        let values: Vec<f64> = row_keys.iter().map(|&(p, _)| ps[p as usize]).collect();
        let cutpoints = cutpoint_grid(&values, max_cuts);
        columns.push(DesignColumn::Continuous {
            name: "ps".to_string(),
            values,
            cutpoints,
        });
    }

    // Practice identifier as one native categorical column.
    if level == AnalysisLevel::Beneficiary {
        let values: Vec<u32> = row_keys.iter().map(|&(p, _)| p).collect();
        columns.push(DesignColumn::Categorical {
            name: "practice".to_string(),
            n_levels: data.practice_ids.len() as u32,
            values,
        });
    }

    let row_weights = match level {
        AnalysisLevel::Practice => {
            Some(build_response(data, AnalysisLevel::Practice).weights)
        }
        AnalysisLevel::Beneficiary => None,
    };

    let dm = DesignMatrix {
        n,
        columns,
        row_weights,
    };
    dm.validate()?;
    Ok(dm)
}
