//! Posterior estimands: the overall average treatment effect on the
//! treated (ATT), subgroup ATTs with credible intervals, and the
//! model-free difference-in-differences cell estimator.
//!
//! The effect forest gives CATT(x, t) for a treated unit with covariates
//! x in post-treatment year t; averaging over the covariate distribution
//! of the treated rows yields the ATT. All posterior summaries stream
//! draws through the group-mean reducer — one number per draw per
//! (sub)group — so nothing scales with `rows x draws`. Intervals are
//! equal-tailed quantile intervals of the per-draw means.
//!
//! The DiD estimator `(Ȳ_t,z=1 − Ȳ_t,z=0) − (Ȳ_s,z=1 − Ȳ_s,z=0)` over a
//! discrete covariate cell identifies CATT(x, t) under parallel trends
//! with a pre-period year s, using sample means only. It serves as an
//! independent oracle for the forest-based estimates.

use serde::{Deserialize, Serialize};

use crate::data::{CovValue, DesignColumn, DesignMatrix, PanelDataset};
use crate::sampler::{predict_tau, GroupSpec, PosteriorArchive, SamplerError, TauReducer, TauSummaries};

#[derive(Debug, thiserror::Error)]
pub enum EstimandError {
    #[error("no treated rows selected")]
    NoTreatedRows,
    #[error("subgroup {0} matches no treated rows")]
    EmptySubgroup(String),
    #[error("empty DiD cell: {0}")]
    EmptyCell(String),
    #[error("aligned inputs have different lengths")]
    LengthMismatch,
    #[error("unknown covariate {0}")]
    UnknownCovariate(String),
    #[error("covariate {0} is not discrete")]
    NotDiscrete(String),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// A single subgroup: treated rows whose discrete covariate takes the
/// given level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupFilter {
    pub covariate: String,
    pub level: u32,
}

impl SubgroupFilter {
    pub fn label(&self) -> String {
        format!("{}={}", self.covariate, self.level)
    }
}

/// What to estimate from an archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimandRequest {
    /// Post-treatment years to pool over (subset of {3, 4}).
    pub years: Vec<u8>,
    pub subgroups: Vec<SubgroupFilter>,
    /// Credible-interval mass, default 0.90.
    pub level: f64,
}

impl Default for EstimandRequest {
    fn default() -> Self {
        EstimandRequest {
            years: vec![3, 4],
            subgroups: Vec::new(),
            level: 0.90,
        }
    }
}

impl EstimandRequest {
    pub fn validate(&self) -> Result<(), EstimandError> {
        if self.years.is_empty() {
            return Err(EstimandError::BadRequest("years must be nonempty".into()));
        }
        if self.years.iter().any(|y| *y != 3 && *y != 4) {
            return Err(EstimandError::BadRequest(
                "years must be a subset of {3, 4}".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(EstimandError::BadRequest(format!(
                "interval level {} outside (0, 1)",
                self.level
            )));
        }
        Ok(())
    }
}

/// Posterior summary of one estimand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    /// Posterior mean of the per-draw estimand.
    pub point: f64,
    /// Equal-tailed interval endpoints.
    pub lower: f64,
    pub upper: f64,
    pub draws_used: usize,
}

/// Linear-interpolation quantile of a sorted slice (the common
/// order-statistic convention: rank `p * (k - 1)` with interpolation).
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let k = sorted.len();
    if k == 1 {
        return sorted[0];
    }
    let pos = p * (k - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Mean and equal-tailed interval of a draw vector.
pub fn summarize_draws(draws: &[f64], level: f64) -> Result<EstimateSummary, EstimandError> {
    if draws.is_empty() {
        return Err(EstimandError::LengthMismatch);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EstimandError::BadRequest(format!(
            "interval level {level} outside (0, 1)"
        )));
    }
    let point = draws.iter().sum::<f64>() / draws.len() as f64;
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(EstimateSummary {
        point,
        lower: quantile_sorted(&sorted, tail),
        upper: quantile_sorted(&sorted, 1.0 - tail),
        draws_used: draws.len(),
    })
}

/// Overall ATT: the per-draw weighted mean of CATT over the supplied
/// treated rows, summarized with an equal-tailed interval.
///
/// `rows` must index treated (Z=1, t>2) rows of `tau_design`; `weights`
/// defaults to equal weight per row.
pub fn att(
    archive: &PosteriorArchive,
    tau_design: &DesignMatrix,
    rows: &[u32],
    weights: Option<&[f64]>,
    level: f64,
) -> Result<EstimateSummary, EstimandError> {
    if rows.is_empty() {
        return Err(EstimandError::NoTreatedRows);
    }
    if let Some(w) = weights {
        if w.len() != rows.len() {
            return Err(EstimandError::LengthMismatch);
        }
    }
    let group = GroupSpec {
        name: "att".into(),
        rows: rows.to_vec(),
        weights: weights.map(|w| w.to_vec()),
    };
    let summaries = predict_tau(
        archive,
        tau_design,
        &TauReducer::PerDrawGroupMeans {
            groups: vec![group],
        },
    )?;
    let TauSummaries::GroupMeans { values, .. } = summaries else {
        unreachable!("group-mean reducer returns group means");
    };
    let draws: Vec<f64> = values.iter().map(|v| v[0]).collect();
    summarize_draws(&draws, level)
}

/// Rows of `rows` whose design covariate matches the filter.
fn filter_rows(
    tau_design: &DesignMatrix,
    rows: &[u32],
    filter: &SubgroupFilter,
) -> Result<Vec<u32>, EstimandError> {
    let col = tau_design
        .column_index(&filter.covariate)
        .ok_or_else(|| EstimandError::UnknownCovariate(filter.covariate.clone()))?;
    match &tau_design.columns[col] {
        DesignColumn::Continuous { .. } => {
            Err(EstimandError::NotDiscrete(filter.covariate.clone()))
        }
        DesignColumn::Categorical { values, .. } => Ok(rows
            .iter()
            .copied()
            .filter(|&r| values[r as usize] == filter.level)
            .collect()),
    }
}

/// Subgroup ATTs: one summary per filter, all computed in a single
/// streaming pass over the archive.
pub fn subgroup_atts(
    archive: &PosteriorArchive,
    tau_design: &DesignMatrix,
    rows: &[u32],
    weights: Option<&[f64]>,
    filters: &[SubgroupFilter],
    level: f64,
) -> Result<Vec<(String, EstimateSummary)>, EstimandError> {
    if rows.is_empty() {
        return Err(EstimandError::NoTreatedRows);
    }
    if let Some(w) = weights {
        if w.len() != rows.len() {
            return Err(EstimandError::LengthMismatch);
        }
    }
    let mut groups = Vec::with_capacity(filters.len());
    for f in filters {
        let sub = filter_rows(tau_design, rows, f)?;
        if sub.is_empty() {
            return Err(EstimandError::EmptySubgroup(f.label()));
        }
        let sub_weights = weights.map(|w| {
            sub.iter()
                .map(|r| {
                    let k = rows.iter().position(|x| x == r).unwrap();
                    w[k]
                })
                .collect()
        });
        groups.push(GroupSpec {
            name: f.label(),
            rows: sub,
            weights: sub_weights,
        });
    }
    let summaries = predict_tau(
        archive,
        tau_design,
        &TauReducer::PerDrawGroupMeans { groups },
    )?;
    let TauSummaries::GroupMeans { names, values } = summaries else {
        unreachable!("group-mean reducer returns group means");
    };
    let mut out = Vec::with_capacity(filters.len());
    for (g, name) in names.into_iter().enumerate() {
        let draws: Vec<f64> = values.iter().map(|v| v[g]).collect();
        out.push((name, summarize_draws(&draws, level)?));
    }
    Ok(out)
}

/// The default subgroup set over a design: every level of every discrete
/// covariate named in `covariates` (in the standard generator this is
/// X1, X3, X5 binary and X2, X4 three-level — twelve subgroups).
pub fn default_subgroups(
    tau_design: &DesignMatrix,
    covariates: &[&str],
) -> Result<Vec<SubgroupFilter>, EstimandError> {
    let mut filters = Vec::new();
    for &name in covariates {
        let col = tau_design
            .column_index(name)
            .ok_or_else(|| EstimandError::UnknownCovariate(name.to_string()))?;
        match &tau_design.columns[col] {
            DesignColumn::Continuous { .. } => {
                return Err(EstimandError::NotDiscrete(name.to_string()))
            }
            DesignColumn::Categorical { n_levels, .. } => {
                for level in 0..*n_levels {
                    filters.push(SubgroupFilter {
                        covariate: name.to_string(),
                        level,
                    });
                }
            }
        }
    }
    Ok(filters)
}

/// A discrete covariate cell: every listed covariate pinned to a level.
pub type CellSpec = Vec<(String, u32)>;

fn row_in_cell(
    data: &PanelDataset,
    row: usize,
    indices: &[(usize, u32)],
) -> bool {
    indices.iter().all(|&(k, level)| {
        matches!(data.rows[row].covariates[k], CovValue::Level(l) if l == level)
    })
}

/// Model-free DiD estimate of CATT(x, t) within a discrete covariate
/// cell, using pre-period year `s`:
///
/// ```text
/// (mean Y | t, Z=1, x) − (mean Y | t, Z=0, x)
///   − [(mean Y | s, Z=1, x) − (mean Y | s, Z=0, x)]
/// ```
///
/// Under parallel trends the result is the same for s = 1 and s = 2 in
/// expectation, which tests are free to exploit.
pub fn did_cell_estimator(
    data: &PanelDataset,
    cell: &CellSpec,
    s: u8,
    t: u8,
) -> Result<f64, EstimandError> {
    if !(s == 1 || s == 2) {
        return Err(EstimandError::BadRequest(format!(
            "pre-period year {s} must be 1 or 2"
        )));
    }
    if !(t == 3 || t == 4) {
        return Err(EstimandError::BadRequest(format!(
            "post-period year {t} must be 3 or 4"
        )));
    }
    let mut indices = Vec::with_capacity(cell.len());
    for (name, level) in cell {
        let k = data
            .schema
            .index_of(name)
            .ok_or_else(|| EstimandError::UnknownCovariate(name.clone()))?;
        match data.schema.level_count(k) {
            None => return Err(EstimandError::NotDiscrete(name.clone())),
            Some(_) => indices.push((k, *level)),
        }
    }
    // four cell-conditional means: (year, treated-practice)
    let mut sums = [[0.0f64; 2]; 2];
    let mut counts = [[0u64; 2]; 2];
    for (i, r) in data.rows.iter().enumerate() {
        let yi = if r.year == t {
            0
        } else if r.year == s {
            1
        } else {
            continue;
        };
        if !row_in_cell(data, i, &indices) {
            continue;
        }
        let zi = r.treated as usize;
        sums[yi][zi] += r.outcome;
        counts[yi][zi] += 1;
    }
    for (yi, year) in [(0usize, t), (1usize, s)] {
        for zi in 0..2 {
            if counts[yi][zi] == 0 {
                let label: Vec<String> =
                    cell.iter().map(|(n, l)| format!("{n}={l}")).collect();
                return Err(EstimandError::EmptyCell(format!(
                    "year {year}, z={zi}, cell {{{}}}",
                    label.join(", ")
                )));
            }
        }
    }
    let mean = |yi: usize, zi: usize| sums[yi][zi] / counts[yi][zi] as f64;
    Ok((mean(0, 1) - mean(0, 0)) - (mean(1, 1) - mean(1, 0)))
}
