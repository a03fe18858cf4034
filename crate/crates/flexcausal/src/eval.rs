//! Simulation-study harness: RMSE, interval coverage, and relative
//! interval length per method and regime category.
//!
//! A study runs every configured method on the *same* generated data
//! within each (category, replication) cell, compares the resulting
//! point estimates and credible intervals to the generator's analytic
//! truth, and aggregates. Replications fan out to a rayon worker pool;
//! aggregation is a deterministic fold ordered by (category, rep), so
//! reports do not depend on completion order or on the order methods are
//! listed. Per-replication results are cached on disk keyed by a content
//! hash of (study config, estimator tag, category, rep) so interrupted
//! studies resume where they stopped.
//!
//! Relative interval length is the ratio of a method's mean interval
//! length to the baseline method's mean length in the same cell; the
//! baseline's own ratio is exactly 1. Per-replication failures are
//! recorded and counted, never fatal to the study.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_design, build_response, AnalysisLevel, DesignTarget, PanelDataset};
use crate::dgp::{generate, regime_config, DgpConfig, TruthRecord};
use crate::estimands::{att, default_subgroups, subgroup_atts, EstimateSummary};
use crate::priors::SparsityMode;
use crate::propensity::{practice_propensities, PsFitSettings, PsMethod};
use crate::sampler::{fit, SamplerConfig};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("aligned inputs have different lengths")]
    LengthMismatch,
    #[error("empty input")]
    EmptyInput,
    #[error("baseline interval has zero length at replication {0}")]
    ZeroBaselineLength(usize),
    #[error("baseline method {0} not in the method list")]
    UnknownBaseline(String),
    #[error("invalid study: {0}")]
    BadStudy(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cache entry: {0}")]
    Json(#[from] serde_json::Error),
}

/// One model configuration under study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub ps_method: PsMethod,
    /// Splitting-probability prior of both forests: `Dirichlet` is the
    /// sparsity-inducing (S) variant, `Uniform` the dense (D) variant.
    pub sparsity: SparsityMode,
    pub level: AnalysisLevel,
}

impl MethodConfig {
    /// Display label, e.g. `GBM(S)`.
    pub fn label(&self) -> String {
        let suffix = match self.sparsity {
            SparsityMode::Dirichlet => "S",
            SparsityMode::Uniform => "D",
        };
        format!("{}({})", self.ps_method.label().to_uppercase(), suffix)
    }
}

/// Full study configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Base generator settings; confounding/heterogeneity knobs are
    /// overridden per category.
    pub dgp: DgpConfig,
    pub sampler: SamplerConfig,
    pub methods: Vec<MethodConfig>,
    pub categories: Vec<u8>,
    pub reps: usize,
    /// Label of the reference method for relative interval length.
    pub baseline: String,
    /// Credible-interval mass.
    pub level: f64,
    /// Cutpoint budget per continuous design column.
    pub max_cuts: usize,
    /// Replication cache directory; `FLEXCAUSAL_TMP` (or the system
    /// tempdir) when absent. Not part of the cache key.
    #[serde(skip_serializing, default)]
    pub cache_dir: Option<PathBuf>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            dgp: DgpConfig::default(),
            sampler: SamplerConfig::default(),
            methods: vec![
                MethodConfig {
                    ps_method: PsMethod::Lasso,
                    sparsity: SparsityMode::Dirichlet,
                    level: AnalysisLevel::Practice,
                },
                MethodConfig {
                    ps_method: PsMethod::Gbm,
                    sparsity: SparsityMode::Dirichlet,
                    level: AnalysisLevel::Practice,
                },
            ],
            categories: vec![1, 2, 3, 4, 5],
            reps: 10,
            baseline: "LASSO(S)".into(),
            level: 0.90,
            max_cuts: 100,
            cache_dir: None,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.reps < 2 {
            return Err(EvalError::BadStudy("need at least 2 replications".into()));
        }
        if self.methods.is_empty() || self.categories.is_empty() {
            return Err(EvalError::BadStudy(
                "need at least one method and one category".into(),
            ));
        }
        if !self.methods.iter().any(|m| m.label() == self.baseline) {
            return Err(EvalError::UnknownBaseline(self.baseline.clone()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(EvalError::BadStudy(format!(
                "interval level {} outside (0, 1)",
                self.level
            )));
        }
        Ok(())
    }
}

/// Point estimates and intervals one method produced on one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodEstimates {
    pub att: EstimateSummary,
    pub subgroups: Vec<(String, EstimateSummary)>,
}

/// Everything recorded about one (category, replication) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RepRecord {
    category: u8,
    rep: usize,
    truth_att: f64,
    truth_subgroups: Vec<(String, f64)>,
    /// Successful methods by label.
    methods: BTreeMap<String, MethodEstimates>,
    /// Failed methods by label, with the error message.
    failures: BTreeMap<String, String>,
}

/// One aggregated report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub category: u8,
    /// `"att"` or `"subgroup_avg"` (metrics averaged over subgroups).
    pub estimand: String,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_length: f64,
    pub relative_length: f64,
    /// Replications that produced an estimate.
    pub reps_used: usize,
    pub failures: usize,
}

/// One long-format row for external plotting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotRow {
    pub category: u8,
    pub rep: usize,
    pub method: String,
    pub estimand: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub truth: f64,
    pub covered: bool,
}

/// Aggregated study output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// Per-replication long-format rows (the `--plot-data` payload).
    pub plot_rows: Vec<PlotRow>,
}

/// Root mean square error of aligned estimate/truth pairs.
pub fn rmse(estimates: &[f64], truths: &[f64]) -> Result<f64, EvalError> {
    if estimates.len() != truths.len() {
        return Err(EvalError::LengthMismatch);
    }
    if estimates.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let ss: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e - t) * (e - t))
        .sum();
    Ok((ss / estimates.len() as f64).sqrt())
}

/// Fraction of closed intervals containing the truth.
pub fn coverage(intervals: &[(f64, f64)], truths: &[f64]) -> Result<f64, EvalError> {
    if intervals.len() != truths.len() {
        return Err(EvalError::LengthMismatch);
    }
    if intervals.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hits = intervals
        .iter()
        .zip(truths)
        .filter(|((lo, hi), t)| *lo <= **t && **t <= *hi)
        .count();
    Ok(hits as f64 / intervals.len() as f64)
}

/// Per-replication interval-length ratios and the ratio of mean lengths.
pub fn relative_length(
    method_lengths: &[f64],
    baseline_lengths: &[f64],
) -> Result<(f64, Vec<f64>), EvalError> {
    if method_lengths.len() != baseline_lengths.len() {
        return Err(EvalError::LengthMismatch);
    }
    if method_lengths.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if let Some(i) = baseline_lengths.iter().position(|&l| !(l > 0.0)) {
        return Err(EvalError::ZeroBaselineLength(i));
    }
    let ratios: Vec<f64> = method_lengths
        .iter()
        .zip(baseline_lengths)
        .map(|(m, b)| m / b)
        .collect();
    let mean_ratio = method_lengths.iter().sum::<f64>() / baseline_lengths.iter().sum::<f64>();
    Ok((mean_ratio, ratios))
}

/// Cache directory: explicit override, else `FLEXCAUSAL_TMP`, else the
/// system tempdir.
fn cache_dir(cfg: &StudyConfig) -> PathBuf {
    if let Some(dir) = &cfg.cache_dir {
        return dir.clone();
    }
    std::env::var_os("FLEXCAUSAL_TMP")
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir)
        .join("flexcausal-cache")
}

fn cache_key(cfg: &StudyConfig, tag: &str, category: u8, rep: usize) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("study config serializes"));
    h.update(tag.as_bytes());
    h.update([category]);
    h.update(rep.to_le_bytes());
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable per-(category, rep, method) seed, independent of ordering.
fn method_seed(base: u64, category: u8, rep: usize, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update([category]);
    h.update(rep.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is long enough"))
}

/// The full model pipeline for one method on one replication: estimate
/// propensities, build designs, run the sampler, summarize estimands.
fn model_estimator(
    data: &PanelDataset,
    _truth: &TruthRecord,
    method: &MethodConfig,
    cfg: &StudyConfig,
    seed: u64,
) -> Result<MethodEstimates, String> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);

    let resp = build_response(data, method.level);
    let (_, ps) = practice_propensities(
        data,
        &PsFitSettings::for_method(method.ps_method),
        method.level,
        cfg.max_cuts,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;

    let mu_design = build_design(data, DesignTarget::Mu, method.level, Some(&ps), cfg.max_cuts)
        .map_err(|e| e.to_string())?;
    let tau_design = build_design(data, DesignTarget::Tau, method.level, None, cfg.max_cuts)
        .map_err(|e| e.to_string())?;

    let sampler_cfg = SamplerConfig {
        seed: seed ^ 0x5eed,
        mu_sparsity: method.sparsity,
        tau_sparsity: method.sparsity,
        ..cfg.sampler.clone()
    };
    let dir = tempfile::Builder::new()
        .prefix("flexcausal-fit")
        .tempdir()
        .map_err(|e| e.to_string())?;
    let archive_path = dir.path().join("posterior.forest");
    let archive = fit(
        &mu_design,
        &tau_design,
        &resp.y,
        &resp.zmask,
        &sampler_cfg,
        &archive_path,
    )
    .map_err(|e| e.to_string())?;

    let rows: Vec<u32> = (0..resp.zmask.len() as u32)
        .filter(|&i| resp.zmask[i as usize])
        .collect();
    let att_summary =
        att(&archive, &tau_design, &rows, None, cfg.level).map_err(|e| e.to_string())?;
    let filters = default_subgroups(&tau_design, &["X1", "X2", "X3", "X4", "X5"])
        .map_err(|e| e.to_string())?;
    let subgroups = subgroup_atts(&archive, &tau_design, &rows, None, &filters, cfg.level)
        .map_err(|e| e.to_string())?;
    Ok(MethodEstimates {
        att: att_summary,
        subgroups,
    })
}

/// Run one (category, rep) cell through `estimator` for every method.
fn run_replication<F>(
    cfg: &StudyConfig,
    category: u8,
    rep: usize,
    estimator: &F,
) -> Result<RepRecord, EvalError>
where
    F: Fn(&PanelDataset, &TruthRecord, &MethodConfig, u64) -> Result<MethodEstimates, String>,
{
    let dgp = regime_config(&cfg.dgp, category).map_err(|e| EvalError::BadStudy(e.to_string()))?;
    let mut record = RepRecord {
        category,
        rep,
        truth_att: f64::NAN,
        truth_subgroups: Vec::new(),
        methods: BTreeMap::new(),
        failures: BTreeMap::new(),
    };
    let (data, truth) = match generate(&dgp, rep) {
        Ok(pair) => pair,
        Err(e) => {
            // the whole cell fails; every method records the failure
            for m in &cfg.methods {
                record.failures.insert(m.label(), e.to_string());
            }
            return Ok(record);
        }
    };
    record.truth_att = truth.att_pooled;
    record.truth_subgroups = truth.subgroup_atts.clone();
    for m in &cfg.methods {
        let label = m.label();
        if record.methods.contains_key(&label) || record.failures.contains_key(&label) {
            continue; // duplicate configs share one result
        }
        let seed = method_seed(cfg.dgp.seed, category, rep, &label);
        match estimator(&data, &truth, m, seed) {
            Ok(est) => {
                record.methods.insert(label, est);
            }
            Err(msg) => {
                record.failures.insert(label, msg);
            }
        }
    }
    Ok(record)
}

/// Run the study with the real model pipeline.
pub fn run_study(cfg: &StudyConfig, workers: Option<usize>) -> Result<EvalReport, EvalError> {
    let study = cfg.clone();
    run_study_with(cfg, workers, "model", move |data, truth, m, seed| {
        model_estimator(data, truth, m, &study, seed)
    })
}

/// Run the study with a custom per-method estimator (test hook; `tag`
/// separates cache namespaces between estimators).
pub fn run_study_with<F>(
    cfg: &StudyConfig,
    workers: Option<usize>,
    tag: &str,
    estimator: F,
) -> Result<EvalReport, EvalError>
where
    F: Fn(&PanelDataset, &TruthRecord, &MethodConfig, u64) -> Result<MethodEstimates, String>
        + Sync,
{
    cfg.validate()?;
    let cache = cache_dir(cfg);
    std::fs::create_dir_all(&cache)?;

    let mut cells: Vec<(u8, usize)> = Vec::new();
    for &c in &cfg.categories {
        for rep in 0..cfg.reps {
            cells.push((c, rep));
        }
    }

    let run_cell = |&(category, rep): &(u8, usize)| -> Result<RepRecord, EvalError> {
        let key = cache_key(cfg, tag, category, rep);
        let path = cache.join(format!("{key}.json"));
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(rec) = serde_json::from_str::<RepRecord>(&text) {
                return Ok(rec);
            }
        }
        let rec = run_replication(cfg, category, rep, &estimator)?;
        // atomic publish so concurrent workers never read partial json
        let tmp = cache.join(format!("{key}.json.tmp{rep}"));
        std::fs::write(&tmp, serde_json::to_vec(&rec)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(rec)
    };

    let records: Vec<Result<RepRecord, EvalError>> = match workers {
        Some(1) => cells.iter().map(run_cell).collect(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| EvalError::BadStudy(e.to_string()))?
            .install(|| cells.par_iter().map(run_cell).collect()),
        None => cells.par_iter().map(run_cell).collect(),
    };
    let mut records: Vec<RepRecord> = records.into_iter().collect::<Result<_, _>>()?;
    records.sort_by_key(|r| (r.category, r.rep));

    aggregate(cfg, &records)
}

/// Deterministic fold of per-replication records into report rows.
fn aggregate(cfg: &StudyConfig, records: &[RepRecord]) -> Result<EvalReport, EvalError> {
    let mut labels: Vec<String> = cfg.methods.iter().map(|m| m.label()).collect();
    labels.sort();
    labels.dedup();

    let mut rows = Vec::new();
    let mut plot_rows = Vec::new();
    for &category in &cfg.categories {
        let cat_records: Vec<&RepRecord> =
            records.iter().filter(|r| r.category == category).collect();

        // baseline mean lengths for this category, per estimand
        let baseline_att_lengths: Vec<f64> = cat_records
            .iter()
            .filter_map(|r| r.methods.get(&cfg.baseline))
            .map(|e| e.att.upper - e.att.lower)
            .collect();
        let baseline_sub_lengths: Vec<f64> = cat_records
            .iter()
            .filter_map(|r| r.methods.get(&cfg.baseline))
            .flat_map(|e| e.subgroups.iter().map(|(_, s)| s.upper - s.lower))
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let base_att_len = mean(&baseline_att_lengths);
        let base_sub_len = mean(&baseline_sub_lengths);

        for label in &labels {
            let mut att_points = Vec::new();
            let mut att_intervals = Vec::new();
            let mut att_truths = Vec::new();
            // per-subgroup series keyed by subgroup label
            let mut sub_points: BTreeMap<String, (Vec<f64>, Vec<(f64, f64)>, Vec<f64>)> =
                BTreeMap::new();
            let mut failures = 0usize;
            for r in &cat_records {
                if r.failures.contains_key(label) {
                    failures += 1;
                    continue;
                }
                let Some(est) = r.methods.get(label) else {
                    continue;
                };
                att_points.push(est.att.point);
                att_intervals.push((est.att.lower, est.att.upper));
                att_truths.push(r.truth_att);
                plot_rows.push(PlotRow {
                    category,
                    rep: r.rep,
                    method: label.clone(),
                    estimand: "att".into(),
                    point: est.att.point,
                    lower: est.att.lower,
                    upper: est.att.upper,
                    truth: r.truth_att,
                    covered: est.att.lower <= r.truth_att && r.truth_att <= est.att.upper,
                });
                let truth_map: BTreeMap<&str, f64> = r
                    .truth_subgroups
                    .iter()
                    .map(|(n, v)| (n.as_str(), *v))
                    .collect();
                for (name, s) in &est.subgroups {
                    let Some(&t) = truth_map.get(name.as_str()) else {
                        continue;
                    };
                    if t.is_nan() {
                        continue; // subgroup had no treated practices
                    }
                    let entry = sub_points.entry(name.clone()).or_default();
                    entry.0.push(s.point);
                    entry.1.push((s.lower, s.upper));
                    entry.2.push(t);
                    plot_rows.push(PlotRow {
                        category,
                        rep: r.rep,
                        method: label.clone(),
                        estimand: name.clone(),
                        point: s.point,
                        lower: s.lower,
                        upper: s.upper,
                        truth: t,
                        covered: s.lower <= t && t <= s.upper,
                    });
                }
            }

            if !att_points.is_empty() {
                let lengths: Vec<f64> = att_intervals.iter().map(|(l, u)| u - l).collect();
                let ml = mean(&lengths);
                rows.push(ReportRow {
                    method: label.clone(),
                    category,
                    estimand: "att".into(),
                    rmse: rmse(&att_points, &att_truths)?,
                    coverage: coverage(&att_intervals, &att_truths)?,
                    mean_length: ml,
                    relative_length: if base_att_len > 0.0 {
                        ml / base_att_len
                    } else {
                        f64::NAN
                    },
                    reps_used: att_points.len(),
                    failures,
                });
            }
            if !sub_points.is_empty() {
                // unweighted averages of per-subgroup metrics
                let mut rmses = Vec::new();
                let mut covs = Vec::new();
                let mut lens = Vec::new();
                for (_, (points, intervals, truths)) in &sub_points {
                    rmses.push(rmse(points, truths)?);
                    covs.push(coverage(intervals, truths)?);
                    lens.push(mean(
                        &intervals.iter().map(|(l, u)| u - l).collect::<Vec<_>>(),
                    ));
                }
                let ml = mean(&lens);
                rows.push(ReportRow {
                    method: label.clone(),
                    category,
                    estimand: "subgroup_avg".into(),
                    rmse: mean(&rmses),
                    coverage: mean(&covs),
                    mean_length: ml,
                    relative_length: if base_sub_len > 0.0 {
                        ml / base_sub_len
                    } else {
                        f64::NAN
                    },
                    reps_used: att_points.len(),
                    failures,
                });
            }
            if att_points.is_empty() && failures > 0 {
                rows.push(ReportRow {
                    method: label.clone(),
                    category,
                    estimand: "att".into(),
                    rmse: f64::NAN,
                    coverage: f64::NAN,
                    mean_length: f64::NAN,
                    relative_length: f64::NAN,
                    reps_used: 0,
                    failures,
                });
            }
        }
    }
    Ok(EvalReport { rows, plot_rows })
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path).map_err(io_of_csv)?;
        w.write_record([
            "method",
            "category",
            "estimand",
            "rmse",
            "coverage",
            "mean_length",
            "relative_length",
            "reps_used",
            "failures",
        ])
        .map_err(io_of_csv)?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.category.to_string(),
                r.estimand.clone(),
                format!("{}", r.rmse),
                format!("{}", r.coverage),
                format!("{}", r.mean_length),
                format!("{}", r.relative_length),
                r.reps_used.to_string(),
                r.failures.to_string(),
            ])
            .map_err(io_of_csv)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }

    /// Long-format per-replication CSV for external boxplot scripts.
    pub fn write_plot_data(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path).map_err(io_of_csv)?;
        w.write_record([
            "category", "rep", "method", "estimand", "point", "lower", "upper", "truth",
            "covered",
        ])
        .map_err(io_of_csv)?;
        for r in &self.plot_rows {
            w.write_record([
                r.category.to_string(),
                r.rep.to_string(),
                r.method.clone(),
                r.estimand.clone(),
                format!("{}", r.point),
                format!("{}", r.lower),
                format!("{}", r.upper),
                format!("{}", r.truth),
                r.covered.to_string(),
            ])
            .map_err(io_of_csv)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn io_of_csv(e: csv::Error) -> EvalError {
    EvalError::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn rmse_examples_and_reference() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, -3.0]).unwrap(), 3.0);
        assert!(matches!(
            rmse(&[1.0], &[1.0, 2.0]),
            Err(EvalError::LengthMismatch)
        ));
        assert!(matches!(rmse(&[], &[]), Err(EvalError::EmptyInput)));
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let est: Vec<f64> = (0..200).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let tru: Vec<f64> = (0..200).map(|_| rng.gen_range(-5.0..5.0)).collect();
        // two-pass reference: collect squared errors first, then average
        let sq: Vec<f64> = est.iter().zip(&tru).map(|(e, t)| (e - t) * (e - t)).collect();
        let reference = (sq.iter().sum::<f64>() / sq.len() as f64).sqrt();
        assert!((rmse(&est, &tru).unwrap() - reference).abs() < 1e-12);
    }

    #[test]
    fn coverage_examples_and_closed_endpoints() {
        assert_eq!(
            coverage(&[(0.0, 1.0), (-1.0, 1.0)], &[0.5, 0.0]).unwrap(),
            1.0
        );
        assert_eq!(
            coverage(&[(0.0, 1.0), (0.0, 1.0)], &[2.0, -2.0]).unwrap(),
            0.0
        );
        // truth on either boundary counts as covered
        assert_eq!(coverage(&[(1.0, 2.0), (1.0, 2.0)], &[1.0, 2.0]).unwrap(), 1.0);
        assert!(matches!(
            coverage(&[(0.0, 1.0)], &[0.5, 0.5]),
            Err(EvalError::LengthMismatch)
        ));
    }

    #[test]
    fn relative_length_examples() {
        let (mean, ratios) = relative_length(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(ratios, vec![1.0, 1.0]);
        let (mean, ratios) = relative_length(&[2.0, 4.0], &[1.0, 2.0]).unwrap();
        assert_eq!(mean, 2.0);
        assert_eq!(ratios, vec![2.0, 2.0]);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let m: Vec<f64> = (0..50).map(|_| rng.gen_range(0.1..3.0)).collect();
        let b: Vec<f64> = (0..50).map(|_| rng.gen_range(0.1..3.0)).collect();
        let (_, ratios) = relative_length(&m, &b).unwrap();
        for i in 0..50 {
            assert!((ratios[i] - m[i] / b[i]).abs() < 1e-12);
        }
        assert!(matches!(
            relative_length(&[1.0], &[0.0]),
            Err(EvalError::ZeroBaselineLength(0))
        ));
    }

    #[test]
    fn normal_posterior_coverage_sits_in_binomial_band() {
        // correctly specified toy posterior: truth 0, point ~ N(0, 1),
        // interval point +/- 1.645 — long-run 90% coverage
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut intervals = Vec::new();
        let truths = vec![0.0; 500];
        for _ in 0..500 {
            let point: f64 = rng.sample(rand_distr::StandardNormal);
            intervals.push((point - 1.645, point + 1.645));
        }
        let c = coverage(&intervals, &truths).unwrap();
        assert!((0.86..=0.94).contains(&c), "coverage {c}");
    }

    fn tiny_study(dir: &Path) -> StudyConfig {
        StudyConfig {
            dgp: DgpConfig {
                practices: 60,
                beneficiary_median: 3.0,
                beneficiary_log_sd: 0.2,
                seed: 21,
                ..DgpConfig::default()
            },
            categories: vec![1, 2],
            reps: 3,
            cache_dir: Some(dir.to_path_buf()),
            ..StudyConfig::default()
        }
    }

    /// Estimator that returns the truth as a point interval.
    fn oracle(
        _data: &PanelDataset,
        truth: &TruthRecord,
        _m: &MethodConfig,
        _seed: u64,
    ) -> Result<MethodEstimates, String> {
        let point = |v: f64| EstimateSummary {
            point: v,
            lower: v - 0.5,
            upper: v + 0.5,
            draws_used: 1,
        };
        Ok(MethodEstimates {
            att: point(truth.att_pooled),
            subgroups: truth
                .subgroup_atts
                .iter()
                .map(|(n, v)| (n.clone(), point(*v)))
                .collect(),
        })
    }

    #[test]
    fn oracle_stub_yields_zero_rmse_full_coverage_unit_relative_length() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_study(dir.path());
        let report = run_study_with(&cfg, Some(1), "oracle", oracle).unwrap();
        assert!(!report.rows.is_empty());
        for row in &report.rows {
            assert_eq!(row.rmse, 0.0, "{row:?}");
            assert_eq!(row.coverage, 1.0);
            assert!((row.relative_length - 1.0).abs() < 1e-12);
            assert_eq!(row.reps_used, 3);
            assert_eq!(row.failures, 0);
        }
        // both methods, both categories, att + subgroup rows
        assert_eq!(report.rows.len(), 2 * 2 * 2);
    }

    #[test]
    fn study_is_deterministic_and_order_invariant() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg1 = tiny_study(d1.path());
        let mut cfg2 = tiny_study(d2.path());
        cfg2.methods.reverse();
        let r1 = run_study_with(&cfg1, Some(2), "oracle", oracle).unwrap();
        let r2 = run_study_with(&cfg2, Some(1), "oracle", oracle).unwrap();
        assert_eq!(r1.rows, r2.rows);
        // duplicated method configs do not change the report
        let d3 = tempfile::tempdir().unwrap();
        let mut cfg3 = tiny_study(d3.path());
        let dup = cfg3.methods[0].clone();
        cfg3.methods.push(dup);
        let r3 = run_study_with(&cfg3, Some(1), "oracle", oracle).unwrap();
        assert_eq!(r1.rows, r3.rows);
    }

    #[test]
    fn cache_resumes_without_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_study(dir.path());
        let calls = AtomicUsize::new(0);
        let counting = |d: &PanelDataset, t: &TruthRecord, m: &MethodConfig, s: u64| {
            calls.fetch_add(1, Ordering::SeqCst);
            oracle(d, t, m, s)
        };
        let r1 = run_study_with(&cfg, Some(1), "count", counting).unwrap();
        let first = calls.load(Ordering::SeqCst);
        assert!(first > 0);
        let r2 = run_study_with(&cfg, Some(1), "count", counting).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), first, "cache was not used");
        assert_eq!(r1.rows, r2.rows);
    }

    #[test]
    fn per_replication_failures_are_counted_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_study(dir.path());
        let flaky = |d: &PanelDataset, t: &TruthRecord, m: &MethodConfig, s: u64| {
            if m.ps_method == PsMethod::Gbm && s % 2 == 0 {
                Err("synthetic failure".to_string())
            } else {
                oracle(d, t, m, s)
            }
        };
        let report = run_study_with(&cfg, Some(1), "flaky", flaky).unwrap();
        let lasso_rows: Vec<_> = report
            .rows
            .iter()
            .filter(|r| r.method == "LASSO(S)")
            .collect();
        for r in &lasso_rows {
            assert_eq!(r.failures, 0);
            assert_eq!(r.reps_used, 3);
        }
        let gbm_failures: usize = report
            .rows
            .iter()
            .filter(|r| r.method == "GBM(S)" && r.estimand == "att")
            .map(|r| r.failures)
            .sum();
        let gbm_used: usize = report
            .rows
            .iter()
            .filter(|r| r.method == "GBM(S)" && r.estimand == "att")
            .map(|r| r.reps_used)
            .sum();
        assert!(gbm_failures > 0, "expected synthetic failures");
        assert_eq!(gbm_failures + gbm_used, 6, "every cell accounted for");
    }

    #[test]
    fn labels_and_validation() {
        let m = MethodConfig {
            ps_method: PsMethod::Gbm,
            sparsity: SparsityMode::Dirichlet,
            level: AnalysisLevel::Practice,
        };
        assert_eq!(m.label(), "GBM(S)");
        let m = MethodConfig {
            ps_method: PsMethod::Lasso,
            sparsity: SparsityMode::Uniform,
            level: AnalysisLevel::Beneficiary,
        };
        assert_eq!(m.label(), "LASSO(D)");

        let mut cfg = StudyConfig::default();
        cfg.reps = 1;
        assert!(matches!(cfg.validate(), Err(EvalError::BadStudy(_))));
        let mut cfg = StudyConfig::default();
        cfg.baseline = "CBPS(S)".into();
        assert!(matches!(cfg.validate(), Err(EvalError::UnknownBaseline(_))));
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_study(dir.path());
        let report = run_study_with(&cfg, Some(1), "files", oracle).unwrap();
        let csv_path = dir.path().join("report.csv");
        let json_path = dir.path().join("report.json");
        let plot_path = dir.path().join("plot.csv");
        report.write_csv(&csv_path).unwrap();
        report.write_json(&json_path).unwrap();
        report.write_plot_data(&plot_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().count(), report.rows.len() + 1);
        let loaded: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(loaded.rows, report.rows);
        let plot = std::fs::read_to_string(&plot_path).unwrap();
        assert_eq!(plot.lines().count(), report.plot_rows.len() + 1);
    }

    #[test]
    fn real_pipeline_smoke_study() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = StudyConfig {
            dgp: DgpConfig {
                practices: 50,
                beneficiary_median: 3.0,
                beneficiary_log_sd: 0.2,
                seed: 33,
                ..DgpConfig::default()
            },
            sampler: SamplerConfig {
                burn_in: 30,
                draws: 40,
                mu_trees: 20,
                tau_trees: 8,
                ..SamplerConfig::default()
            },
            methods: vec![MethodConfig {
                ps_method: PsMethod::Lasso,
                sparsity: SparsityMode::Dirichlet,
                level: AnalysisLevel::Practice,
            }],
            categories: vec![1],
            reps: 2,
            cache_dir: Some(dir.path().to_path_buf()),
            ..StudyConfig::default()
        };
        let report = run_study(&cfg, Some(2)).unwrap();
        let att_row = report
            .rows
            .iter()
            .find(|r| r.estimand == "att")
            .expect("att row present");
        assert_eq!(att_row.reps_used, 2);
        assert_eq!(att_row.failures, 0);
        assert!(att_row.rmse.is_finite() && att_row.rmse >= 0.0);
        assert!((0.0..=1.0).contains(&att_row.coverage));
        assert!(att_row.mean_length > 0.0);
        assert_eq!(att_row.relative_length, 1.0);
    }
}

