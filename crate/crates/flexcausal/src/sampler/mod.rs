//! Gibbs backfitting over the prognostic (mu) and treatment-effect (tau)
//! forests, fitting
//!
//! ```text
//! E[Y | x, z, t] = mu(x, t) + z * 1{t > 2} * tau(x, t)
//! ```
//!
//! Each sweep updates every mu tree (all rows contribute), every tau tree
//! (only rows with `zmask = 1` contribute, since tau is multiplied by the
//! mask), then the noise scale, then the splitting-variable probabilities.
//!
//! Tree updates are local: the Metropolis-Hastings ratio for a grow/prune
//! proposal is computed from the sufficient statistics of the at most two
//! affected leaves, leaf means are redrawn only for those leaves, and
//! cached row fits move by delta. No step other than the once-per-sweep
//! noise update loops over the full dataset, and no `n x draws` matrix is
//! ever allocated: draws stream to the archive file as they happen.

pub mod archive;
pub mod predict;
pub mod reference;

pub use archive::{ArchiveHeader, ArchiveReader, DrawRecord, PosteriorArchive};
pub use predict::{predict_tau, GroupSpec, TauReducer, TauSummaries};

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DesignColumn, DesignMatrix};
use crate::priors::{
    draw_sigma, leaf_posterior, marginal_loglik, split_prob, LeafPriorParams, NoisePriorParams,
    SparsityMode, SplitProbVector, TreePriorParams,
};
use crate::trees::{
    grow, LeafAssignment, LeafStats, LevelSet, RegressionTree, SplitRule, TreeOpError, MAX_DEPTH,
};

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("outcome has zero variance")]
    DegenerateOutcome,
    #[error("no treated rows: tau is unidentifiable")]
    NoTreatedRows,
    #[error("row-aligned inputs have mismatched lengths")]
    RowMismatch,
    #[error("design covariate count {got} does not match archive p={expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("archive parse error: {0}")]
    Parse(#[from] crate::trees::ParseError),
    #[error("invalid config: {0}")]
    Config(String),
}

fn default_burn_in() -> usize {
    1000
}
fn default_draws() -> usize {
    2000
}
fn default_thin() -> usize {
    1
}
fn default_mu_trees() -> usize {
    200
}
fn default_tau_trees() -> usize {
    50
}
fn default_nu() -> f64 {
    3.0
}
fn default_q() -> f64 {
    0.9
}
fn default_concentration() -> f64 {
    1.0
}
fn default_sparsity() -> SparsityMode {
    SparsityMode::Dirichlet
}

/// Sampler configuration; absent JSON fields take the documented defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mu_trees")]
    pub mu_trees: usize,
    #[serde(default = "default_tau_trees")]
    pub tau_trees: usize,
    #[serde(default)]
    pub tree_prior: TreePriorParams,
    /// Leaf prior sds on the standardized scale; derived from the tree
    /// counts when absent.
    #[serde(default)]
    pub leaf_sd_mu: Option<f64>,
    #[serde(default)]
    pub leaf_sd_tau: Option<f64>,
    #[serde(default = "default_nu")]
    pub nu: f64,
    /// Quantile at which the noise prior is calibrated against the
    /// overfit residual estimate.
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default = "default_sparsity")]
    pub mu_sparsity: SparsityMode,
    #[serde(default = "default_sparsity")]
    pub tau_sparsity: SparsityMode,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    #[serde(default)]
    pub save_mu_forest: bool,
    /// Hold sigma fixed (diagnostics only; skips the conjugate update).
    #[serde(default)]
    pub sigma_fixed: Option<f64>,
    /// Write the archive through a gzip encoder.
    #[serde(default)]
    pub gzip: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are total")
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.draws < 1 {
            return Err(SamplerError::Config("draws must be >= 1".into()));
        }
        if self.thin < 1 {
            return Err(SamplerError::Config("thin must be >= 1".into()));
        }
        if self.mu_trees < 1 || self.tau_trees < 1 {
            return Err(SamplerError::Config("tree counts must be >= 1".into()));
        }
        self.tree_prior
            .validate()
            .map_err(SamplerError::Config)?;
        Ok(())
    }

    pub fn leaf_priors(&self) -> LeafPriorParams {
        let derived = LeafPriorParams::for_forest_sizes(self.mu_trees, self.tau_trees);
        LeafPriorParams {
            leaf_sd_mu: self.leaf_sd_mu.unwrap_or(derived.leaf_sd_mu),
            leaf_sd_tau: self.leaf_sd_tau.unwrap_or(derived.leaf_sd_tau),
        }
    }
}

/// Which forest an update targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForestKind {
    Mu,
    Tau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveType {
    Grow,
    Prune,
}

/// Result of one tree update, exposed for instrumentation and tests.
#[derive(Debug, Clone, Copy)]
pub struct TreeUpdateOutcome {
    pub move_type: MoveType,
    pub accepted: bool,
    /// Proposal was structurally impossible (empty child, no splittable
    /// variable, depth cap) and was rejected without an MH draw.
    pub auto_rejected: bool,
    /// Log MH acceptance ratio; NaN when auto-rejected.
    pub log_alpha: f64,
    /// Distinct rows read during this update (membership of the affected
    /// leaf or leaves).
    pub rows_touched: u64,
}

/// Running totals across updates.
#[derive(Debug, Clone, Copy, Default)]
pub struct Counters {
    pub grow_proposals: u64,
    pub prune_proposals: u64,
    pub accepts: u64,
    pub rows_touched: u64,
}

/// One forest's trees, caches, and splitting-variable probabilities.
pub struct ForestState {
    pub kind: ForestKind,
    pub trees: Vec<RegressionTree>,
    pub asgs: Vec<LeafAssignment>,
    pub split_probs: SplitProbVector,
    pub leaf_sd: f64,
    /// Design rows entering this forest's likelihood (all rows for mu,
    /// masked rows for tau).
    pub rows: Vec<u32>,
}

/// Full sampler state: standardization, both forests, noise scale, and
/// per-row cached fits.
pub struct FitState<'a> {
    pub cfg: SamplerConfig,
    pub mu_design: &'a DesignMatrix,
    pub tau_design: &'a DesignMatrix,
    pub y_mean: f64,
    pub y_sd: f64,
    pub y_std: Vec<f64>,
    pub zmask: Vec<bool>,
    pub fit_mu: Vec<f64>,
    pub fit_tau: Vec<f64>,
    pub sigma: f64,
    pub noise_prior: NoisePriorParams,
    pub mu_forest: ForestState,
    pub tau_forest: ForestState,
    pub counters: Counters,
}

impl<'a> FitState<'a> {
    pub fn new(
        mu_design: &'a DesignMatrix,
        tau_design: &'a DesignMatrix,
        y: &[f64],
        zmask: &[bool],
        cfg: &SamplerConfig,
    ) -> Result<Self, SamplerError> {
        cfg.validate()?;
        let n = y.len();
        if mu_design.n != n || tau_design.n != n || zmask.len() != n {
            return Err(SamplerError::RowMismatch);
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let y_var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
        if y_var == 0.0 {
            return Err(SamplerError::DegenerateOutcome);
        }
        let y_sd = y_var.sqrt();
        let y_std: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_sd).collect();
        let masked_rows: Vec<u32> = (0..n as u32).filter(|&i| zmask[i as usize]).collect();
        if masked_rows.is_empty() {
            return Err(SamplerError::NoTreatedRows);
        }

        let sigma_hat = overfit_sigma_estimate(mu_design, &y_std);
        let noise_prior = NoisePriorParams::calibrated(cfg.nu, cfg.q, sigma_hat);
        let leaf_priors = cfg.leaf_priors();

        let all_rows: Vec<u32> = (0..n as u32).collect();
        let zeros = vec![0.0; n];
        let make_forest = |kind: ForestKind| -> ForestState {
            let (design, rows, m, mode, leaf_sd) = match kind {
                ForestKind::Mu => (
                    mu_design,
                    all_rows.clone(),
                    cfg.mu_trees,
                    cfg.mu_sparsity,
                    leaf_priors.leaf_sd_mu,
                ),
                ForestKind::Tau => (
                    tau_design,
                    masked_rows.clone(),
                    cfg.tau_trees,
                    cfg.tau_sparsity,
                    leaf_priors.leaf_sd_tau,
                ),
            };
            let trees: Vec<RegressionTree> = (0..m).map(|_| RegressionTree::stump(0.0)).collect();
            let asgs = trees
                .iter()
                .map(|t| LeafAssignment::from_scratch(t, design, &rows, &zeros))
                .collect();
            ForestState {
                kind,
                trees,
                asgs,
                split_probs: SplitProbVector::new(design.p(), mode, cfg.concentration),
                leaf_sd,
                rows,
            }
        };

        Ok(FitState {
            cfg: cfg.clone(),
            mu_design,
            tau_design,
            y_mean,
            y_sd,
            y_std,
            zmask: zmask.to_vec(),
            fit_mu: vec![0.0; n],
            fit_tau: vec![0.0; n],
            sigma: cfg.sigma_fixed.unwrap_or(sigma_hat),
            noise_prior,
            mu_forest: make_forest(ForestKind::Mu),
            tau_forest: make_forest(ForestKind::Tau),
            counters: Counters::default(),
        })
    }

    pub fn n(&self) -> usize {
        self.y_std.len()
    }

    pub fn forest(&self, kind: ForestKind) -> &ForestState {
        match kind {
            ForestKind::Mu => &self.mu_forest,
            ForestKind::Tau => &self.tau_forest,
        }
    }

    /// One Metropolis-within-Gibbs update of a single tree.
    pub fn update_one_tree<R: Rng>(
        &mut self,
        kind: ForestKind,
        idx: usize,
        rng: &mut R,
    ) -> TreeUpdateOutcome {
        let sigma = self.sigma;
        let tree_prior = self.cfg.tree_prior;
        let (forest, design, fit_self, fit_other, apply_mask) = match kind {
            ForestKind::Mu => (
                &mut self.mu_forest,
                self.mu_design,
                &mut self.fit_mu,
                &self.fit_tau,
                true,
            ),
            ForestKind::Tau => (
                &mut self.tau_forest,
                self.tau_design,
                &mut self.fit_tau,
                &self.fit_mu,
                false,
            ),
        };
        let outcome = update_tree_core(
            forest,
            idx,
            design,
            &self.y_std,
            &self.zmask,
            fit_self,
            fit_other,
            apply_mask,
            sigma,
            &tree_prior,
            rng,
        );
        match outcome.move_type {
            MoveType::Grow => self.counters.grow_proposals += 1,
            MoveType::Prune => self.counters.prune_proposals += 1,
        }
        if outcome.accepted {
            self.counters.accepts += 1;
        }
        self.counters.rows_touched += outcome.rows_touched;
        outcome
    }

    /// Conjugate noise-scale update from the full residual vector
    /// (the one O(n) pass per sweep).
    pub fn sigma_step<R: Rng>(&mut self, rng: &mut R) {
        if let Some(s) = self.cfg.sigma_fixed {
            self.sigma = s;
            return;
        }
        let n = self.n();
        let mut sse = 0.0;
        for i in 0..n {
            let tau_part = if self.zmask[i] { self.fit_tau[i] } else { 0.0 };
            let r = self.y_std[i] - self.fit_mu[i] - tau_part;
            sse += r * r;
        }
        self.sigma = draw_sigma(sse, n as u64, &self.noise_prior, rng);
    }

    /// Dirichlet update of both forests' splitting-variable probabilities.
    pub fn split_prob_step<R: Rng>(&mut self, rng: &mut R) {
        for forest in [&mut self.mu_forest, &mut self.tau_forest] {
            let mut counts = vec![0u64; forest.split_probs.p()];
            for tree in &forest.trees {
                for var in tree.split_vars() {
                    counts[var] += 1;
                }
            }
            crate::priors::update_split_probs(&counts, &mut forest.split_probs, rng);
        }
    }

    /// One full Gibbs sweep.
    pub fn sweep<R: Rng>(&mut self, rng: &mut R) {
        for t in 0..self.cfg.mu_trees {
            self.update_one_tree(ForestKind::Mu, t, rng);
        }
        for t in 0..self.cfg.tau_trees {
            self.update_one_tree(ForestKind::Tau, t, rng);
        }
        self.sigma_step(rng);
        self.split_prob_step(rng);
    }

    /// Largest absolute difference between cached fits and a from-scratch
    /// forest evaluation, on the standardized scale.
    pub fn max_fit_error(&self) -> f64 {
        let mut err: f64 = 0.0;
        for i in 0..self.n() {
            let mut mu = 0.0;
            for tree in &self.mu_forest.trees {
                mu += tree.predict_row(self.mu_design, i);
            }
            err = err.max((mu - self.fit_mu[i]).abs());
        }
        for &i in &self.tau_forest.rows {
            let mut tau = 0.0;
            for tree in &self.tau_forest.trees {
                tau += tree.predict_row(self.tau_design, i as usize);
            }
            err = err.max((tau - self.fit_tau[i as usize]).abs());
        }
        err
    }

    /// Per-draw sigma in original outcome units.
    pub fn sigma_original_units(&self) -> f64 {
        self.sigma * self.y_sd
    }
}

/// Residual of row `row` excluding the current tree's contribution, where
/// `mean` is the tree's current prediction at that row.
#[inline]
fn partial_resid(
    row: usize,
    mean: f64,
    y_std: &[f64],
    zmask: &[bool],
    fit_self: &[f64],
    fit_other: &[f64],
    apply_mask: bool,
) -> f64 {
    let other = if apply_mask {
        if zmask[row] {
            fit_other[row]
        } else {
            0.0
        }
    } else {
        fit_other[row]
    };
    y_std[row] - (fit_self[row] - mean) - other
}

fn sample_variable<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draw a split rule for `var` from the proposal distribution: a uniform
/// grid cutpoint, or a uniformly random nonempty proper subset of the
/// levels present in the leaf. `None` when the variable is unsplittable
/// there.
fn propose_rule<R: Rng>(
    design: &DesignMatrix,
    var: usize,
    members: &[u32],
    rng: &mut R,
) -> Option<SplitRule> {
    match &design.columns[var] {
        DesignColumn::Continuous { cutpoints, .. } => {
            if cutpoints.is_empty() {
                return None;
            }
            let cutpoint = cutpoints[rng.gen_range(0..cutpoints.len())];
            Some(SplitRule::Continuous { var, cutpoint })
        }
        DesignColumn::Categorical { n_levels, .. } => {
            let mut seen = vec![false; *n_levels as usize];
            for &r in members {
                seen[design.level(r as usize, var) as usize] = true;
            }
            let present: Vec<u32> = (0..*n_levels)
                .filter(|&l| seen[l as usize])
                .collect();
            if present.len() < 2 {
                return None;
            }
            loop {
                let mut left = LevelSet::empty();
                let mut count = 0usize;
                for &l in &present {
                    if rng.gen_bool(0.5) {
                        left.insert(l);
                        count += 1;
                    }
                }
                if count > 0 && count < present.len() {
                    return Some(SplitRule::Categorical {
                        var,
                        left_levels: left,
                    });
                }
            }
        }
    }
}

struct Accum {
    n: u64,
    sum: f64,
    sumsq: f64,
}

impl Accum {
    fn new() -> Self {
        Accum {
            n: 0,
            sum: 0.0,
            sumsq: 0.0,
        }
    }
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sumsq += v * v;
    }
}

/// The shared grow/prune update. Both the optimized path and the naive
/// reference wrapper call this with identical RNG streams, so acceptance
/// decisions and resulting states coincide.
#[allow(clippy::too_many_arguments)]
fn update_tree_core<R: Rng>(
    forest: &mut ForestState,
    idx: usize,
    design: &DesignMatrix,
    y_std: &[f64],
    zmask: &[bool],
    fit_self: &mut [f64],
    fit_other: &[f64],
    apply_mask: bool,
    sigma: f64,
    tree_prior: &TreePriorParams,
    rng: &mut R,
) -> TreeUpdateOutcome {
    let leaf_sd = forest.leaf_sd;
    let tree = &mut forest.trees[idx];
    let asg = &mut forest.asgs[idx];
    // Expanded per call so the shared borrow of `fit_self` it takes does
    // not outlive the expression (fit deltas below need unique access).
    macro_rules! resid {
        ($row:expr, $mean:expr) => {
            partial_resid($row, $mean, y_std, zmask, fit_self, fit_other, apply_mask)
        };
    }

    // Redraw one leaf's mean from its conjugate posterior and shift the
    // members' cached fits by the delta.
    macro_rules! redraw_leaf {
        ($leaf:expr, $n:expr, $sum:expr) => {{
            let (pm, psd) = leaf_posterior($n, $sum, sigma, leaf_sd);
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let new_mean = pm + psd * z;
            let old_mean = tree.leaf_mean($leaf).unwrap();
            tree.set_leaf_mean($leaf, new_mean);
            asg.set_stats($leaf, LeafStats { n: $n, sum: $sum });
            let delta = new_mean - old_mean;
            for &r in asg.members($leaf) {
                fit_self[r as usize] += delta;
            }
        }};
    }

    let is_stump = tree.is_stump();
    let do_grow = is_stump || rng.gen_bool(0.5);
    if do_grow {
        let leaves = tree.leaves();
        let leaf = leaves[rng.gen_range(0..leaves.len())];
        let mean = tree.leaf_mean(leaf).unwrap();
        let members_len = asg.members(leaf).len() as u64;
        let mut parent = Accum::new();
        for &r in asg.members(leaf) {
            parent.push(resid!(r as usize, mean));
        }
        let var = sample_variable(&forest.split_probs.s, rng);
        let rule = propose_rule(design, var, asg.members(leaf), rng)
            .filter(|_| RegressionTree::depth(leaf) < MAX_DEPTH);
        let rule = match rule {
            None => {
                redraw_leaf!(leaf, parent.n, parent.sum);
                return TreeUpdateOutcome {
                    move_type: MoveType::Grow,
                    accepted: false,
                    auto_rejected: true,
                    log_alpha: f64::NAN,
                    rows_touched: members_len,
                };
            }
            Some(rule) => rule,
        };
        let mut left = Accum::new();
        let mut right = Accum::new();
        for &r in asg.members(leaf) {
            let v = resid!(r as usize, mean);
            if rule.goes_left(design, r as usize) {
                left.push(v);
            } else {
                right.push(v);
            }
        }
        if left.n == 0 || right.n == 0 {
            redraw_leaf!(leaf, parent.n, parent.sum);
            return TreeUpdateOutcome {
                move_type: MoveType::Grow,
                accepted: false,
                auto_rejected: true,
                log_alpha: f64::NAN,
                rows_touched: members_len,
            };
        }
        let d = RegressionTree::depth(leaf);
        let pd = split_prob(d, tree_prior);
        let pd1 = split_prob(d + 1, tree_prior);
        let log_prior = pd.ln() + 2.0 * (1.0 - pd1).ln() - (1.0 - pd).ln();
        let loglik = marginal_loglik(left.n, left.sum, left.sumsq, sigma, leaf_sd)
            + marginal_loglik(right.n, right.sum, right.sumsq, sigma, leaf_sd)
            - marginal_loglik(parent.n, parent.sum, parent.sumsq, sigma, leaf_sd);
        let p_grow = if is_stump { 1.0 } else { 0.5 };
        // prunable node count after the hypothetical grow
        let mut prunable_after = tree.prunable_nodes().len() + 1;
        if leaf > 1 && tree.is_leaf(leaf ^ 1) {
            prunable_after -= 1; // parent stops being prunable
        }
        let log_prop = (0.5 / prunable_after as f64).ln() - (p_grow / leaves.len() as f64).ln();
        let log_alpha = log_prior + loglik + log_prop;
        let u: f64 = rng.gen();
        let accepted = u.ln() < log_alpha;
        if accepted {
            let left_stats = LeafStats {
                n: left.n,
                sum: left.sum,
            };
            let right_stats = LeafStats {
                n: right.n,
                sum: right.sum,
            };
            grow_with_stats(tree, asg, leaf, rule, design, left_stats, right_stats)
                .expect("nonempty children checked above");
            redraw_leaf!(2 * leaf, left.n, left.sum);
            redraw_leaf!(2 * leaf + 1, right.n, right.sum);
        } else {
            redraw_leaf!(leaf, parent.n, parent.sum);
        }
        TreeUpdateOutcome {
            move_type: MoveType::Grow,
            accepted,
            auto_rejected: false,
            log_alpha,
            rows_touched: members_len,
        }
    } else {
        let prunable = tree.prunable_nodes();
        let node = prunable[rng.gen_range(0..prunable.len())];
        let (l, r) = (2 * node, 2 * node + 1);
        let mean_l = tree.leaf_mean(l).unwrap();
        let mean_r = tree.leaf_mean(r).unwrap();
        let mut left = Accum::new();
        for &row in asg.members(l) {
            left.push(resid!(row as usize, mean_l));
        }
        let mut right = Accum::new();
        for &row in asg.members(r) {
            right.push(resid!(row as usize, mean_r));
        }
        let parent = Accum {
            n: left.n + right.n,
            sum: left.sum + right.sum,
            sumsq: left.sumsq + right.sumsq,
        };
        let rows_touched = parent.n;
        let d = RegressionTree::depth(node);
        let pd = split_prob(d, tree_prior);
        let pd1 = split_prob(d + 1, tree_prior);
        let log_prior = pd.ln() + 2.0 * (1.0 - pd1).ln() - (1.0 - pd).ln();
        let loglik = marginal_loglik(parent.n, parent.sum, parent.sumsq, sigma, leaf_sd)
            - marginal_loglik(left.n, left.sum, left.sumsq, sigma, leaf_sd)
            - marginal_loglik(right.n, right.sum, right.sumsq, sigma, leaf_sd);
        let leaves_after = tree.n_leaves() - 1;
        let p_grow_after = if leaves_after == 1 { 1.0 } else { 0.5 };
        let log_prop =
            (p_grow_after / leaves_after as f64).ln() - (0.5 / prunable.len() as f64).ln();
        let log_alpha = -log_prior + loglik + log_prop;
        let u: f64 = rng.gen();
        let accepted = u.ln() < log_alpha;
        if accepted {
            // fit deltas depend on which child a member came from
            let left_members = asg.members(l).to_vec();
            let right_members = asg.members(r).to_vec();
            crate::trees::prune(tree, asg, node).expect("children are leaves");
            let (pm, psd) = leaf_posterior(parent.n, parent.sum, sigma, leaf_sd);
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let new_mean = pm + psd * z;
            tree.set_leaf_mean(node, new_mean);
            asg.set_stats(
                node,
                LeafStats {
                    n: parent.n,
                    sum: parent.sum,
                },
            );
            for &row in &left_members {
                fit_self[row as usize] += new_mean - mean_l;
            }
            for &row in &right_members {
                fit_self[row as usize] += new_mean - mean_r;
            }
        } else {
            redraw_leaf!(l, left.n, left.sum);
            redraw_leaf!(r, right.n, right.sum);
        }
        TreeUpdateOutcome {
            move_type: MoveType::Prune,
            accepted,
            auto_rejected: false,
            log_alpha,
            rows_touched,
        }
    }
}

/// Grow with precomputed child statistics (the update loop already
/// accumulated them while evaluating the proposal).
fn grow_with_stats(
    tree: &mut RegressionTree,
    asg: &mut LeafAssignment,
    leaf: u64,
    rule: SplitRule,
    design: &DesignMatrix,
    left_stats: LeafStats,
    right_stats: LeafStats,
) -> Result<(), TreeOpError> {
    // grow() re-routes membership; the residual argument only feeds the
    // statistics, which we overwrite with the exact values accumulated
    // while evaluating the proposal.
    let zeros_len = asg
        .members(leaf)
        .iter()
        .map(|&r| r as usize + 1)
        .max()
        .unwrap_or(0);
    let zeros = vec![0.0; zeros_len];
    grow(tree, asg, leaf, rule, design, &zeros)?;
    asg.set_stats(2 * leaf, left_stats);
    asg.set_stats(2 * leaf + 1, right_stats);
    Ok(())
}

/// Overfit residual-scale estimate from a saturated linear fit on the
/// continuous mu-design columns (standardized outcome scale).
fn overfit_sigma_estimate(design: &DesignMatrix, y_std: &[f64]) -> f64 {
    let n = design.n;
    let cols: Vec<&Vec<f64>> = design
        .columns
        .iter()
        .filter_map(|c| match c {
            DesignColumn::Continuous { values, .. } => Some(values),
            _ => None,
        })
        .collect();
    let k = cols.len() + 1;
    if n <= k + 1 {
        return 1.0;
    }
    // normal equations with intercept
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![0.0; k];
    for i in 0..n {
        let mut xi = Vec::with_capacity(k);
        xi.push(1.0);
        for c in &cols {
            xi.push(c[i]);
        }
        for a in 0..k {
            for b in 0..k {
                xtx[a][b] += xi[a] * xi[b];
            }
            xty[a] += xi[a] * y_std[i];
        }
    }
    let beta = match solve_symmetric(&mut xtx, &mut xty) {
        Some(b) => b,
        None => return 1.0,
    };
    let mut sse = 0.0;
    for i in 0..n {
        let mut pred = beta[0];
        for (j, c) in cols.iter().enumerate() {
            pred += beta[j + 1] * c[i];
        }
        let e = y_std[i] - pred;
        sse += e * e;
    }
    let dof = (n - k) as f64;
    let s = (sse / dof).sqrt();
    if s.is_finite() && s > 1e-6 {
        s
    } else {
        1.0
    }
}

/// Gaussian elimination with partial pivoting; returns None when singular.
fn solve_symmetric(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let k = b.len();
    for col in 0..k {
        let mut pivot = col;
        for row in col + 1..k {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..k {
            let f = a[row][col] / a[col][col];
            for c2 in col..k {
                a[row][c2] -= f * a[col][c2];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; k];
    for col in (0..k).rev() {
        let mut v = b[col];
        for c2 in col + 1..k {
            v -= a[col][c2] * x[c2];
        }
        x[col] = v / a[col][col];
    }
    Some(x)
}

/// Run the full sampler and stream the posterior to `out_path`.
///
/// `zmask[i]` must be 1 iff row `i` belongs to a treated practice and its
/// year is after the intervention (t > 2).
pub fn fit(
    mu_design: &DesignMatrix,
    tau_design: &DesignMatrix,
    y: &[f64],
    zmask: &[bool],
    cfg: &SamplerConfig,
    out_path: &Path,
) -> Result<PosteriorArchive, SamplerError> {
    let mut state = FitState::new(mu_design, tau_design, y, zmask, cfg)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let header = ArchiveHeader {
        tau_trees: cfg.tau_trees,
        tau_p: tau_design.p(),
        draws: cfg.draws,
        y_mean: state.y_mean,
        y_sd: state.y_sd,
        mu: if cfg.save_mu_forest {
            Some((cfg.mu_trees, mu_design.p()))
        } else {
            None
        },
    };
    let mut writer = archive::ArchiveWriter::create(out_path, &header, cfg.gzip)?;
    for _ in 0..cfg.burn_in {
        state.sweep(&mut rng);
    }
    for d in 0..cfg.draws {
        for _ in 0..cfg.thin {
            state.sweep(&mut rng);
        }
        writer.write_draw(d, &state)?;
    }
    writer.finish()?;
    PosteriorArchive::open(out_path).map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::cutpoint_grid;
    use crate::trees::serialize_tree;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn test_design(n: usize, seed: u64) -> DesignMatrix {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x1: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let cat: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        DesignMatrix {
            n,
            columns: vec![
                DesignColumn::Continuous {
                    name: "x0".into(),
                    cutpoints: cutpoint_grid(&x0, 50),
                    values: x0,
                },
                DesignColumn::Continuous {
                    name: "x1".into(),
                    cutpoints: cutpoint_grid(&x1, 50),
                    values: x1,
                },
                DesignColumn::Categorical {
                    name: "g".into(),
                    n_levels: 3,
                    values: cat,
                },
            ],
            row_weights: None,
        }
    }

    /// Outcome with prognostic signal in x0/x1 and a constant additive
    /// effect on masked rows.
    fn test_outcome(design: &DesignMatrix, effect: f64, seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = design.n;
        let zmask: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let y = (0..n)
            .map(|i| {
                let x0 = design.continuous_value(i, 0);
                let x1 = design.continuous_value(i, 1);
                let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.5;
                (2.0 * x0).sin() + 0.5 * x1 + if zmask[i] { effect } else { 0.0 } + noise
            })
            .collect();
        (y, zmask)
    }

    fn small_cfg() -> SamplerConfig {
        SamplerConfig {
            burn_in: 30,
            draws: 20,
            mu_trees: 10,
            tau_trees: 5,
            seed: 7,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn constant_outcome_is_rejected() {
        let design = test_design(50, 1);
        let y = vec![3.0; 50];
        let zmask = vec![true; 50];
        let err = FitState::new(&design, &design, &y, &zmask, &small_cfg()).err().unwrap();
        assert!(matches!(err, SamplerError::DegenerateOutcome));
    }

    #[test]
    fn all_control_is_rejected() {
        let design = test_design(50, 1);
        let (y, _) = test_outcome(&design, 0.0, 2);
        let zmask = vec![false; 50];
        let err = FitState::new(&design, &design, &y, &zmask, &small_cfg()).err().unwrap();
        assert!(matches!(err, SamplerError::NoTreatedRows));
    }

    #[test]
    fn first_move_on_stump_is_grow() {
        let design = test_design(80, 3);
        let (y, zmask) = test_outcome(&design, 0.5, 4);
        let mut state = FitState::new(&design, &design, &y, &zmask, &small_cfg()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        // every tree starts as a stump, so every first update must propose GROW
        for t in 0..state.cfg.mu_trees {
            let out = state.update_one_tree(ForestKind::Mu, t, &mut rng);
            assert_eq!(out.move_type, MoveType::Grow);
        }
        for t in 0..state.cfg.tau_trees {
            let out = state.update_one_tree(ForestKind::Tau, t, &mut rng);
            assert_eq!(out.move_type, MoveType::Grow);
        }
    }

    #[test]
    fn cached_fits_track_forest_exactly() {
        let design = test_design(250, 5);
        let (y, zmask) = test_outcome(&design, 0.8, 6);
        let mut state = FitState::new(&design, &design, &y, &zmask, &small_cfg()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..60 {
            state.sweep(&mut rng);
        }
        assert!(state.max_fit_error() < 1e-9, "fit drift {}", state.max_fit_error());
    }

    #[test]
    fn updates_touch_only_affected_leaf_membership() {
        let design = test_design(400, 8);
        let (y, zmask) = test_outcome(&design, 0.8, 9);
        let mut state = FitState::new(&design, &design, &y, &zmask, &small_cfg()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..50 {
            state.sweep(&mut rng);
        }
        let n_total = state.mu_forest.rows.len() as u64;
        let mut saw_local_update = false;
        for t in 0..state.cfg.mu_trees {
            // membership of the largest leaf bounds any affected leaf pair
            let max_leaf = state.mu_forest.asgs[t]
                .leaves()
                .iter()
                .map(|&l| state.mu_forest.asgs[t].members(l).len() as u64)
                .max()
                .unwrap();
            let was_stump = state.mu_forest.trees[t].is_stump();
            let out = state.update_one_tree(ForestKind::Mu, t, &mut rng);
            // a grow reads one leaf, a prune reads a sibling pair; either
            // way never more than twice the largest current leaf
            assert!(out.rows_touched <= 2 * max_leaf);
            if !was_stump && out.rows_touched < n_total {
                saw_local_update = true;
            }
        }
        assert!(
            saw_local_update,
            "no update after warmup touched fewer rows than the full dataset"
        );
    }

    /// With both trees pinned at stumps (vanishing split prior) and sigma
    /// fixed, the chain is a two-block Gibbs sampler on the stump means
    /// whose stationary law is an exactly computable bivariate normal.
    /// Kolmogorov-Smirnov test of the sampled mu stump mean against its
    /// analytic marginal.
    #[test]
    fn stump_backfitting_matches_analytic_posterior() {
        let n = 40;
        let design = test_design(n, 21);
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let y: Vec<f64> = (0..n)
            .map(|_| 1.0 + 0.5 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let zmask = vec![true; n];
        let (s1, s2, sigma) = (0.3, 0.4, 0.7);
        let cfg = SamplerConfig {
            burn_in: 0,
            draws: 1,
            mu_trees: 1,
            tau_trees: 1,
            leaf_sd_mu: Some(s1),
            leaf_sd_tau: Some(s2),
            sigma_fixed: Some(sigma),
            tree_prior: TreePriorParams {
                alpha: 1e-300,
                beta: 2.0,
            },
            ..SamplerConfig::default()
        };
        let mut state = FitState::new(&design, &design, &y, &zmask, &cfg).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let burn = 200;
        let keep = 4000;
        let mut draws = Vec::with_capacity(keep);
        for it in 0..burn + keep {
            state.sweep(&mut rng);
            assert!(state.mu_forest.trees[0].is_stump());
            assert!(state.tau_forest.trees[0].is_stump());
            if it >= burn {
                draws.push(state.mu_forest.trees[0].leaf_mean(1).unwrap());
            }
        }
        // analytic joint posterior of (m_mu, m_tau) on the standardized scale
        let s_sum: f64 = state.y_std.iter().sum();
        let nf = n as f64;
        let l11 = nf / (sigma * sigma) + 1.0 / (s1 * s1);
        let l12 = nf / (sigma * sigma);
        let l22 = nf / (sigma * sigma) + 1.0 / (s2 * s2);
        let det = l11 * l22 - l12 * l12;
        let b = s_sum / (sigma * sigma);
        let mean_mu = (l22 * b - l12 * b) / det;
        let var_mu = l22 / det;
        let dist = Normal::new(mean_mu, var_mu.sqrt()).unwrap();
        draws.sort_by(f64::total_cmp);
        let mut ks: f64 = 0.0;
        for (i, &d) in draws.iter().enumerate() {
            let f = dist.cdf(d);
            ks = ks.max((f - i as f64 / keep as f64).abs());
            ks = ks.max(((i + 1) as f64 / keep as f64 - f).abs());
        }
        // 1% critical value; autocorrelation is mild for this two-block chain
        assert!(ks < 1.63 / (keep as f64).sqrt() * 2.0, "KS = {ks}");
    }

    #[test]
    fn naive_and_optimized_paths_produce_identical_states() {
        let design = test_design(150, 31);
        let (y, zmask) = test_outcome(&design, 0.8, 32);
        let cfg = SamplerConfig {
            burn_in: 0,
            draws: 1,
            mu_trees: 6,
            tau_trees: 3,
            ..SamplerConfig::default()
        };
        let mut fast = FitState::new(&design, &design, &y, &zmask, &cfg).unwrap();
        let mut slow = FitState::new(&design, &design, &y, &zmask, &cfg).unwrap();
        let mut rng_fast = ChaCha20Rng::seed_from_u64(33);
        let mut rng_slow = ChaCha20Rng::seed_from_u64(33);
        for _ in 0..25 {
            fast.sweep(&mut rng_fast);
            reference::naive_sweep(&mut slow, &mut rng_slow);
            assert_eq!(fast.sigma.to_bits(), slow.sigma.to_bits());
        }
        for (a, b) in fast.mu_forest.trees.iter().zip(&slow.mu_forest.trees) {
            assert_eq!(serialize_tree(a), serialize_tree(b));
        }
        for (a, b) in fast.tau_forest.trees.iter().zip(&slow.tau_forest.trees) {
            assert_eq!(serialize_tree(a), serialize_tree(b));
        }
        for i in 0..fast.n() {
            assert_eq!(fast.fit_mu[i].to_bits(), slow.fit_mu[i].to_bits());
            assert_eq!(fast.fit_tau[i].to_bits(), slow.fit_tau[i].to_bits());
        }
        assert_eq!(
            fast.mu_forest.split_probs.s, slow.mu_forest.split_probs.s
        );
    }

    #[test]
    fn fit_is_deterministic_for_fixed_seed() {
        let design = test_design(100, 41);
        let (y, zmask) = test_outcome(&design, 0.5, 42);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.forest");
        let p2 = dir.path().join("b.forest");
        let cfg = small_cfg();
        fit(&design, &design, &y, &zmask, &cfg, &p1).unwrap();
        fit(&design, &design, &y, &zmask, &cfg, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_ne!(std::fs::read(&p1).unwrap().len(), 0);
    }

    #[test]
    fn archive_round_trip_plain_and_gzip() {
        let design = test_design(100, 51);
        let (y, zmask) = test_outcome(&design, 0.5, 52);
        let dir = tempfile::tempdir().unwrap();
        for gzip in [false, true] {
            let path = dir.path().join(if gzip { "z.forest.gz" } else { "z.forest" });
            let cfg = SamplerConfig {
                gzip,
                save_mu_forest: true,
                ..small_cfg()
            };
            let archive = fit(&design, &design, &y, &zmask, &cfg, &path).unwrap();
            assert_eq!(archive.header.draws, cfg.draws);
            assert_eq!(archive.header.tau_trees, cfg.tau_trees);
            assert_eq!(archive.header.mu, Some((cfg.mu_trees, design.p())));
            let mut reader = archive.reader().unwrap();
            let mut count = 0;
            while let Some(draw) = reader.next_draw().unwrap() {
                assert_eq!(draw.index, count);
                assert!(draw.sigma > 0.0);
                assert_eq!(draw.tau_trees.len(), cfg.tau_trees);
                assert_eq!(draw.mu_trees.as_ref().unwrap().len(), cfg.mu_trees);
                assert_eq!(draw.split_probs_tau.len(), design.p());
                count += 1;
            }
            assert_eq!(count, cfg.draws);
        }
    }

    #[test]
    fn archive_without_mu_forest_omits_mu_trees() {
        let design = test_design(80, 61);
        let (y, zmask) = test_outcome(&design, 0.5, 62);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tau-only.forest");
        let archive = fit(&design, &design, &y, &zmask, &small_cfg(), &path).unwrap();
        assert_eq!(archive.header.mu, None);
        let mut reader = archive.reader().unwrap();
        let draw = reader.next_draw().unwrap().unwrap();
        assert!(draw.mu_trees.is_none());
    }

    /// The final fitted state (not just the archive) reproduces the
    /// archived sigma of the last draw, tying writer and state together.
    #[test]
    fn last_archived_sigma_matches_final_state() {
        let design = test_design(90, 71);
        let (y, zmask) = test_outcome(&design, 0.5, 72);
        let cfg = small_cfg();
        let mut state = FitState::new(&design, &design, &y, &zmask, &cfg).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.burn_in + cfg.draws {
            state.sweep(&mut rng);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.forest");
        let archive = fit(&design, &design, &y, &zmask, &cfg, &path).unwrap();
        let mut reader = archive.reader().unwrap();
        let mut last = None;
        while let Some(d) = reader.next_draw().unwrap() {
            last = Some(d.sigma);
        }
        assert_eq!(last.unwrap().to_bits(), state.sigma_original_units().to_bits());
    }

    /// Covariate values on unmasked rows never enter the tau forest:
    /// permuting them leaves the entire fit byte-identical.
    #[test]
    fn tau_forest_ignores_unmasked_rows() {
        let n = 120;
        let mu_design = test_design(n, 81);
        let tau_design = test_design(n, 82);
        let (y, zmask) = test_outcome(&mu_design, 0.8, 83);
        let mut permuted = tau_design.clone();
        // swap x0 between pairs of unmasked rows
        let unmasked: Vec<usize> = (0..n).filter(|&i| !zmask[i]).collect();
        if let DesignColumn::Continuous { values, cutpoints, .. } = &mut permuted.columns[0] {
            for pair in unmasked.chunks(2) {
                if let [a, b] = pair {
                    values.swap(*a, *b);
                }
            }
            // multiset of column values is unchanged, so the grid is too
            *cutpoints = cutpoint_grid(values, 50);
        }
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("orig.forest");
        let p2 = dir.path().join("perm.forest");
        let cfg = small_cfg();
        fit(&mu_design, &tau_design, &y, &zmask, &cfg, &p1).unwrap();
        fit(&mu_design, &permuted, &y, &zmask, &cfg, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn group_mean_reducer_matches_materialized_matrix() {
        let design = test_design(120, 91);
        let (y, zmask) = test_outcome(&design, 0.8, 92);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.forest");
        let archive = fit(&design, &design, &y, &zmask, &small_cfg(), &path).unwrap();
        let groups = vec![
            GroupSpec {
                name: "treated".into(),
                rows: (0..120).filter(|i| zmask[*i as usize]).collect(),
                weights: None,
            },
            GroupSpec {
                name: "weighted".into(),
                rows: vec![0, 3, 6, 9],
                weights: Some(vec![1.0, 2.0, 3.0, 4.0]),
            },
        ];
        let got = predict_tau(
            &archive,
            &design,
            &TauReducer::PerDrawGroupMeans {
                groups: groups.clone(),
            },
        )
        .unwrap();
        // oracle: materialize the full draws-by-rows effect matrix
        let mut reader = archive.reader().unwrap();
        let mut matrix: Vec<Vec<f64>> = Vec::new();
        while let Some(draw) = reader.next_draw().unwrap() {
            let row: Vec<f64> = (0..design.n)
                .map(|i| {
                    draw.tau_trees
                        .iter()
                        .map(|t| t.predict_row(&design, i))
                        .sum::<f64>()
                        * archive.header.y_sd
                })
                .collect();
            matrix.push(row);
        }
        let TauSummaries::GroupMeans { names, values } = got else {
            panic!("wrong summary variant");
        };
        assert_eq!(names, vec!["treated".to_string(), "weighted".to_string()]);
        assert_eq!(values.len(), matrix.len());
        for (d, per_group) in values.iter().enumerate() {
            for (g, spec) in groups.iter().enumerate() {
                let mut num = 0.0;
                let mut den = 0.0;
                for (k, &r) in spec.rows.iter().enumerate() {
                    let w = spec.weights.as_ref().map_or(1.0, |w| w[k]);
                    num += w * matrix[d][r as usize];
                    den += w;
                }
                let expect = num / den;
                assert!(
                    (per_group[g] - expect).abs() < 1e-12,
                    "draw {d} group {g}: {} vs {expect}",
                    per_group[g]
                );
            }
        }
    }

    #[test]
    fn quantile_reducer_with_few_draws_is_exact_median() {
        let design = test_design(60, 101);
        let (y, zmask) = test_outcome(&design, 0.8, 102);
        let cfg = SamplerConfig {
            draws: 5,
            ..small_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.forest");
        let archive = fit(&design, &design, &y, &zmask, &cfg, &path).unwrap();
        let got = predict_tau(
            &archive,
            &design,
            &TauReducer::StreamingQuantiles { probs: vec![0.5] },
        )
        .unwrap();
        let mut reader = archive.reader().unwrap();
        let mut matrix: Vec<Vec<f64>> = vec![Vec::new(); design.n];
        while let Some(draw) = reader.next_draw().unwrap() {
            for (i, per_row) in matrix.iter_mut().enumerate() {
                per_row.push(
                    draw.tau_trees
                        .iter()
                        .map(|t| t.predict_row(&design, i))
                        .sum::<f64>()
                        * archive.header.y_sd,
                );
            }
        }
        let TauSummaries::Quantiles { values, .. } = got else {
            panic!("wrong summary variant");
        };
        for (i, per_row) in matrix.iter_mut().enumerate() {
            per_row.sort_by(f64::total_cmp);
            assert_eq!(values[i][0].to_bits(), per_row[2].to_bits(), "row {i}");
        }
    }

    #[test]
    fn p2_sketch_tracks_normal_quantiles() {
        let mut rng = ChaCha20Rng::seed_from_u64(111);
        let mut sketches = [
            predict::P2Quantile::new(0.05),
            predict::P2Quantile::new(0.5),
            predict::P2Quantile::new(0.95),
        ];
        for _ in 0..20000 {
            let x: f64 = rng.sample(rand_distr::StandardNormal);
            for sk in &mut sketches {
                sk.insert(x);
            }
        }
        let expect = [-1.6449, 0.0, 1.6449];
        for (sk, e) in sketches.iter().zip(expect) {
            assert!((sk.value() - e).abs() < 0.06, "{} vs {e}", sk.value());
        }
    }

    #[test]
    fn predict_dimension_mismatch_is_an_error() {
        let design = test_design(50, 121);
        let (y, zmask) = test_outcome(&design, 0.5, 122);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.forest");
        let archive = fit(&design, &design, &y, &zmask, &small_cfg(), &path).unwrap();
        let mut narrow = design.clone();
        narrow.columns.pop();
        let err = predict_tau(
            &archive,
            &narrow,
            &TauReducer::StreamingQuantiles { probs: vec![0.5] },
        )
        .unwrap_err();
        assert!(matches!(err, SamplerError::DimensionMismatch { .. }));
    }

    #[test]
    fn config_defaults_match_documented_values() {
        let cfg = SamplerConfig::default();
        assert_eq!(cfg.burn_in, 1000);
        assert_eq!(cfg.draws, 2000);
        assert_eq!(cfg.thin, 1);
        assert_eq!(cfg.mu_trees, 200);
        assert_eq!(cfg.tau_trees, 50);
        assert_eq!(cfg.nu, 3.0);
        assert_eq!(cfg.q, 0.9);
        assert!(!cfg.save_mu_forest);
        let parsed: SamplerConfig = serde_json::from_str(r#"{"draws": 5}"#).unwrap();
        assert_eq!(parsed.draws, 5);
        assert!(serde_json::from_str::<SamplerConfig>(r#"{"dras": 5}"#).is_err());
    }

    /// The sampler recovers a large constant additive effect: the
    /// posterior mean of tau over treated rows lands near the truth.
    #[test]
    fn recovers_constant_treatment_effect() {
        let design = test_design(500, 131);
        let (y, zmask) = test_outcome(&design, 2.0, 132);
        let cfg = SamplerConfig {
            burn_in: 150,
            draws: 150,
            mu_trees: 30,
            tau_trees: 10,
            seed: 5,
            ..SamplerConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.forest");
        let archive = fit(&design, &design, &y, &zmask, &cfg, &path).unwrap();
        let rows: Vec<u32> = (0..500).filter(|i| zmask[*i as usize]).collect();
        let got = predict_tau(
            &archive,
            &design,
            &TauReducer::PerDrawGroupMeans {
                groups: vec![GroupSpec {
                    name: "att".into(),
                    rows,
                    weights: None,
                }],
            },
        )
        .unwrap();
        let TauSummaries::GroupMeans { values, .. } = got else {
            panic!("wrong variant");
        };
        let mean: f64 = values.iter().map(|v| v[0]).sum::<f64>() / values.len() as f64;
        assert!((mean - 2.0).abs() < 0.4, "posterior ATT {mean}");
    }
}
