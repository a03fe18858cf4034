//! Tree-structure, leaf, and noise priors, plus the Dirichlet prior on
//! splitting variables and its posterior update.
//!
//! Defaults follow the community-standard BART/BCF settings: structure
//! prior `alpha = 0.95, beta = 2`, 200 prognostic trees and 50 effect
//! trees, a Normal(0, sd^2) leaf prior scaled so each forest's total prior
//! spread is 0.5 on the standardized outcome scale, and a scaled
//! inverse-chi-square noise prior with `nu = 3` calibrated at `q = 0.9`.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Split probability at depth `d` is `alpha * (1 + d)^(-beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreePriorParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TreePriorParams {
    fn default() -> Self {
        TreePriorParams {
            alpha: 0.95,
            beta: 2.0,
        }
    }
}

impl TreePriorParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(format!("alpha must be in (0,1), got {}", self.alpha));
        }
        if self.beta < 0.0 {
            return Err(format!("beta must be >= 0, got {}", self.beta));
        }
        Ok(())
    }
}

/// Probability that a node at `depth` splits.
pub fn split_prob(depth: u32, params: &TreePriorParams) -> f64 {
    params.alpha * (1.0 + depth as f64).powf(-params.beta)
}

/// Prior standard deviations of leaf means, per forest, on the
/// standardized-outcome scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafPriorParams {
    pub leaf_sd_mu: f64,
    pub leaf_sd_tau: f64,
}

impl LeafPriorParams {
    /// Default scaling for the configured tree counts: mu leaves at
    /// `0.5 / (2 sqrt(m_mu))`, tau leaves so the prior sd of the summed
    /// tau contribution is 0.5.
    pub fn for_forest_sizes(mu_trees: usize, tau_trees: usize) -> Self {
        LeafPriorParams {
            leaf_sd_mu: 0.5 / (2.0 * (mu_trees as f64).sqrt()),
            leaf_sd_tau: 0.5 / (tau_trees as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.leaf_sd_mu <= 0.0 || self.leaf_sd_tau <= 0.0 {
            return Err("leaf prior sds must be positive".into());
        }
        Ok(())
    }
}

/// Splitting-variable selection mode: `(D)` uniform or `(S)` sparse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityMode {
    Uniform,
    Dirichlet,
}

/// Probability vector over a forest's covariates used when proposing
/// splitting variables.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitProbVector {
    pub s: Vec<f64>,
    pub concentration: f64,
    pub mode: SparsityMode,
}

impl SplitProbVector {
    pub fn uniform(p: usize) -> Self {
        SplitProbVector {
            s: vec![1.0 / p as f64; p],
            concentration: 1.0,
            mode: SparsityMode::Uniform,
        }
    }

    pub fn new(p: usize, mode: SparsityMode, concentration: f64) -> Self {
        SplitProbVector {
            s: vec![1.0 / p as f64; p],
            concentration,
            mode,
        }
    }

    pub fn p(&self) -> usize {
        self.s.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.s.iter().any(|&v| v < 0.0) {
            return Err("split probabilities must be nonnegative".into());
        }
        let total: f64 = self.s.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(format!("split probabilities sum to {total}, not 1"));
        }
        Ok(())
    }
}

/// Dirichlet posterior update of the splitting-variable probabilities given
/// per-variable split counts. Uniform mode is a no-op.
pub fn update_split_probs<R: Rng>(split_counts: &[u64], sp: &mut SplitProbVector, rng: &mut R) {
    if sp.mode == SparsityMode::Uniform {
        return;
    }
    assert_eq!(split_counts.len(), sp.p());
    let p = sp.p() as f64;
    let mut draws = Vec::with_capacity(sp.p());
    let mut total = 0.0;
    for &c in split_counts {
        let shape = sp.concentration / p + c as f64;
        let g = rand_distr::Gamma::new(shape, 1.0).expect("valid gamma shape");
        let v: f64 = rng.sample(g);
        draws.push(v);
        total += v;
    }
    for (si, d) in sp.s.iter_mut().zip(draws) {
        *si = d / total;
    }
}

/// Noise prior: sigma^2 ~ nu * lambda / chi^2_nu, with lambda calibrated so
/// that `Pr(sigma < sigma_hat) = q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePriorParams {
    pub nu: f64,
    pub lambda: f64,
}

impl NoisePriorParams {
    /// Calibrate lambda from an overfit residual estimate `sigma_hat`.
    pub fn calibrated(nu: f64, q: f64, sigma_hat: f64) -> Self {
        assert!(nu > 0.0 && q > 0.0 && q < 1.0 && sigma_hat > 0.0);
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let chi = ChiSquared::new(nu).expect("valid chi-square dof");
        // Pr(sigma^2 < sigma_hat^2) = Pr(chi2_nu > nu lambda / sigma_hat^2) = q
        let threshold = chi.inverse_cdf(1.0 - q);
        NoisePriorParams {
            nu,
            lambda: sigma_hat * sigma_hat * threshold / nu,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.nu <= 0.0 || self.lambda <= 0.0 {
            return Err("noise prior parameters must be positive".into());
        }
        Ok(())
    }
}

/// Conjugate Normal-Normal posterior of a leaf mean given `n_leaf` residuals
/// summing to `resid_sum`: returns (posterior mean, posterior sd).
pub fn leaf_posterior(n_leaf: u64, resid_sum: f64, sigma: f64, leaf_sd: f64) -> (f64, f64) {
    if n_leaf == 0 {
        return (0.0, leaf_sd);
    }
    let v = 1.0 / (1.0 / (leaf_sd * leaf_sd) + n_leaf as f64 / (sigma * sigma));
    (v * resid_sum / (sigma * sigma), v.sqrt())
}

/// Log marginal likelihood of a leaf's residuals with the leaf mean
/// integrated out:
/// `log Int prod_i N(r_i | m, sigma^2) N(m | 0, leaf_sd^2) dm`.
pub fn marginal_loglik(
    n_leaf: u64,
    resid_sum: f64,
    resid_sumsq: f64,
    sigma: f64,
    leaf_sd: f64,
) -> f64 {
    if n_leaf == 0 {
        return 0.0;
    }
    let n = n_leaf as f64;
    let s2 = sigma * sigma;
    let t2 = leaf_sd * leaf_sd;
    let denom = s2 + n * t2;
    -0.5 * n * (2.0 * std::f64::consts::PI * s2).ln() + 0.5 * (s2 / denom).ln()
        - 0.5 / s2 * (resid_sumsq - t2 * resid_sum * resid_sum / denom)
}

/// Draw sigma from its conjugate posterior:
/// `sigma^2 ~ InvGamma((nu + n)/2, (nu lambda + total_sse)/2)`.
pub fn draw_sigma<R: Rng>(total_sse: f64, n: u64, prior: &NoisePriorParams, rng: &mut R) -> f64 {
    assert!(total_sse >= 0.0);
    let shape = (prior.nu + n as f64) / 2.0;
    let rate = (prior.nu * prior.lambda + total_sse) / 2.0;
    let g = rand_distr::Gamma::new(shape, 1.0).expect("valid gamma shape");
    let draw: f64 = rng.sample(g);
    (rate / draw).sqrt()
}
