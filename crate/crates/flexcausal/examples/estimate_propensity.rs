//! Estimate practice-level propensity scores with both available methods
//! and compare them against the generator's true treatment probabilities.
//!
//! Propensities are fit from pre-treatment information only: the design
//! is the prognostic covariate set without the propensity column itself.
//! Run with:
//!
//! ```text
//! cargo run --example estimate_propensity
//! ```

use flexcausal::data::AnalysisLevel;
use flexcausal::dgp::{generate, Confounding, DgpConfig};
use flexcausal::propensity::{practice_propensities, PsFitSettings, PsMethod};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = DgpConfig {
        practices: 300,
        beneficiary_median: 10.0,
        confounding: Confounding::Strong,
        seed: 11,
        ..DgpConfig::default()
    };
    let (data, truth) = generate(&cfg, 0)?;

    for method in [PsMethod::Lasso, PsMethod::Gbm] {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let settings = PsFitSettings::for_method(method);
        let (_model, ps) = practice_propensities(
            &data,
            &settings,
            AnalysisLevel::Practice,
            100,
            &mut rng,
        )?;

        let n = ps.len() as f64;
        let corr = correlation(&ps, &truth.propensities);
        let rmse = ps
            .iter()
            .zip(&truth.propensities)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            / n.sqrt();
        println!(
            "{:<5} corr(ps, truth) = {corr:.3}, rmse = {rmse:.3}, range [{:.3}, {:.3}]",
            method.label(),
            ps.iter().cloned().fold(f64::INFINITY, f64::min),
            ps.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
    }
    Ok(())
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>();
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>();
    let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>();
    cov / (va * vb).sqrt()
}
