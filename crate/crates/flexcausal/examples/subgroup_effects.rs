//! Subgroup treatment-effect summaries: fit once, then report the
//! average effect on the treated within each level of the discrete
//! baseline covariates, in a single streaming pass over the posterior.
//!
//! Run with:
//!
//! ```text
//! cargo run --release --example subgroup_effects
//! ```

use flexcausal::data::{build_design, build_response, AnalysisLevel, DesignTarget};
use flexcausal::dgp::{generate, DgpConfig, Heterogeneity};
use flexcausal::estimands::{default_subgroups, subgroup_atts};
use flexcausal::propensity::{practice_propensities, PsFitSettings, PsMethod};
use flexcausal::sampler::{fit, SamplerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dgp = DgpConfig {
        practices: 150,
        beneficiary_median: 10.0,
        heterogeneity: Heterogeneity::Large,
        seed: 21,
        ..DgpConfig::default()
    };
    let (data, truth) = generate(&dgp, 0)?;

    let mut rng = ChaCha20Rng::seed_from_u64(22);
    let (_, ps) = practice_propensities(
        &data,
        &PsFitSettings::for_method(PsMethod::Lasso),
        AnalysisLevel::Practice,
        100,
        &mut rng,
    )?;
    let level = AnalysisLevel::Practice;
    let mu_design = build_design(&data, DesignTarget::Mu, level, Some(&ps), 100)?;
    let tau_design = build_design(&data, DesignTarget::Tau, level, None, 100)?;
    let resp = build_response(&data, level);

    let cfg = SamplerConfig {
        burn_in: 300,
        draws: 400,
        mu_trees: 50,
        tau_trees: 20,
        seed: 23,
        ..SamplerConfig::default()
    };
    let dir = std::env::temp_dir().join("flexcausal-subgroup-example");
    std::fs::create_dir_all(&dir)?;
    let archive = fit(
        &mu_design,
        &tau_design,
        &resp.y,
        &resp.zmask,
        &cfg,
        &dir.join("posterior.forest"),
    )?;

    let rows: Vec<u32> = (0..resp.zmask.len() as u32)
        .filter(|&i| resp.zmask[i as usize])
        .collect();
    let filters = default_subgroups(&tau_design, &["X1", "X2", "X3", "X4", "X5"])?;
    let estimates = subgroup_atts(&archive, &tau_design, &rows, None, &filters, 0.90)?;

    println!("{:<6} {:>9} {:>9} {:>9} {:>9}", "group", "estimate", "lower", "upper", "truth");
    for (label, s) in &estimates {
        let truth_att = truth
            .subgroup_atts
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, v)| *v);
        println!(
            "{label:<6} {:>+9.4} {:>+9.4} {:>+9.4} {:>9}",
            s.point,
            s.lower,
            s.upper,
            truth_att.map_or("-".to_string(), |v| format!("{v:+.4}")),
        );
    }
    Ok(())
}
