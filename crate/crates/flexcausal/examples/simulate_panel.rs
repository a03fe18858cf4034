//! Generate one synthetic four-year panel and inspect its ground truth.
//!
//! The generator assigns each practice to treatment with a probability
//! driven by its own covariates (confounding), then draws beneficiary
//! outcomes with practice random effects, common year trends, and a
//! heterogeneous treatment effect that only reaches treated practices in
//! years 3 and 4. Run with:
//!
//! ```text
//! cargo run --example simulate_panel
//! ```

use flexcausal::dgp::{generate, Confounding, DgpConfig, Heterogeneity};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = DgpConfig {
        practices: 100,
        beneficiary_median: 12.0,
        confounding: Confounding::Strong,
        heterogeneity: Heterogeneity::Large,
        base_effect: 1.0,
        seed: 7,
        ..DgpConfig::default()
    };

    let (data, truth) = generate(&cfg, 0)?;

    let treated = data.practice_treated().iter().filter(|&&z| z).count();
    println!(
        "panel: {} rows, {} practices ({} treated), {} beneficiaries",
        data.rows.len(),
        data.n_practices(),
        treated,
        data.beneficiary_ids.len()
    );

    println!("true ATT pooled over years 3-4: {:+.4}", truth.att_pooled);
    for (year, att) in &truth.att_by_year {
        println!("true ATT year {year}: {att:+.4}");
    }
    println!("subgroup ATTs:");
    for (label, att) in &truth.subgroup_atts {
        println!("  {label:<6} {att:+.4}");
    }

    // Confounding is visible as a propensity gap between groups.
    let z = data.practice_treated();
    let mean_ps = |want: bool| {
        let sel: Vec<f64> = truth
            .propensities
            .iter()
            .zip(&z)
            .filter(|(_, &zi)| zi == want)
            .map(|(&p, _)| p)
            .collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    println!(
        "mean true propensity: treated {:.3} vs control {:.3}",
        mean_ps(true),
        mean_ps(false)
    );

    let dir = std::env::temp_dir().join("flexcausal-simulate-example");
    std::fs::create_dir_all(&dir)?;
    data.write_csv(&dir.join("panel.csv"))?;
    data.schema.to_json_file(&dir.join("schema.json"))?;
    truth.to_json_file(&dir.join("truth.json"))?;
    println!("wrote panel.csv, schema.json, truth.json to {}", dir.display());
    Ok(())
}
