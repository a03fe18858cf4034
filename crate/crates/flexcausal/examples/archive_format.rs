//! The posterior archive format: draws are streamed to a line-oriented
//! text file (optionally gzip-compressed) during sampling, and can be
//! reopened later for prediction without refitting. This example fits a
//! tiny model, prints the first lines of the archive, and shows that
//! reopening reproduces the header.
//!
//! Run with:
//!
//! ```text
//! cargo run --example archive_format
//! ```

use flexcausal::data::{cutpoint_grid, DesignColumn, DesignMatrix};
use flexcausal::sampler::{fit, PosteriorArchive, SamplerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n = 200;
    let mut rng = ChaCha20Rng::seed_from_u64(51);
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let zmask: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            x[i] + if zmask[i] { 0.8 } else { 0.0 }
                + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
        .collect();
    let design = DesignMatrix {
        n,
        columns: vec![DesignColumn::Continuous {
            name: "x".into(),
            cutpoints: cutpoint_grid(&x, 50),
            values: x,
        }],
        row_weights: None,
    };

    let dir = std::env::temp_dir().join("flexcausal-archive-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("posterior.forest");
    let cfg = SamplerConfig {
        burn_in: 100,
        draws: 10,
        mu_trees: 5,
        tau_trees: 3,
        seed: 52,
        ..SamplerConfig::default()
    };
    let archive = fit(&design, &design, &y, &zmask, &cfg, &path)?;
    println!(
        "fit: {} draws, {} effect trees, outcome scale mean {:.3} sd {:.3}",
        archive.header.draws, archive.header.tau_trees, archive.header.y_mean, archive.header.y_sd
    );

    let text = std::fs::read_to_string(&path)?;
    println!("--- first lines of {} ---", path.display());
    for line in text.lines().take(8) {
        println!("{line}");
    }

    let reopened = PosteriorArchive::open(&path)?;
    assert_eq!(reopened.header.draws, archive.header.draws);
    assert_eq!(reopened.header.tau_trees, archive.header.tau_trees);
    println!("--- reopened archive matches the in-memory header ---");
    Ok(())
}
