//! Posterior prediction of treatment effects from an archive.
//!
//! Draws stream from disk one at a time; neither reducer materializes the
//! full `n x draws` effect matrix. [`TauReducer::PerDrawGroupMeans`]
//! collapses each draw to one number per group (the input to ATT-style
//! estimands), and [`TauReducer::StreamingQuantiles`] maintains a
//! constant-space P-square quantile sketch per row.

use crate::data::DesignMatrix;

use super::archive::PosteriorArchive;
use super::SamplerError;

/// A group of design rows to average within each draw, optionally
/// weighted (weights need not be normalized).
#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub name: String,
    pub rows: Vec<u32>,
    pub weights: Option<Vec<f64>>,
}

/// How to collapse streamed draws.
#[derive(Debug, Clone)]
pub enum TauReducer {
    /// One weighted mean per group per draw.
    PerDrawGroupMeans { groups: Vec<GroupSpec> },
    /// Approximate posterior quantiles of tau for every design row.
    StreamingQuantiles { probs: Vec<f64> },
}

/// Reducer output, in original outcome units.
#[derive(Debug, Clone)]
pub enum TauSummaries {
    /// `values[draw][group]`.
    GroupMeans { names: Vec<String>, values: Vec<Vec<f64>> },
    /// `values[row][prob]`, aligned with the `probs` of the request.
    Quantiles { probs: Vec<f64>, values: Vec<Vec<f64>> },
}

/// Evaluate the tau forest of every archived draw on `design` and fold
/// the draws through `reducer`.
pub fn predict_tau(
    archive: &PosteriorArchive,
    design: &DesignMatrix,
    reducer: &TauReducer,
) -> Result<TauSummaries, SamplerError> {
    let header = &archive.header;
    if design.p() != header.tau_p {
        return Err(SamplerError::DimensionMismatch {
            expected: header.tau_p,
            got: design.p(),
        });
    }
    let y_sd = header.y_sd;
    let mut reader = archive.reader()?;
    match reducer {
        TauReducer::PerDrawGroupMeans { groups } => {
            for g in groups {
                if let Some(w) = &g.weights {
                    if w.len() != g.rows.len() {
                        return Err(SamplerError::Config(format!(
                            "group {}: {} weights for {} rows",
                            g.name,
                            w.len(),
                            g.rows.len()
                        )));
                    }
                }
                for &r in &g.rows {
                    if r as usize >= design.n {
                        return Err(SamplerError::Config(format!(
                            "group {}: row {r} out of range",
                            g.name
                        )));
                    }
                }
            }
            let mut values = Vec::new();
            while let Some(draw) = reader.next_draw()? {
                let mut per_group = Vec::with_capacity(groups.len());
                for g in groups {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for (k, &r) in g.rows.iter().enumerate() {
                        let w = g.weights.as_ref().map_or(1.0, |w| w[k]);
                        let mut tau = 0.0;
                        for tree in &draw.tau_trees {
                            tau += tree.predict_row(design, r as usize);
                        }
                        num += w * tau * y_sd;
                        den += w;
                    }
                    per_group.push(if den > 0.0 { num / den } else { f64::NAN });
                }
                values.push(per_group);
            }
            Ok(TauSummaries::GroupMeans {
                names: groups.iter().map(|g| g.name.clone()).collect(),
                values,
            })
        }
        TauReducer::StreamingQuantiles { probs } => {
            for &p in probs {
                if !(0.0..=1.0).contains(&p) {
                    return Err(SamplerError::Config(format!(
                        "quantile probability {p} outside [0, 1]"
                    )));
                }
            }
            let mut sketches: Vec<Vec<P2Quantile>> = (0..design.n)
                .map(|_| probs.iter().map(|&p| P2Quantile::new(p)).collect())
                .collect();
            while let Some(draw) = reader.next_draw()? {
                for row in 0..design.n {
                    let mut tau = 0.0;
                    for tree in &draw.tau_trees {
                        tau += tree.predict_row(design, row);
                    }
                    let tau = tau * y_sd;
                    for sk in &mut sketches[row] {
                        sk.insert(tau);
                    }
                }
            }
            let values = sketches
                .into_iter()
                .map(|row| row.into_iter().map(|sk| sk.value()).collect())
                .collect();
            Ok(TauSummaries::Quantiles {
                probs: probs.clone(),
                values,
            })
        }
    }
}

/// P-square single-quantile estimator: five markers, O(1) space and
/// O(1) per observation. Exact until five observations have arrived.
#[derive(Debug, Clone)]
pub struct P2Quantile {
    p: f64,
    /// Marker heights, ascending.
    q: [f64; 5],
    /// Marker positions (1-based observation ranks).
    n: [f64; 5],
    /// Desired marker positions.
    np: [f64; 5],
    /// Desired position increments per observation.
    dn: [f64; 5],
    count: usize,
}

impl P2Quantile {
    pub fn new(p: f64) -> Self {
        P2Quantile {
            p,
            q: [0.0; 5],
            n: [1.0, 2.0, 3.0, 4.0, 5.0],
            np: [1.0, 1.0 + 2.0 * p, 1.0 + 4.0 * p, 3.0 + 2.0 * p, 5.0],
            dn: [0.0, p / 2.0, p, (1.0 + p) / 2.0, 1.0],
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn insert(&mut self, x: f64) {
        if self.count < 5 {
            self.q[self.count] = x;
            self.count += 1;
            if self.count == 5 {
                self.q.sort_by(f64::total_cmp);
            }
            return;
        }
        self.count += 1;
        // locate cell and stretch extreme markers
        let k = if x < self.q[0] {
            self.q[0] = x;
            0
        } else if x < self.q[1] {
            0
        } else if x < self.q[2] {
            1
        } else if x < self.q[3] {
            2
        } else if x <= self.q[4] {
            3
        } else {
            self.q[4] = x;
            3
        };
        for i in (k + 1)..5 {
            self.n[i] += 1.0;
        }
        for i in 0..5 {
            self.np[i] += self.dn[i];
        }
        // adjust interior markers toward desired positions
        for i in 1..4 {
            let d = self.np[i] - self.n[i];
            if (d >= 1.0 && self.n[i + 1] - self.n[i] > 1.0)
                || (d <= -1.0 && self.n[i - 1] - self.n[i] < -1.0)
            {
                let s = d.signum();
                let parab = self.parabolic(i, s);
                if self.q[i - 1] < parab && parab < self.q[i + 1] {
                    self.q[i] = parab;
                } else {
                    self.q[i] = self.linear(i, s);
                }
                self.n[i] += s;
            }
        }
    }

    fn parabolic(&self, i: usize, s: f64) -> f64 {
        let (q, n) = (&self.q, &self.n);
        q[i] + s / (n[i + 1] - n[i - 1])
            * ((n[i] - n[i - 1] + s) * (q[i + 1] - q[i]) / (n[i + 1] - n[i])
                + (n[i + 1] - n[i] - s) * (q[i] - q[i - 1]) / (n[i] - n[i - 1]))
    }

    fn linear(&self, i: usize, s: f64) -> f64 {
        let j = (i as f64 + s) as usize;
        self.q[i] + s * (self.q[j] - self.q[i]) / (self.n[j] - self.n[i])
    }

    /// Current quantile estimate; exact for fewer than six observations.
    pub fn value(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        if self.count < 5 {
            let mut v = self.q[..self.count].to_vec();
            v.sort_by(f64::total_cmp);
            // nearest-rank on the small exact sample
            let rank = (self.p * (v.len() - 1) as f64).round() as usize;
            return v[rank];
        }
        self.q[2]
    }
}
