//! Cache-free reference implementation of the tree update.
//!
//! This path deliberately performs the full-data work a straightforward
//! implementation would: before each tree update it re-derives the tree's
//! leaf assignment by routing every row from the root and materializes the
//! full partial-residual vector, and after the update it re-evaluates the
//! tree on every row. The proposal, acceptance decision, and leaf-mean
//! redraws go through the exact same core as the optimized path with the
//! same RNG stream and the same floating-point accumulation order, so the
//! two paths produce identical states; only the work per update differs.
//! Tests rely on that equivalence, and the throughput comparison between
//! the two paths quantifies what the leaf-assignment caching buys.

use std::hint::black_box;

use rand::Rng;

use crate::trees::LeafAssignment;

use super::{FitState, ForestKind, TreeUpdateOutcome};

/// One tree update without any incremental caching.
pub fn naive_update_one_tree<R: Rng>(
    state: &mut FitState,
    kind: ForestKind,
    idx: usize,
    rng: &mut R,
) -> TreeUpdateOutcome {
    let n = state.n();
    let rows = state.forest(kind).rows.clone();

    // Full-data pass 1: evaluate the current tree on every row and
    // materialize the partial residuals it would need.
    let mut resid = vec![0.0; n];
    {
        let forest = state.forest(kind);
        let (design, fit_self, fit_other) = match kind {
            ForestKind::Mu => (state.mu_design, &state.fit_mu, &state.fit_tau),
            ForestKind::Tau => (state.tau_design, &state.fit_tau, &state.fit_mu),
        };
        for &r in &rows {
            let r = r as usize;
            let pred = forest.trees[idx].predict_row(design, r);
            let other = match kind {
                ForestKind::Mu => {
                    if state.zmask[r] {
                        fit_other[r]
                    } else {
                        0.0
                    }
                }
                ForestKind::Tau => fit_other[r],
            };
            resid[r] = state.y_std[r] - (fit_self[r] - pred) - other;
        }
    }

    // Full-data pass 2: rebuild the leaf assignment from the root instead
    // of trusting the cached one.
    let rebuilt = {
        let forest = state.forest(kind);
        let design = match kind {
            ForestKind::Mu => state.mu_design,
            ForestKind::Tau => state.tau_design,
        };
        LeafAssignment::from_scratch(&forest.trees[idx], design, &rows, &resid)
    };
    match kind {
        ForestKind::Mu => state.mu_forest.asgs[idx] = rebuilt,
        ForestKind::Tau => state.tau_forest.asgs[idx] = rebuilt,
    }

    // The shared proposal/decision/redraw core.
    let outcome = state.update_one_tree(kind, idx, rng);

    // Full-data pass 3: re-evaluate the updated tree everywhere, as an
    // implementation without per-row fit deltas would have to.
    let mut checksum = 0.0;
    {
        let forest = state.forest(kind);
        let design = match kind {
            ForestKind::Mu => state.mu_design,
            ForestKind::Tau => state.tau_design,
        };
        for &r in &rows {
            checksum += forest.trees[idx].predict_row(design, r as usize);
        }
    }
    black_box(checksum);

    outcome
}

/// One full Gibbs sweep through the naive tree updater.
pub fn naive_sweep<R: Rng>(state: &mut FitState, rng: &mut R) {
    for t in 0..state.cfg.mu_trees {
        naive_update_one_tree(state, ForestKind::Mu, t, rng);
    }
    for t in 0..state.cfg.tau_trees {
        naive_update_one_tree(state, ForestKind::Tau, t, rng);
    }
    state.sigma_step(rng);
    state.split_prob_step(rng);
}
