//! Score matrix, entropic partial assignment with dustbins, and the matching losses.

use crate::error::{dim_err, Error, Result};
use crate::geometry::GroundTruth;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default matching threshold on assignment probabilities.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.2;
pub const TRAIN_SINKHORN_ITERS: usize = 100;
pub const EVAL_SINKHORN_ITERS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub source: usize,
    pub target: usize,
    pub confidence: f64,
}

/// Log-assignment matrix plus the matches extracted from it.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    /// `(M+1) × (N+1)`; last row and column are the dustbins.
    pub log_p: Tensor,
    pub matches: Vec<Match>,
}

/// `S[i][j] = ⟨f_s[i], f_t[j]⟩ / C`, with no descriptor normalisation.
pub fn score_matrix(tape: &mut Tape, fs: Var, ft: Var) -> Result<Var> {
    let (cs, ct) = (tape.value(fs).cols(), tape.value(ft).cols());
    if cs != ct {
        return Err(dim_err("score_matrix", format!("widths {cs} and {ct}")));
    }
    let s = tape.matmul_nt(fs, ft)?;
    tape.scale(s, 1.0 / cs as f64)
}

/// Log-domain Sinkhorn over the dustbin-augmented score matrix.
///
/// Marginals are `(1, …, 1, N)` over rows and `(1, …, 1, M)` over columns;
/// every iteration is recorded on the tape so the result is differentiable
/// with respect to both the scores and the dustbin score `z`.
pub fn partial_assignment(tape: &mut Tape, scores: Var, z: Var, iterations: usize) -> Result<Var> {
    if iterations == 0 {
        return Err(Error::Config("Sinkhorn needs at least one iteration".into()));
    }
    if !tape.value(scores).is_finite() {
        return Err(Error::NonFinite { op: "partial_assignment" });
    }
    let (m, n) = (tape.value(scores).rows(), tape.value(scores).cols());
    let couplings = tape.dustbin_augment(scores, z)?;

    let norm = -((m + n) as f64).ln();
    let mut log_mu = vec![norm; m + 1];
    log_mu[m] = (n as f64).ln() + norm;
    let mut log_nu = vec![norm; n + 1];
    log_nu[n] = (m as f64).ln() + norm;
    tape.sinkhorn(couplings, log_mu, log_nu, iterations, -norm)
}

/// Mutual row/column argmax over the non-dustbin block whose probability
/// reaches `threshold`. Ties resolve to the lowest index.
pub fn extract_matches(log_p: &Tensor, threshold: f64) -> Vec<Match> {
    let (m, n) = (log_p.rows().saturating_sub(1), log_p.cols().saturating_sub(1));
    let argmax = |vals: &mut dyn Iterator<Item = f64>| -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, v) in vals.enumerate() {
            if v > best.1 {
                best = (k, v);
            }
        }
        best.0
    };
    let row_best: Vec<usize> = (0..m).map(|i| argmax(&mut (0..n).map(|j| log_p.get(i, j)))).collect();
    let col_best: Vec<usize> = (0..n).map(|j| argmax(&mut (0..m).map(|i| log_p.get(i, j)))).collect();
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    for (i, &j) in row_best.iter().enumerate() {
        if col_best[j] != i {
            continue;
        }
        let confidence = log_p.get(i, j).exp();
        if confidence >= threshold {
            out.push(Match { source: i, target: j, confidence });
        }
    }
    out
}

/// Mean negative log-likelihood of the supervised cells of `log_p`:
/// groundtruth matches, unmatched source rows against the target dustbin,
/// and unmatched target columns against the source dustbin.
pub fn feature_loss(tape: &mut Tape, log_p: Var, gt: &GroundTruth) -> Result<Var> {
    let count = gt.supervision_count();
    if count == 0 {
        return Err(Error::UndefinedLoss("pair has no supervised cells"));
    }
    let (rows, cols) = (tape.value(log_p).rows(), tape.value(log_p).cols());
    let (m, n) = (rows - 1, cols - 1);
    let mut cells = Vec::with_capacity(count);
    cells.extend(gt.matches.iter().copied());
    cells.extend(gt.unmatched_source.iter().map(|&i| (i, n)));
    cells.extend(gt.unmatched_target.iter().map(|&j| (m, j)));
    if let Some(bad) = cells.iter().find(|&&(i, j)| i >= rows || j >= cols) {
        return Err(dim_err("feature_loss", format!("cell {bad:?} outside {rows}x{cols}")));
    }
    let total = tape.gather_sum(log_p, cells)?;
    tape.scale(total, -1.0 / count as f64)
}

/// `feature + α · scene`.
pub fn hybrid_loss(tape: &mut Tape, feature: Var, scene: Var, alpha: f64) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    let weighted = tape.scale(scene, alpha)?;
    tape.add(feature, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn solve(scores: &Tensor, z: f64, iters: usize) -> Tensor {
        let mut tape = Tape::new();
        let s = tape.constant(scores.clone());
        let zv = tape.constant(Tensor::scalar(z));
        let lp = partial_assignment(&mut tape, s, zv, iters).unwrap();
        tape.value(lp).clone()
    }

    /// Entropic OT over `[[a, 1-a], [1-a, a]]` maximises
    /// `⟨P, K⟩ - Σ P log P`; golden-section search over `a`.
    fn brute_force_2x2(s: f64, z: f64) -> f64 {
        let objective = |a: f64| {
            let ent = |p: f64| if p > 0.0 { p * p.ln() } else { 0.0 };
            a * s + 2.0 * (1.0 - a) * z + a * z - 2.0 * ent(a) - 2.0 * ent(1.0 - a)
        };
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let x1 = hi - phi * (hi - lo);
            let x2 = lo + phi * (hi - lo);
            if objective(x1) < objective(x2) {
                lo = x1;
            } else {
                hi = x2;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn one_by_one_matches_brute_force() {
        for (s, z) in [(0.0, 0.0), (2.0, 0.5), (-1.0, 0.3), (3.0, -2.0)] {
            let p = solve(&Tensor::scalar(s), z, 100).map(f64::exp);
            let a = brute_force_2x2(s, z);
            let expect = [a, 1.0 - a, 1.0 - a, a];
            for (got, want) in p.data().iter().zip(expect) {
                assert!((got - want).abs() < 1e-6, "s={s} z={z}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn dominant_diagonal() {
        let n = 6;
        let mut s = Tensor::filled(n, n, -10.0);
        for k in 0..n {
            s.set(k, k, 10.0);
        }
        let lp = solve(&s, 0.0, 100);
        for k in 0..n {
            assert!(lp.get(k, k).exp() > 0.95);
        }
        let matches = extract_matches(&lp, 0.2);
        assert_eq!(matches.iter().map(|m| (m.source, m.target)).collect::<Vec<_>>(), (0..n).map(|k| (k, k)).collect::<Vec<_>>());
    }

    #[test]
    fn row_marginals_after_100_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = Tensor::randn(8, 12, 1.0, &mut rng);
        let p = solve(&s, 0.5, 100).map(f64::exp);
        for i in 0..8 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-3);
        }
        for i in 0..8 {
            assert!(p.row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        // The dustbin row absorbs the N - M surplus target mass.
        assert!((p.row(8).iter().sum::<f64>() - 12.0).abs() < 1e-3);
    }

    #[test]
    fn uniform_and_strict_threshold_give_no_matches() {
        let lp = Tensor::filled(6, 7, (1.0f64 / 6.0).ln());
        assert!(extract_matches(&lp, 0.2).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let soft = solve(&Tensor::randn(5, 5, 0.5, &mut rng), 0.0, 50);
        assert!(extract_matches(&soft, 0.999_999).is_empty());
    }

    #[test]
    fn feature_loss_closed_form() {
        let mut lp = Tensor::filled(3, 3, (1e-9f64).ln());
        lp.set(0, 0, 0.5f64.ln());
        let gt = GroundTruth {
            matches: vec![(0, 0)],
            visible_source: vec![true, true],
            visible_target: vec![true, true],
            ..Default::default()
        };
        let mut tape = Tape::new();
        let v = tape.constant(lp);
        let l = feature_loss(&mut tape, v, &gt).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn feature_loss_needs_supervision() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(3, 3));
        let gt = GroundTruth::default();
        assert!(matches!(feature_loss(&mut tape, v, &gt), Err(Error::UndefinedLoss(_))));
    }

    #[test]
    fn hybrid_loss_arithmetic() {
        let mut tape = Tape::new();
        let f = tape.param(Tensor::scalar(1.0));
        let s = tape.param(Tensor::scalar(0.5));
        let l = hybrid_loss(&mut tape, f, s, 8.0).unwrap();
        assert_eq!(tape.value(l).item(), 5.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(s).unwrap().item(), 8.0);
        assert_eq!(g.get(f).unwrap().item(), 1.0);
        let l0 = hybrid_loss(&mut tape, f, s, 0.0).unwrap();
        assert_eq!(tape.value(l0).item(), 1.0);
    }

    #[test]
    fn score_matrix_scaling() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let b = tape.constant(Tensor::from_rows(&[[0.0, 0.0], [0.0, 0.0]]));
        let s = score_matrix(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(s), &Tensor::zeros(2, 2));
        let s = score_matrix(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(s).scale(2.0), Tensor::identity(2));
        let c = tape.constant(Tensor::zeros(2, 3));
        assert!(score_matrix(&mut tape, a, c).is_err());
    }
}
