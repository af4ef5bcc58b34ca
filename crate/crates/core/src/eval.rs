//! Matching metrics, homography AUC, visibility accuracy and descriptor baselines.

use crate::error::{dim_err, Result};
use crate::geometry::{corner_error, ransac_homography, GroundTruth, Homography, Point, DEFAULT_REPROJ_THRESHOLD};
use crate::keypoints::KeypointSet;
use crate::model::Model;
use crate::synth::SyntheticPair;
use crate::tensor::Tensor;
use crate::visibility::VisibilityPrediction;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

pub const MMA_THRESHOLDS: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
pub const AUC_MAX_THRESHOLD: f64 = 10.0;
pub const EVAL_RANSAC_ITERS: usize = 1000;
pub const EVAL_RANSAC_SEED: u64 = 0;

/// Fraction of `matches` whose warped source lies within each threshold of its target.
/// An empty match list scores 0 everywhere.
pub fn mma(
    matches: &[(usize, usize)],
    src: &KeypointSet,
    tgt: &KeypointSet,
    h: &Homography,
    thresholds: &[f64],
) -> Vec<f64> {
    if matches.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let errors: Vec<f64> = matches
        .iter()
        .map(|&(i, j)| match h.apply(src.point(i)) {
            Ok(w) => {
                let t = tgt.point(j);
                (w[0] - t[0]).hypot(w[1] - t[1])
            }
            Err(_) => f64::INFINITY,
        })
        .collect();
    thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Exact index agreement against the groundtruth matches. `None` when the
/// pair has no groundtruth matches.
pub fn precision_recall_f1(predicted: &[(usize, usize)], gt: &GroundTruth) -> Option<PrecisionRecall> {
    if gt.matches.is_empty() {
        return None;
    }
    if predicted.is_empty() {
        return Some(PrecisionRecall { precision: 1.0, recall: 0.0, f1: 0.0 });
    }
    let truth: HashSet<(usize, usize)> = gt.matches.iter().copied().collect();
    let hits = predicted.iter().filter(|m| truth.contains(m)).count() as f64;
    let precision = hits / predicted.len() as f64;
    let recall = hits / truth.len() as f64;
    Some(PrecisionRecall { precision, recall, f1: f1_score(precision, recall) })
}

/// Area under the cumulative error curve on `[0, max_threshold]`, divided by
/// `max_threshold`. The curve is the empirical CDF, integrated exactly.
pub fn homography_auc(errors: &[f64], max_threshold: f64) -> f64 {
    if errors.is_empty() || max_threshold <= 0.0 {
        return 0.0;
    }
    let n = errors.len() as f64;
    errors
        .iter()
        .filter(|&&e| e < max_threshold)
        .map(|&e| (max_threshold - e.max(0.0)) / (n * max_threshold))
        .sum()
}

/// Corner error of the RANSAC homography fitted on the matched keypoints;
/// `+∞` when estimation fails.
pub fn estimate_corner_error(matches: &[(usize, usize)], pair: &SyntheticPair) -> f64 {
    let pts: Vec<(Point, Point)> =
        matches.iter().map(|&(i, j)| (pair.source.point(i), pair.target.point(j))).collect();
    match ransac_homography(&pts, DEFAULT_REPROJ_THRESHOLD, EVAL_RANSAC_ITERS, EVAL_RANSAC_SEED) {
        Ok(fit) => corner_error(&fit.homography, &pair.homography, pair.source.image_size),
        Err(_) => f64::INFINITY,
    }
}

/// `(correct, total)` argmax-class agreement with the geometric labels.
pub fn visibility_hits(pred: &VisibilityPrediction, labels: &[bool]) -> (usize, usize) {
    let correct = labels.iter().enumerate().filter(|&(k, &l)| pred.is_visible(k) == l).count();
    (correct, labels.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Nn,
    MutualNn,
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "nn" => Ok(Self::Nn),
            "mnn" => Ok(Self::MutualNn),
            other => Err(format!("unknown baseline '{other}', expected nn or mnn")),
        }
    }
}

fn row_normalized(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

fn argmax(vals: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in vals.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Cosine-similarity nearest-neighbour matching, lowest index on ties.
pub fn baseline_match(kind: BaselineKind, ds: &Tensor, dt: &Tensor) -> Result<Vec<(usize, usize)>> {
    if ds.cols() != dt.cols() {
        return Err(dim_err("baseline_match", format!("widths {} and {}", ds.cols(), dt.cols())));
    }
    if ds.rows() == 0 || dt.rows() == 0 {
        return Ok(Vec::new());
    }
    let sim = row_normalized(ds).matmul_nt(&row_normalized(dt))?;
    let forward: Vec<usize> = (0..sim.rows()).map(|i| argmax(sim.row(i).iter().copied()).unwrap_or(0)).collect();
    let out = match kind {
        BaselineKind::Nn => forward.into_iter().enumerate().collect(),
        BaselineKind::MutualNn => {
            let backward: Vec<usize> =
                (0..sim.cols()).map(|j| argmax((0..sim.rows()).map(|i| sim.get(i, j))).unwrap_or(0)).collect();
            forward.into_iter().enumerate().filter(|&(i, j)| backward[j] == i).collect()
        }
    };
    Ok(out)
}

/// Concatenation of the four raw scale features; the parameter-free
/// descriptor the baselines operate on.
pub fn raw_descriptors(kps: &KeypointSet) -> Tensor {
    let mut out = Tensor::zeros(kps.len(), 0);
    for f in &kps.raw_features {
        out = out.concat_cols(f).expect("validated scale features share the keypoint count");
    }
    out
}

/// Aggregated metrics over a set of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(threshold px, accuracy)` for thresholds 1..=10.
    pub mma: Vec<(f64, f64)>,
    /// Mean over pairs with groundtruth matches.
    pub precision: f64,
    pub recall: f64,
    /// Harmonic mean of the averaged precision and recall.
    pub f1: f64,
    pub homography_auc_10px: f64,
    /// `None` for descriptor baselines, which predict no visibility.
    pub visibility_accuracy: Option<f64>,
    pub pair_count: usize,
    pub mean_matches: f64,
}

impl EvalReport {
    pub fn to_json_text(&self) -> String {
        let mut s = String::from("{\n");
        let mma: Vec<String> = self.mma.iter().map(|(t, a)| format!("\"{t}\": {a:.6}")).collect();
        let _ = writeln!(s, "  \"pair_count\": {},", self.pair_count);
        let _ = writeln!(s, "  \"mean_matches\": {:.6},", self.mean_matches);
        let _ = writeln!(s, "  \"precision\": {:.6},", self.precision);
        let _ = writeln!(s, "  \"recall\": {:.6},", self.recall);
        let _ = writeln!(s, "  \"f1\": {:.6},", self.f1);
        let _ = writeln!(s, "  \"homography_auc_10px\": {:.6},", self.homography_auc_10px);
        match self.visibility_accuracy {
            Some(v) => {
                let _ = writeln!(s, "  \"visibility_accuracy\": {v:.6},");
            }
            None => s.push_str("  \"visibility_accuracy\": null,\n"),
        }
        let _ = writeln!(s, "  \"mma\": {{{}}}", mma.join(", "));
        s.push_str("}\n");
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold_px,mma\n");
        for (t, a) in &self.mma {
            let _ = writeln!(s, "{t},{a:.6}");
        }
        s
    }
}

/// Running sums for [`EvalReport`].
#[derive(Clone, Debug, Default)]
pub struct Evaluator {
    mma_sum: Vec<f64>,
    pairs: usize,
    pr_pairs: usize,
    precision_sum: f64,
    recall_sum: f64,
    corner_errors: Vec<f64>,
    vis_correct: usize,
    vis_total: usize,
    match_count: usize,
}

impl Evaluator {
    pub fn new() -> Self {
        Self { mma_sum: vec![0.0; MMA_THRESHOLDS.len()], ..Default::default() }
    }

    pub fn add_pair(
        &mut self,
        pair: &SyntheticPair,
        matches: &[(usize, usize)],
        visibility: Option<(&VisibilityPrediction, &VisibilityPrediction)>,
    ) {
        self.pairs += 1;
        self.match_count += matches.len();
        let acc = mma(matches, &pair.source, &pair.target, &pair.homography, &MMA_THRESHOLDS);
        self.mma_sum.iter_mut().zip(acc).for_each(|(s, a)| *s += a);
        if let Some(pr) = precision_recall_f1(matches, &pair.gt) {
            self.pr_pairs += 1;
            self.precision_sum += pr.precision;
            self.recall_sum += pr.recall;
        }
        self.corner_errors.push(estimate_corner_error(matches, pair));
        if let Some((vs, vt)) = visibility {
            for (pred, labels) in [(vs, &pair.gt.visible_source), (vt, &pair.gt.visible_target)] {
                let (c, t) = visibility_hits(pred, labels);
                self.vis_correct += c;
                self.vis_total += t;
            }
        }
    }

    pub fn finish(&self) -> EvalReport {
        let per_pair = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
        let precision = per_pair(self.precision_sum, self.pr_pairs);
        let recall = per_pair(self.recall_sum, self.pr_pairs);
        EvalReport {
            mma: MMA_THRESHOLDS.iter().zip(&self.mma_sum).map(|(&t, &s)| (t, per_pair(s, self.pairs))).collect(),
            precision,
            recall,
            f1: f1_score(precision, recall),
            homography_auc_10px: homography_auc(&self.corner_errors, AUC_MAX_THRESHOLD),
            visibility_accuracy: (self.vis_total > 0).then(|| self.vis_correct as f64 / self.vis_total as f64),
            pair_count: self.pairs,
            mean_matches: per_pair(self.match_count as f64, self.pairs),
        }
    }
}

/// Runs the model on every pair and aggregates the metrics.
pub fn evaluate_model(model: &Model, pairs: &[SyntheticPair], sinkhorn_iters: usize, threshold: f64) -> Result<EvalReport> {
    let mut ev = Evaluator::new();
    for pair in pairs {
        let pred = model.predict(&pair.source, &pair.target, sinkhorn_iters, threshold)?;
        let matches: Vec<(usize, usize)> = pred.matches.iter().map(|m| (m.source, m.target)).collect();
        ev.add_pair(pair, &matches, Some((&pred.vis_s, &pred.vis_t)));
    }
    Ok(ev.finish())
}

/// Baseline matching on the raw multi-scale descriptors of every pair.
pub fn evaluate_baseline(kind: BaselineKind, pairs: &[SyntheticPair]) -> Result<EvalReport> {
    let mut ev = Evaluator::new();
    for pair in pairs {
        let matches = baseline_match(kind, &raw_descriptors(&pair.source), &raw_descriptors(&pair.target))?;
        ev.add_pair(pair, &matches, None);
    }
    Ok(ev.finish())
}
