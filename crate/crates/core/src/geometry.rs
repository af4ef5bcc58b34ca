//! Homography algebra, groundtruth labelling and robust estimation.

use crate::error::{Error, Result};
use crate::keypoints::{ImageSize, KeypointSet};
use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Point = [f64; 2];

/// Homogeneous coordinates with |w| below this are treated as points at infinity.
pub const MIN_HOMOGENEOUS_W: f64 = 1e-12;

/// Default groundtruth reprojection threshold in pixels.
pub const DEFAULT_REPROJ_THRESHOLD: f64 = 3.0;

/// Projective 3×3 transform normalised so that `h[2][2] = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0))
    }

    /// Normalises `m` so the bottom-right entry is 1 and checks invertibility.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if s.abs() < MIN_HOMOGENEOUS_W || !m.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateConfiguration("homography cannot be normalised".into()));
        }
        let m = m / s;
        if m.determinant().abs() <= 1e-12 {
            return Err(Error::DegenerateConfiguration("homography is singular".into()));
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(&rows.concat()))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .0
            .try_inverse()
            .ok_or_else(|| Error::DegenerateConfiguration("homography is not invertible".into()))?;
        Self::from_matrix(inv)
    }

    pub fn apply(&self, p: Point) -> Result<Point> {
        let v = self.0 * Vector3::new(p[0], p[1], 1.0);
        if v[2].abs() < MIN_HOMOGENEOUS_W {
            return Err(Error::DegeneratePoint { w: v[2] });
        }
        Ok([v[0] / v[2], v[1] / v[2]])
    }
}

pub fn apply_homography(h: &Homography, pts: &[Point]) -> Result<Vec<Point>> {
    pts.iter().map(|&p| h.apply(p)).collect()
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Groundtruth correspondence and visibility labels for one image pair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    /// Matched `(source, target)` index pairs, sorted by source index.
    pub matches: Vec<(usize, usize)>,
    /// Source indices that land inside the target image but have no partner.
    pub unmatched_source: Vec<usize>,
    /// Target indices that land inside the source image but have no partner.
    pub unmatched_target: Vec<usize>,
    pub visible_source: Vec<bool>,
    pub visible_target: Vec<bool>,
}

impl GroundTruth {
    pub fn supervision_count(&self) -> usize {
        self.matches.len() + self.unmatched_source.len() + self.unmatched_target.len()
    }

    /// Checks the partial-bijection and disjointness invariants.
    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.visible_source.len(), self.visible_target.len());
        let mut used_s = vec![false; m];
        let mut used_t = vec![false; n];
        for &(i, j) in &self.matches {
            if i >= m || j >= n || used_s[i] || used_t[j] {
                return Err(Error::Format(format!("match ({i}, {j}) breaks the partial bijection")));
            }
            if !self.visible_source[i] {
                return Err(Error::Format(format!("matched source {i} is labelled invisible")));
            }
            used_s[i] = true;
            used_t[j] = true;
        }
        for &i in &self.unmatched_source {
            if i >= m || used_s[i] {
                return Err(Error::Format(format!("unmatched source {i} overlaps the matches")));
            }
        }
        for &j in &self.unmatched_target {
            if j >= n || used_t[j] {
                return Err(Error::Format(format!("unmatched target {j} overlaps the matches")));
            }
        }
        Ok(())
    }
}

/// Index of the nearest candidate to `p`; lowest index wins ties.
fn nearest(p: Point, candidates: &[Point]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &c) in candidates.iter().enumerate() {
        let d = dist(p, c);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best
}

/// Labels an image pair from the homography mapping source pixels to target pixels.
///
/// `(i, j)` is a match when `i` and `j` are mutual nearest neighbours after
/// warping (source forward through `h`, target back through `h⁻¹`) and both
/// reprojection distances are below `reproj_threshold_px`.
pub fn compute_groundtruth(
    src: &KeypointSet,
    tgt: &KeypointSet,
    h: &Homography,
    reproj_threshold_px: f64,
) -> Result<GroundTruth> {
    if reproj_threshold_px <= 0.0 {
        return Err(Error::Config("reprojection threshold must be positive".into()));
    }
    let h_inv = h.inverse()?;
    label_points(
        &src.points(),
        src.image_size,
        &tgt.points(),
        tgt.image_size,
        h,
        &h_inv,
        reproj_threshold_px,
    )
}

pub(crate) fn label_points(
    src: &[Point],
    src_size: ImageSize,
    tgt: &[Point],
    tgt_size: ImageSize,
    h: &Homography,
    h_inv: &Homography,
    threshold: f64,
) -> Result<GroundTruth> {
    // points at infinity are simply not visible
    let warp = |h: &Homography, pts: &[Point]| -> Vec<Option<Point>> { pts.iter().map(|&p| h.apply(p).ok()).collect() };
    let src_warped = warp(h, src);
    let tgt_warped = warp(h_inv, tgt);

    let visible_source: Vec<bool> = src_warped.iter().map(|w| w.is_some_and(|p| tgt_size.contains(p))).collect();
    let visible_target: Vec<bool> = tgt_warped.iter().map(|w| w.is_some_and(|p| src_size.contains(p))).collect();

    let nn_s: Vec<Option<(usize, f64)>> = src_warped.iter().map(|w| w.and_then(|p| nearest(p, tgt))).collect();
    let nn_t: Vec<Option<(usize, f64)>> = tgt_warped.iter().map(|w| w.and_then(|p| nearest(p, src))).collect();

    let mut matches = Vec::new();
    let mut matched_t = vec![false; tgt.len()];
    let mut matched_s = vec![false; src.len()];
    for (i, nn) in nn_s.iter().enumerate() {
        let Some((j, d_fwd)) = *nn else { continue };
        let Some((back, d_bwd)) = nn_t[j] else { continue };
        if back == i && d_fwd < threshold && d_bwd < threshold {
            matches.push((i, j));
            matched_s[i] = true;
            matched_t[j] = true;
        }
    }
    let unmatched_source = (0..src.len()).filter(|&i| !matched_s[i] && visible_source[i]).collect();
    let unmatched_target = (0..tgt.len()).filter(|&j| !matched_t[j] && visible_target[j]).collect();
    Ok(GroundTruth { matches, unmatched_source, unmatched_target, visible_source, visible_target })
}

/// Similarity transform moving the centroid to the origin with mean distance √2.
fn hartley_normalizer(pts: &[Point]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = pts.iter().map(|p| (p[0] - cx).hypot(p[1] - cy)).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    let v = t * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

fn has_collinear_triple(pts: &[Point]) -> bool {
    let scale = pts.iter().flat_map(|p| [p[0].abs(), p[1].abs()]).fold(1.0, f64::max);
    let tol = 1e-9 * scale * scale;
    let n = pts.len();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                let (p, q, r) = (pts[a], pts[b], pts[c]);
                let area = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]);
                if area.abs() <= tol {
                    return true;
                }
            }
        }
    }
    false
}

/// Normalised direct linear transform from `(source, target)` correspondences.
pub fn dlt_homography(pairs: &[(Point, Point)]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::DegenerateConfiguration(format!("need at least 4 pairs, got {}", pairs.len())));
    }
    let src: Vec<Point> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Point> = pairs.iter().map(|p| p.1).collect();
    if pairs.len() == 4 && (has_collinear_triple(&src) || has_collinear_triple(&dst)) {
        return Err(Error::DegenerateConfiguration("three of four points are collinear".into()));
    }
    let ts = hartley_normalizer(&src);
    let td = hartley_normalizer(&dst);

    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (s, d)) in src.iter().zip(&dst).enumerate() {
        let [x, y] = transform(&ts, *s);
        let [u, v] = transform(&td, *d);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * k, c)] = r0[c];
            a[(2 * k + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::DegenerateConfiguration("SVD failed".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let (largest, second_smallest) = (sv[order[0]], sv[order[7]]);
    if largest <= 0.0 || second_smallest / largest < 1e-10 {
        return Err(Error::DegenerateConfiguration("DLT system is rank deficient".into()));
    }
    let null = v_t.row(order[8]);
    let hn = Matrix3::new(null[0], null[1], null[2], null[3], null[4], null[5], null[6], null[7], null[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| Error::DegenerateConfiguration("target points coincide".into()))?;
    Homography::from_matrix(td_inv * hn * ts)
}

/// Outcome of a successful [`ransac_homography`] run.
#[derive(Clone, Debug, PartialEq)]
pub struct RansacFit {
    pub homography: Homography,
    pub inliers: Vec<bool>,
}

/// Best-consensus homography from minimal four-point samples, refit on all inliers.
///
/// Deterministic for a fixed `seed`.
pub fn ransac_homography(
    pairs: &[(Point, Point)],
    inlier_threshold_px: f64,
    iterations: usize,
    seed: u64,
) -> Result<RansacFit> {
    if pairs.len() < 4 {
        return Err(Error::EstimationFailed(format!("{} correspondences, need 4", pairs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inlier_mask = |h: &Homography| -> Vec<bool> {
        pairs
            .iter()
            .map(|&(s, d)| h.apply(s).is_ok_and(|w| dist(w, d) < inlier_threshold_px))
            .collect()
    };
    let mut best: Option<(usize, Homography)> = None;
    for _ in 0..iterations {
        let idx = sample(&mut rng, pairs.len(), 4);
        let minimal: Vec<(Point, Point)> = idx.iter().map(|k| pairs[k]).collect();
        let Ok(h) = dlt_homography(&minimal) else { continue };
        let count = inlier_mask(&h).iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, h));
        }
    }
    let Some((count, h)) = best else {
        return Err(Error::EstimationFailed("no non-degenerate minimal sample".into()));
    };
    if count < 4 {
        return Err(Error::EstimationFailed(format!("only {count} inliers")));
    }
    let mask = inlier_mask(&h);
    let inlier_pairs: Vec<(Point, Point)> =
        pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let refit = dlt_homography(&inlier_pairs).unwrap_or(h);
    let refit_mask = inlier_mask(&refit);
    let refit_count = refit_mask.iter().filter(|&&b| b).count();
    // keep the minimal-sample model if refitting loses support
    let (homography, inliers) = if refit_count >= count { (refit, refit_mask) } else { (h, mask) };
    Ok(RansacFit { homography, inliers })
}

/// Mean distance between the image corners mapped by `estimate` and by `truth`.
pub fn corner_error(estimate: &Homography, truth: &Homography, size: ImageSize) -> f64 {
    let corners = size.corners();
    let mut total = 0.0;
    for c in corners {
        match (estimate.apply(c), truth.apply(c)) {
            (Ok(a), Ok(b)) => total += dist(a, b),
            _ => return f64::INFINITY,
        }
    }
    total / corners.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn random_h(rng: &mut ChaCha8Rng) -> Homography {
        Homography::from_rows([
            [1.0 + rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-30.0..30.0)],
            [rng.random_range(-0.2..0.2), 1.0 + rng.random_range(-0.2..0.2), rng.random_range(-30.0..30.0)],
            [rng.random_range(-3e-4..3e-4), rng.random_range(-3e-4..3e-4), 1.0],
        ])
        .unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n).map(|_| [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)]).collect()
    }

    fn kps(points: &[Point], size: ImageSize) -> KeypointSet {
        let rows: Vec<[f64; 3]> = points.iter().map(|p| [p[0], p[1], 1.0]).collect();
        KeypointSet { positions: Tensor::from_rows(&rows), raw_features: vec![], image_size: size }
    }

    fn rel_diff(a: &Homography, b: &Homography) -> f64 {
        let d = (a.matrix() - b.matrix()).norm();
        d / b.matrix().norm()
    }

    #[test]
    fn identity_and_translation() {
        assert_eq!(Homography::identity().apply([10.0, 20.0]).unwrap(), [10.0, 20.0]);
        assert_eq!(Homography::translation(5.0, -3.0).apply([0.0, 0.0]).unwrap(), [5.0, -3.0]);
    }

    #[test]
    fn round_trip_through_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let h = random_h(&mut rng);
            let pts = random_points(&mut rng, 20);
            let back = apply_homography(&h.inverse().unwrap(), &apply_homography(&h, &pts).unwrap()).unwrap();
            for (p, q) in pts.iter().zip(&back) {
                assert!(dist(*p, *q) < 1e-9);
            }
        }
    }

    #[test]
    fn point_at_infinity() {
        let h = Homography::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(h.apply([-1.0, 5.0]), Err(Error::DegeneratePoint { .. })));
    }

    #[test]
    fn groundtruth_identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let size = ImageSize::new(640.0, 480.0);
        let pts = random_points(&mut rng, 30);
        let set = kps(&pts, size);
        let gt = compute_groundtruth(&set, &set, &Homography::identity(), 3.0).unwrap();
        assert_eq!(gt.matches, (0..30).map(|k| (k, k)).collect::<Vec<_>>());
        assert!(gt.unmatched_source.is_empty() && gt.unmatched_target.is_empty());
        assert!(gt.visible_source.iter().chain(&gt.visible_target).all(|&v| v));
    }

    #[test]
    fn groundtruth_out_of_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let size = ImageSize::new(640.0, 480.0);
        let pts = random_points(&mut rng, 20);
        let set = kps(&pts, size);
        let gt = compute_groundtruth(&set, &set, &Homography::translation(1000.0, 0.0), 3.0).unwrap();
        assert!(gt.matches.is_empty());
        assert!(gt.visible_source.iter().all(|&v| !v));
        assert!(gt.unmatched_source.is_empty());
    }

    #[test]
    fn groundtruth_rejects_bad_threshold() {
        let set = kps(&[[1.0, 1.0]], ImageSize::new(10.0, 10.0));
        assert!(compute_groundtruth(&set, &set, &Homography::identity(), 0.0).is_err());
    }

    #[test]
    fn dlt_identity_and_planted() {
        let quad = [[10.0, 10.0], [600.0, 20.0], [620.0, 460.0], [30.0, 450.0]];
        let pairs: Vec<_> = quad.iter().map(|&p| (p, p)).collect();
        let h = dlt_homography(&pairs).unwrap();
        assert!((h.matrix() - Matrix3::identity()).abs().max() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let truth = random_h(&mut rng);
            let pairs: Vec<_> = quad.iter().map(|&p| (p, truth.apply(p).unwrap())).collect();
            let est = dlt_homography(&pairs).unwrap();
            assert!(rel_diff(&est, &truth) < 1e-6);
        }
    }

    #[test]
    fn dlt_collinear_is_degenerate() {
        let pts = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 5.0]];
        let pairs: Vec<_> = pts.iter().map(|&p| (p, p)).collect();
        assert!(matches!(dlt_homography(&pairs), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn ransac_clean_and_too_few() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = random_h(&mut rng);
        let pairs: Vec<_> = random_points(&mut rng, 50).into_iter().map(|p| (p, truth.apply(p).unwrap())).collect();
        let fit = ransac_homography(&pairs, 3.0, 200, 1).unwrap();
        assert!(fit.inliers.iter().all(|&b| b));
        assert!(rel_diff(&fit.homography, &truth) < 1e-6);
        assert!(matches!(ransac_homography(&pairs[..3], 3.0, 10, 1), Err(Error::EstimationFailed(_))));
    }

    #[test]
    fn ransac_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = random_h(&mut rng);
        let mut pairs: Vec<_> = random_points(&mut rng, 60).into_iter().map(|p| (p, truth.apply(p).unwrap())).collect();
        for p in pairs.iter_mut().take(20) {
            p.1 = [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)];
        }
        let a = ransac_homography(&pairs, 3.0, 300, 77).unwrap();
        let b = ransac_homography(&pairs, 3.0, 300, 77).unwrap();
        assert_eq!(a, b);
    }
}
