//! Self-supervised pair generation from random homographies.
//!
//! Each source keypoint carries a latent appearance vector per scale. Both
//! images observe that latent through independent Gaussian noise, so
//! corresponding keypoints have correlated raw features while distractors and
//! padding points (fresh latents) do not.

use crate::error::{Error, Result};
use crate::geometry::{compute_groundtruth, dlt_homography, GroundTruth, Homography, Point, DEFAULT_REPROJ_THRESHOLD};
use crate::keypoints::{ImageSize, KeypointSet, SCALE_COUNT};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const MAX_HOMOGRAPHY_ATTEMPTS: usize = 100;
const MIN_SAMPLED_DETERMINANT: f64 = 1e-6;
/// Largest displacement of a target keypoint from its exact warp.
pub const SUBPIXEL_JITTER: f64 = 0.5;
/// Coarser maps pool larger, less repeatable neighbourhoods.
pub const DEFAULT_SCALE_NOISE_GAIN: [f64; SCALE_COUNT] = [1.0, 2.0, 4.0, 8.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub source_count: usize,
    pub target_count: usize,
    pub image_size: ImageSize,
    /// Corner perturbation as a fraction of `min(width, height)`.
    pub corner_jitter: f64,
    /// Standard deviation of per-image feature noise at the finest scale.
    pub descriptor_noise: f64,
    /// Noise multiplier per scale, finest first.
    pub scale_noise_gain: [f64; SCALE_COUNT],
    /// Fresh target keypoints, as a fraction of `target_count`.
    pub distractor_frac: f64,
    /// Probability that a visible source keypoint is not re-detected.
    pub drop_frac: f64,
    pub scale_dims: [usize; SCALE_COUNT],
    /// Standard deviation of a per-image global feature offset (0 disables it).
    pub photometric_bias: f64,
    pub reproj_threshold: f64,
    /// Minimum distance between keypoints of one image.
    pub min_separation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            source_count: 64,
            target_count: 64,
            image_size: ImageSize::new(640.0, 480.0),
            corner_jitter: 0.25,
            descriptor_noise: 0.3,
            scale_noise_gain: DEFAULT_SCALE_NOISE_GAIN,
            distractor_frac: 0.2,
            drop_frac: 0.2,
            scale_dims: [16; SCALE_COUNT],
            photometric_bias: 0.0,
            reproj_threshold: DEFAULT_REPROJ_THRESHOLD,
            min_separation: 4.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.source_count < 8 || self.target_count < 8 {
            return Err(Error::Config("source and target counts must be at least 8".into()));
        }
        if self.descriptor_noise < 0.0 || self.photometric_bias < 0.0 || self.scale_noise_gain.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if !(0.0..0.5).contains(&self.corner_jitter) {
            return Err(Error::Config("corner jitter must lie in [0, 0.5)".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_frac) || !(0.0..=1.0).contains(&self.distractor_frac) {
            return Err(Error::Config("drop and distractor fractions must lie in [0, 1]".into()));
        }
        if self.scale_dims.contains(&0) {
            return Err(Error::Config("scale feature widths must be positive".into()));
        }
        let pixels = (self.image_size.width.floor() * self.image_size.height.floor()).max(0.0);
        let needed = self.source_count.max(self.target_count) as f64;
        if pixels < needed {
            return Err(Error::Config(format!(
                "{}x{} image cannot hold {needed} keypoints at 1 px separation",
                self.image_size.width, self.image_size.height
            )));
        }
        Ok(())
    }
}

/// Two keypoint sets, the homography relating them, and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub source: KeypointSet,
    pub target: KeypointSet,
    pub homography: Homography,
    pub gt: GroundTruth,
}

/// Deterministic per-index seed: pair `index` of stream `seed`.
pub fn pair_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the combined key
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_homography(size: ImageSize, corner_jitter: f64, seed: u64) -> Result<Homography> {
    sample_homography_with(size, corner_jitter, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Fits the image corners to uniformly perturbed corners, resampling
/// near-singular draws.
pub fn sample_homography_with<R: Rng + ?Sized>(size: ImageSize, corner_jitter: f64, rng: &mut R) -> Result<Homography> {
    if !(0.0..0.5).contains(&corner_jitter) {
        return Err(Error::Config("corner jitter must lie in [0, 0.5)".into()));
    }
    let amp = corner_jitter * size.width.min(size.height);
    let corners = size.corners();
    for _ in 0..MAX_HOMOGRAPHY_ATTEMPTS {
        let pairs: Vec<(Point, Point)> = corners
            .iter()
            .map(|&c| {
                let dx = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
                let dy = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
                (c, [c[0] + dx, c[1] + dy])
            })
            .collect();
        match dlt_homography(&pairs) {
            Ok(h) if h.determinant().abs() > MIN_SAMPLED_DETERMINANT && h.inverse().is_ok() => return Ok(h),
            _ => continue,
        }
    }
    Err(Error::DegenerateConfiguration(format!(
        "no invertible homography after {MAX_HOMOGRAPHY_ATTEMPTS} attempts"
    )))
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn uniform_point<R: Rng + ?Sized>(size: ImageSize, rng: &mut R) -> Point {
    [rng.random_range(0.0..size.width), rng.random_range(0.0..size.height)]
}

/// Rejection-samples a point at least `sep` from `existing` and at least
/// `avoid_radius` from every point in `avoid`.
fn sample_free_point<R: Rng + ?Sized>(
    size: ImageSize,
    existing: &[Point],
    sep: f64,
    avoid: &[Point],
    avoid_radius: f64,
    rng: &mut R,
) -> Result<Point> {
    for _ in 0..10_000 {
        let p = uniform_point(size, rng);
        if existing.iter().all(|&q| dist(p, q) >= sep) && avoid.iter().all(|&q| dist(p, q) >= avoid_radius) {
            return Ok(p);
        }
    }
    Err(Error::Config("image too crowded to place another keypoint".into()))
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

struct Latent(Vec<Vec<f64>>);

impl Latent {
    fn sample<R: Rng + ?Sized>(dims: &[usize; SCALE_COUNT], rng: &mut R) -> Self {
        Latent(dims.iter().map(|&d| (0..d).map(|_| gaussian(rng)).collect()).collect())
    }
}

fn observe<R: Rng + ?Sized>(
    latents: &[&Latent],
    dims: &[usize; SCALE_COUNT],
    noise: [f64; SCALE_COUNT],
    bias: &[Vec<f64>],
    rng: &mut R,
) -> Vec<Tensor> {
    (0..SCALE_COUNT)
        .map(|s| {
            let mut t = Tensor::zeros(latents.len(), dims[s]);
            for (k, lat) in latents.iter().enumerate() {
                for (c, v) in t.row_mut(k).iter_mut().enumerate() {
                    let eps = if noise[s] > 0.0 { noise[s] * gaussian(rng) } else { 0.0 };
                    *v = lat.0[s][c] + eps + bias[s][c];
                }
            }
            t
        })
        .collect()
}

fn image_bias<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Vec<Vec<f64>> {
    cfg.scale_dims
        .iter()
        .map(|&d| {
            (0..d)
                .map(|_| if cfg.photometric_bias > 0.0 { cfg.photometric_bias * gaussian(rng) } else { 0.0 })
                .collect()
        })
        .collect()
}

fn to_positions(points: &[Point], confidence: &[f64]) -> Tensor {
    let rows: Vec<[f64; 3]> = points.iter().zip(confidence).map(|(p, &c)| [p[0], p[1], c]).collect();
    if rows.is_empty() {
        Tensor::zeros(0, 3)
    } else {
        Tensor::from_rows(&rows)
    }
}

/// Generates one labelled pair with exactly `source_count` / `target_count` keypoints.
///
/// Target order: surviving warped source keypoints (in source order), then
/// distractors, then padding points. Distractors and padding are placed away
/// from every warped source keypoint so they are never groundtruth matches.
pub fn generate_pair(cfg: &SynthConfig, seed: u64) -> Result<SyntheticPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    let homography = sample_homography_with(size, cfg.corner_jitter, &mut rng)?;

    let mut src_points: Vec<Point> = Vec::with_capacity(cfg.source_count);
    for _ in 0..cfg.source_count {
        let p = sample_free_point(size, &src_points, cfg.min_separation, &[], 0.0, &mut rng)?;
        src_points.push(p);
    }
    let latents: Vec<Latent> = (0..cfg.source_count).map(|_| Latent::sample(&cfg.scale_dims, &mut rng)).collect();
    let src_conf: Vec<f64> = (0..cfg.source_count).map(|_| rng.random_range(0.5..=1.0)).collect();

    // exact warps of every source point, used to keep distractors unmatched
    let warped: Vec<Option<Point>> = src_points.iter().map(|&p| homography.apply(p).ok()).collect();
    let warped_all: Vec<Point> = warped.iter().flatten().copied().collect();

    let mut tgt_points: Vec<Point> = Vec::with_capacity(cfg.target_count);
    let mut tgt_latent_src: Vec<Option<usize>> = Vec::with_capacity(cfg.target_count);
    for (i, w) in warped.iter().enumerate() {
        let survives = rng.random::<f64>() >= cfg.drop_frac;
        let Some(w) = *w else { continue };
        if !survives || !size.contains(w) {
            continue;
        }
        let r = SUBPIXEL_JITTER * rng.random::<f64>().sqrt();
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let jittered = [
            (w[0] + r * a.cos()).clamp(0.0, size.width.next_down()),
            (w[1] + r * a.sin()).clamp(0.0, size.height.next_down()),
        ];
        tgt_points.push(jittered);
        tgt_latent_src.push(Some(i));
    }
    let distractors = ((cfg.distractor_frac * cfg.target_count as f64).round() as usize).min(cfg.target_count);
    tgt_points.truncate(cfg.target_count - distractors);
    tgt_latent_src.truncate(cfg.target_count - distractors);

    let avoid_radius = cfg.reproj_threshold + SUBPIXEL_JITTER;
    let free_slots = cfg.target_count - tgt_points.len();
    for _ in 0..free_slots {
        // distractors first, then padding; both use fresh latents
        let p = sample_free_point(size, &tgt_points, cfg.min_separation, &warped_all, avoid_radius, &mut rng)?;
        tgt_points.push(p);
        tgt_latent_src.push(None);
    }

    let fresh: Vec<Latent> = tgt_latent_src
        .iter()
        .filter(|s| s.is_none())
        .map(|_| Latent::sample(&cfg.scale_dims, &mut rng))
        .collect();
    let mut fresh_iter = fresh.iter();
    let tgt_latents: Vec<&Latent> = tgt_latent_src
        .iter()
        .map(|s| match s {
            Some(i) => &latents[*i],
            None => fresh_iter.next().expect("one fresh latent per unmatched target"),
        })
        .collect();
    let tgt_conf: Vec<f64> = (0..cfg.target_count).map(|_| rng.random_range(0.5..=1.0)).collect();

    let src_bias = image_bias(cfg, &mut rng);
    let tgt_bias = image_bias(cfg, &mut rng);
    let src_refs: Vec<&Latent> = latents.iter().collect();
    let noise = cfg.scale_noise_gain.map(|g| g * cfg.descriptor_noise);
    let src_features = observe(&src_refs, &cfg.scale_dims, noise, &src_bias, &mut rng);
    let tgt_features = observe(&tgt_latents, &cfg.scale_dims, noise, &tgt_bias, &mut rng);

    let source = KeypointSet { positions: to_positions(&src_points, &src_conf), raw_features: src_features, image_size: size };
    let target = KeypointSet { positions: to_positions(&tgt_points, &tgt_conf), raw_features: tgt_features, image_size: size };
    let gt = compute_groundtruth(&source, &target, &homography, cfg.reproj_threshold)?;
    Ok(SyntheticPair { source, target, homography, gt })
}

/// Reproducible pair sequence; pair `i` depends only on `(seed, i)`.
pub fn dataset_stream(cfg: &SynthConfig, seed: u64, count: usize) -> impl Iterator<Item = Result<SyntheticPair>> + '_ {
    (0..count as u64).map(move |i| generate_pair(cfg, pair_seed(seed, i)))
}
