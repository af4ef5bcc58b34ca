//! Cross-view visibility estimation from scene descriptors.
//!
//! The two scene tokens are mixed across the token axis (spatial MLP) and
//! across channels (channel MLP), then used as queries over the local
//! descriptors. The resulting `2 × C` summary is routed back to keypoints
//! through the transposed attention weights, projected, added to the local
//! descriptors, and classified into visible / invisible by a group MLP.

use crate::error::{dim_err, Error, Result};
use crate::geometry::GroundTruth;
use crate::params::{orthogonal, Bound, Init, Linear, Mlp, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Clamp applied to visible-class probabilities inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Column of the visible class in prediction rows.
pub const VISIBLE_CLASS: usize = 0;

/// Hidden width of the spatial (token-axis) MLP.
pub const SPATIAL_HIDDEN: usize = 8;

#[derive(Clone, Debug)]
pub struct VisibilityParams {
    /// `h_s × 2`.
    pub spatial_w1: ParamId,
    /// `2 × h_s`.
    pub spatial_w2: ParamId,
    /// `C → h_c`, no bias.
    pub channel_w1: Linear,
    /// `h_c → C`, no bias.
    pub channel_w2: Linear,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// Projection of the routed scene summary before the residual add.
    pub out_proj: Linear,
    /// `C → h_g → 2`.
    pub group: Mlp,
    pub width: usize,
}

impl VisibilityParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, rng: &mut R) -> Self {
        let bound = (3.0 / 2.0f64).sqrt();
        let spatial_w1 = store.add("vis.spatial.w1", Tensor::uniform(SPATIAL_HIDDEN, 2, bound, rng));
        let bound = (3.0 / SPATIAL_HIDDEN as f64).sqrt();
        let spatial_w2 = store.add("vis.spatial.w2", Tensor::uniform(2, SPATIAL_HIDDEN, bound, rng));
        let channel_w1 = Linear::new(store, "vis.channel.w1", width, width, false, Init::KaimingUniform, rng);
        let channel_w2 = Linear::new(store, "vis.channel.w2", width, width, false, Init::KaimingUniform, rng);
        let w_q = store.add("vis.w_q", orthogonal(width, width, rng));
        let w_k = store.add("vis.w_k", orthogonal(width, width, rng));
        let w_v = store.add("vis.w_v", orthogonal(width, width, rng));
        let out_proj = Linear::new(store, "vis.out_proj", width, width, true, Init::KaimingUniform, rng);
        let group = Mlp::two_layer(store, "vis.group", [width, width, 2], Init::KaimingUniform, rng);
        Self { spatial_w1, spatial_w2, channel_w1, channel_w2, w_q, w_k, w_v, out_proj, group, width }
    }
}

/// Per-keypoint `(p_visible, p_invisible)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityPrediction {
    pub probs: Tensor,
}

impl VisibilityPrediction {
    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn p_visible(&self, k: usize) -> f64 {
        self.probs.get(k, VISIBLE_CLASS)
    }

    /// Argmax class; ties go to the visible class.
    pub fn is_visible(&self, k: usize) -> bool {
        self.probs.get(k, 0) >= self.probs.get(k, 1)
    }
}

/// `O[:, i] = I[:, i] + W₂ GELU(W₁ I[:, i])` over the two scene rows.
pub fn spatial_mlp(tape: &mut Tape, p: &Bound, scene: Var, params: &VisibilityParams) -> Result<Var> {
    if tape.value(scene).rows() != 2 {
        return Err(dim_err("spatial_mlp", format!("expected 2 scene rows, got {}", tape.value(scene).rows())));
    }
    let h = tape.matmul(p.var(params.spatial_w1), scene)?;
    let h = tape.gelu(h)?;
    let mixed = tape.matmul(p.var(params.spatial_w2), h)?;
    tape.add(scene, mixed)
}

/// `O[j, :] = I[j, :] + W₂ GELU(W₁ I[j, :])` for every row.
pub fn channel_mlp(tape: &mut Tape, p: &Bound, x: Var, params: &VisibilityParams) -> Result<Var> {
    if tape.value(x).cols() != params.width {
        return Err(dim_err("channel_mlp", format!("width {} vs {}", tape.value(x).cols(), params.width)));
    }
    let h = params.channel_w1.forward(tape, p, x)?;
    let h = tape.gelu(h)?;
    let mixed = params.channel_w2.forward(tape, p, h)?;
    tape.add(x, mixed)
}

#[derive(Clone, Copy, Debug)]
pub struct VisibilityOutput {
    pub logits: Var,
    pub probs: Var,
    /// `2 × M` attention of the scene queries over the keypoints.
    pub attention: Var,
}

/// Classifies each row of `local` (`M × C`) as visible / invisible in the other view.
pub fn visibility_transform(
    tape: &mut Tape,
    p: &Bound,
    local: Var,
    scene: Var,
    params: &VisibilityParams,
) -> Result<VisibilityOutput> {
    let m = tape.value(local).rows();
    if m == 0 {
        return Err(Error::Config("visibility needs at least one keypoint".into()));
    }
    let s = spatial_mlp(tape, p, scene, params)?;
    let s = channel_mlp(tape, p, s, params)?;

    let q = tape.matmul(s, p.var(params.w_q))?;
    let k = tape.matmul(local, p.var(params.w_k))?;
    let v = tape.matmul(local, p.var(params.w_v))?;
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (params.width as f64).sqrt())?;
    let attention = tape.softmax_rows(scaled)?;
    let summary = tape.matmul(attention, v)?;

    let routing = tape.transpose(attention)?;
    let routed = tape.matmul(routing, summary)?;
    let projected = params.out_proj.forward(tape, p, routed)?;
    let fused = tape.add(local, projected)?;

    let logits = params.group.forward(tape, p, fused)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(VisibilityOutput { logits, probs, attention })
}

/// Mean clamped binary cross-entropy of the visible-class probability over
/// every keypoint of both images.
pub fn scene_loss(tape: &mut Tape, probs_s: Var, probs_t: Var, gt: &GroundTruth) -> Result<Var> {
    let label = |v: &bool| if *v { 1.0 } else { 0.0 };
    let ys: Vec<f64> = gt.visible_source.iter().map(label).collect();
    let yt: Vec<f64> = gt.visible_target.iter().map(label).collect();
    let total = ys.len() + yt.len();
    if total == 0 {
        return Err(Error::UndefinedLoss("no keypoints to classify"));
    }
    let ls = tape.bce_sum(probs_s, ys, BCE_EPS)?;
    let lt = tape.bce_sum(probs_t, yt, BCE_EPS)?;
    let sum = tape.add(ls, lt)?;
    tape.scale(sum, 1.0 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore, VisibilityParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = VisibilityParams::new(&mut store, 6, &mut rng);
        (store, v, rng)
    }

    fn zero(store: &mut ParamStore, id: ParamId) {
        let t = store.get(id);
        *store.get_mut(id) = Tensor::zeros(t.rows(), t.cols());
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
    }

    #[test]
    fn zero_spatial_and_channel_are_identity() {
        let (mut store, v, mut rng) = setup(1);
        for id in [v.spatial_w2, v.channel_w2.weight] {
            zero(&mut store, id);
        }
        let scene = Tensor::randn(2, 6, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let s = tape.constant(scene.clone());
        let a = spatial_mlp(&mut tape, &p, s, &v).unwrap();
        let b = channel_mlp(&mut tape, &p, s, &v).unwrap();
        assert_eq!(tape.value(a), &scene);
        assert_eq!(tape.value(b), &scene);
    }

    #[test]
    fn spatial_mlp_matches_per_column_loop() {
        let (store, v, mut rng) = setup(2);
        let scene = Tensor::randn(2, 6, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let s = tape.constant(scene.clone());
        let out = spatial_mlp(&mut tape, &p, s, &v).unwrap();
        let (w1, w2) = (store.get(v.spatial_w1), store.get(v.spatial_w2));
        for col in 0..6 {
            let input = [scene.get(0, col), scene.get(1, col)];
            let hidden: Vec<f64> = (0..SPATIAL_HIDDEN)
                .map(|h| gelu(w1.get(h, 0) * input[0] + w1.get(h, 1) * input[1]))
                .collect();
            for r in 0..2 {
                let expect = input[r] + (0..SPATIAL_HIDDEN).map(|h| w2.get(r, h) * hidden[h]).sum::<f64>();
                assert!((tape.value(out).get(r, col) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mlp_single_row_oracle() {
        let (store, v, mut rng) = setup(3);
        let x = Tensor::randn(1, 6, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = channel_mlp(&mut tape, &p, xv, &v).unwrap();
        let (w1, w2) = (store.get(v.channel_w1.weight), store.get(v.channel_w2.weight));
        let hidden: Vec<f64> = (0..6).map(|h| gelu((0..6).map(|c| x.get(0, c) * w1.get(c, h)).sum())).collect();
        for c in 0..6 {
            let expect = x.get(0, c) + (0..6).map(|h| hidden[h] * w2.get(h, c)).sum::<f64>();
            assert!((tape.value(out).get(0, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_mlp_needs_two_rows() {
        let (store, v, _) = setup(4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let s = tape.constant(Tensor::zeros(3, 6));
        assert!(spatial_mlp(&mut tape, &p, s, &v).is_err());
    }

    #[test]
    fn zero_group_mlp_gives_uniform_probs() {
        let (mut store, v, mut rng) = setup(5);
        for l in &v.group.layers {
            zero(&mut store, l.weight);
            zero(&mut store, l.bias.unwrap());
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let local = tape.constant(Tensor::randn(7, 6, 1.0, &mut rng));
        let scene = tape.constant(Tensor::randn(2, 6, 1.0, &mut rng));
        let out = visibility_transform(&mut tape, &p, local, scene, &v).unwrap();
        assert!(tape.value(out.probs).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn single_keypoint_is_one_simplex_row() {
        let (store, v, mut rng) = setup(6);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let local = tape.constant(Tensor::randn(1, 6, 1.0, &mut rng));
        let scene = tape.constant(Tensor::randn(2, 6, 1.0, &mut rng));
        let out = visibility_transform(&mut tape, &p, local, scene, &v).unwrap();
        let probs = tape.value(out.probs);
        assert_eq!(probs.shape(), [1, 2]);
        assert!((probs.sum() - 1.0).abs() < 1e-12);
    }

    fn gt_with(vs: Vec<bool>, vt: Vec<bool>) -> GroundTruth {
        GroundTruth { visible_source: vs, visible_target: vt, ..Default::default() }
    }

    #[test]
    fn scene_loss_closed_forms() {
        let gt = gt_with(vec![true, false, true], vec![false, true]);
        let mut tape = Tape::new();
        let half_s = tape.constant(Tensor::filled(3, 2, 0.5));
        let half_t = tape.constant(Tensor::filled(2, 2, 0.5));
        let l = scene_loss(&mut tape, half_s, half_t, &gt).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-6);

        let hi = 1.0 - BCE_EPS;
        let ps = tape.constant(Tensor::from_rows(&[[hi, BCE_EPS], [BCE_EPS, hi], [hi, BCE_EPS]]));
        let pt = tape.constant(Tensor::from_rows(&[[BCE_EPS, hi], [hi, BCE_EPS]]));
        let l = scene_loss(&mut tape, ps, pt, &gt).unwrap();
        assert!(tape.value(l).item() < 1e-5);
    }

    #[test]
    fn scene_loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vs: Vec<bool> = (0..6).map(|_| rng.random_bool(0.6)).collect();
        let vt: Vec<bool> = (0..4).map(|_| rng.random_bool(0.6)).collect();
        let raw_s = Tensor::randn(6, 2, 1.0, &mut rng).softmax_rows().unwrap();
        let raw_t = Tensor::randn(4, 2, 1.0, &mut rng).softmax_rows().unwrap();
        let mut expect = 0.0;
        for (probs, labels) in [(&raw_s, &vs), (&raw_t, &vt)] {
            for (k, &y) in labels.iter().enumerate() {
                let b = probs.get(k, 0).clamp(BCE_EPS, 1.0 - BCE_EPS);
                expect += if y { -b.ln() } else { -(1.0 - b).ln() };
            }
        }
        expect /= 10.0;
        let gt = gt_with(vs, vt);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(raw_s), tape.constant(raw_t));
        let l = scene_loss(&mut tape, a, b, &gt).unwrap();
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn scene_loss_length_mismatch() {
        let gt = gt_with(vec![true; 3], vec![true; 2]);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::filled(4, 2, 0.5));
        let b = tape.constant(Tensor::filled(2, 2, 0.5));
        assert!(scene_loss(&mut tape, a, b, &gt).is_err());
    }
}
