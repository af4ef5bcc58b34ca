//! The full matcher: fusion → wave encoding → scene tokens → parallel attention
//! → visibility + partial assignment.

use crate::assignment::{extract_matches, feature_loss, hybrid_loss, partial_assignment, score_matrix, Match};
use crate::attention::{stack_forward, AttentionLayer};
use crate::error::{Error, Result};
use crate::featrep::{attach_scene_tokens, fuse_multiscale, split_scene_tokens, wave_encode, MultiScaleFusion, WavePE};
use crate::geometry::GroundTruth;
use crate::keypoints::{KeypointSet, SCALE_COUNT};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::visibility::{scene_loss, visibility_transform, VisibilityOutput, VisibilityParams, VisibilityPrediction};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Initial dustbin score.
const DUSTBIN_INIT: f64 = 1.0;
/// Standard deviation of the initial scene descriptors.
const SCENE_INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub scale_dims: [usize; SCALE_COUNT],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width: 32, layers: 3, heads: 1, scale_dims: [16; SCALE_COUNT] }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("width, layers and heads must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        if self.scale_dims.contains(&0) {
            return Err(Error::Config("scale widths must be positive".into()));
        }
        Ok(())
    }
}

/// Where every learnable tensor lives in the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub fusion: MultiScaleFusion,
    pub wave: WavePE,
    pub layers: Vec<AttentionLayer>,
    pub visibility: VisibilityParams,
    /// `2 × C`, shared by both images.
    pub scene: ParamId,
    /// `1 × 1` dustbin score.
    pub dustbin: ParamId,
}

/// Architecture plus parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore,
}

/// Symbolic outputs of one forward pass on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub log_p: Var,
    pub vis_s: VisibilityOutput,
    pub vis_t: VisibilityOutput,
    pub desc_s: Var,
    pub desc_t: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub feature: Var,
    pub scene: Var,
}

/// Matches plus visibility for one pair, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchPrediction {
    pub log_p: Tensor,
    pub matches: Vec<Match>,
    pub vis_s: VisibilityPrediction,
    pub vis_t: VisibilityPrediction,
}

impl Model {
    /// Deterministically initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.width;
        let fusion = MultiScaleFusion::new(&mut store, &config.scale_dims, c, &mut rng);
        let wave = WavePE::new(&mut store, c, &mut rng);
        let layers = (0..config.layers)
            .map(|l| AttentionLayer::new(&mut store, &format!("attn{l}"), c, config.heads, &mut rng))
            .collect();
        let visibility = VisibilityParams::new(&mut store, c, &mut rng);
        let scene = store.add("scene", Tensor::randn(2, c, SCENE_INIT_STD, &mut rng));
        let dustbin = store.add("dustbin", Tensor::scalar(DUSTBIN_INIT));
        let arch = Architecture { config, fusion, wave, layers, visibility, scene, dustbin };
        Ok(Self { arch, params: store })
    }

    pub fn width(&self) -> usize {
        self.arch.config.width
    }

    fn encode(&self, tape: &mut Tape, p: &Bound, kps: &KeypointSet) -> Result<Var> {
        if kps.raw_features.len() != SCALE_COUNT {
            return Err(Error::Config(format!("expected {SCALE_COUNT} scales, got {}", kps.raw_features.len())));
        }
        if kps.scale_dims() != self.arch.config.scale_dims {
            return Err(Error::Config(format!(
                "feature widths {:?} do not match the model's {:?}",
                kps.scale_dims(),
                self.arch.config.scale_dims
            )));
        }
        let raw: Vec<Var> = kps.raw_features.iter().map(|f| tape.constant(f.clone())).collect();
        let d = fuse_multiscale(tape, p, &raw, &self.arch.fusion)?;
        let pos = tape.constant(kps.normalized_positions());
        let wave = wave_encode(tape, p, d, pos, &self.arch.wave)?;
        attach_scene_tokens(tape, wave.x0, p.var(self.arch.scene))
    }

    /// Records the full pipeline for one pair on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        src: &KeypointSet,
        tgt: &KeypointSet,
        sinkhorn_iters: usize,
    ) -> Result<ForwardOutput> {
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Config("both images need at least one keypoint".into()));
        }
        let tokens_s = self.encode(tape, p, src)?;
        let tokens_t = self.encode(tape, p, tgt)?;
        let (out_s, out_t) = stack_forward(tape, p, tokens_s, tokens_t, &self.arch.layers)?;
        let (desc_s, scene_s) = split_scene_tokens(tape, out_s, src.len())?;
        let (desc_t, scene_t) = split_scene_tokens(tape, out_t, tgt.len())?;

        let vis_s = visibility_transform(tape, p, desc_s, scene_s, &self.arch.visibility)?;
        let vis_t = visibility_transform(tape, p, desc_t, scene_t, &self.arch.visibility)?;

        let scores = score_matrix(tape, desc_s, desc_t)?;
        let log_p = partial_assignment(tape, scores, p.var(self.arch.dustbin), sinkhorn_iters)?;
        Ok(ForwardOutput { log_p, vis_s, vis_t, desc_s, desc_t })
    }

    /// `L_feature + α · L_scene` for a recorded forward pass.
    pub fn loss(&self, tape: &mut Tape, out: &ForwardOutput, gt: &GroundTruth, alpha: f64) -> Result<LossParts> {
        let feature = feature_loss(tape, out.log_p, gt)?;
        let scene = scene_loss(tape, out.vis_s.probs, out.vis_t.probs, gt)?;
        let total = hybrid_loss(tape, feature, scene, alpha)?;
        Ok(LossParts { total, feature, scene })
    }

    /// Inference on one pair.
    pub fn predict(&self, src: &KeypointSet, tgt: &KeypointSet, sinkhorn_iters: usize, threshold: f64) -> Result<MatchPrediction> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &p, src, tgt, sinkhorn_iters)?;
        let log_p = tape.value(out.log_p).clone();
        let matches = extract_matches(&log_p, threshold);
        Ok(MatchPrediction {
            log_p,
            matches,
            vis_s: VisibilityPrediction { probs: tape.value(out.vis_s.probs).clone() },
            vis_t: VisibilityPrediction { probs: tape.value(out.vis_t.probs).clone() },
        })
    }
}
