//! Position-aware descriptors: multi-scale fusion followed by wave position encoding.
//!
//! The wave encoder treats a descriptor-derived vector as amplitude `A` and a
//! position-derived vector as phase `θ`, unfolds `A·e^{iθ}` into its real and
//! imaginary parts, and fuses those back into the descriptor residually:
//!
//! ```text
//! A  = MLP_A(d)
//! θ  = MLP_θ(p)
//! x⁰ = d + MLP_F([A ⊙ cos θ, A ⊙ sin θ])
//! ```

use crate::error::{dim_err, Error, Result};
use crate::keypoints::SCALE_COUNT;
use crate::params::{Bound, Init, Linear, Mlp, ParamStore};
use crate::tape::{Tape, Var};
use rand::Rng;

/// Per-scale projections to `C` and a final `4C → C` map.
#[derive(Clone, Debug)]
pub struct MultiScaleFusion {
    pub per_scale: Vec<Linear>,
    pub merge: Linear,
}

impl MultiScaleFusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, scale_dims: &[usize], width: usize, rng: &mut R) -> Self {
        let per_scale = scale_dims
            .iter()
            .enumerate()
            .map(|(s, &d)| Linear::new(store, &format!("fusion.scale{s}"), d, width, true, Init::KaimingUniform, rng))
            .collect();
        let merge = Linear::new(
            store,
            "fusion.merge",
            width * scale_dims.len(),
            width,
            true,
            Init::KaimingUniform,
            rng,
        );
        Self { per_scale, merge }
    }

    pub fn width(&self) -> usize {
        self.merge.d_out
    }
}

/// Projects each scale to `C`, concatenates to `4C`, and maps back to `C`.
pub fn fuse_multiscale(tape: &mut Tape, p: &Bound, raw: &[Var], params: &MultiScaleFusion) -> Result<Var> {
    if raw.len() != SCALE_COUNT || params.per_scale.len() != SCALE_COUNT {
        return Err(Error::Config(format!(
            "multi-scale fusion needs {SCALE_COUNT} scales, got {}",
            raw.len()
        )));
    }
    let rows = tape.value(raw[0]).rows();
    if raw.iter().any(|&v| tape.value(v).rows() != rows) {
        return Err(Error::Config("feature scales disagree on keypoint count".into()));
    }
    let mut joined: Option<Var> = None;
    for (&x, proj) in raw.iter().zip(&params.per_scale) {
        let y = proj.forward(tape, p, x)?;
        joined = Some(match joined {
            None => y,
            Some(acc) => tape.concat_cols(acc, y)?,
        });
    }
    params.merge.forward(tape, p, joined.expect("four scales"))
}

#[derive(Clone, Debug)]
pub struct WavePE {
    /// Amplitude network, `C → C → C`.
    pub amplitude: Mlp,
    /// Phase network, `3 → C → C`.
    pub phase: Mlp,
    /// Fusion network over `[A cos θ, A sin θ]`, `2C → C → C`.
    pub fuse: Mlp,
}

impl WavePE {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, rng: &mut R) -> Self {
        Self {
            amplitude: Mlp::two_layer(store, "wave.amplitude", [width, width, width], Init::KaimingUniform, rng),
            phase: Mlp::two_layer(store, "wave.phase", [3, width, width], Init::KaimingUniform, rng),
            fuse: Mlp::two_layer(store, "wave.fuse", [2 * width, width, width], Init::KaimingUniform, rng),
        }
    }
}

/// Wave-encoder output together with its amplitude/phase intermediates.
#[derive(Clone, Copy, Debug)]
pub struct WaveOutput {
    pub x0: Var,
    pub amplitude: Var,
    pub phase: Var,
    pub real: Var,
    pub imag: Var,
}

/// `d: M × C` descriptors, `p: M × 3` normalised positions.
pub fn wave_encode(tape: &mut Tape, params: &Bound, d: Var, p: Var, wave: &WavePE) -> Result<WaveOutput> {
    let (dv, pv) = (tape.value(d), tape.value(p));
    if dv.rows() != pv.rows() || pv.cols() != 3 {
        return Err(dim_err("wave_encode", format!("descriptors {:?}, positions {:?}", dv.shape(), pv.shape())));
    }
    let amplitude = wave.amplitude.forward(tape, params, d)?;
    let phase = wave.phase.forward(tape, params, p)?;
    let cos = tape.cos(phase)?;
    let sin = tape.sin(phase)?;
    let real = tape.mul(amplitude, cos)?;
    let imag = tape.mul(amplitude, sin)?;
    let unfolded = tape.concat_cols(real, imag)?;
    let update = wave.fuse.forward(tape, params, unfolded)?;
    let x0 = tape.add(d, update)?;
    Ok(WaveOutput { x0, amplitude, phase, real, imag })
}

/// Appends the two scene descriptor rows after the `M` keypoint rows.
pub fn attach_scene_tokens(tape: &mut Tape, x0: Var, scene: Var) -> Result<Var> {
    let (xv, sv) = (tape.value(x0), tape.value(scene));
    if xv.cols() != sv.cols() {
        return Err(dim_err("attach_scene_tokens", format!("widths {} and {}", xv.cols(), sv.cols())));
    }
    if xv.rows() == 0 {
        return Ok(scene);
    }
    tape.concat_rows(x0, scene)
}

/// Inverse of [`attach_scene_tokens`]: `(keypoint rows, scene rows)`.
pub fn split_scene_tokens(tape: &mut Tape, tokens: Var, keypoints: usize) -> Result<(Var, Var)> {
    let rows = tape.value(tokens).rows();
    let local = tape.slice_rows(tokens, 0, keypoints)?;
    let scene = tape.slice_rows(tokens, keypoints, rows)?;
    Ok((local, scene))
}
