//! Parallel self/cross attention layers.
//!
//! Each layer computes, from the same (normalised) inputs, a self-attention
//! message within each image and a cross-attention message between images,
//! then fuses both with a two-layer MLP added residually.
//!
//! Cross attention shares one score product between the two directions:
//! with `A = Q_s K_tᵀ`, source tokens receive `softmax(A/√d) V_t` and target
//! tokens receive `softmax(Aᵀ/√d) V_s`. Only `Q_s` and `K_t` enter the scores,
//! so no second query/key product is formed.

use crate::error::{dim_err, Result};
use crate::params::{orthogonal, Bound, Init, Mlp, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    /// `C × C` projections, shared by both images.
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// `2C → C → C` fusion of `[self message, cross message]`.
    pub fuse: Mlp,
    /// Applied to the layer input before projecting.
    pub norm_in: (ParamId, ParamId),
    /// Applied to the concatenated messages before fusing.
    pub norm_msg: (ParamId, ParamId),
    pub width: usize,
    pub heads: usize,
}

impl AttentionLayer {
    /// Orthogonal projections and a zero-initialised fusion output layer,
    /// so a freshly built layer is the identity map.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads >= 1 && width % heads == 0, "width must divide into heads");
        let w_q = store.add(format!("{name}.w_q"), orthogonal(width, width, rng));
        let w_k = store.add(format!("{name}.w_k"), orthogonal(width, width, rng));
        let w_v = store.add(format!("{name}.w_v"), orthogonal(width, width, rng));
        let fuse = Mlp::two_layer(store, &format!("{name}.fuse"), [2 * width, width, width], Init::Zeros, rng);
        let norm_in = (
            store.add(format!("{name}.norm_in.gamma"), Tensor::filled(1, width, 1.0)),
            store.add(format!("{name}.norm_in.beta"), Tensor::zeros(1, width)),
        );
        let norm_msg = (
            store.add(format!("{name}.norm_msg.gamma"), Tensor::filled(1, 2 * width, 1.0)),
            store.add(format!("{name}.norm_msg.beta"), Tensor::zeros(1, 2 * width)),
        );
        Self { w_q, w_k, w_v, fuse, norm_in, norm_msg, width, heads }
    }
}

/// Query/key/value projections of one token set.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub fn project(tape: &mut Tape, p: &Bound, x: Var, layer: &AttentionLayer) -> Result<Projections> {
    let c = tape.value(x).cols();
    if c != layer.width {
        return Err(dim_err("attention", format!("tokens have width {c}, layer expects {}", layer.width)));
    }
    Ok(Projections {
        q: tape.matmul(x, p.var(layer.w_q))?,
        k: tape.matmul(x, p.var(layer.w_k))?,
        v: tape.matmul(x, p.var(layer.w_v))?,
    })
}

fn head_slices(tape: &mut Tape, x: Var, heads: usize) -> Result<Vec<Var>> {
    if heads == 1 {
        return Ok(vec![x]);
    }
    let c = tape.value(x).cols();
    let dh = c / heads;
    (0..heads).map(|h| tape.slice_cols(x, h * dh, (h + 1) * dh)).collect()
}

fn concat_heads(tape: &mut Tape, parts: Vec<Var>) -> Result<Var> {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("at least one head");
    for part in it {
        acc = tape.concat_cols(acc, part)?;
    }
    Ok(acc)
}

/// `softmax_rows(Q Kᵀ / √d) V`, per head.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (qs, ks, vs) = (head_slices(tape, q, heads)?, head_slices(tape, k, heads)?, head_slices(tape, v, heads)?);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let dh = tape.value(qs[h]).cols() as f64;
        let scores = tape.matmul_nt(qs[h], ks[h])?;
        let scaled = tape.scale(scores, 1.0 / dh.sqrt())?;
        let weights = tape.softmax_rows(scaled)?;
        outs.push(tape.matmul(weights, vs[h])?);
    }
    concat_heads(tape, outs)
}

/// Shared-score cross messages `(to source, to target)` from existing projections.
pub fn cross_messages(tape: &mut Tape, src: &Projections, tgt: &Projections, heads: usize) -> Result<(Var, Var)> {
    let q_s = head_slices(tape, src.q, heads)?;
    let k_t = head_slices(tape, tgt.k, heads)?;
    let v_s = head_slices(tape, src.v, heads)?;
    let v_t = head_slices(tape, tgt.v, heads)?;
    let mut to_src = Vec::with_capacity(heads);
    let mut to_tgt = Vec::with_capacity(heads);
    for h in 0..heads {
        let dh = tape.value(q_s[h]).cols() as f64;
        let scores = tape.matmul_nt(q_s[h], k_t[h])?;
        let scaled = tape.scale(scores, 1.0 / dh.sqrt())?;
        let w_src = tape.softmax_rows(scaled)?;
        to_src.push(tape.matmul(w_src, v_t[h])?);
        let scaled_t = tape.transpose(scaled)?;
        let w_tgt = tape.softmax_rows(scaled_t)?;
        to_tgt.push(tape.matmul(w_tgt, v_s[h])?);
    }
    Ok((concat_heads(tape, to_src)?, concat_heads(tape, to_tgt)?))
}

/// Standard self attention of `x` (`n × C`) with the layer's projections.
pub fn self_attention(tape: &mut Tape, p: &Bound, x: Var, layer: &AttentionLayer) -> Result<Var> {
    let pr = project(tape, p, x, layer)?;
    attend(tape, pr.q, pr.k, pr.v, layer.heads)
}

/// Cross attention with one shared score product; returns `(msg_s, msg_t)`.
pub fn shared_cross_attention(
    tape: &mut Tape,
    p: &Bound,
    xs: Var,
    xt: Var,
    layer: &AttentionLayer,
) -> Result<(Var, Var)> {
    let ps = project(tape, p, xs, layer)?;
    let pt = project(tape, p, xt, layer)?;
    cross_messages(tape, &ps, &pt, layer.heads)
}

/// One parallel layer: both messages come from the same normalised inputs,
/// then `x' = x + MLP_fuse(LN([self_msg, cross_msg]))`.
pub fn parallel_layer(tape: &mut Tape, p: &Bound, xs: Var, xt: Var, layer: &AttentionLayer) -> Result<(Var, Var)> {
    let (g, b) = (p.var(layer.norm_in.0), p.var(layer.norm_in.1));
    let ns = tape.layer_norm(xs, g, b)?;
    let nt = tape.layer_norm(xt, g, b)?;
    let ps = project(tape, p, ns, layer)?;
    let pt = project(tape, p, nt, layer)?;

    let self_s = attend(tape, ps.q, ps.k, ps.v, layer.heads)?;
    let self_t = attend(tape, pt.q, pt.k, pt.v, layer.heads)?;
    let (cross_s, cross_t) = cross_messages(tape, &ps, &pt, layer.heads)?;

    let xs_next = fuse_update(tape, p, xs, self_s, cross_s, layer)?;
    let xt_next = fuse_update(tape, p, xt, self_t, cross_t, layer)?;
    Ok((xs_next, xt_next))
}

fn fuse_update(tape: &mut Tape, p: &Bound, x: Var, self_msg: Var, cross_msg: Var, layer: &AttentionLayer) -> Result<Var> {
    let joined = tape.concat_cols(self_msg, cross_msg)?;
    let normed = tape.layer_norm(joined, p.var(layer.norm_msg.0), p.var(layer.norm_msg.1))?;
    let update = layer.fuse.forward(tape, p, normed)?;
    tape.add(x, update)
}

/// Applies `layers` in sequence.
pub fn stack_forward(tape: &mut Tape, p: &Bound, xs: Var, xt: Var, layers: &[AttentionLayer]) -> Result<(Var, Var)> {
    if layers.is_empty() {
        return Err(crate::error::Error::Config("attention stack needs at least one layer".into()));
    }
    let (mut s, mut t) = (xs, xt);
    for layer in layers {
        (s, t) = parallel_layer(tape, p, s, t, layer)?;
    }
    Ok((s, t))
}
