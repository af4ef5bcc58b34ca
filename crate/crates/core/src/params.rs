//! Flat, named parameter storage plus the linear/MLP building blocks.
//!
//! Model components hold [`ParamId`]s into a [`ParamStore`]. A forward pass
//! binds the whole store onto a tape once ([`ParamStore::bind`]) and looks up
//! the resulting [`Var`]s by id, so optimiser updates, checkpoints and
//! gradient checks all operate on the same flat, ordered table.

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Replaces all values, keeping names. Shapes must match exactly.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (i, (old, new)) in self.values.iter().zip(&values).enumerate() {
            if !old.same_shape(new) {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, got {:?}",
                    self.names[i],
                    old.shape(),
                    new.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.param(v.clone())).collect())
    }

    /// Leaf gradients in store order; disconnected parameters get zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        self.values.iter().zip(&bound.0).map(|(v, &var)| grads.get_or_zeros(var, v)).collect()
    }
}

/// A [`ParamStore`] bound onto one tape.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

/// Affine map `x · W + b` with `W: d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Kaiming-uniform for the weight (fan-in), small uniform bias.
    KaimingUniform,
    /// Orthogonal columns (Gram-Schmidt on a Gaussian draw), zero bias.
    Orthogonal,
    Zeros,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let (w, b) = match init {
            Init::KaimingUniform => {
                let bound = (6.0 / d_in as f64).sqrt() / 2f64.sqrt();
                let b_bound = 1.0 / (d_in as f64).sqrt();
                (Tensor::uniform(d_in, d_out, bound, rng), Tensor::uniform(1, d_out, b_bound, rng))
            }
            Init::Orthogonal => (orthogonal(d_in, d_out, rng), Tensor::zeros(1, d_out)),
            Init::Zeros => (Tensor::zeros(d_in, d_out), Tensor::zeros(1, d_out)),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), b));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Stack of affine layers with an activation between consecutive layers
/// (never after the last one).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// Two-layer `d_in → hidden → d_out` MLP with GELU; `last_init` controls the
    /// output layer so residual branches can start at zero.
    pub fn two_layer<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        last_init: Init,
        rng: &mut R,
    ) -> Self {
        let l0 = Linear::new(store, &format!("{name}.0"), dims[0], dims[1], true, Init::KaimingUniform, rng);
        let l1 = Linear::new(store, &format!("{name}.1"), dims[1], dims[2], true, last_init, rng);
        Self { layers: vec![l0, l1], activation: Activation::Gelu }
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map_or(0, |l| l.d_in)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        mlp_apply(tape, p, x, &self.layers, self.activation)
    }
}

/// Affine → activation → affine → … over `layers`, validating that the
/// layer shapes chain and match the input width.
pub fn mlp_apply(tape: &mut Tape, p: &Bound, x: Var, layers: &[Linear], activation: Activation) -> Result<Var> {
    let mut width = tape.value(x).cols();
    let mut h = x;
    for (k, layer) in layers.iter().enumerate() {
        if layer.d_in != width {
            return Err(crate::error::dim_err(
                "mlp_apply",
                format!("layer {k} expects width {}, got {width}", layer.d_in),
            ));
        }
        h = layer.forward(tape, p, h)?;
        if k + 1 < layers.len() && activation == Activation::Gelu {
            h = tape.gelu(h)?;
        }
        width = layer.d_out;
    }
    Ok(h)
}

/// `rows × cols` matrix whose shorter side is orthonormal.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let transposed = rows < cols;
    let (n, k) = if transposed { (cols, rows) } else { (rows, cols) };
    // k orthonormal vectors of length n
    let g = Tensor::randn(k, n, 1.0, rng);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let mut v = g.row(i).to_vec();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    // basis rows are the columns of the n × k result
    let mut out = Tensor::zeros(n, k);
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            out.set(i, j, x);
        }
    }
    if transposed {
        out.transpose()
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gelu_ref(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
    }

    #[test]
    fn zero_mlp_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::two_layer(&mut store, "m", [3, 4, 2], Init::Zeros, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let z = Tensor::zeros(store.get(id).rows(), store.get(id).cols());
            *store.get_mut(id) = z;
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::randn(5, 3, 1.0, &mut rng));
        let y = mlp.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(5, 2));
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::identity(3));
        let layer = Linear { weight: w, bias: None, d_in: 3, d_out: 3 };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let input = Tensor::from_rows(&[[1.0, -2.0, 3.5]]);
        let x = tape.constant(input.clone());
        let y = mlp_apply(&mut tape, &p, x, &[layer], Activation::Identity).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn two_layer_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let mlp = Mlp::two_layer(&mut store, "m", [4, 6, 3], Init::KaimingUniform, &mut rng);
        let input = Tensor::randn(5, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(input.clone());
        let y = mlp.forward(&mut tape, &p, x).unwrap();

        let (w0, b0) = (store.get(mlp.layers[0].weight), store.get(mlp.layers[0].bias.unwrap()));
        let (w1, b1) = (store.get(mlp.layers[1].weight), store.get(mlp.layers[1].bias.unwrap()));
        for r in 0..5 {
            let mut hidden = [0.0; 6];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut s = b0.get(0, j);
                for i in 0..4 {
                    s += input.get(r, i) * w0.get(i, j);
                }
                *h = gelu_ref(s);
            }
            for k in 0..3 {
                let mut s = b1.get(0, k);
                for (j, h) in hidden.iter().enumerate() {
                    s += h * w1.get(j, k);
                }
                assert!((tape.value(y).get(r, k) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::two_layer(&mut store, "m", [4, 6, 3], Init::KaimingUniform, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(2, 5));
        assert!(matches!(mlp.forward(&mut tape, &p, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (r, c) in [(8, 8), (8, 3), (3, 8)] {
            let q = orthogonal(r, c, &mut rng);
            let gram = if r >= c { q.matmul_tn(&q).unwrap() } else { q.matmul_nt(&q).unwrap() };
            assert!(gram.max_abs_diff(&Tensor::identity(r.min(c))) < 1e-12);
        }
    }
}
