//! Dense layers and a layer-normalized LSTM cell built on [`Graph`].

use rand::Rng;

use crate::error::NumericError;
use crate::graph::{Graph, Var};
use crate::tensor::{Bound, ParamId, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    /// He-uniform, bound `sqrt(6 / fan_in)`.
    Kaiming,
    Zero,
    Const(f64),
}

impl Init {
    fn sample(self, rng: &mut impl Rng, fan_in: usize) -> f64 {
        match self {
            Init::Uniform(a) => rng.random_range(-a..=a),
            Init::Kaiming => {
                let a = (6.0 / fan_in.max(1) as f64).sqrt();
                rng.random_range(-a..=a)
            }
            Init::Zero => 0.0,
            Init::Const(c) => c,
        }
    }
}

pub(crate) fn init_tensor(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize, init: Init) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| init.sample(rng, fan_in)).collect();
    Tensor::new(shape, values).expect("initializers produce finite values")
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        (w_init, b_init): (Init, Init),
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(rng, vec![fan_in, fan_out], fan_in, w_init));
        let b = store.add(format!("{name}.b"), init_tensor(rng, vec![fan_out], fan_in, b_init));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, NumericError> {
        let y = g.matmul(x, p[self.w])?;
        g.add_row(y, p[self.b])
    }
}

/// Stack of linear layers with ReLU between them (and optionally after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        init: (Init, Init),
        final_relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], init, rng))
            .collect();
        Self { layers, final_relu }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var) -> Result<Var, NumericError> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i < last || self.final_relu {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

/// LSTM cell whose full pre-activation gate block `[i | f | g | o]` is
/// layer-normalized before the gain/bias affine.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, init: Init, rng: &mut impl Rng) -> Self {
        let g4 = 4 * hidden;
        let wx = store.add(format!("{name}.wx"), init_tensor(rng, vec![input, g4], input, init));
        let wh = store.add(format!("{name}.wh"), init_tensor(rng, vec![hidden, g4], hidden, init));
        let b = store.add(format!("{name}.b"), init_tensor(rng, vec![g4], input, init));
        let ln_gain = store.add(format!("{name}.ln_gain"), init_tensor(rng, vec![g4], 1, Init::Const(1.0)));
        let ln_bias = store.add(format!("{name}.ln_bias"), init_tensor(rng, vec![g4], 1, Init::Zero));
        Self { wx, wh, b, ln_gain, ln_bias, input, hidden }
    }

    /// One step on a batch: `x: [B, input]`, `h, c: [B, hidden]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, h: Var, c: Var) -> Result<(Var, Var), NumericError> {
        let d = self.hidden;
        let gx = g.matmul(x, p[self.wx])?;
        let gh = g.matmul(h, p[self.wh])?;
        let pre = g.add(gx, gh)?;
        let pre = g.add_row(pre, p[self.b])?;
        let normed = g.layer_norm(pre, LAYER_NORM_EPS)?;
        let scaled = g.mul_row(normed, p[self.ln_gain])?;
        let gates = g.add_row(scaled, p[self.ln_bias])?;

        let i = g.slice_cols(gates, 0, d)?;
        let f = g.slice_cols(gates, d, 2 * d)?;
        let cand = g.slice_cols(gates, 2 * d, 3 * d)?;
        let o = g.slice_cols(gates, 3 * d, 4 * d)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let o = g.sigmoid(o)?;

        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let tc = g.tanh(c_next)?;
        let h_next = g.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}
