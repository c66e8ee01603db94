//! Forward context and the weighted layers shared by catalog ops, cells,
//! derived models and baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Role};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which stored tensors become differentiable leaves in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    Nothing,
    Arch,
    Weights,
    All,
}

impl GradTarget {
    fn wants(self, role: Role) -> bool {
        matches!(
            (self, role),
            (GradTarget::All, Role::Arch | Role::Weight) | (GradTarget::Arch, Role::Arch) | (GradTarget::Weights, Role::Weight)
        )
    }
}

/// One forward pass: the tape plus mutable access to the parameters.
pub struct Ctx<'s> {
    pub g: Graph,
    store: &'s mut ParamStore,
    mode: Mode,
    target: GradTarget,
    leaves: Vec<Option<Var>>,
    param_of: Vec<(Var, ParamId)>,
    rng: ChaCha8Rng,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s mut ParamStore, mode: Mode, target: GradTarget, seed: u64) -> Self {
        let n = store.len();
        Self {
            g: Graph::new(),
            store,
            mode,
            target,
            leaves: vec![None; n],
            param_of: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for a stored tensor, shared by every use within this pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.index()] {
            return v;
        }
        let p = self.store.get(id);
        let requires = self.target.wants(p.role);
        let v = self.g.leaf(p.value.clone(), requires);
        self.leaves[id.index()] = Some(v);
        if requires {
            self.param_of.push((v, id));
        }
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.g.constant(Tensor::zeros(shape))
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    /// Backward pass from `loss`; gradients of differentiable parameters are
    /// accumulated into the store.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let grads = self.g.backward(loss)?;
        for &(v, id) in &self.param_of {
            if let Some(gr) = grads.get(v) {
                self.store.accumulate_grad(id, gr);
            } else {
                let zeros = vec![0.0; self.store.value(id).numel()];
                self.store.accumulate_grad(id, &zeros);
            }
        }
        Ok(grads)
    }
}

/// 2-D convolution without bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }

    pub fn stride(mut self, s: (usize, usize)) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: (usize, usize)) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: (usize, usize)) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let cin_g = spec.in_channels / spec.groups;
        let shape = [spec.out_channels, cin_g, spec.kernel.0, spec.kernel.1];
        let fan_in = cin_g * spec.kernel.0 * spec.kernel.1;
        Self {
            weight: store.add_uniform(format!("{name}.weight"), &shape, fan_in, rng),
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
            groups: spec.groups,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        ctx.g.conv2d(x, w, self.stride, self.padding, self.dilation, self.groups)
    }
}

/// Per-channel normalization with running statistics and optional affine terms.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(store.add(format!("{name}.gamma"), Role::Weight, Tensor::full(&[channels], 1.0))),
                Some(store.add(format!("{name}.beta"), Role::Weight, Tensor::zeros(&[channels]))),
            )
        } else {
            (None, None)
        };
        Self {
            channels,
            gamma,
            beta,
            running_mean: store.add(format!("{name}.running_mean"), Role::Buffer, Tensor::zeros(&[channels])),
            running_var: store.add(format!("{name}.running_var"), Role::Buffer, Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = if ctx.is_train() {
            let (y, mean, var) = ctx.g.batch_norm(x, None, BN_EPS)?;
            let store = ctx.store_mut();
            for (r, m) in store.value_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in store.value_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
            y
        } else {
            let mean = ctx.store().value(self.running_mean).data().to_vec();
            let var = ctx.store().value(self.running_var).data().to_vec();
            ctx.g.batch_norm(x, Some((&mean, &var)), BN_EPS)?.0
        };
        if self.gamma.is_none() && self.beta.is_none() {
            return Ok(y);
        }
        let gamma = self.gamma.map(|id| ctx.param(id));
        let beta = self.beta.map(|id| ctx.param(id));
        ctx.g.channel_affine(y, gamma, beta)
    }
}

/// Fully connected layer `x · wᵀ + b` applied over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[output, input], input, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[output], input, rng));
        Self {
            weight,
            bias,
            in_features: input,
            out_features: output,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.last() != Some(&self.in_features) {
            return Err(Error::Shape(format!("linear expects last dim {}, got {shape:?}", self.in_features)));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 { x } else { ctx.g.reshape(x, &[rows, self.in_features])? };
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        let y = ctx.g.linear(flat, w, b)?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.out_features;
        ctx.g.reshape(y, &out_shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Rnn,
}

/// One recurrent layer over `(batch, time, features)`.
///
/// The tanh RNN keeps a single combined bias; the LSTM stacks its four gates
/// (`i, f, g, o`) in one `4H` weight block.
#[derive(Clone, Debug)]
pub struct RecurrentLayer {
    pub kind: CellKind,
    pub input: usize,
    pub hidden: usize,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub reverse: bool,
}

impl RecurrentLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: CellKind,
        input: usize,
        hidden: usize,
        reverse: bool,
        rng: &mut R,
    ) -> Self {
        let gates = match kind {
            CellKind::Lstm => 4 * hidden,
            CellKind::Rnn => hidden,
        };
        let fan_in = input + hidden;
        Self {
            kind,
            input,
            hidden,
            w_ih: store.add_uniform(format!("{name}.w_ih"), &[gates, input], fan_in, rng),
            w_hh: store.add_uniform(format!("{name}.w_hh"), &[gates, hidden], fan_in, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[gates], fan_in, rng),
            reverse,
        }
    }

    pub fn param_count(&self) -> usize {
        let gates = match self.kind {
            CellKind::Lstm => 4,
            CellKind::Rnn => 1,
        };
        gates * ((self.input + self.hidden) * self.hidden + self.hidden)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input {
            return Err(Error::Shape(format!("recurrent layer expects (B, T, {}), got {shape:?}", self.input)));
        }
        let (batch, steps, h) = (shape[0], shape[1], self.hidden);
        let w_ih = ctx.param(self.w_ih);
        let w_hh = ctx.param(self.w_hh);
        let bias = ctx.param(self.bias);
        let flat = ctx.g.reshape(x, &[batch * steps, self.input])?;
        let proj = ctx.g.linear(flat, w_ih, Some(bias))?;
        let gates = ctx.g.shape(proj)[1];
        let proj = ctx.g.reshape(proj, &[batch, steps, gates])?;
        let mut hs = vec![None; steps];
        let mut hprev = ctx.zeros(&[batch, h]);
        let mut cprev = ctx.zeros(&[batch, h]);
        let order: Vec<usize> = if self.reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let xt = ctx.g.select(proj, 1, t)?;
            let rec = ctx.g.linear(hprev, w_hh, None)?;
            let pre = ctx.g.add(xt, rec)?;
            match self.kind {
                CellKind::Rnn => {
                    hprev = ctx.g.tanh(pre);
                }
                CellKind::Lstm => {
                    let hc = ctx.g.lstm_cell(pre, cprev)?;
                    hprev = ctx.g.slice(hc, 1, 0, h)?;
                    cprev = ctx.g.slice(hc, 1, h, h)?;
                }
            }
            hs[t] = Some(hprev);
        }
        let hs: Vec<Var> = hs.into_iter().map(|v| v.expect("every step visited")).collect();
        ctx.g.stack(&hs, 1)
    }
}

/// Additive attention that re-weights a hidden sequence in place:
/// `e_t = vᵀ tanh(W h_t + b)`, `a = softmax(e)`, `out_t = T · a_t · h_t`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub proj: Linear,
    pub score: ParamId,
    pub hidden: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), hidden, hidden, true, rng),
            score: store.add_uniform(format!("{name}.v"), &[1, hidden], hidden, rng),
            hidden,
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.hidden + 2 * self.hidden
    }

    /// Attention distribution over time, shape `(B, T)`.
    pub fn weights(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        let shape = ctx.g.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.hidden {
            return Err(Error::Shape(format!("attention expects (B, T, {}), got {shape:?}", self.hidden)));
        }
        let e = self.proj.forward(ctx, h)?;
        let e = ctx.g.tanh(e);
        let flat = ctx.g.reshape(e, &[shape[0] * shape[1], self.hidden])?;
        let v = ctx.param(self.score);
        let scores = ctx.g.linear(flat, v, None)?;
        let scores = ctx.g.reshape(scores, &[shape[0], shape[1]])?;
        Ok(ctx.g.softmax(scores))
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        let steps = ctx.g.shape(h)[1];
        let a = self.weights(ctx, h)?;
        let weighted = ctx.g.mul_rows(h, a)?;
        Ok(ctx.g.scale(weighted, steps as f64))
    }
}

/// Inverted dropout; identity outside training.
pub fn dropout(ctx: &mut Ctx, x: Var, p: f64) -> Result<Var> {
    if !ctx.is_train() || p <= 0.0 {
        return Ok(x);
    }
    let shape = ctx.g.shape(x).to_vec();
    let keep = 1.0 - p;
    let n: usize = shape.iter().product();
    let rng = ctx.rng();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = ctx.input(Tensor::new(shape, mask)?);
    ctx.g.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rnn_count_matches_recurrence_enumeration() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = RecurrentLayer::new(&mut store, "r", CellKind::Rnn, 8, 16, false, &mut rng);
        assert_eq!(l.param_count(), 400);
        assert_eq!(store.count(Role::Weight), 400);
        let l = RecurrentLayer::new(&mut store, "l", CellKind::Lstm, 8, 16, false, &mut rng);
        assert_eq!(l.param_count(), 1600);
        assert_eq!(store.count(Role::Weight), 2000);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut store = ParamStore::new();
        let mut ctx = Ctx::new(&mut store, Mode::Eval, GradTarget::Nothing, 0);
        let x = ctx.input(Tensor::full(&[4, 4], 2.0));
        let y = dropout(&mut ctx, x, 0.3).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn running_stats_drive_eval_normalization() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1, false);
        store.value_mut(bn.running_mean).data_mut()[0] = 1.0;
        store.value_mut(bn.running_var).data_mut()[0] = 4.0 - BN_EPS;
        let mut ctx = Ctx::new(&mut store, Mode::Eval, GradTarget::Nothing, 0);
        let x = ctx.input(Tensor::full(&[1, 1, 1, 1], 5.0));
        let y = bn.forward(&mut ctx, x).unwrap();
        assert!((ctx.g.value(y).data()[0] - 2.0).abs() < 1e-12);
    }
}
