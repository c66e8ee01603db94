//! The shared CNN → bridge → SeqNN → dense layout used by both the supernet
//! and derived models. Cells are pluggable.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::catalog::{Component, OpBuilder};
use crate::config::TimePool;
use crate::error::{Error, Result};
use crate::nn::{dropout, BatchNorm, Conv2d, ConvSpec, Ctx, Linear};
use crate::params::ParamStore;

/// The three kinds of cell that carry their own architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    CnnNormal,
    CnnReduce,
    Seqnn,
}

impl CellType {
    pub const ALL: [CellType; 3] = [CellType::CnnNormal, CellType::CnnReduce, CellType::Seqnn];

    pub fn as_str(self) -> &'static str {
        match self {
            CellType::CnnNormal => "cnn_normal",
            CellType::CnnReduce => "cnn_reduce",
            CellType::Seqnn => "seqnn",
        }
    }

    pub fn component(self) -> Component {
        match self {
            CellType::Seqnn => Component::Seq,
            _ => Component::Cnn,
        }
    }
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CellType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CellType::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Contract(format!("unknown cell kind `{s}`")))
    }
}

/// Indices of reduction cells in a stack of `c` CNN cells.
pub fn reduction_indices(c: usize) -> Vec<usize> {
    let mut r = vec![c / 3, 2 * c / 3];
    r.dedup();
    r.retain(|&i| i < c);
    r
}

/// Structural sizes of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetDims {
    pub cnn_cells: usize,
    pub seq_cells: usize,
    pub cnn_nodes: usize,
    pub seq_nodes: usize,
    pub channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// Input map height (time) and width (coefficients).
    pub input: (usize, usize),
    pub time_pool: TimePool,
    pub affine: bool,
    pub stem: bool,
    pub dropout: f64,
}

impl NetDims {
    /// Spatial size after the CNN stack.
    pub fn cnn_output_hw(&self) -> (usize, usize) {
        let n = reduction_indices(self.cnn_cells).len();
        let (mut h, mut w) = self.input;
        for _ in 0..n {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    /// Feature width per time step after the bridge.
    pub fn bridge_features(&self) -> usize {
        self.cnn_nodes * self.channels * self.cnn_output_hw().1
    }
}

/// Where a cell sits in the stack.
#[derive(Clone, Copy, Debug)]
pub struct CellSite {
    pub cell_type: CellType,
    pub index: usize,
    pub width: usize,
}

impl CellSite {
    pub fn is_reduction(&self) -> bool {
        self.cell_type == CellType::CnnReduce
    }

    pub fn name(&self) -> String {
        match self.cell_type {
            CellType::Seqnn => format!("seq{}", self.index),
            _ => format!("cnn{}", self.index),
        }
    }
}

/// A cell that maps its preprocessed inputs to one output.
pub trait CellForward {
    fn forward(&self, ctx: &mut Ctx, inputs: &[Var]) -> Result<Var>;
    /// Output width as a multiple of the working width.
    fn output_multiplier(&self) -> usize;
}

impl CellForward for crate::cell::Cell {
    fn forward(&self, ctx: &mut Ctx, inputs: &[Var]) -> Result<Var> {
        crate::cell::Cell::forward(self, ctx, inputs)
    }

    fn output_multiplier(&self) -> usize {
        match self.spec.component {
            Component::Cnn => self.spec.intermediates,
            Component::Seq => 1,
        }
    }
}

/// Adapts a cell input to the working width.
#[derive(Clone, Debug)]
pub enum Preprocess {
    /// ReLU → 1×1 conv → BN.
    ReluConvBn { conv: Conv2d, bn: BatchNorm },
    /// ReLU → two stride-2 1×1 convs over `x` and `x` shifted one pixel,
    /// concatenated → BN.
    FactorizedReduce { a: Conv2d, b: Conv2d, bn: BatchNorm },
    Linear(Linear),
}

impl Preprocess {
    fn relu_conv_bn<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, affine: bool) -> Self {
        Preprocess::ReluConvBn {
            conv: Conv2d::new(store, &format!("{name}.conv"), ConvSpec::new(cin, cout, (1, 1)), rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout, affine),
        }
    }

    fn factorized_reduce<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, affine: bool) -> Self {
        let half = cout / 2;
        Preprocess::FactorizedReduce {
            a: Conv2d::new(store, &format!("{name}.conv_a"), ConvSpec::new(cin, half, (1, 1)).stride((2, 2)), rng),
            b: Conv2d::new(store, &format!("{name}.conv_b"), ConvSpec::new(cin, cout - half, (1, 1)).stride((2, 2)), rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout, affine),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            Preprocess::ReluConvBn { conv, bn } => {
                let y = ctx.g.relu(x);
                let y = conv.forward(ctx, y)?;
                bn.forward(ctx, y)
            }
            Preprocess::FactorizedReduce { a, b, bn } => {
                let y = ctx.g.relu(x);
                let ya = a.forward(ctx, y)?;
                let shifted = ctx.g.shift2d(y)?;
                let yb = b.forward(ctx, shifted)?;
                let cat = ctx.g.concat(&[ya, yb], 1)?;
                bn.forward(ctx, cat)
            }
            Preprocess::Linear(l) => l.forward(ctx, x),
        }
    }

    /// Analytic trainable-scalar count.
    pub fn param_count(&self) -> usize {
        let bn = |b: &BatchNorm| if b.gamma.is_some() { 2 * b.channels } else { 0 };
        match self {
            Preprocess::ReluConvBn { conv, bn: b } => conv.in_channels * conv.out_channels + bn(b),
            Preprocess::FactorizedReduce { a, b, bn: n } => a.in_channels * (a.out_channels + b.out_channels) + bn(n),
            Preprocess::Linear(l) => l.in_features * l.out_features + l.bias.map_or(0, |_| l.out_features),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage<C> {
    pub site: CellSite,
    pub pre0: Preprocess,
    pub pre1: Preprocess,
    pub cell: C,
}

#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

/// Stem → CNN stages → bridge → SeqNN stages → time pooling → dense head.
#[derive(Clone, Debug)]
pub struct Stack<C> {
    pub dims: NetDims,
    pub stem: Option<Stem>,
    pub cnn: Vec<Stage<C>>,
    pub seq: Vec<Stage<C>>,
    pub head: Linear,
}

impl<C: CellForward> Stack<C> {
    /// Lays out the network; `make_cell` builds the cell for each site.
    pub fn build<R, F>(dims: NetDims, store: &mut ParamStore, rng: &mut R, mut make_cell: F) -> Result<Self>
    where
        R: Rng + ?Sized,
        F: FnMut(CellSite, &mut OpBuilder<'_, R>) -> Result<C>,
    {
        if dims.cnn_cells == 0 || dims.seq_cells == 0 {
            return Err(Error::Build("network needs at least one CNN and one SeqNN cell".into()));
        }
        if dims.input.0 == 0 || dims.input.1 == 0 || dims.num_classes < 2 {
            return Err(Error::Build(format!("bad input {:?} or class count {}", dims.input, dims.num_classes)));
        }
        let ch = dims.channels;
        let affine = dims.affine;
        let stem = dims.stem.then(|| Stem {
            conv: Conv2d::new(store, "stem.conv", ConvSpec::new(1, ch, (3, 3)).padding((1, 1)), rng),
            bn: BatchNorm::new(store, "stem.bn", ch, affine),
        });
        let stem_ch = if dims.stem { ch } else { 1 };
        let reductions = reduction_indices(dims.cnn_cells);
        // (channels, spatial scale) of the two most recent outputs.
        let (mut prev2, mut prev) = ((stem_ch, 0usize), (stem_ch, 0usize));
        let mut cnn = Vec::with_capacity(dims.cnn_cells);
        for i in 0..dims.cnn_cells {
            let reduction = reductions.contains(&i);
            let site = CellSite {
                cell_type: if reduction { CellType::CnnReduce } else { CellType::CnnNormal },
                index: i,
                width: ch,
            };
            let name = site.name();
            let pre0 = if prev2.1 < prev.1 {
                Preprocess::factorized_reduce(store, rng, &format!("{name}.pre0"), prev2.0, ch, affine)
            } else {
                Preprocess::relu_conv_bn(store, rng, &format!("{name}.pre0"), prev2.0, ch, affine)
            };
            let pre1 = Preprocess::relu_conv_bn(store, rng, &format!("{name}.pre1"), prev.0, ch, affine);
            let cell = make_cell(
                site,
                &mut OpBuilder {
                    store: &mut *store,
                    rng: &mut *rng,
                    affine,
                },
            )?;
            let out = (cell.output_multiplier() * ch, prev.1 + usize::from(reduction));
            prev2 = prev;
            prev = out;
            cnn.push(Stage { site, pre0, pre1, cell });
        }
        let bridge = dims.bridge_features();
        if prev.0 * dims.cnn_output_hw().1 != bridge {
            return Err(Error::Build(format!(
                "CNN stack emits {} channels, expected {}",
                prev.0,
                dims.cnn_nodes * ch
            )));
        }
        let h = dims.hidden;
        let (mut prev2, mut prev) = (bridge, bridge);
        let mut seq = Vec::with_capacity(dims.seq_cells);
        for j in 0..dims.seq_cells {
            let site = CellSite {
                cell_type: CellType::Seqnn,
                index: j,
                width: h,
            };
            let name = site.name();
            let pre0 = Preprocess::Linear(Linear::new(store, &format!("{name}.pre0"), prev2, h, true, rng));
            let pre1 = Preprocess::Linear(Linear::new(store, &format!("{name}.pre1"), prev, h, true, rng));
            let cell = make_cell(
                site,
                &mut OpBuilder {
                    store: &mut *store,
                    rng: &mut *rng,
                    affine,
                },
            )?;
            prev2 = prev;
            prev = cell.output_multiplier() * h;
            seq.push(Stage { site, pre0, pre1, cell });
        }
        let head = Linear::new(store, "head", prev, dims.num_classes, true, rng);
        Ok(Self {
            dims,
            stem,
            cnn,
            seq,
            head,
        })
    }

    /// Class logits for `x` of shape `(batch, 1, H, W)`.
    pub fn logits(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 || (shape[2], shape[3]) != self.dims.input {
            return Err(Error::Shape(format!(
                "network expects (B, 1, {}, {}), got {shape:?}",
                self.dims.input.0, self.dims.input.1
            )));
        }
        let s = match &self.stem {
            Some(stem) => {
                let y = stem.conv.forward(ctx, x)?;
                stem.bn.forward(ctx, y)?
            }
            None => x,
        };
        let (mut s0, mut s1) = (s, s);
        for stage in &self.cnn {
            let out = run_stage(ctx, stage, s0, s1)?;
            s0 = s1;
            s1 = out;
        }
        let seq_in = flatten_bridge(ctx, s1)?;
        let (mut s0, mut s1) = (seq_in, seq_in);
        for stage in &self.seq {
            let out = run_stage(ctx, stage, s0, s1)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = match self.dims.time_pool {
            TimePool::Mean => ctx.g.mean_axis(s1, 1)?,
            TimePool::Last => {
                let t = ctx.g.shape(s1)[1];
                ctx.g.select(s1, 1, t - 1)?
            }
        };
        let pooled = dropout(ctx, pooled, self.dims.dropout)?;
        let logits = self.head.forward(ctx, pooled)?;
        check_finite(ctx, logits, "head")?;
        Ok(logits)
    }

    pub fn stages(&self) -> impl Iterator<Item = &Stage<C>> {
        self.cnn.iter().chain(self.seq.iter())
    }

    /// Analytic count of the scalars outside the cells.
    pub fn scaffold_param_count(&self) -> usize {
        let bn = |b: &BatchNorm| if b.gamma.is_some() { 2 * b.channels } else { 0 };
        let stem = self.stem.as_ref().map_or(0, |s| s.conv.in_channels * 9 * s.conv.out_channels + bn(&s.bn));
        let pre: usize = self.stages().map(|s| s.pre0.param_count() + s.pre1.param_count()).sum();
        let head = self.head.in_features * self.head.out_features + self.head.out_features;
        stem + pre + head
    }
}

fn run_stage<C: CellForward>(ctx: &mut Ctx, stage: &Stage<C>, s0: Var, s1: Var) -> Result<Var> {
    let a = stage.pre0.forward(ctx, s0)?;
    let b = stage.pre1.forward(ctx, s1)?;
    let y = stage.cell.forward(ctx, &[a, b])?;
    check_finite(ctx, y, &stage.site.name())?;
    Ok(y)
}

fn check_finite(ctx: &Ctx, v: Var, site: &str) -> Result<()> {
    if ctx.g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFault(format!("non-finite activations after {site}")))
    }
}

/// `(B, C, H, W)` → `(B, H, C·W)`: rows of `H` become time steps.
pub fn flatten_bridge(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let shape = ctx.g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("bridge expects a 4-D map, got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let t = ctx.g.swap_middle(x)?;
    ctx.g.reshape(t, &[b, h, c * w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{GradTarget, Mode};
    use crate::tensor::Tensor;

    #[test]
    fn reduction_placement() {
        assert_eq!(reduction_indices(4), vec![1, 2]);
        assert_eq!(reduction_indices(3), vec![1, 2]);
        assert_eq!(reduction_indices(2), vec![0, 1]);
        assert_eq!(reduction_indices(1), vec![0]);
        assert_eq!(reduction_indices(6), vec![2, 4]);
    }

    #[test]
    fn bridge_shapes_and_round_trip() {
        let mut store = ParamStore::new();
        let mut ctx = Ctx::new(&mut store, Mode::Eval, GradTarget::Nothing, 0);
        let x = Tensor::new(vec![2, 64, 8, 8], (0..2 * 64 * 64).map(f64::from).collect()).unwrap();
        let xv = ctx.input(x.clone());
        let y = flatten_bridge(&mut ctx, xv).unwrap();
        assert_eq!(ctx.g.shape(y), &[2, 8, 512]);
        // Invert: reshape to (B, H, C, W) and swap back.
        let back = ctx.g.reshape(y, &[2, 8, 64, 8]).unwrap();
        let back = ctx.g.swap_middle(back).unwrap();
        assert_eq!(ctx.g.value(back), &x);
        let z = ctx.input(Tensor::new(vec![1, 1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let zf = flatten_bridge(&mut ctx, z).unwrap();
        assert_eq!(ctx.g.shape(zf), &[1, 1, 5]);
        assert_eq!(ctx.g.value(zf).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn bridge_rows_are_time_steps() {
        let mut store = ParamStore::new();
        let mut ctx = Ctx::new(&mut store, Mode::Eval, GradTarget::Nothing, 0);
        // Value encodes (c, h, w) so each output row can be checked.
        let (c, h, w) = (3, 4, 2);
        let data = (0..c * h * w).map(|i| i as f64).collect();
        let x = ctx.input(Tensor::new(vec![1, c, h, w], data).unwrap());
        let y = flatten_bridge(&mut ctx, x).unwrap();
        let v = ctx.g.value(y).data();
        for t in 0..h {
            for ci in 0..c {
                for wi in 0..w {
                    assert_eq!(v[t * c * w + ci * w + wi], (ci * h * w + t * w + wi) as f64);
                }
            }
        }
    }

    #[test]
    fn cell_type_names() {
        for t in CellType::ALL {
            assert_eq!(t.as_str().parse::<CellType>().unwrap(), t);
        }
        assert!("cnn_weird".parse::<CellType>().is_err());
    }
}
