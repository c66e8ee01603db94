//! Candidate operation catalog for the convolutional and sequential
//! components.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Attention, BatchNorm, CellKind, Conv2d, ConvSpec, Ctx, RecurrentLayer};
use crate::params::{ParamId, ParamStore, Role};

/// Network component an operation belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Cnn,
    Seq,
}

/// Canonical convolutional candidates, in catalog order.
pub const CNN_OPS: [&str; 9] = [
    "max_pool_3x3",
    "avg_pool_3x3",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "conv_7x1_1x7",
    "skip_connect",
    "none",
];

/// Canonical sequential candidates, in catalog order.
pub const SEQ_OPS: [&str; 14] = [
    "lstm_1",
    "lstm_2",
    "lstm_3",
    "lstm_4",
    "lstm_att_1",
    "lstm_att_2",
    "rnn_1",
    "rnn_2",
    "rnn_3",
    "rnn_4",
    "rnn_att_1",
    "rnn_att_2",
    "skip_connect",
    "none",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MaxPool { kernel: usize },
    AvgPool { kernel: usize },
    DilConv { kernel: usize },
    SepConv { kernel: usize },
    FactorizedConv { kernel: usize },
    SkipConnect,
    NoConnection,
    Lstm { layers: usize },
    LstmAtt { layers: usize },
    Rnn { layers: usize },
    RnnAtt { layers: usize },
}

impl OpKind {
    /// Component the op belongs to; `None` for ops shared by both.
    pub fn component(self) -> Option<Component> {
        use OpKind::*;
        match self {
            MaxPool { .. } | AvgPool { .. } | DilConv { .. } | SepConv { .. } | FactorizedConv { .. } => Some(Component::Cnn),
            Lstm { .. } | LstmAtt { .. } | Rnn { .. } | RnnAtt { .. } => Some(Component::Seq),
            SkipConnect | NoConnection => None,
        }
    }

    pub fn fits(self, component: Component) -> bool {
        self.component().is_none_or(|c| c == component)
    }

    pub fn is_parameter_free(self) -> bool {
        matches!(
            self,
            OpKind::MaxPool { .. } | OpKind::AvgPool { .. } | OpKind::SkipConnect | OpKind::NoConnection
        )
    }

    /// Whether `(kind, i/j)` is one of the catalogued combinations.
    pub fn is_admissible(self) -> bool {
        use OpKind::*;
        match self {
            MaxPool { kernel } | AvgPool { kernel } => kernel == 3,
            SepConv { kernel } | DilConv { kernel } => kernel == 3 || kernel == 5,
            FactorizedConv { kernel } => kernel == 7,
            Lstm { layers } | Rnn { layers } => (1..=4).contains(&layers),
            LstmAtt { layers } | RnnAtt { layers } => (1..=2).contains(&layers),
            SkipConnect | NoConnection => true,
        }
    }

    pub fn validate(self) -> Result<Self> {
        if self.is_admissible() {
            Ok(self)
        } else {
            Err(Error::Catalog(format!("`{self}` is not in the operation catalog")))
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use OpKind::*;
        match *self {
            MaxPool { kernel: k } => write!(f, "max_pool_{k}x{k}"),
            AvgPool { kernel: k } => write!(f, "avg_pool_{k}x{k}"),
            DilConv { kernel: k } => write!(f, "dil_conv_{k}x{k}"),
            SepConv { kernel: k } => write!(f, "sep_conv_{k}x{k}"),
            FactorizedConv { kernel: k } => write!(f, "conv_{k}x1_1x{k}"),
            SkipConnect => f.write_str("skip_connect"),
            NoConnection => f.write_str("none"),
            Lstm { layers } => write!(f, "lstm_{layers}"),
            LstmAtt { layers } => write!(f, "lstm_att_{layers}"),
            Rnn { layers } => write!(f, "rnn_{layers}"),
            RnnAtt { layers } => write!(f, "rnn_att_{layers}"),
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CNN_OPS
            .iter()
            .chain(SEQ_OPS.iter())
            .find(|name| **name == s)
            .map(|name| parse_known(name))
            .ok_or_else(|| Error::Catalog(format!("unknown operation `{s}`")))
    }
}

fn parse_known(name: &str) -> OpKind {
    use OpKind::*;
    let tail = |prefix: &str| -> usize {
        name[prefix.len()..]
            .split('x')
            .next()
            .and_then(|v| v.parse().ok())
            .expect("catalog names are well formed")
    };
    match name {
        "skip_connect" => SkipConnect,
        "none" => NoConnection,
        n if n.starts_with("max_pool_") => MaxPool { kernel: tail("max_pool_") },
        n if n.starts_with("avg_pool_") => AvgPool { kernel: tail("avg_pool_") },
        n if n.starts_with("dil_conv_") => DilConv { kernel: tail("dil_conv_") },
        n if n.starts_with("sep_conv_") => SepConv { kernel: tail("sep_conv_") },
        n if n.starts_with("conv_") => FactorizedConv { kernel: tail("conv_") },
        n if n.starts_with("lstm_att_") => LstmAtt { layers: tail("lstm_att_") },
        n if n.starts_with("lstm_") => Lstm { layers: tail("lstm_") },
        n if n.starts_with("rnn_att_") => RnnAtt { layers: tail("rnn_att_") },
        n if n.starts_with("rnn_") => Rnn { layers: tail("rnn_") },
        _ => unreachable!("catalog name {name}"),
    }
}

/// Parses and validates a list of op names for one component.
pub fn parse_scope(names: &[String], component: Component) -> Result<Vec<OpKind>> {
    if names.is_empty() {
        return Err(Error::Catalog("operation scope is empty".into()));
    }
    names
        .iter()
        .map(|n| {
            let kind: OpKind = n.parse()?;
            if !kind.fits(component) {
                return Err(Error::Catalog(format!("`{n}` is not a {component:?} operation")));
            }
            Ok(kind)
        })
        .collect()
}

/// ReLU → convolution(s) → per-channel normalization.
#[derive(Clone, Debug)]
struct ConvBlock {
    convs: Vec<Conv2d>,
    bn: BatchNorm,
}

impl ConvBlock {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut y = ctx.g.relu(x);
        for c in &self.convs {
            y = c.forward(ctx, y)?;
        }
        self.bn.forward(ctx, y)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Identity,
    Zero,
    MaxPool { kernel: usize },
    AvgPool { kernel: usize },
    Convs(Vec<ConvBlock>),
    Recurrent { layers: Vec<RecurrentLayer>, attention: Option<Attention> },
}

/// One instantiated candidate operation.
#[derive(Clone, Debug)]
pub struct CandidateOp {
    pub kind: OpKind,
    pub stride: usize,
    pub width: usize,
    pub input: usize,
    body: Body,
    params: Vec<ParamId>,
}

/// Where and how a new op registers its weights.
pub struct OpBuilder<'a, R: Rng + ?Sized> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub affine: bool,
}

impl<R: Rng + ?Sized> OpBuilder<'_, R> {
    fn collect_new(&self, from: usize) -> Vec<ParamId> {
        self.store
            .iter()
            .skip(from)
            .filter(|(_, p)| p.role != Role::Buffer)
            .map(|(id, _)| id)
            .collect()
    }

    /// Convolutional op over `channels` feature maps.
    pub fn cnn(&mut self, kind: OpKind, channels: usize, stride: usize, name: &str) -> Result<CandidateOp> {
        kind.validate()?;
        if !kind.fits(Component::Cnn) {
            return Err(Error::Catalog(format!("`{kind}` is not a CNN operation")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Catalog(format!("stride {stride} not supported")));
        }
        let start = self.store.len();
        let c = channels;
        let block = |b: &mut Self, convs: Vec<ConvSpec>, tag: &str| ConvBlock {
            convs: convs
                .into_iter()
                .enumerate()
                .map(|(i, s)| Conv2d::new(b.store, &format!("{name}.{tag}.conv{i}"), s, b.rng))
                .collect(),
            bn: BatchNorm::new(b.store, &format!("{name}.{tag}.bn"), c, b.affine),
        };
        let s = (stride, stride);
        let body = match kind {
            OpKind::SkipConnect => Body::Identity,
            OpKind::NoConnection => Body::Zero,
            OpKind::MaxPool { kernel } => Body::MaxPool { kernel },
            OpKind::AvgPool { kernel } => Body::AvgPool { kernel },
            OpKind::SepConv { kernel: k } => {
                let p = (k / 2, k / 2);
                let first = block(
                    self,
                    vec![
                        ConvSpec::new(c, c, (k, k)).stride(s).padding(p).groups(c),
                        ConvSpec::new(c, c, (1, 1)),
                    ],
                    "sep0",
                );
                let second = block(
                    self,
                    vec![ConvSpec::new(c, c, (k, k)).padding(p).groups(c), ConvSpec::new(c, c, (1, 1))],
                    "sep1",
                );
                Body::Convs(vec![first, second])
            }
            OpKind::DilConv { kernel: k } => {
                let p = (k - 1, k - 1);
                Body::Convs(vec![block(
                    self,
                    vec![
                        ConvSpec::new(c, c, (k, k)).stride(s).padding(p).dilation((2, 2)).groups(c),
                        ConvSpec::new(c, c, (1, 1)),
                    ],
                    "dil",
                )])
            }
            OpKind::FactorizedConv { kernel: k } => Body::Convs(vec![block(
                self,
                vec![
                    ConvSpec::new(c, c, (k, 1)).stride((stride, 1)).padding((k / 2, 0)),
                    ConvSpec::new(c, c, (1, k)).stride((1, stride)).padding((0, k / 2)),
                ],
                "fac",
            )]),
            _ => unreachable!("component checked above"),
        };
        Ok(CandidateOp {
            kind,
            stride,
            width: c,
            input: c,
            body,
            params: self.collect_new(start),
        })
    }

    /// Sequential op mapping `(B, T, input)` to `(B, T, hidden)`.
    pub fn seq(&mut self, kind: OpKind, input: usize, hidden: usize, name: &str) -> Result<CandidateOp> {
        kind.validate()?;
        if !kind.fits(Component::Seq) {
            return Err(Error::Catalog(format!("`{kind}` is not a SeqNN operation")));
        }
        if kind == OpKind::SkipConnect && input != hidden {
            return Err(Error::Build(format!("skip_connect cannot map {input} features to {hidden}")));
        }
        let start = self.store.len();
        let (cell, layers, attend) = match kind {
            OpKind::SkipConnect | OpKind::NoConnection => {
                let body = if kind == OpKind::SkipConnect { Body::Identity } else { Body::Zero };
                return Ok(CandidateOp {
                    kind,
                    stride: 1,
                    width: hidden,
                    input,
                    body,
                    params: Vec::new(),
                });
            }
            OpKind::Lstm { layers } => (CellKind::Lstm, layers, false),
            OpKind::LstmAtt { layers } => (CellKind::Lstm, layers, true),
            OpKind::Rnn { layers } => (CellKind::Rnn, layers, false),
            OpKind::RnnAtt { layers } => (CellKind::Rnn, layers, true),
            _ => unreachable!("component checked above"),
        };
        let layers = (0..layers)
            .map(|l| {
                let fin = if l == 0 { input } else { hidden };
                RecurrentLayer::new(self.store, &format!("{name}.layer{l}"), cell, fin, hidden, false, self.rng)
            })
            .collect();
        let attention = attend.then(|| Attention::new(self.store, &format!("{name}.att"), hidden, self.rng));
        Ok(CandidateOp {
            kind,
            stride: 1,
            width: hidden,
            input,
            body: Body::Recurrent { layers, attention },
            params: self.collect_new(start),
        })
    }
}

impl CandidateOp {
    /// Trainable tensors owned by this op.
    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn attention(&self) -> Option<&Attention> {
        match &self.body {
            Body::Recurrent { attention, .. } => attention.as_ref(),
            _ => None,
        }
    }

    /// Output shape for an input of shape `shape`.
    pub fn output_shape(&self, shape: &[usize]) -> Vec<usize> {
        match self.kind.component() {
            Some(Component::Seq) => vec![shape[0], shape[1], self.width],
            _ if shape.len() == 4 => vec![
                shape[0],
                shape[1],
                shape[2].div_ceil(self.stride),
                shape[3].div_ceil(self.stride),
            ],
            _ => {
                let mut s = shape.to_vec();
                if let Some(last) = s.last_mut() {
                    *last = self.width;
                }
                s
            }
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match &self.body {
            Body::Identity => {
                if self.stride == 2 {
                    ctx.g.subsample2d(x)
                } else {
                    Ok(x)
                }
            }
            Body::Zero => {
                let shape = self.output_shape(ctx.g.shape(x));
                Ok(ctx.zeros(&shape))
            }
            Body::MaxPool { kernel } => ctx.g.max_pool2d(x, *kernel, self.stride, kernel / 2),
            Body::AvgPool { kernel } => ctx.g.avg_pool2d(x, *kernel, self.stride, kernel / 2),
            Body::Convs(blocks) => {
                let mut y = x;
                for b in blocks {
                    y = b.forward(ctx, y)?;
                }
                Ok(y)
            }
            Body::Recurrent { layers, attention } => {
                let mut y = x;
                for l in layers {
                    y = l.forward(ctx, y)?;
                }
                match attention {
                    Some(att) => att.forward(ctx, y),
                    None => Ok(y),
                }
            }
        }
    }

    /// Analytic count of trainable scalars.
    pub fn param_count(&self, affine: bool) -> usize {
        let c = self.width;
        let bn = if affine { 2 * c } else { 0 };
        match self.kind {
            OpKind::SkipConnect | OpKind::NoConnection | OpKind::MaxPool { .. } | OpKind::AvgPool { .. } => 0,
            OpKind::SepConv { kernel: k } => 2 * (c * k * k + c * c + bn),
            OpKind::DilConv { kernel: k } => c * k * k + c * c + bn,
            OpKind::FactorizedConv { kernel: k } => 2 * k * c * c + bn,
            OpKind::Lstm { layers } | OpKind::LstmAtt { layers } | OpKind::Rnn { layers } | OpKind::RnnAtt { layers } => {
                let gates = if matches!(self.kind, OpKind::Lstm { .. } | OpKind::LstmAtt { .. }) { 4 } else { 1 };
                let h = self.width;
                let first = gates * ((self.input + h) * h + h);
                let rest = (layers - 1) * gates * (2 * h * h + h);
                let att = if matches!(self.kind, OpKind::LstmAtt { .. } | OpKind::RnnAtt { .. }) {
                    h * h + 2 * h
                } else {
                    0
                };
                first + rest + att
            }
        }
    }
}

/// Number of scalars stored in `ids`.
pub fn stored_count(store: &ParamStore, ids: &[ParamId]) -> usize {
    ids.iter().map(|&id| store.value(id).numel()).sum()
}
