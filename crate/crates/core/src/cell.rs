//! Searchable cells: a DAG whose edges mix every candidate op by softmax(α).

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::Var;
use crate::catalog::{CandidateOp, Component, OpBuilder, OpKind};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::params::ParamId;

/// Static description of a cell's DAG and search space.
#[derive(Clone, Debug)]
pub struct CellSpec {
    pub component: Component,
    pub num_inputs: usize,
    pub intermediates: usize,
    pub scope: Vec<OpKind>,
    pub is_reduction: bool,
    /// Channels (CNN) or hidden width (SeqNN) every node carries.
    pub width: usize,
}

impl CellSpec {
    pub fn edge_count(&self) -> usize {
        edge_count(self.num_inputs, self.intermediates)
    }

    /// `(from, to)` pairs in evaluation order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        edge_list(self.num_inputs, self.intermediates)
    }

    pub fn stride_for(&self, from: usize) -> usize {
        if self.is_reduction && from < self.num_inputs {
            2
        } else {
            1
        }
    }
}

/// Edges of a fully connected cell: each intermediate node reads every input
/// node and every earlier intermediate.
pub fn edge_count(num_inputs: usize, intermediates: usize) -> usize {
    intermediates * num_inputs + intermediates * intermediates.saturating_sub(1) / 2
}

pub fn edge_list(num_inputs: usize, intermediates: usize) -> Vec<(usize, usize)> {
    (0..intermediates)
        .flat_map(|k| {
            let to = num_inputs + k;
            (0..to).map(move |from| (from, to))
        })
        .collect()
}

/// Where a cell's architecture weights come from.
pub enum AlphaSource<'a> {
    /// Draw new α vectors from `normal(0, std)`.
    Fresh { std: f64 },
    /// Reuse vectors already registered for another cell of the same kind.
    Shared(&'a [ParamId]),
}

#[derive(Clone, Debug)]
pub struct MixedEdge {
    pub from: usize,
    pub to: usize,
    pub ops: Vec<CandidateOp>,
    pub alpha: ParamId,
}

impl MixedEdge {
    /// `Σ_k softmax(α)_k · op_k(x)`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let a = ctx.param(self.alpha);
        let w = ctx.g.softmax(a);
        let in_shape = ctx.g.shape(x).to_vec();
        let template = self.ops[0].output_shape(&in_shape);
        let mut terms = Vec::with_capacity(self.ops.len());
        for (k, op) in self.ops.iter().enumerate() {
            if op.kind == OpKind::NoConnection {
                if op.output_shape(&in_shape) != template {
                    return Err(Error::SearchSpace(format!("`none` output shape differs on edge {}->{}", self.from, self.to)));
                }
                continue;
            }
            let y = op.forward(ctx, x)?;
            if ctx.g.shape(y) != template.as_slice() {
                return Err(Error::SearchSpace(format!(
                    "`{}` on edge {}->{} produced {:?}, expected {template:?}",
                    op.kind,
                    self.from,
                    self.to,
                    ctx.g.shape(y)
                )));
            }
            terms.push((k, y));
        }
        ctx.g.weighted_sum(&terms, w, &template)
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub spec: CellSpec,
    pub edges: Vec<MixedEdge>,
}

impl Cell {
    /// Builds the fully connected search cell, one op instance per scope entry
    /// on every edge.
    pub fn new<R: Rng + ?Sized>(spec: CellSpec, builder: &mut OpBuilder<'_, R>, alphas: AlphaSource<'_>, name: &str) -> Result<Self> {
        if spec.intermediates == 0 || spec.num_inputs == 0 {
            return Err(Error::Build("cell needs at least one input and one intermediate node".into()));
        }
        if spec.scope.is_empty() {
            return Err(Error::Catalog("cell scope is empty".into()));
        }
        if let AlphaSource::Shared(ids) = &alphas {
            if ids.len() != spec.edge_count() {
                return Err(Error::Build(format!(
                    "{} shared α vectors for {} edges",
                    ids.len(),
                    spec.edge_count()
                )));
            }
        }
        let mut edges = Vec::with_capacity(spec.edge_count());
        for (e, (from, to)) in spec.edges().into_iter().enumerate() {
            let stride = spec.stride_for(from);
            let ops = spec
                .scope
                .iter()
                .map(|&kind| {
                    let op_name = format!("{name}.e{from}_{to}.{kind}");
                    match spec.component {
                        Component::Cnn => builder.cnn(kind, spec.width, stride, &op_name),
                        Component::Seq => builder.seq(kind, spec.width, spec.width, &op_name),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let alpha = match &alphas {
                AlphaSource::Fresh { std } => {
                    builder
                        .store
                        .add_alpha(format!("{name}.alpha.e{from}_{to}"), spec.scope.len(), *std, builder.rng)
                }
                AlphaSource::Shared(ids) => ids[e],
            };
            edges.push(MixedEdge { from, to, ops, alpha });
        }
        Ok(Self { spec, edges })
    }

    pub fn alpha_ids(&self) -> Vec<ParamId> {
        self.edges.iter().map(|e| e.alpha).collect()
    }

    /// Output of intermediate node `to` given every earlier node state.
    pub fn node_forward(&self, ctx: &mut Ctx, to: usize, states: &[Var]) -> Result<Var> {
        let mut parts = Vec::new();
        for edge in self.edges.iter().filter(|e| e.to == to) {
            parts.push(edge.forward(ctx, states[edge.from])?);
        }
        ctx.g.add_n(&parts)
    }

    /// Evaluates the DAG on preprocessed inputs (`inputs.len() == num_inputs`).
    pub fn forward(&self, ctx: &mut Ctx, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != self.spec.num_inputs {
            return Err(Error::Bridge(format!(
                "cell expects {} inputs, got {}",
                self.spec.num_inputs,
                inputs.len()
            )));
        }
        let first = ctx.g.shape(inputs[0]).to_vec();
        if let Some(bad) = inputs.iter().find(|&&v| ctx.g.shape(v) != first.as_slice()) {
            return Err(Error::Bridge(format!(
                "cell inputs disagree: {first:?} vs {:?}",
                ctx.g.shape(*bad)
            )));
        }
        let width_axis = match self.spec.component {
            Component::Cnn => 1,
            Component::Seq => 2,
        };
        if first.get(width_axis) != Some(&self.spec.width) {
            return Err(Error::Bridge(format!(
                "cell of width {} fed {first:?}",
                self.spec.width
            )));
        }
        let mut states = inputs.to_vec();
        for k in 0..self.spec.intermediates {
            let node = self.node_forward(ctx, self.spec.num_inputs + k, &states)?;
            states.push(node);
        }
        aggregate(ctx, self.spec.component, &states[self.spec.num_inputs..])
    }

    /// Number of instantiated ops of each kind.
    pub fn op_instance_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for op in self.edges.iter().flat_map(|e| &e.ops) {
            *counts.entry(op.kind.to_string()).or_insert(0) += 1;
        }
        counts
    }
}

/// Channel concatenation for CNN cells, elementwise mean for SeqNN cells.
pub(crate) fn aggregate(ctx: &mut Ctx, component: Component, nodes: &[Var]) -> Result<Var> {
    match component {
        Component::Cnn => ctx.g.concat(nodes, 1),
        Component::Seq => {
            let s = ctx.g.add_n(nodes)?;
            Ok(ctx.g.scale(s, 1.0 / nodes.len() as f64))
        }
    }
}

/// `y_t = f(y_{t-1}, y_{t-2})` for a two-input cell.
pub fn cell_forward(ctx: &mut Ctx, cell: &Cell, s_prev: Var, s_prev2: Var) -> Result<Var> {
    cell.forward(ctx, &[s_prev2, s_prev])
}

/// Result of discretizing one edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeChoice {
    pub index: usize,
    pub kind: OpKind,
    /// Set when every candidate was `none`.
    pub degenerate: bool,
}

/// Argmax over α, never choosing `none` unless it is the only candidate;
/// ties resolve to the lowest index.
pub fn discretize_edge(alpha: &[f64], names: &[OpKind]) -> Result<EdgeChoice> {
    if alpha.len() != names.len() || alpha.is_empty() {
        return Err(Error::Contract(format!(
            "{} α entries for {} operations",
            alpha.len(),
            names.len()
        )));
    }
    let best = names
        .iter()
        .enumerate()
        .filter(|(_, k)| **k != OpKind::NoConnection)
        .fold(None::<usize>, |best, (i, _)| match best {
            Some(b) if alpha[b] >= alpha[i] => Some(b),
            _ => Some(i),
        });
    Ok(match best {
        Some(index) => EdgeChoice {
            index,
            kind: names[index],
            degenerate: false,
        },
        None => EdgeChoice {
            index: 0,
            kind: OpKind::NoConnection,
            degenerate: true,
        },
    })
}

/// Largest softmax weight among the non-`none` candidates of an edge.
pub fn edge_strength(alpha: &[f64], names: &[OpKind]) -> f64 {
    let m = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = alpha.iter().map(|a| (a - m).exp()).sum();
    alpha
        .iter()
        .zip(names)
        .filter(|(_, k)| **k != OpKind::NoConnection)
        .map(|(a, _)| (a - m).exp() / z)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn softmax(alpha: &[f64]) -> Vec<f64> {
    let m = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = alpha.iter().map(|a| (a - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests;
