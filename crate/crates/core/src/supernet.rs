//! The over-parameterized search network holding every candidate op.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::catalog::OpKind;
use crate::cell::{softmax, AlphaSource, Cell, CellSpec};
use crate::config::SearchConfig;
use crate::error::{Error, Result};
use crate::network::{CellType, NetDims, Stack};
use crate::nn::{Ctx, GradTarget, Mode};
use crate::params::{ParamId, ParamStore, Role};
use crate::tensor::Tensor;

pub struct Supernet {
    pub config: SearchConfig,
    pub stack: Stack<Cell>,
    pub store: ParamStore,
    /// One α vector per edge, shared by every cell of a kind.
    pub alphas: BTreeMap<CellType, Vec<ParamId>>,
}

impl Supernet {
    /// `input` is `(height, width)` of one feature map.
    pub fn build(config: &SearchConfig, input: (usize, usize), num_classes: usize, seed: u64) -> Result<Self> {
        config.validate().map_err(|e| Error::Build(e.to_string()))?;
        let cnn_scope = config.cnn_scope()?;
        let seq_scope = config.seq_scope()?;
        let dims = NetDims {
            cnn_cells: config.cnn_cells,
            seq_cells: config.seq_cells,
            cnn_nodes: config.cnn_nodes,
            seq_nodes: config.seq_nodes,
            channels: config.channels,
            hidden: config.hidden,
            num_classes,
            input,
            time_pool: config.time_pool,
            affine: false,
            stem: true,
            dropout: 0.0,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut alphas: BTreeMap<CellType, Vec<ParamId>> = BTreeMap::new();
        let stack = Stack::build(dims, &mut store, &mut rng, |site, builder| {
            let (scope, nodes) = match site.cell_type {
                CellType::Seqnn => (seq_scope.clone(), config.seq_nodes),
                _ => (cnn_scope.clone(), config.cnn_nodes),
            };
            let spec = CellSpec {
                component: site.cell_type.component(),
                num_inputs: 2,
                intermediates: nodes,
                scope,
                is_reduction: site.is_reduction(),
                width: site.width,
            };
            let shared = alphas.get(&site.cell_type).cloned();
            let source = match &shared {
                Some(ids) => AlphaSource::Shared(ids),
                None => AlphaSource::Fresh {
                    std: config.alpha_init_std,
                },
            };
            let cell = Cell::new(spec, builder, source, &format!("{}.{}", site.name(), site.cell_type))?;
            alphas.entry(site.cell_type).or_insert_with(|| cell.alpha_ids());
            Ok(cell)
        })?;
        Ok(Self {
            config: config.clone(),
            stack,
            store,
            alphas,
        })
    }

    /// Candidate list on every edge of a cell kind.
    pub fn scope(&self, cell_type: CellType) -> Option<&[OpKind]> {
        self.stack
            .stages()
            .find(|s| s.site.cell_type == cell_type)
            .map(|s| s.cell.spec.scope.as_slice())
    }

    /// A representative cell of each kind present.
    pub fn cell_of(&self, cell_type: CellType) -> Option<&Cell> {
        self.stack.stages().find(|s| s.site.cell_type == cell_type).map(|s| &s.cell)
    }

    /// `(arch_params, weight_params)`.
    pub fn param_partition(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        (self.store.ids(Role::Arch), self.store.ids(Role::Weight))
    }

    /// Trainable scalars excluding α.
    pub fn count_params(&self) -> usize {
        self.store.count(Role::Weight)
    }

    /// Analytic weight count: catalog op counts plus stem, projections and head.
    pub fn analytic_param_count(&self) -> usize {
        let ops: usize = self
            .stack
            .stages()
            .flat_map(|s| &s.cell.edges)
            .flat_map(|e| &e.ops)
            .map(|op| op.param_count(self.stack.dims.affine))
            .sum();
        ops + self.stack.scaffold_param_count()
    }

    pub fn logits(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.stack.logits(ctx, x)
    }

    /// Per-class probabilities in evaluation mode, `(batch, classes)`.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let Self { stack, store, .. } = self;
        let mut ctx = Ctx::new(store, Mode::Eval, GradTarget::Nothing, 0);
        let xv = ctx.input(x.clone());
        let logits = stack.logits(&mut ctx, xv)?;
        let p = ctx.g.softmax(logits);
        Ok(ctx.g.value(p).clone())
    }

    /// Current α values per cell kind, one vector per edge.
    pub fn alpha_values(&self) -> BTreeMap<CellType, Vec<Vec<f64>>> {
        self.alphas
            .iter()
            .map(|(k, ids)| (*k, ids.iter().map(|&id| self.store.value(id).data().to_vec()).collect()))
            .collect()
    }

    /// Mean Shannon entropy of softmax(α) over edges, for the CNN and SeqNN
    /// components.
    pub fn alpha_entropy(&self) -> (f64, f64) {
        let mut cnn = Vec::new();
        let mut seq = Vec::new();
        for (kind, vectors) in self.alpha_values() {
            let target = match kind {
                CellType::Seqnn => &mut seq,
                _ => &mut cnn,
            };
            target.extend(vectors.iter().map(|a| entropy(a)));
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        (mean(&cnn), mean(&seq))
    }
}

/// `-Σ p ln p` of softmax(α).
pub fn entropy(alpha: &[f64]) -> f64 {
    softmax(alpha)
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum::<f64>()
        .max(0.0)
}

/// Mean α entropy per component of `net`.
pub fn alpha_entropy(net: &Supernet) -> (f64, f64) {
    net.alpha_entropy()
}
