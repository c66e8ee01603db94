//! The discrete network described by a genome, trained from scratch.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::catalog::{CandidateOp, Component, OpBuilder};
use crate::cell::{aggregate, CellSpec};
use crate::config::DerivedConfig;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::genome::{GeneEdge, Genome, CELL_INPUTS};
use crate::metrics::{ua, wa};
use crate::network::{CellForward, CellSite, NetDims, Stack};
use crate::nn::Ctx;
use crate::params::{ParamStore, Role};
use crate::tensor::Tensor;
use crate::train::{fit, predict, probabilities, Aborted, EpochRecord, FitConfig};

/// A cell whose every retained edge holds exactly one op.
#[derive(Clone, Debug)]
pub struct DiscreteCell {
    pub component: Component,
    pub width: usize,
    pub intermediates: usize,
    pub edges: Vec<(GeneEdge, CandidateOp)>,
}

impl DiscreteCell {
    fn build<R: rand::Rng + ?Sized>(site: CellSite, blueprint: &[GeneEdge], nodes: usize, builder: &mut OpBuilder<'_, R>) -> Result<Self> {
        let spec = CellSpec {
            component: site.cell_type.component(),
            num_inputs: CELL_INPUTS,
            intermediates: nodes,
            scope: Vec::new(),
            is_reduction: site.is_reduction(),
            width: site.width,
        };
        let mut edges = Vec::with_capacity(blueprint.len());
        for gene in blueprint {
            let kind = gene.op()?;
            let name = format!("{}.e{}_{}.{kind}", site.name(), gene.from_node, gene.to_node);
            let op = match spec.component {
                Component::Cnn => builder.cnn(kind, spec.width, spec.stride_for(gene.from_node), &name)?,
                Component::Seq => builder.seq(kind, spec.width, spec.width, &name)?,
            };
            edges.push((gene.clone(), op));
        }
        Ok(Self {
            component: spec.component,
            width: spec.width,
            intermediates: nodes,
            edges,
        })
    }
}

impl CellForward for DiscreteCell {
    fn forward(&self, ctx: &mut Ctx, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != CELL_INPUTS {
            return Err(Error::Bridge(format!("cell expects {CELL_INPUTS} inputs, got {}", inputs.len())));
        }
        let mut states = inputs.to_vec();
        for to in CELL_INPUTS..CELL_INPUTS + self.intermediates {
            let mut parts = Vec::new();
            for (gene, op) in self.edges.iter().filter(|(g, _)| g.to_node == to) {
                parts.push(op.forward(ctx, states[gene.from_node])?);
            }
            states.push(ctx.g.add_n(&parts)?);
        }
        aggregate(ctx, self.component, &states[CELL_INPUTS..])
    }

    fn output_multiplier(&self) -> usize {
        match self.component {
            Component::Cnn => self.intermediates,
            Component::Seq => 1,
        }
    }
}

pub struct DerivedModel {
    pub genome: Genome,
    pub config: DerivedConfig,
    pub seed: u64,
    pub stack: Stack<DiscreteCell>,
    pub store: ParamStore,
}

/// Trainable scalars by location.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub stem: usize,
    pub preprocess: usize,
    pub cells: usize,
    pub head: usize,
    pub total: usize,
}

/// `input` is `(height, width)` of the network input, i.e. `(time, coefficients)`.
pub fn instantiate(genome: &Genome, config: &DerivedConfig, input: (usize, usize), num_classes: usize, seed: u64) -> Result<DerivedModel> {
    genome.validate().map_err(|e| Error::Build(format!("invalid genome: {e}")))?;
    config.validate().map_err(|e| Error::Build(e.to_string()))?;
    let d = &genome.config;
    let dims = NetDims {
        cnn_cells: d.cnn_cells,
        seq_cells: d.seq_cells,
        cnn_nodes: d.cnn_nodes,
        seq_nodes: d.seq_nodes,
        channels: d.channels,
        hidden: d.hidden,
        num_classes,
        input,
        time_pool: config.time_pool,
        affine: config.affine,
        stem: config.stem,
        dropout: config.dropout,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stack = Stack::build(dims, &mut store, &mut rng, |site, builder| {
        let blueprint = genome.blueprint(site.cell_type);
        if blueprint.is_empty() {
            return Err(Error::Build(format!("genome has no {} blueprint but the stack needs one", site.cell_type)));
        }
        DiscreteCell::build(site, blueprint, genome.config.nodes(site.cell_type), builder)
    })?;
    Ok(DerivedModel {
        genome: genome.clone(),
        config: config.clone(),
        seed,
        stack,
        store,
    })
}

impl DerivedModel {
    pub fn count_params(&self) -> usize {
        self.store.count(Role::Weight)
    }

    /// Analytic count split by location; `total` equals `count_params`.
    pub fn param_breakdown(&self) -> ParamBreakdown {
        let affine = self.stack.dims.affine;
        let cells: usize = self
            .stack
            .stages()
            .flat_map(|s| &s.cell.edges)
            .map(|(_, op)| op.param_count(affine))
            .sum();
        let preprocess: usize = self.stack.stages().map(|s| s.pre0.param_count() + s.pre1.param_count()).sum();
        let head = self.stack.head.in_features * self.stack.head.out_features + self.stack.head.out_features;
        let stem = self.stack.scaffold_param_count() - preprocess - head;
        ParamBreakdown {
            stem,
            preprocess,
            cells,
            head,
            total: stem + preprocess + cells + head,
        }
    }

    pub fn input_dims(&self) -> (usize, usize) {
        self.stack.dims.input
    }

    pub fn num_classes(&self) -> usize {
        self.stack.dims.num_classes
    }

    /// Probability rows for a `(B, 1, H, W)` batch, in evaluation mode.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        probabilities(&self.stack, &mut self.store, x)
    }

    pub fn predict(&mut self, maps: &[&FeatureMap]) -> Result<Vec<usize>> {
        predict(&self.stack, &mut self.store, maps, self.config.batch_size)
    }

    pub fn evaluate(&mut self, maps: &[&FeatureMap]) -> Result<Evaluation> {
        let predictions = self.predict(maps)?;
        let labels: Vec<usize> = maps.iter().map(|m| m.label).collect();
        Ok(Evaluation {
            ua: ua(&predictions, &labels)?,
            wa: wa(&predictions, &labels)?,
            predictions,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ua: f64,
    pub wa: f64,
    pub predictions: Vec<usize>,
}

/// SGD with momentum and cosine annealing over `config.epochs`.
pub fn train_derived(
    model: &mut DerivedModel,
    train_split: &[&FeatureMap],
    config: &DerivedConfig,
) -> std::result::Result<Vec<EpochRecord>, Aborted<Vec<EpochRecord>>> {
    let fit_cfg = FitConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr_max: config.lr_max,
        lr_min: config.lr_min,
        momentum: config.momentum,
        weight_decay: config.weight_decay,
        grad_clip: config.grad_clip,
    };
    fit(&model.stack, &mut model.store, train_split, &fit_cfg, model.seed.wrapping_add(1))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"EDMODEL1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub genome: Genome,
    pub config: DerivedConfig,
    pub seed: u64,
    pub input: (usize, usize),
    pub num_classes: usize,
    pub tensors: Vec<TensorEntry>,
}

impl DerivedModel {
    /// Magic, u64 LE header length, JSON header, then every stored tensor
    /// (weights and normalization statistics) as little-endian f64 in
    /// declaration order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            genome: self.genome.clone(),
            config: self.config.clone(),
            seed: self.seed,
            input: self.input_dims(),
            num_classes: self.num_classes(),
            tensors: self
                .store
                .iter()
                .map(|(_, p)| TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, p) in self.store.iter() {
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::parse("checkpoint", m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated file"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a model checkpoint"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 32 {
            return Err(bad("implausible header length"));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let h: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| Error::parse("checkpoint.header", e.to_string()))?;
        let mut model = instantiate(&h.genome, &h.config, h.input, h.num_classes, h.seed)?;
        let layout: Vec<TensorEntry> = model
            .store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        if layout != h.tensors {
            return Err(bad("tensor layout does not match the rebuilt model"));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let total: usize = layout.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(bad("payload size does not match header"));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in model.store.value_mut(id).data_mut() {
                *v = values.next().expect("payload length checked");
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}
