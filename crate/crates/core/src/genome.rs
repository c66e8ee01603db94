//! Discrete architectures: extraction from a searched supernet, canonical
//! JSON, DOT rendering and degeneracy detection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::catalog::OpKind;
use crate::cell::{discretize_edge, edge_strength};
use crate::error::{Error, Result};
use crate::network::{reduction_indices, CellType};
use crate::supernet::Supernet;

pub const GENOME_VERSION: u32 = 1;

/// Number of input nodes feeding every cell.
pub const CELL_INPUTS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneEdge {
    pub to_node: usize,
    pub from_node: usize,
    pub op_name: String,
}

impl GeneEdge {
    pub fn new(from_node: usize, to_node: usize, op: OpKind) -> Self {
        Self {
            to_node,
            from_node,
            op_name: op.to_string(),
        }
    }

    pub fn op(&self) -> Result<OpKind> {
        self.op_name.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenomeScope {
    pub cnn: Vec<String>,
    pub seqnn: Vec<String>,
}

/// Structural sizes echoed from the search configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenomeDims {
    pub cnn_cells: usize,
    pub seq_cells: usize,
    pub cnn_nodes: usize,
    pub seq_nodes: usize,
    pub channels: usize,
    pub hidden: usize,
}

impl GenomeDims {
    pub fn nodes(&self, cell_type: CellType) -> usize {
        match cell_type {
            CellType::Seqnn => self.seq_nodes,
            _ => self.cnn_nodes,
        }
    }

    /// Whether the stack contains at least one cell of this kind.
    pub fn has(&self, cell_type: CellType) -> bool {
        let red = reduction_indices(self.cnn_cells).len();
        match cell_type {
            CellType::CnnNormal => self.cnn_cells > red,
            CellType::CnnReduce => red > 0,
            CellType::Seqnn => self.seq_cells > 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genome {
    pub version: u32,
    pub scope: GenomeScope,
    pub cnn_normal: Vec<GeneEdge>,
    pub cnn_reduce: Vec<GeneEdge>,
    pub seqnn: Vec<GeneEdge>,
    pub config: GenomeDims,
    pub retain_all: bool,
}

/// Per-component flag: every retained op is `skip_connect` or `none`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degeneracy {
    pub cnn: bool,
    pub seqnn: bool,
}

impl Degeneracy {
    pub fn any(self) -> bool {
        self.cnn || self.seqnn
    }
}

impl Genome {
    pub fn blueprint(&self, cell_type: CellType) -> &[GeneEdge] {
        match cell_type {
            CellType::CnnNormal => &self.cnn_normal,
            CellType::CnnReduce => &self.cnn_reduce,
            CellType::Seqnn => &self.seqnn,
        }
    }

    fn blueprint_mut(&mut self, cell_type: CellType) -> &mut Vec<GeneEdge> {
        match cell_type {
            CellType::CnnNormal => &mut self.cnn_normal,
            CellType::CnnReduce => &mut self.cnn_reduce,
            CellType::Seqnn => &mut self.seqnn,
        }
    }

    /// Sorts every blueprint by `(to_node, from_node)`.
    pub fn canonicalize(&mut self) {
        for t in CellType::ALL {
            self.blueprint_mut(t).sort_by_key(|e| (e.to_node, e.from_node));
        }
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        if self.version != GENOME_VERSION {
            return Err(Error::parse("version", format!("unsupported genome version {}", self.version)));
        }
        let dims = &self.config;
        for (field, v) in [
            ("config.cnn_cells", dims.cnn_cells),
            ("config.seq_cells", dims.seq_cells),
            ("config.cnn_nodes", dims.cnn_nodes),
            ("config.seq_nodes", dims.seq_nodes),
            ("config.channels", dims.channels),
            ("config.hidden", dims.hidden),
        ] {
            if v == 0 {
                return Err(Error::parse(field, "must be at least 1"));
            }
        }
        for (field, names, component) in [
            ("scope.cnn", &self.scope.cnn, crate::catalog::Component::Cnn),
            ("scope.seqnn", &self.scope.seqnn, crate::catalog::Component::Seq),
        ] {
            for n in names {
                let kind: OpKind = n.parse().map_err(|_| Error::parse(field, format!("unknown operation `{n}`")))?;
                if !kind.fits(component) {
                    return Err(Error::parse(field, format!("`{n}` does not belong to this component")));
                }
            }
        }
        for t in CellType::ALL {
            self.validate_blueprint(t)?;
        }
        Ok(())
    }

    fn validate_blueprint(&self, t: CellType) -> Result<()> {
        let edges = self.blueprint(t);
        let name = t.as_str();
        if !self.config.has(t) {
            if edges.is_empty() {
                return Ok(());
            }
            return Err(Error::parse(name, "blueprint given for a cell kind the stack does not contain"));
        }
        let b = self.config.nodes(t);
        let mut per_node: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in edges.iter().enumerate() {
            let field = format!("{name}[{i}]");
            let kind: OpKind = e
                .op_name
                .parse()
                .map_err(|_| Error::parse(format!("{field}.op_name"), format!("unknown operation `{}`", e.op_name)))?;
            if !kind.fits(t.component()) {
                return Err(Error::parse(
                    format!("{field}.op_name"),
                    format!("`{}` is not a {} operation", e.op_name, t.as_str()),
                ));
            }
            if e.to_node < CELL_INPUTS || e.to_node >= CELL_INPUTS + b {
                return Err(Error::parse(format!("{field}.to_node"), format!("node {} outside the cell", e.to_node)));
            }
            if e.from_node >= e.to_node {
                return Err(Error::parse(
                    format!("{field}.from_node"),
                    format!("edge {}->{} is not forward", e.from_node, e.to_node),
                ));
            }
            let sources = per_node.entry(e.to_node).or_default();
            if sources.contains(&e.from_node) {
                return Err(Error::parse(field, format!("duplicate edge {}->{}", e.from_node, e.to_node)));
            }
            sources.push(e.from_node);
        }
        for to in CELL_INPUTS..CELL_INPUTS + b {
            let have = per_node.get(&to).map_or(0, Vec::len);
            let want = if self.retain_all { to } else { 2.min(to) };
            if have != want {
                return Err(Error::parse(
                    name,
                    format!("node {to} keeps {have} incoming edges, expected {want}"),
                ));
            }
        }
        Ok(())
    }

    /// Canonical JSON: sorted keys, edges ordered by `(to_node, from_node)`.
    pub fn to_json(&self) -> String {
        let mut g = self.clone();
        g.canonicalize();
        let value = serde_json::to_value(&g).expect("genome serializes");
        let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut g: Genome = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            Error::parse(field_hint(&msg), msg)
        })?;
        g.validate()?;
        g.canonicalize();
        Ok(g)
    }
}

fn field_hint(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("genome").to_string()
}

pub fn serialize(g: &Genome) -> String {
    g.to_json()
}

pub fn deserialize(text: &str) -> Result<Genome> {
    Genome::from_json(text)
}

/// Incoming edges of one node after discretization.
#[derive(Clone, Copy, Debug)]
pub struct Candidate {
    pub from: usize,
    pub op: OpKind,
    pub strength: f64,
}

/// The two strongest candidates (or all of them), strongest first; ties
/// keep the lower source node.
pub fn retain_top(mut candidates: Vec<Candidate>, retain_all: bool) -> Vec<Candidate> {
    candidates.sort_by(|a, b| b.strength.total_cmp(&a.strength).then(a.from.cmp(&b.from)));
    if !retain_all {
        candidates.truncate(2);
    }
    candidates
}

/// Discretizes every cell kind of `net`.
pub fn extract_genome(net: &Supernet, retain_all: bool) -> Result<Genome> {
    let cfg = &net.config;
    let mut g = Genome {
        version: GENOME_VERSION,
        scope: GenomeScope {
            cnn: cfg.scope_cnn.clone(),
            seqnn: cfg.scope_seqnn.clone(),
        },
        cnn_normal: Vec::new(),
        cnn_reduce: Vec::new(),
        seqnn: Vec::new(),
        config: GenomeDims {
            cnn_cells: cfg.cnn_cells,
            seq_cells: cfg.seq_cells,
            cnn_nodes: cfg.cnn_nodes,
            seq_nodes: cfg.seq_nodes,
            channels: cfg.channels,
            hidden: cfg.hidden,
        },
        retain_all,
    };
    for t in CellType::ALL {
        let Some(cell) = net.cell_of(t) else { continue };
        let scope = &cell.spec.scope;
        let mut per_node: BTreeMap<usize, Vec<Candidate>> = BTreeMap::new();
        for edge in &cell.edges {
            let alpha = net.store.value(edge.alpha).data();
            let choice = discretize_edge(alpha, scope)?;
            per_node.entry(edge.to).or_default().push(Candidate {
                from: edge.from,
                op: choice.kind,
                strength: edge_strength(alpha, scope),
            });
        }
        let blueprint = g.blueprint_mut(t);
        for (to, cands) in per_node {
            blueprint.extend(retain_top(cands, retain_all).into_iter().map(|c| GeneEdge::new(c.from, to, c.op)));
        }
    }
    g.canonicalize();
    Ok(g)
}

pub fn detect_degenerate(g: &Genome) -> Degeneracy {
    let identity_only = |edges: &[GeneEdge]| {
        edges
            .iter()
            .all(|e| e.op_name == "skip_connect" || e.op_name == "none")
    };
    let cnn: Vec<GeneEdge> = g.cnn_normal.iter().chain(&g.cnn_reduce).cloned().collect();
    Degeneracy {
        cnn: !cnn.is_empty() && identity_only(&cnn),
        seqnn: !g.seqnn.is_empty() && identity_only(&g.seqnn),
    }
}

/// Graphviz rendering of one cell kind: inputs `c_{t-2}`, `c_{t-1}`,
/// intermediates `0..B`, and the output `c_{t}`, with one labelled edge per
/// retained edge.
pub fn export_dot(g: &Genome, cell_type: CellType) -> String {
    let edges = g.blueprint(cell_type);
    let b = g.config.nodes(cell_type);
    let combine = match cell_type {
        CellType::Seqnn => "mean",
        _ => "concat",
    };
    let mut s = String::new();
    let _ = writeln!(s, "digraph {} {{", cell_type.as_str());
    s.push_str("  rankdir=LR;\n");
    s.push_str("  node [style=filled, fontname=\"Helvetica\"];\n");
    s.push_str("  \"c_{t-2}\" [shape=box, fillcolor=darkseagreen2];\n");
    s.push_str("  \"c_{t-1}\" [shape=box, fillcolor=darkseagreen2];\n");
    for k in 0..b {
        let _ = writeln!(s, "  \"{k}\" [shape=circle, fillcolor=lightblue];");
    }
    let members: Vec<String> = (0..b).map(|k| k.to_string()).collect();
    let _ = writeln!(
        s,
        "  \"c_{{t}}\" [shape=box, fillcolor=palegoldenrod, label=\"c_{{t}} = {combine}({})\"];",
        members.join(", ")
    );
    let name = |node: usize| match node {
        0 => "c_{t-2}".to_string(),
        1 => "c_{t-1}".to_string(),
        n => (n - CELL_INPUTS).to_string(),
    };
    for e in edges {
        let _ = writeln!(
            s,
            "  \"{}\" -> \"{}\" [label=\"{}\"];",
            name(e.from_node),
            name(e.to_node),
            e.op_name
        );
    }
    s.push_str("}\n");
    s
}
