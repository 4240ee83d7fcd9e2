//! Heterogeneous message passing.
//!
//! Each layer computes, for every node `n`,
//!
//! ```text
//! s_n  = mean { h_u · W_single : u single-view neighbor of n }
//! m_n  = mean { h_u · W_multi  : u multi-view neighbor of n }
//! h'_n = σ( [h_n ‖ s_n ‖ m_n] · W_self[kind(n)] + b[kind(n)] )
//! ```
//!
//! with row-vector features, zero for empty neighbor sets, and no activation
//! on the last layer. Node states are kept as one matrix per node kind so the
//! first layer can accept different input widths for the two kinds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, NodeKind};
use crate::model::GraphInputs;
use crate::params::{glorot_uniform, ParamStore};
use crate::tensor::Tensor;

/// Hidden widths of the reference architecture.
pub const REFERENCE_HIDDEN: [usize; 5] = [512, 256, 128, 64, 32];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhgConfig {
    pub feature_width: usize,
    pub views: usize,
    pub classes: usize,
    /// Widths of the activated layers; an output layer of width `classes`
    /// follows them.
    pub hidden: Vec<usize>,
}

impl MhgConfig {
    pub fn reference(feature_width: usize, views: usize, classes: usize) -> Self {
        MhgConfig {
            feature_width,
            views,
            classes,
            hidden: REFERENCE_HIDDEN.to_vec(),
        }
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = self.hidden.clone();
        w.push(self.classes);
        w
    }

    pub fn single_width(&self) -> usize {
        self.feature_width
    }

    pub fn multi_width(&self) -> usize {
        self.feature_width * self.views
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_width == 0 || self.views == 0 {
            return Err(Error::Config("feature width and view count must be ≥ 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need ≥ 2 classes, got {}", self.classes)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config(format!("zero-width layer in {:?}", self.hidden)));
        }
        Ok(())
    }
}

/// Parameter indices of one layer inside the model's [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroSageLayer {
    pub w_single: usize,
    pub w_multi: usize,
    pub w_self_single: usize,
    pub w_self_multi: usize,
    pub bias_single: usize,
    pub bias_multi: usize,
    pub out_width: usize,
    pub activate: bool,
}

impl HeteroSageLayer {
    fn w_self(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Single => self.w_self_single,
            NodeKind::Multi => self.w_self_multi,
        }
    }

    fn bias(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Single => self.bias_single,
            NodeKind::Multi => self.bias_multi,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhgModel {
    pub config: MhgConfig,
    pub params: ParamStore,
    pub layers: Vec<HeteroSageLayer>,
}

/// Neighbor lists of a graph re-indexed into per-kind row positions.
pub(crate) struct KindIndex {
    /// Graph node → row within its kind's matrix.
    pub row: Vec<usize>,
    pub single_nodes: Vec<usize>,
    pub multi_nodes: Vec<usize>,
    /// For destination kind: (single-source rows, multi-source rows) per node.
    pub single_dst: (Vec<Vec<usize>>, Vec<Vec<usize>>),
    pub multi_dst: (Vec<Vec<usize>>, Vec<Vec<usize>>),
}

impl KindIndex {
    pub fn new(graph: &HeteroGraph) -> Self {
        let single_nodes = graph.nodes_of(NodeKind::Single);
        let multi_nodes = graph.nodes_of(NodeKind::Multi);
        let mut row = vec![0; graph.nodes.len()];
        for (r, &n) in single_nodes.iter().enumerate() {
            row[n] = r;
        }
        for (r, &n) in multi_nodes.iter().enumerate() {
            row[n] = r;
        }
        let (from_single, from_multi) = graph.neighbors_by_kind();
        let lists = |nodes: &[usize]| {
            let s = nodes
                .iter()
                .map(|&n| from_single[n].iter().map(|&u| row[u]).collect())
                .collect();
            let m = nodes
                .iter()
                .map(|&n| from_multi[n].iter().map(|&u| row[u]).collect())
                .collect();
            (s, m)
        };
        let single_dst = lists(&single_nodes);
        let multi_dst = lists(&multi_nodes);
        KindIndex {
            row,
            single_nodes,
            multi_nodes,
            single_dst,
            multi_dst,
        }
    }
}

impl MhgModel {
    pub fn new(config: MhgConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let widths = config.layer_widths();
        let (mut in_single, mut in_multi) = (config.single_width(), config.multi_width());
        for (k, &d) in widths.iter().enumerate() {
            let activate = k + 1 < widths.len();
            let w_single = params.push(format!("layer{k}.w_single"), glorot_uniform(&mut rng, in_single, d));
            let w_multi = params.push(format!("layer{k}.w_multi"), glorot_uniform(&mut rng, in_multi, d));
            let w_self_single = params.push(
                format!("layer{k}.w_self.single"),
                glorot_uniform(&mut rng, in_single + 2 * d, d),
            );
            let w_self_multi = params.push(
                format!("layer{k}.w_self.multi"),
                glorot_uniform(&mut rng, in_multi + 2 * d, d),
            );
            let bias_single = params.push(format!("layer{k}.bias.single"), Tensor::zeros(&[1, d]));
            let bias_multi = params.push(format!("layer{k}.bias.multi"), Tensor::zeros(&[1, d]));
            layers.push(HeteroSageLayer {
                w_single,
                w_multi,
                w_self_single,
                w_self_multi,
                bias_single,
                bias_multi,
                out_width: d,
                activate,
            });
            in_single = d;
            in_multi = d;
        }
        Ok(MhgModel {
            config,
            params,
            layers,
        })
    }

    /// Rebuilds a model around existing parameters, checking every shape.
    pub fn from_params(config: MhgConfig, params: ParamStore) -> Result<Self> {
        let template = MhgModel::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((tn, tt), (n, t)) in template.params.iter().zip(params.iter()) {
            if tn != n || tt.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    n,
                    t.shape(),
                    tn,
                    tt.shape()
                )));
            }
        }
        Ok(MhgModel {
            config,
            params,
            layers: template.layers,
        })
    }

    pub fn check_graph(&self, graph: &HeteroGraph) -> Result<()> {
        for (kind, expected) in [
            (NodeKind::Single, self.config.single_width()),
            (NodeKind::Multi, self.config.multi_width()),
        ] {
            for n in &graph.nodes {
                if n.kind() == kind && n.feature.shape() != [1, expected] {
                    return Err(Error::Config(format!(
                        "{:?} node feature width: expected {}, got shape {:?}",
                        kind,
                        expected,
                        n.feature.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    fn layer_on_tape<'t>(
        &self,
        layer: &HeteroSageLayer,
        tape: &'t Tape,
        vars: &[Var<'t>],
        index: &KindIndex,
        hs: Var<'t>,
        hm: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let ps = hs.matmul(vars[layer.w_single])?;
        let pm = hm.matmul(vars[layer.w_multi])?;
        let update = |kind: NodeKind, h: Var<'t>, lists: &(Vec<Vec<usize>>, Vec<Vec<usize>>)| -> Result<Var<'t>> {
            let agg_s = ps.gather_mean(&lists.0)?;
            let agg_m = pm.gather_mean(&lists.1)?;
            let x = tape.concat_cols(&[h, agg_s, agg_m])?;
            let z = x
                .matmul(vars[layer.w_self(kind)])?
                .add_row(vars[layer.bias(kind)])?;
            Ok(if layer.activate { z.relu() } else { z })
        };
        let hs_next = update(NodeKind::Single, hs, &index.single_dst)?;
        let hm_next = update(NodeKind::Multi, hm, &index.multi_dst)?;
        Ok((hs_next, hm_next))
    }

    /// Runs every layer and returns the logits at the graph's targets, one row
    /// per target in target order.
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        graph: &HeteroGraph,
        inputs: GraphInputs<'t>,
    ) -> Result<Var<'t>> {
        self.check_graph(graph)?;
        let index = KindIndex::new(graph);
        let (mut hs, mut hm) = (inputs.single, inputs.multi);
        for layer in &self.layers {
            (hs, hm) = self.layer_on_tape(layer, tape, vars, &index, hs, hm)?;
        }
        readout(tape, graph, &index, hs, hm)
    }

    /// Forward pass on plain tensors.
    pub fn forward(&self, graph: &HeteroGraph) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let inputs = GraphInputs::constant(&tape, graph)?;
        let logits = self.forward_with(&tape, &vars, graph, inputs)?;
        Ok(logits.value().as_ref().clone())
    }

    /// Per-node aggregates `(single, multi)` of layer `k` at node `n`, given
    /// current node states `h` in graph order.
    pub fn aggregate(&self, k: usize, graph: &HeteroGraph, h: &[Tensor], n: usize) -> Result<(Tensor, Tensor)> {
        let layer = &self.layers[k];
        let (from_single, from_multi) = graph.neighbors_by_kind();
        let project = |list: &[usize], w: usize| -> Result<Tensor> {
            let rows = list
                .iter()
                .map(|&u| h[u].matmul(self.params.get(w)))
                .collect::<Result<Vec<_>>>()?;
            Tensor::mean_rows(&rows, layer.out_width)
        };
        Ok((
            project(&from_single[n], layer.w_single)?,
            project(&from_multi[n], layer.w_multi)?,
        ))
    }

    /// Applies layer `k` to node states `h` given in graph order.
    pub fn layer_forward(&self, k: usize, graph: &HeteroGraph, h: &[Tensor]) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let index = KindIndex::new(graph);
        let stack = |nodes: &[usize]| -> Result<Var<'_>> {
            let rows: Vec<Vec<f64>> = nodes.iter().map(|&n| h[n].data().to_vec()).collect();
            let t = if rows.is_empty() {
                Tensor::zeros(&[0, 1])
            } else {
                Tensor::from_rows(&rows)?
            };
            Ok(tape.leaf(t))
        };
        let hs = stack(&index.single_nodes)?;
        let hm = stack(&index.multi_nodes)?;
        let (hs, hm) = self.layer_on_tape(&self.layers[k], &tape, &vars, &index, hs, hm)?;
        let (hs, hm) = (hs.value(), hm.value());
        Ok((0..graph.nodes.len())
            .map(|n| {
                let src = match graph.nodes[n].kind() {
                    NodeKind::Single => &hs,
                    NodeKind::Multi => &hm,
                };
                Tensor::row(src.row_slice(index.row[n]))
            })
            .collect())
    }
}

fn readout<'t>(tape: &'t Tape, graph: &HeteroGraph, index: &KindIndex, hs: Var<'t>, hm: Var<'t>) -> Result<Var<'t>> {
    if graph.targets.is_empty() {
        return Err(Error::Argument("graph has no targets".into()));
    }
    let all_multi = graph
        .targets
        .iter()
        .all(|t| graph.nodes[t.node].kind() == NodeKind::Multi);
    if all_multi {
        let rows: Vec<usize> = graph.targets.iter().map(|t| index.row[t.node]).collect();
        return hm.select_rows(&rows);
    }
    let parts = graph
        .targets
        .iter()
        .map(|t| {
            let src = match graph.nodes[t.node].kind() {
                NodeKind::Single => hs,
                NodeKind::Multi => hm,
            };
            src.select_rows(&[index.row[t.node]])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.stack_rows(&parts)
}
