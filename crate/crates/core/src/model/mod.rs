//! Classifiers over [`HeteroGraph`]s: the heterogeneous message-passing
//! network and a fully connected baseline.

pub mod baseline;
pub mod mhg;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::case::ViewId;
use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, NodeKind, NodeRole};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use baseline::{NnBaseline, NnConfig};
pub use mhg::{HeteroSageLayer, MhgConfig, MhgModel, REFERENCE_HIDDEN};

/// Input feature matrices of a graph, one row per node of each kind in graph
/// order.
#[derive(Clone, Copy, Debug)]
pub struct GraphInputs<'t> {
    pub single: Var<'t>,
    pub multi: Var<'t>,
}

impl<'t> GraphInputs<'t> {
    /// Inputs taken verbatim from the node features.
    pub fn constant(tape: &'t Tape, graph: &HeteroGraph) -> Result<Self> {
        Self::build(tape, graph, None)
    }

    /// Inputs where every imputed single-view slot is replaced by `learnable`
    /// (when given), so gradients reach the imputer parameter. Multi-view rows
    /// are rebuilt as concatenations of their parts.
    pub fn build(tape: &'t Tape, graph: &HeteroGraph, learnable: Option<Var<'t>>) -> Result<Self> {
        let substitute = learnable.is_some() && graph.nodes.iter().any(|n| n.imputed);
        let single_nodes = graph.nodes_of(NodeKind::Single);
        let multi_nodes = graph.nodes_of(NodeKind::Multi);
        if !substitute {
            return Ok(GraphInputs {
                single: tape.leaf(stack_features(graph, &single_nodes)?),
                multi: tape.leaf(stack_features(graph, &multi_nodes)?),
            });
        }
        let slot = |n: usize| -> Var<'t> {
            match learnable {
                Some(l) if graph.nodes[n].imputed => l,
                _ => tape.leaf(graph.nodes[n].feature.clone()),
            }
        };
        let single_rows: Vec<Var<'t>> = single_nodes.iter().map(|&n| slot(n)).collect();
        let multi_rows = multi_nodes
            .iter()
            .map(|&m| {
                let parts: Vec<Var<'t>> = graph.nodes[m].parts.iter().map(|&p| slot(p)).collect();
                tape.concat_cols(&parts)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GraphInputs {
            single: tape.stack_rows(&single_rows)?,
            multi: tape.stack_rows(&multi_rows)?,
        })
    }
}

fn stack_features(graph: &HeteroGraph, nodes: &[usize]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = nodes
        .iter()
        .map(|&n| graph.nodes[n].feature.data().to_vec())
        .collect();
    Tensor::from_rows(&rows)
}

/// One row per target: the concatenation of the target's view features for
/// `views`, taken from the target's multi-view node parts. Imputed parts are
/// replaced by `learnable` when given.
pub fn target_rows<'t>(
    tape: &'t Tape,
    graph: &HeteroGraph,
    learnable: Option<Var<'t>>,
    views: &[ViewId],
) -> Result<Var<'t>> {
    let mut parts_per_target = Vec::with_capacity(graph.targets.len());
    for t in &graph.targets {
        let node = &graph.nodes[t.node];
        if node.kind() != NodeKind::Multi {
            return Err(Error::Argument(
                "baseline inputs need multi-view target nodes".into(),
            ));
        }
        let mut chosen = Vec::with_capacity(views.len());
        for &v in views {
            let part = node
                .parts
                .iter()
                .copied()
                .find(|&p| matches!(graph.nodes[p].role, NodeRole::Single { view, .. } if view == v))
                .ok_or_else(|| Error::Argument(format!("target has no {v} part")))?;
            chosen.push(part);
        }
        parts_per_target.push(chosen);
    }
    let substitute = learnable.is_some() && graph.nodes.iter().any(|n| n.imputed);
    if !substitute {
        let rows: Vec<Vec<f64>> = parts_per_target
            .iter()
            .map(|parts| {
                parts
                    .iter()
                    .flat_map(|&p| graph.nodes[p].feature.data().iter().copied())
                    .collect()
            })
            .collect();
        return Ok(tape.leaf(Tensor::from_rows(&rows)?));
    }
    let rows = parts_per_target
        .iter()
        .map(|parts| {
            let vars: Vec<Var<'t>> = parts
                .iter()
                .map(|&p| match learnable {
                    Some(l) if graph.nodes[p].imputed => l,
                    _ => tape.leaf(graph.nodes[p].feature.clone()),
                })
                .collect();
            tape.concat_cols(&vars)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.stack_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    Giim { hidden: Vec<usize> },
    Nn { hidden: usize, #[serde(default)] input_views: Vec<ViewId> },
}

impl Architecture {
    pub fn reference_giim() -> Self {
        Architecture::Giim {
            hidden: REFERENCE_HIDDEN.to_vec(),
        }
    }
}

/// A trainable graph classifier.
#[derive(Clone, Debug, PartialEq)]
pub enum Classifier {
    Mhg(MhgModel),
    Nn(NnBaseline),
}

impl Classifier {
    pub fn new(arch: &Architecture, feature_width: usize, views: usize, classes: usize, seed: u64) -> Result<Self> {
        Ok(match arch {
            Architecture::Giim { hidden } => Classifier::Mhg(MhgModel::new(
                MhgConfig {
                    feature_width,
                    views,
                    classes,
                    hidden: hidden.clone(),
                },
                seed,
            )?),
            Architecture::Nn { hidden, input_views } => Classifier::Nn(NnBaseline::new(
                NnConfig {
                    feature_width,
                    views,
                    classes,
                    hidden: *hidden,
                    input_views: input_views.clone(),
                },
                seed,
            )?),
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Classifier::Mhg(m) => Architecture::Giim {
                hidden: m.config.hidden.clone(),
            },
            Classifier::Nn(n) => Architecture::Nn {
                hidden: n.config.hidden,
                input_views: n.config.input_views.clone(),
            },
        }
    }

    pub fn from_params(
        arch: &Architecture,
        feature_width: usize,
        views: usize,
        classes: usize,
        params: ParamStore,
    ) -> Result<Self> {
        Ok(match arch {
            Architecture::Giim { hidden } => Classifier::Mhg(MhgModel::from_params(
                MhgConfig {
                    feature_width,
                    views,
                    classes,
                    hidden: hidden.clone(),
                },
                params,
            )?),
            Architecture::Nn { hidden, input_views } => Classifier::Nn(NnBaseline::from_params(
                NnConfig {
                    feature_width,
                    views,
                    classes,
                    hidden: *hidden,
                    input_views: input_views.clone(),
                },
                params,
            )?),
        })
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Classifier::Mhg(m) => &m.params,
            Classifier::Nn(n) => &n.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Classifier::Mhg(m) => &mut m.params,
            Classifier::Nn(n) => &mut n.params,
        }
    }

    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        graph: &HeteroGraph,
        learnable: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        match self {
            Classifier::Mhg(m) => {
                let inputs = GraphInputs::build(tape, graph, learnable)?;
                m.forward_with(tape, vars, graph, inputs)
            }
            Classifier::Nn(n) => n.forward_with(tape, vars, graph, learnable),
        }
    }

    pub fn forward(&self, graph: &HeteroGraph) -> Result<Tensor> {
        match self {
            Classifier::Mhg(m) => m.forward(graph),
            Classifier::Nn(n) => n.forward(graph),
        }
    }
}
