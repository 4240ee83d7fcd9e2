//! Per-case multi-heterogeneous graphs.
//!
//! A lesion-level graph has one single-view node per (lesion, view) and one
//! multi-view node per lesion, joined by four undirected edge families:
//!
//! * intra: different views of the same lesion,
//! * single-to-multi: a view node to its lesion's summary node,
//! * inter-single: the same view of different lesions,
//! * inter-multi: summary nodes of different lesions.
//!
//! The exam-level graph collapses each view into one node holding the mean
//! of that view's lesion features.

use std::collections::HashMap;

use crate::case::{PatientCase, ViewId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Single,
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRole {
    /// `lesion` is `None` for exam-level view nodes.
    Single { lesion: Option<usize>, view: ViewId },
    Multi { lesion: Option<usize> },
}

impl NodeRole {
    pub fn kind(&self) -> NodeKind {
        match self {
            NodeRole::Single { .. } => NodeKind::Single,
            NodeRole::Multi { .. } => NodeKind::Multi,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphNode {
    pub role: NodeRole,
    pub feature: Tensor,
    /// Single-view node whose feature came from an imputer.
    pub imputed: bool,
    /// For multi-view nodes: the single-view nodes concatenated, in view order.
    pub parts: Vec<usize>,
}

impl GraphNode {
    pub fn kind(&self) -> NodeKind {
        self.role.kind()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Intra,
    SingleToMulti,
    InterSingle,
    InterMulti,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub node: usize,
    pub label: usize,
}

/// Undirected edge counts per family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeCounts {
    pub intra: usize,
    pub s2m: usize,
    pub inter_s: usize,
    pub inter_m: usize,
}

/// Closed-form undirected edge counts of a lesion-level graph with `lesions`
/// lesions and `views` views.
pub fn edge_counts(lesions: usize, views: usize) -> EdgeCounts {
    EdgeCounts {
        intra: lesions * views * views.saturating_sub(1) / 2,
        s2m: lesions * views,
        inter_s: views * lesions * lesions.saturating_sub(1) / 2,
        inter_m: lesions * lesions.saturating_sub(1) / 2,
    }
}

#[derive(Clone, Debug, Default)]
pub struct HeteroGraph {
    pub nodes: Vec<GraphNode>,
    /// Directed arcs; every undirected relation appears once in each direction.
    pub edges: Vec<Edge>,
    pub targets: Vec<Target>,
}

impl HeteroGraph {
    fn add_node(&mut self, node: GraphNode) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn connect(&mut self, a: usize, b: usize, kind: EdgeKind) {
        debug_assert_ne!(a, b);
        self.edges.push(Edge { src: a, dst: b, kind });
        self.edges.push(Edge { src: b, dst: a, kind });
    }

    pub fn node_count(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind() == kind).count()
    }

    /// Node indices of one kind, in graph order.
    pub fn nodes_of(&self, kind: NodeKind) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].kind() == kind)
            .collect()
    }

    pub fn undirected_counts(&self) -> EdgeCounts {
        let mut counts = EdgeCounts::default();
        for e in &self.edges {
            let slot = match e.kind {
                EdgeKind::Intra => &mut counts.intra,
                EdgeKind::SingleToMulti => &mut counts.s2m,
                EdgeKind::InterSingle => &mut counts.inter_s,
                EdgeKind::InterMulti => &mut counts.inter_m,
            };
            *slot += 1;
        }
        counts.intra /= 2;
        counts.s2m /= 2;
        counts.inter_s /= 2;
        counts.inter_m /= 2;
        counts
    }

    /// Incoming neighbors of every node, split by source kind.
    pub fn neighbors_by_kind(&self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let mut single = vec![Vec::new(); self.nodes.len()];
        let mut multi = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            match self.nodes[e.src].kind() {
                NodeKind::Single => single[e.dst].push(e.src),
                NodeKind::Multi => multi[e.dst].push(e.src),
            }
        }
        (single, multi)
    }

    /// Width of the input features of a node kind, if the kind is present.
    pub fn input_width(&self, kind: NodeKind) -> Option<usize> {
        self.nodes
            .iter()
            .find(|n| n.kind() == kind)
            .map(|n| n.feature.cols())
    }

    pub fn target_labels(&self) -> Vec<usize> {
        self.targets.iter().map(|t| t.label).collect()
    }

    /// True when every node reaches every other node.
    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.src].push(e.dst);
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &m in &adj[n] {
                if !seen[m] {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Imputed single-view features of a lesion-level graph, keyed by
/// (lesion index, view).
pub type LesionImputations = HashMap<(usize, ViewId), Tensor>;

/// Imputed view-node features of an exam-level graph.
pub type ExamImputations = HashMap<ViewId, Tensor>;

pub fn build_lesion_graph(case: &PatientCase, imputed: &LesionImputations) -> Result<HeteroGraph> {
    if case.lesions.is_empty() {
        return Err(Error::Argument(format!(
            "patient {} has no lesions",
            case.patient_id
        )));
    }
    let views = case.view_count();
    let lesions = case.lesions.len();
    let mut g = HeteroGraph::default();

    // single[j][v]
    let mut single = vec![Vec::with_capacity(views); lesions];
    for (j, lesion) in case.lesions.iter().enumerate() {
        if lesion.features.len() != views {
            return Err(Error::Dimension(format!(
                "patient {}, lesion {}: {} view slots, expected {}",
                case.patient_id,
                lesion.lesion_id,
                lesion.features.len(),
                views
            )));
        }
        for v in 0..views {
            let view = ViewId(v);
            let (feature, was_imputed) = match (lesion.feature(view), imputed.get(&(j, view))) {
                (Some(f), _) => (f.clone(), false),
                (None, Some(f)) => (f.clone(), true),
                (None, None) => {
                    return Err(Error::Incomplete(format!(
                        "patient {}, lesion {}, view {} has no feature and no imputation",
                        case.patient_id, lesion.lesion_id, v
                    )))
                }
            };
            let id = g.add_node(GraphNode {
                role: NodeRole::Single {
                    lesion: Some(j),
                    view,
                },
                feature,
                imputed: was_imputed,
                parts: Vec::new(),
            });
            single[j].push(id);
        }
    }

    let mut multi = Vec::with_capacity(lesions);
    for (j, parts) in single.iter().enumerate() {
        let features: Vec<Tensor> = parts.iter().map(|&n| g.nodes[n].feature.clone()).collect();
        let id = g.add_node(GraphNode {
            role: NodeRole::Multi { lesion: Some(j) },
            feature: Tensor::concat(&features)?,
            imputed: false,
            parts: parts.clone(),
        });
        multi.push(id);
    }

    for parts in &single {
        for v in 0..views {
            for w in v + 1..views {
                g.connect(parts[v], parts[w], EdgeKind::Intra);
            }
        }
    }
    for (j, parts) in single.iter().enumerate() {
        for &n in parts {
            g.connect(n, multi[j], EdgeKind::SingleToMulti);
        }
    }
    for v in 0..views {
        for j in 0..lesions {
            for k in j + 1..lesions {
                g.connect(single[j][v], single[k][v], EdgeKind::InterSingle);
            }
        }
    }
    for j in 0..lesions {
        for k in j + 1..lesions {
            g.connect(multi[j], multi[k], EdgeKind::InterMulti);
        }
    }

    g.targets = case
        .lesions
        .iter()
        .zip(&multi)
        .map(|(l, &node)| Target {
            node,
            label: l.label,
        })
        .collect();
    Ok(g)
}

pub fn build_exam_graph(case: &PatientCase, imputed: &ExamImputations) -> Result<HeteroGraph> {
    let label = case.exam_label.ok_or_else(|| {
        Error::Argument(format!("patient {} has no exam label", case.patient_id))
    })?;
    if case.lesions.is_empty() {
        return Err(Error::Argument(format!(
            "patient {} has no lesions",
            case.patient_id
        )));
    }
    let views = case.view_count();
    let mut g = HeteroGraph::default();
    let mut view_nodes = Vec::with_capacity(views);
    for v in 0..views {
        let view = ViewId(v);
        let present: Vec<Tensor> = case
            .lesions
            .iter()
            .filter_map(|l| l.feature(view).cloned())
            .collect();
        let (feature, was_imputed) = if let Some(first) = present.first() {
            (Tensor::mean_rows(&present, first.cols())?, false)
        } else if let Some(f) = imputed.get(&view) {
            (f.clone(), true)
        } else {
            return Err(Error::Incomplete(format!(
                "patient {}, view {} has no lesion feature and no imputation",
                case.patient_id, v
            )));
        };
        view_nodes.push(g.add_node(GraphNode {
            role: NodeRole::Single { lesion: None, view },
            feature,
            imputed: was_imputed,
            parts: Vec::new(),
        }));
    }
    let features: Vec<Tensor> = view_nodes
        .iter()
        .map(|&n| g.nodes[n].feature.clone())
        .collect();
    let multi = g.add_node(GraphNode {
        role: NodeRole::Multi { lesion: None },
        feature: Tensor::concat(&features)?,
        imputed: false,
        parts: view_nodes.clone(),
    });
    for &n in &view_nodes {
        g.connect(n, multi, EdgeKind::SingleToMulti);
    }
    for v in 0..views {
        for w in v + 1..views {
            g.connect(view_nodes[v], view_nodes[w], EdgeKind::Intra);
        }
    }
    g.targets = vec![Target { node: multi, label }];
    Ok(g)
}
