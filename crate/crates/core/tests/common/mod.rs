//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the code paths it is used to check.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use giim::case::{LesionRecord, PatientCase, ViewId};
use giim::data::{generate_synthetic, SyntheticSpec};
use giim::graph::{Edge, EdgeKind, GraphNode, HeteroGraph, NodeKind, NodeRole, Target};
use giim::imputation::{DbEntry, FeatureDatabase};
use giim::autodiff::Tape;
use giim::imputation::learnable_on_tape;
use giim::model::{Classifier, MhgConfig, MhgModel, NnBaseline};
use giim::tensor::Tensor;
use giim::{Dataset, Task};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_row(rng: &mut ChaCha8Rng, width: usize) -> Tensor {
    let v: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::row(&v)
}

/// A patient with `lesions` lesions of `views` views; `absent` lists
/// (lesion, view) slots left empty.
pub fn random_case(
    rng: &mut ChaCha8Rng,
    lesions: usize,
    views: usize,
    width: usize,
    classes: usize,
    absent: &[(usize, usize)],
) -> PatientCase {
    PatientCase {
        patient_id: "p".into(),
        lesions: (0..lesions)
            .map(|l| LesionRecord {
                lesion_id: format!("l{l}"),
                label: rng.random_range(0..classes),
                features: (0..views)
                    .map(|v| (!absent.contains(&(l, v))).then(|| random_row(rng, width)))
                    .collect(),
            })
            .collect(),
        exam_label: None,
        masked_view: None,
    }
}

/// An arbitrary heterogeneous graph: random node kinds (at least one of
/// each), random symmetric arcs of random kind, every multi-view node a
/// target.
pub fn random_graph(rng: &mut ChaCha8Rng, nodes: usize, width: usize, views: usize, classes: usize) -> HeteroGraph {
    assert!(nodes >= 2);
    let mut kinds: Vec<NodeKind> = (0..nodes)
        .map(|_| if rng.random_bool(0.5) { NodeKind::Single } else { NodeKind::Multi })
        .collect();
    kinds[0] = NodeKind::Single;
    kinds[nodes - 1] = NodeKind::Multi;
    let mut g = HeteroGraph::default();
    for (i, k) in kinds.iter().enumerate() {
        let (role, w) = match k {
            NodeKind::Single => (
                NodeRole::Single {
                    lesion: None,
                    view: ViewId(i % views),
                },
                width,
            ),
            NodeKind::Multi => (NodeRole::Multi { lesion: None }, width * views),
        };
        g.nodes.push(GraphNode {
            role,
            feature: random_row(rng, w),
            imputed: false,
            parts: Vec::new(),
        });
    }
    let edge_kinds = [
        EdgeKind::Intra,
        EdgeKind::SingleToMulti,
        EdgeKind::InterSingle,
        EdgeKind::InterMulti,
    ];
    for a in 0..nodes {
        for b in a + 1..nodes {
            if rng.random_bool(0.45) {
                let kind = edge_kinds[rng.random_range(0..4)];
                g.edges.push(Edge { src: a, dst: b, kind });
                g.edges.push(Edge { src: b, dst: a, kind });
            }
        }
    }
    g.targets = (0..nodes)
        .filter(|&i| kinds[i] == NodeKind::Multi)
        .map(|node| Target {
            node,
            label: rng.random_range(0..classes),
        })
        .collect();
    g
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for j in 0..cols {
        let mut s = 0.0;
        for i in 0..rows {
            s += x[i] * w.data()[i * cols + j];
        }
        out[j] = s;
    }
    out
}

/// Straight-line message passing: per node, mean of projected single-view
/// neighbors, mean of projected multi-view neighbors, concatenation with the
/// node state, kind-specific transform and bias, ReLU except on the last
/// layer. Returns one logit row per target.
pub fn dense_forward(model: &MhgModel, graph: &HeteroGraph) -> Vec<Vec<f64>> {
    let n = graph.nodes.len();
    let mut adj = vec![vec![false; n]; n];
    for e in &graph.edges {
        adj[e.dst][e.src] = true;
    }
    let param = |name: String| -> &Tensor {
        let i = model.params.find(&name).unwrap_or_else(|| panic!("no parameter {name}"));
        model.params.get(i)
    };
    let widths = model.config.layer_widths();
    let mut h: Vec<Vec<f64>> = graph.nodes.iter().map(|x| x.feature.data().to_vec()).collect();
    for (k, &d) in widths.iter().enumerate() {
        let last = k + 1 == widths.len();
        let w_single = param(format!("layer{k}.w_single"));
        let w_multi = param(format!("layer{k}.w_multi"));
        let mut next = Vec::with_capacity(n);
        for v in 0..n {
            let mut agg = [vec![0.0; d], vec![0.0; d]];
            let mut count = [0usize; 2];
            for u in 0..n {
                if !adj[v][u] {
                    continue;
                }
                let (slot, w) = match graph.nodes[u].kind() {
                    NodeKind::Single => (0, w_single),
                    NodeKind::Multi => (1, w_multi),
                };
                for (a, p) in agg[slot].iter_mut().zip(vec_mat(&h[u], w)) {
                    *a += p;
                }
                count[slot] += 1;
            }
            for s in 0..2 {
                if count[s] > 0 {
                    agg[s].iter_mut().for_each(|a| *a /= count[s] as f64);
                }
            }
            let kind = match graph.nodes[v].kind() {
                NodeKind::Single => "single",
                NodeKind::Multi => "multi",
            };
            let mut x = h[v].clone();
            x.extend_from_slice(&agg[0]);
            x.extend_from_slice(&agg[1]);
            let mut z = vec_mat(&x, param(format!("layer{k}.w_self.{kind}")));
            for (zj, b) in z.iter_mut().zip(param(format!("layer{k}.bias.{kind}")).data()) {
                *zj += b;
                if !last && *zj < 0.0 {
                    *zj = 0.0;
                }
            }
            next.push(z);
        }
        h = next;
    }
    graph.targets.iter().map(|t| h[t.node].clone()).collect()
}

/// Central difference of `f` at `x` along coordinate `j`.
pub fn central_difference(x: &mut [f64], j: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[j];
    x[j] = orig + h;
    let up = f(x);
    x[j] = orig - h;
    let down = f(x);
    x[j] = orig;
    (up - down) / (2.0 * h)
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Mean softmax cross-entropy computed from scratch.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / logits.len() as f64
}

pub fn plain_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        -1.0
    } else {
        dot / (na * nb)
    }
}

/// First index of the maximum.
pub fn first_argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Cosine retrieval by explicit enumeration of every entry's similarity.
pub fn brute_rag(db: &FeatureDatabase, query: &[(ViewId, Tensor)]) -> usize {
    let x: Vec<f64> = query.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let scores: Vec<f64> = db
        .entries
        .iter()
        .map(|e| {
            let xi: Vec<f64> = query.iter().flat_map(|(v, _)| e.features[v.0].data().to_vec()).collect();
            plain_cosine(&x, &xi)
        })
        .collect();
    first_argmax(&scores)
}

/// Difference vector: first view minus the sum of the others.
pub fn plain_delta(views: &[&[f64]]) -> Vec<f64> {
    let mut d = views[0].to_vec();
    for v in &views[1..] {
        for (a, b) in d.iter_mut().zip(v.iter()) {
            *a -= b;
        }
    }
    d
}

/// Textbook two-pass unbiased covariance of row vectors.
pub fn two_pass_covariance(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len() as f64;
    let c = rows[0].len();
    let mu: Vec<f64> = (0..c).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sigma = (0..c)
        .map(|a| {
            (0..c)
                .map(|b| rows.iter().map(|r| (r[a] - mu[a]) * (r[b] - mu[b])).sum::<f64>() / (n - 1.0))
                .collect()
        })
        .collect();
    (mu, sigma)
}

/// Covariance-similarity retrieval by explicit enumeration.
pub fn brute_covariance(db: &FeatureDatabase, available: &[ViewId], query: &[Tensor]) -> usize {
    let deltas: Vec<Vec<f64>> = db
        .entries
        .iter()
        .map(|e| {
            let v: Vec<&[f64]> = available.iter().map(|a| e.features[a.0].data()).collect();
            plain_delta(&v)
        })
        .collect();
    let (_, sigma) = two_pass_covariance(&deltas);
    let q: Vec<&[f64]> = query.iter().map(|t| t.data()).collect();
    let dq = plain_delta(&q);
    let scores: Vec<f64> = deltas
        .iter()
        .map(|dj| {
            let mut s = 0.0;
            for a in 0..dq.len() {
                for b in 0..dj.len() {
                    s += dq[a] * sigma[a][b] * dj[b];
                }
            }
            s
        })
        .collect();
    first_argmax(&scores)
}

/// Pairwise concordance with half credit for ties.
pub fn concordance(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0usize);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs as f64
}

/// Interaction benchmark: C=2, V=3, c=16, two lesions per patient, 200
/// training patients (400 lesions) and 75 test patients (150 lesions) drawn
/// around the same prototypes.
pub fn interaction_benchmark(seed: u64) -> (Dataset, Dataset) {
    let mut spec = SyntheticSpec::random(200, (2, 2), 2, 3, 16, 0.5, true, Task::Lesion, seed);
    spec.seed = seed;
    let train = generate_synthetic(&spec).expect("train set");
    spec.n_patients = 75;
    spec.seed = seed ^ 0x7e57;
    let test = generate_synthetic(&spec).expect("test set");
    (train, test)
}

/// Lesion-label counts.
pub fn label_counts(ds: &Dataset) -> HashMap<usize, usize> {
    let mut m = HashMap::new();
    for l in ds.cases.iter().flat_map(|c| &c.lesions) {
        *m.entry(l.label).or_insert(0) += 1;
    }
    m
}

/// MHG model with random biases, so oracles also exercise the bias path.
pub fn model(width: usize, views: usize, classes: usize, hidden: &[usize], seed: u64) -> MhgModel {
    let mut m = MhgModel::new(
        MhgConfig {
            feature_width: width,
            views,
            classes,
            hidden: hidden.to_vec(),
        },
        seed,
    )
    .unwrap();
    let mut r = rng(seed ^ 0xb1a5);
    for t in m.params.tensors_mut() {
        if t.rows() == 1 {
            t.data_mut().iter_mut().for_each(|b| *b = r.random_range(-0.2..0.2));
        }
    }
    m
}

pub fn assert_close(a: &[Vec<f64>], b: &Tensor, tol: f64) {
    assert_eq!(a.len(), b.rows());
    for (r, row) in a.iter().enumerate() {
        for (x, y) in row.iter().zip(b.row_slice(r)) {
            assert!((x - y).abs() <= tol, "row {r}: {x} vs {y}");
        }
    }
}

pub fn check_gradients(
    classifier: &mut Classifier,
    learnable: &mut Tensor,
    graph: &giim::graph::HeteroGraph,
    oracle_loss: impl Fn(&Classifier, &Tensor) -> f64,
) -> f64 {
    let labels = graph.target_labels();
    let (analytic, learn_grad) = {
        let tape = Tape::new();
        let vars = classifier.params().bind(&tape);
        let p = tape.leaf(learnable.clone());
        let logits = classifier
            .forward_with(&tape, &vars, graph, Some(learnable_on_tape(p).unwrap()))
            .unwrap();
        let loss = logits.softmax_cross_entropy(&labels).unwrap();
        let g = tape.backward(loss).unwrap();
        (vars.iter().map(|&v| g.wrt(v)).collect::<Vec<_>>(), g.wrt(p))
    };
    let mut worst: f64 = 0.0;
    for (i, grad) in analytic.iter().enumerate() {
        let mut values = classifier.params().get(i).data().to_vec();
        for j in 0..values.len() {
            let numeric = central_difference(&mut values, j, 1e-5, |x| {
                let mut c = classifier.clone();
                c.params_mut().get_mut(i).data_mut().copy_from_slice(x);
                oracle_loss(&c, learnable)
            });
            worst = worst.max(rel_err(grad.data()[j], numeric));
        }
    }
    let mut values = learnable.data().to_vec();
    for j in 0..values.len() {
        let numeric = central_difference(&mut values, j, 1e-5, |x| {
            let mut l = learnable.clone();
            l.data_mut().copy_from_slice(x);
            oracle_loss(classifier, &l)
        });
        worst = worst.max(rel_err(learn_grad.data()[j], numeric));
    }
    worst
}

/// Graph features with every imputed slot replaced by the normalized
/// row-mean of `param`, computed from scratch.
pub fn substitute(graph: &giim::graph::HeteroGraph, param: &Tensor) -> giim::graph::HeteroGraph {
    let c = param.cols();
    let mut v = vec![0.0; c];
    for r in 0..param.rows() {
        for j in 0..c {
            v[j] += param.data()[r * c + j] / param.rows() as f64;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut g = graph.clone();
    for n in 0..g.nodes.len() {
        if g.nodes[n].imputed {
            g.nodes[n].feature = Tensor::row(&v);
        }
    }
    for n in 0..g.nodes.len() {
        if !g.nodes[n].parts.is_empty() {
            let row: Vec<f64> = g.nodes[n].parts.iter().flat_map(|&p| g.nodes[p].feature.data().to_vec()).collect();
            g.nodes[n].feature = Tensor::row(&row);
        }
    }
    g
}

pub fn plain_mlp(nn: &NnBaseline, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = |i: usize| nn.params.get(i);
    x.iter()
        .map(|row| {
            let (w1, b1, w2, b2) = (p(0), p(1), p(2), p(3));
            let hidden: Vec<f64> = (0..w1.cols())
                .map(|j| {
                    let z: f64 = row.iter().enumerate().map(|(i, xi)| xi * w1.data()[i * w1.cols() + j]).sum::<f64>()
                        + b1.data()[j];
                    z.max(0.0)
                })
                .collect();
            (0..w2.cols())
                .map(|j| {
                    hidden.iter().enumerate().map(|(i, h)| h * w2.data()[i * w2.cols() + j]).sum::<f64>() + b2.data()[j]
                })
                .collect()
        })
        .collect()
}

/// `n` entries of random features; consecutive pairs share a patient.
pub fn random_db(r: &mut ChaCha8Rng, n: usize, views: usize, width: usize) -> FeatureDatabase {
    let entries = (0..n)
        .map(|i| DbEntry {
            id: format!("e{i}"),
            patient_id: format!("p{}", i / 2),
            features: (0..views).map(|_| random_row(r, width)).collect(),
        })
        .collect();
    FeatureDatabase::new(entries).unwrap()
}
