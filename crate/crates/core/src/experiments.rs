//! Batch experiments: the missing-rate × imputer sweep and the
//! finite-difference gradient check.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::case::{LesionRecord, PatientCase};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{build_lesion_graph, HeteroGraph};
use crate::imputation::{learnable_on_tape, Imputer, ImputerKind};
use crate::model::{Architecture, Classifier};
use crate::tensor::Tensor;
use crate::train::{derive_seed, evaluate, train, EvalMode, TrainConfig};

/// One (imputer, η) cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub imputer: ImputerKind,
    pub eta: f64,
    pub seed: u64,
    pub full_accuracy: f64,
    pub full_auc: Option<f64>,
    pub miss_accuracy: f64,
    pub miss_auc: Option<f64>,
}

/// Rows are imputers, columns are η × {full, miss}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub etas: Vec<f64>,
    pub imputers: Vec<ImputerKind>,
    /// Row-major: `cells[i * etas.len() + j]` is imputer `i`, η `j`.
    pub cells: Vec<SweepCell>,
}

/// Seed of the cell at (η index, imputer index).
pub fn cell_seed(master: u64, eta_index: usize, imputer_index: usize) -> u64 {
    derive_seed(derive_seed(master, 0x100 + eta_index as u64), 0x200 + imputer_index as u64)
}

/// Trains one model per (η, imputer) and evaluates it on the full-view and
/// miss-view test sets. `base` supplies everything except η, the imputer and
/// the seed; `base.seed` is the master seed.
pub fn run_sweep(
    train_set: &Dataset,
    test_set: &Dataset,
    etas: &[f64],
    imputers: &[ImputerKind],
    base: &TrainConfig,
) -> Result<SweepTable> {
    if etas.is_empty() || imputers.is_empty() {
        return Err(Error::Argument("sweep needs at least one η and one imputer".into()));
    }
    if let Some(e) = etas.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::Argument(format!("η {e} outside [0, 1]")));
    }
    let mut cells = Vec::with_capacity(etas.len() * imputers.len());
    for (i, &imputer) in imputers.iter().enumerate() {
        for (j, &eta) in etas.iter().enumerate() {
            let seed = cell_seed(base.seed, j, i);
            let config = TrainConfig {
                eta,
                imputer,
                seed,
                ..base.clone()
            };
            let ctx = || format!("sweep cell imputer={imputer} η={eta}");
            let (model, _) = train(train_set, &config).map_err(|e| e.context(ctx()))?;
            let full = evaluate(&model, test_set, EvalMode::FullView).map_err(|e| e.context(ctx()))?;
            let miss = evaluate(&model, test_set, EvalMode::MissView).map_err(|e| e.context(ctx()))?;
            log::info!("{}: full {:.4} miss {:.4}", ctx(), full.accuracy, miss.accuracy);
            cells.push(SweepCell {
                imputer,
                eta,
                seed,
                full_accuracy: full.accuracy,
                full_auc: full.auc_macro,
                miss_accuracy: miss.accuracy,
                miss_auc: miss.auc_macro,
            });
        }
    }
    Ok(SweepTable {
        etas: etas.to_vec(),
        imputers: imputers.to_vec(),
        cells,
    })
}

impl SweepTable {
    pub fn cell(&self, imputer_index: usize, eta_index: usize) -> &SweepCell {
        &self.cells[imputer_index * self.etas.len() + eta_index]
    }

    /// One JSON record per cell.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.cells {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Accuracy table aligned for reading.
    pub fn render(&self) -> String {
        let mut header = vec!["imputer".to_string()];
        for e in &self.etas {
            header.push(format!("η={e:.2} full"));
            header.push(format!("η={e:.2} miss"));
        }
        let mut rows = vec![header];
        for (i, k) in self.imputers.iter().enumerate() {
            let mut row = vec![k.to_string()];
            for j in 0..self.etas.len() {
                let c = self.cell(i, j);
                row.push(format!("{:.4}", c.full_accuracy));
                row.push(format!("{:.4}", c.miss_accuracy));
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|col| rows.iter().map(|r| r[col].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(col, (s, &w))| {
                    let pad = w - s.chars().count();
                    if col == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  "));
        }
        out
    }
}

/// Widths used by `gradcheck` when none are given.
pub const GRADCHECK_WIDTHS: [usize; 5] = [8, 8, 8, 8, 8];
const GRADCHECK_STEP: f64 = 1e-5;
const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Below this magnitude gradients are compared absolutely.
const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    /// `layer{k}` or `imputer`.
    pub group: String,
    pub values_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub widths: Vec<usize>,
    pub seed: u64,
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// A three-lesion, three-view patient with one absent slot, for gradient
/// checks.
fn gradcheck_case(rng: &mut ChaCha8Rng, width: usize, classes: usize) -> PatientCase {
    let lesions = (0..3)
        .map(|l| LesionRecord {
            lesion_id: format!("l{l}"),
            label: l % classes,
            features: (0..3)
                .map(|v| {
                    (l != 1 || v != 2).then(|| {
                        let row: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
                        Tensor::row(&row)
                    })
                })
                .collect(),
        })
        .collect();
    PatientCase {
        patient_id: "gradcheck".into(),
        lesions,
        exam_label: None,
        masked_view: None,
    }
}

fn loss_and_grads(
    classifier: &Classifier,
    learnable: &Arc<Tensor>,
    graph: &HeteroGraph,
    labels: &[usize],
    corrupt: Option<f64>,
    with_grads: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    if let Some(f) = corrupt {
        tape.corrupt_matmul_backward(f);
    }
    let vars = classifier.params().bind(&tape);
    let param = tape.leaf_shared(Arc::clone(learnable));
    let logits = classifier.forward_with(&tape, &vars, graph, Some(learnable_on_tape(param)?))?;
    let loss = logits.softmax_cross_entropy(labels)?;
    let value = loss.value().item();
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(loss)?;
    let mut out: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
    out.push(grads.take(param));
    Ok((value, out))
}

/// Compares every parameter gradient of a reduced message-passing model, and
/// of a learnable imputer feeding it, with central differences.
pub fn run_gradcheck(widths: &[usize], seed: u64) -> Result<GradcheckReport> {
    gradcheck_impl(widths, seed, None)
}

/// [`run_gradcheck`] with the matrix-product backward scaled by `factor`.
#[doc(hidden)]
pub fn run_gradcheck_corrupted(widths: &[usize], seed: u64, factor: f64) -> Result<GradcheckReport> {
    gradcheck_impl(widths, seed, Some(factor))
}

fn gradcheck_impl(widths: &[usize], seed: u64, corrupt: Option<f64>) -> Result<GradcheckReport> {
    if widths.is_empty() || widths.iter().any(|&w| w == 0 || w >= 16) {
        return Err(Error::Argument(format!(
            "gradcheck widths must be in 1..16, got {widths:?}"
        )));
    }
    let (width, classes) = (4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = gradcheck_case(&mut rng, width, classes);
    let arch = Architecture::Giim { hidden: widths.to_vec() };
    let mut classifier = Classifier::new(&arch, width, 3, classes, derive_seed(seed, 1))?;
    // Nonzero biases so their gradients are exercised away from zero.
    for t in classifier.params_mut().tensors_mut() {
        if t.rows() == 1 {
            t.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
    let imputer = Imputer::learnable(width, derive_seed(seed, 2));
    let mut learnable = Arc::clone(imputer.learnable.as_ref().expect("learnable imputer has a parameter"));
    let graph = build_lesion_graph(&case, &imputer.impute_lesions(&case, None)?)?;
    let labels = graph.target_labels();

    let (_, analytic) = loss_and_grads(&classifier, &learnable, &graph, &labels, corrupt, true)?;
    let names: Vec<String> = classifier.params().iter().map(|(n, _)| n.to_string()).collect();
    let mut groups: Vec<GroupError> = Vec::new();
    let mut record = |group: String, err: f64| match groups.iter_mut().find(|g| g.group == group) {
        Some(g) => {
            g.values_checked += 1;
            g.max_rel_error = g.max_rel_error.max(err);
        }
        None => groups.push(GroupError {
            group,
            values_checked: 1,
            max_rel_error: err,
        }),
    };

    let loss_at = |c: &Classifier, l: &Arc<Tensor>| -> Result<f64> {
        Ok(loss_and_grads(c, l, &graph, &labels, None, false)?.0)
    };
    for (p, name) in names.iter().enumerate() {
        let group = name.split('.').next().unwrap_or(name).to_string();
        for j in 0..classifier.params().get(p).numel() {
            let orig = classifier.params().get(p).data()[j];
            classifier.params_mut().get_mut(p).data_mut()[j] = orig + GRADCHECK_STEP;
            let up = loss_at(&classifier, &learnable)?;
            classifier.params_mut().get_mut(p).data_mut()[j] = orig - GRADCHECK_STEP;
            let down = loss_at(&classifier, &learnable)?;
            classifier.params_mut().get_mut(p).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
            record(group.clone(), relative_error(analytic[p].data()[j], numeric));
        }
    }
    let learn_grad = analytic.last().expect("imputer gradient");
    for j in 0..learnable.numel() {
        let orig = learnable.data()[j];
        Arc::make_mut(&mut learnable).data_mut()[j] = orig + GRADCHECK_STEP;
        let up = loss_at(&classifier, &learnable)?;
        Arc::make_mut(&mut learnable).data_mut()[j] = orig - GRADCHECK_STEP;
        let down = loss_at(&classifier, &learnable)?;
        Arc::make_mut(&mut learnable).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
        record("imputer".into(), relative_error(learn_grad.data()[j], numeric));
    }

    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        widths: widths.to_vec(),
        seed,
        groups,
        max_rel_error,
        passed: max_rel_error < GRADCHECK_TOLERANCE,
    })
}
