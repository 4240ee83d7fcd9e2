//! Training over patient graphs, the missing-view masking protocol, and
//! evaluation.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Tape};
use crate::case::{PatientCase, ViewId};
use crate::data::{Dataset, Manifest, Task};
use crate::error::{Error, Result};
use crate::graph::{build_exam_graph, build_lesion_graph, HeteroGraph};
use crate::imputation::{learnable_on_tape, Imputer, ImputerKind};
use crate::metrics::{argmax, EvalReport};
use crate::model::{Architecture, Classifier};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

/// Mixes a master seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_ORDER: u64 = 3;
const STREAM_IMPUTER: u64 = 4;

/// Masks `missing_view` in exactly `floor(eta · N)` cases chosen by a seeded
/// shuffle. Masking an already masked case changes nothing.
pub fn apply_missing(dataset: &Dataset, eta: f64, missing_view: ViewId, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Argument(format!("missing-view rate {eta} outside [0, 1]")));
    }
    if missing_view.0 >= dataset.manifest.views() {
        return Err(Error::Argument(format!("{missing_view} out of range")));
    }
    let n = dataset.cases.len();
    let count = crate::data::floor_share(eta, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut cases = dataset.cases.clone();
    for &i in &order[..count] {
        cases[i].mask_view(missing_view);
    }
    Ok(dataset.with_cases(cases))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub eta: f64,
    pub missing_view: ViewId,
    pub imputer: ImputerKind,
    pub architecture: Architecture,
    /// Centered pseudo-inverse scoring for the covariance imputer.
    #[serde(default)]
    pub centered_covariance: bool,
}

impl TrainConfig {
    pub fn new(architecture: Architecture, imputer: ImputerKind, missing_view: ViewId, seed: u64) -> Self {
        TrainConfig {
            epochs: 60,
            adam: AdamConfig::default(),
            seed,
            eta: 0.0,
            missing_view,
            imputer,
            architecture,
            centered_covariance: false,
        }
    }

    pub fn validate(&self, manifest: &Manifest) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        // A zero rate is accepted: it leaves parameters untouched.
        if !self.adam.learning_rate.is_finite() || self.adam.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and ≥ 0",
                self.adam.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.missing_view.0 >= manifest.views() {
            return Err(Error::Config(format!(
                "missing {} out of range for {} views",
                self.missing_view,
                manifest.views()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// A trained classifier together with the imputer it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub manifest: Manifest,
    pub classifier: Classifier,
    pub imputer: Imputer,
    pub missing_view: ViewId,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    FullView,
    MissView,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::FullView => "full",
            EvalMode::MissView => "miss",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full_view" => Ok(EvalMode::FullView),
            "miss" | "miss_view" => Ok(EvalMode::MissView),
            other => Err(Error::Argument(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

/// Imputes the absent slots of `case` and builds its graph.
pub fn prepare_graph(case: &PatientCase, task: Task, imputer: &Imputer, exclude_patient: Option<&str>) -> Result<HeteroGraph> {
    match task {
        Task::Lesion => {
            let imputed = imputer.impute_lesions(case, exclude_patient)?;
            build_lesion_graph(case, &imputed)
        }
        Task::Exam => {
            let imputed = imputer.impute_exam(case, exclude_patient)?;
            build_exam_graph(case, &imputed)
        }
    }
}

/// Trains on `dataset` (the training split).
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(TrainedModel, Vec<EpochRecord>)> {
    train_observed(dataset, config, |_| {})
}

/// [`train`], calling `after_step` with the imputer after every parameter
/// update.
pub fn train_observed(
    dataset: &Dataset,
    config: &TrainConfig,
    mut after_step: impl FnMut(&Imputer),
) -> Result<(TrainedModel, Vec<EpochRecord>)> {
    let manifest = &dataset.manifest;
    config.validate(manifest)?;
    if dataset.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let task = manifest.task;
    let mut classifier = Classifier::new(
        &config.architecture,
        manifest.feature_width,
        manifest.views(),
        manifest.classes(),
        derive_seed(config.seed, STREAM_INIT),
    )?;
    let masked = apply_missing(dataset, config.eta, config.missing_view, derive_seed(config.seed, STREAM_MASK))?;
    // Retrieval draws on the unmasked training split; a sample never retrieves
    // from its own patient during training.
    let mut imputer = Imputer::fit(
        config.imputer,
        &dataset.cases,
        task,
        manifest.views(),
        manifest.feature_width,
        config.missing_view,
        derive_seed(config.seed, STREAM_IMPUTER),
    )?;
    if let Some(fit) = imputer.cov.take() {
        imputer.cov = Some(fit.with_centered(config.centered_covariance));
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_ORDER));
    let mut state = AdamState::new();
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..masked.cases.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct, mut targets) = (0.0, 0usize, 0usize);
        for &i in &order {
            let case = &masked.cases[i];
            let graph = prepare_graph(case, task, &imputer, Some(&case.patient_id))
                .map_err(|e| e.context(format!("epoch {epoch}")))?;
            let labels = graph.target_labels();

            let tape = Tape::new();
            let vars = classifier.params().bind(&tape);
            let learn_param = imputer.learnable.as_ref().map(|p| tape.leaf_shared(Arc::clone(p)));
            let learn_vec = learn_param.map(learnable_on_tape).transpose()?;
            let logits = classifier.forward_with(&tape, &vars, &graph, learn_vec)?;
            let loss = logits.softmax_cross_entropy(&labels)?;
            let loss_value = loss.value().item();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    patient: case.patient_id.clone(),
                    message: format!("loss is {loss_value}"),
                });
            }
            let logit_values = logits.value();
            for (r, &y) in labels.iter().enumerate() {
                if argmax(logit_values.row_slice(r)) == y {
                    correct += 1;
                }
            }
            targets += labels.len();
            loss_sum += loss_value;

            let mut grads = tape.backward(loss)?;
            let mut grad_list: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
            if let Some(p) = learn_param {
                grad_list.push(grads.take(p));
            }
            if let Some(bad) = grad_list.iter().position(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    patient: case.patient_id.clone(),
                    message: format!("non-finite gradient for parameter {bad}"),
                });
            }
            drop(grads);
            drop(tape);

            let mut params = classifier.params_mut().tensors_mut();
            if let Some(p) = imputer.learnable.as_mut() {
                params.push(Arc::make_mut(p));
            }
            adam_step(&mut params, &grad_list, &mut state, &config.adam);
            after_step(&imputer);
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / masked.cases.len() as f64,
            train_accuracy: correct as f64 / targets as f64,
        };
        log::debug!(
            "epoch {} loss {:.5} acc {:.4}",
            record.epoch,
            record.mean_loss,
            record.train_accuracy
        );
        history.push(record);
    }

    Ok((
        TrainedModel {
            manifest: manifest.clone(),
            classifier,
            imputer,
            missing_view: config.missing_view,
            seed: config.seed,
        },
        history,
    ))
}

/// Softmax score rows and labels of every target in `dataset`.
pub fn predict(model: &TrainedModel, dataset: &Dataset) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let task = model.manifest.task;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for case in &dataset.cases {
        let graph = prepare_graph(case, task, &model.imputer, None)?;
        let logits = model.classifier.forward(&graph)?;
        for (r, t) in graph.targets.iter().enumerate() {
            scores.push(softmax(logits.row_slice(r)));
            labels.push(t.label);
        }
    }
    Ok((scores, labels))
}

/// Evaluates on `dataset`; `MissView` masks the model's missing view in every
/// case first.
pub fn evaluate(model: &TrainedModel, dataset: &Dataset, mode: EvalMode) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    let prepared = match mode {
        EvalMode::FullView => dataset.clone(),
        EvalMode::MissView => apply_missing(dataset, 1.0, model.missing_view, 0)?,
    };
    let (scores, labels) = predict(model, &prepared)?;
    EvalReport::from_scores(&scores, &labels, model.manifest.classes())
}
