//! Two fully connected layers over concatenated view features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::case::ViewId;
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::model::target_rows;
use crate::params::{glorot_uniform, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NnConfig {
    pub feature_width: usize,
    pub views: usize,
    pub classes: usize,
    pub hidden: usize,
    /// Views fed to the network, in order. All views when empty.
    #[serde(default)]
    pub input_views: Vec<ViewId>,
}

impl NnConfig {
    pub fn input_views(&self) -> Vec<ViewId> {
        if self.input_views.is_empty() {
            (0..self.views).map(ViewId).collect()
        } else {
            self.input_views.clone()
        }
    }

    pub fn input_width(&self) -> usize {
        self.feature_width * self.input_views().len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be ≥ 1".into()));
        }
        if self.feature_width == 0 || self.views == 0 {
            return Err(Error::Config("feature width and view count must be ≥ 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need ≥ 2 classes, got {}", self.classes)));
        }
        if let Some(v) = self.input_views.iter().find(|v| v.0 >= self.views) {
            return Err(Error::Config(format!("input {} out of range for {} views", v, self.views)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NnBaseline {
    pub config: NnConfig,
    pub params: ParamStore,
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;

impl NnBaseline {
    pub fn new(config: NnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.push("fc1.w", glorot_uniform(&mut rng, config.input_width(), config.hidden));
        params.push("fc1.b", Tensor::zeros(&[1, config.hidden]));
        params.push("fc2.w", glorot_uniform(&mut rng, config.hidden, config.classes));
        params.push("fc2.b", Tensor::zeros(&[1, config.classes]));
        Ok(NnBaseline { config, params })
    }

    pub fn from_params(config: NnConfig, params: ParamStore) -> Result<Self> {
        let template = NnBaseline::new(config.clone(), 0)?;
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
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint("wrong number of baseline parameters".into()));
        }
        Ok(NnBaseline { config, params })
    }

    /// `logits = ReLU(x·W₁ + b₁)·W₂ + b₂` for an input matrix with one row
    /// per target.
    pub fn forward_rows<'t>(&self, vars: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let width = x.value().cols();
        if width != self.config.input_width() {
            return Err(Error::Config(format!(
                "baseline input width: expected {}, got {}",
                self.config.input_width(),
                width
            )));
        }
        x.matmul(vars[W1])?
            .add_row(vars[B1])?
            .relu()
            .matmul(vars[W2])?
            .add_row(vars[B2])
    }

    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        graph: &HeteroGraph,
        learnable: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let x = target_rows(tape, graph, learnable, &self.config.input_views())?;
        self.forward_rows(vars, x)
    }

    pub fn forward(&self, graph: &HeteroGraph) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let logits = self.forward_with(&tape, &vars, graph, None)?;
        Ok(logits.value().as_ref().clone())
    }
}
