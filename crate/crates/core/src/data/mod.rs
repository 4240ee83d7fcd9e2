//! Datasets: manifests, case files, synthetic generation and patient-level
//! splits.

mod io;
mod split;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::case::{PatientCase, ViewId};
use crate::error::{Error, Result};

pub use io::{load_dataset, load_manifest, read_cases, save_dataset, write_cases};
pub(crate) use split::floor_share;
pub use split::split_by_patient;
pub use synth::{generate_synthetic, SyntheticSpec};

/// Whether targets are lesions or whole exams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Lesion,
    Exam,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Lesion => "lesion",
            Task::Exam => "exam",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lesion" => Ok(Task::Lesion),
            "exam" => Ok(Task::Exam),
            other => Err(Error::Argument(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub view_names: Vec<String>,
    pub feature_width: usize,
    pub class_names: Vec<String>,
    pub task: Task,
}

impl Manifest {
    pub fn views(&self) -> usize {
        self.view_names.len()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn view_id(&self, name: &str) -> Option<ViewId> {
        self.view_names.iter().position(|n| n == name).map(ViewId)
    }

    /// Resolves a view given by name or by index.
    pub fn resolve_view(&self, spec: &str) -> Result<ViewId> {
        if let Some(v) = self.view_id(spec) {
            return Ok(v);
        }
        match spec.parse::<usize>() {
            Ok(i) if i < self.views() => Ok(ViewId(i)),
            _ => Err(Error::Argument(format!(
                "unknown view {spec:?}; manifest views are {:?}",
                self.view_names
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_names.is_empty() {
            return Err(Error::Config("manifest lists no views".into()));
        }
        if self.feature_width == 0 {
            return Err(Error::Config("feature width must be ≥ 1".into()));
        }
        if self.class_names.len() < 2 {
            return Err(Error::Config("manifest needs ≥ 2 classes".into()));
        }
        for (what, names) in [("view", &self.view_names), ("class", &self.class_names)] {
            for (i, n) in names.iter().enumerate() {
                if names[..i].contains(n) {
                    return Err(Error::Config(format!("duplicate {what} name {n:?}")));
                }
            }
        }
        Ok(())
    }

    /// View names used for a given view count when nothing else is known.
    pub fn default_view_names(views: usize) -> Vec<String> {
        match views {
            2 => vec!["cc".into(), "mlo".into()],
            3 => vec!["arterial".into(), "venous".into(), "delay".into()],
            n => (0..n).map(|i| format!("view{i}")).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub cases: Vec<PatientCase>,
}

impl Dataset {
    pub fn new(manifest: Manifest, cases: Vec<PatientCase>) -> Result<Self> {
        manifest.validate()?;
        for c in &cases {
            c.validate(manifest.views(), manifest.feature_width, manifest.classes())?;
            if manifest.task == Task::Exam && c.exam_label.is_none() {
                return Err(Error::Argument(format!(
                    "patient {} has no exam label in an exam-level dataset",
                    c.patient_id
                )));
            }
        }
        Ok(Dataset { manifest, cases })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn lesion_count(&self) -> usize {
        self.cases.iter().map(|c| c.lesions.len()).sum()
    }

    /// Same manifest, different cases.
    pub fn with_cases(&self, cases: Vec<PatientCase>) -> Dataset {
        Dataset {
            manifest: self.manifest.clone(),
            cases,
        }
    }
}
