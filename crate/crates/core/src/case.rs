//! Patient cases: lesions observed in several views, some of which may be
//! absent.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a view within a manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ViewId(pub usize);

impl ViewId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "view {}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionRecord {
    pub lesion_id: String,
    pub label: usize,
    /// One slot per view, `None` when the view is absent.
    pub features: Vec<Option<Tensor>>,
}

impl LesionRecord {
    pub fn view_count(&self) -> usize {
        self.features.len()
    }

    pub fn feature(&self, view: ViewId) -> Option<&Tensor> {
        self.features.get(view.0).and_then(Option::as_ref)
    }

    pub fn is_complete(&self) -> bool {
        self.features.iter().all(Option::is_some)
    }

    pub fn available_views(&self) -> Vec<ViewId> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_some())
            .map(|(v, _)| ViewId(v))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientCase {
    pub patient_id: String,
    pub lesions: Vec<LesionRecord>,
    /// Exam-level label; the maximum lesion label for exam-level tasks.
    pub exam_label: Option<usize>,
    /// View masked by the missing-view protocol, if any.
    pub masked_view: Option<ViewId>,
}

impl PatientCase {
    pub fn view_count(&self) -> usize {
        self.lesions.first().map_or(0, LesionRecord::view_count)
    }

    pub fn is_complete(&self) -> bool {
        self.lesions.iter().all(LesionRecord::is_complete)
    }

    /// Highest lesion label.
    pub fn max_lesion_label(&self) -> Option<usize> {
        self.lesions.iter().map(|l| l.label).max()
    }

    /// Label used for stratification and exam-level targets.
    pub fn case_label(&self) -> usize {
        self.exam_label
            .or_else(|| self.max_lesion_label())
            .unwrap_or(0)
    }

    /// Marks `view` absent in every lesion.
    pub fn mask_view(&mut self, view: ViewId) {
        for lesion in &mut self.lesions {
            if let Some(slot) = lesion.features.get_mut(view.0) {
                *slot = None;
            }
        }
        self.masked_view = Some(view);
    }

    /// Structural checks against a view count and feature width.
    pub fn validate(&self, views: usize, width: usize, classes: usize) -> Result<()> {
        if self.lesions.is_empty() {
            return Err(Error::Argument(format!(
                "patient {} has no lesions",
                self.patient_id
            )));
        }
        for lesion in &self.lesions {
            let where_ = || format!("patient {}, lesion {}", self.patient_id, lesion.lesion_id);
            if lesion.features.len() != views {
                return Err(Error::Dimension(format!(
                    "{}: {} view slots, expected {}",
                    where_(),
                    lesion.features.len(),
                    views
                )));
            }
            if lesion.label >= classes {
                return Err(Error::Argument(format!(
                    "{}: label {} out of range for {} classes",
                    where_(),
                    lesion.label,
                    classes
                )));
            }
            for (v, f) in lesion.features.iter().enumerate() {
                if let Some(f) = f {
                    if f.shape() != [1, width] {
                        return Err(Error::Dimension(format!(
                            "{}, view {}: feature shape {:?}, expected [1, {}]",
                            where_(),
                            v,
                            f.shape(),
                            width
                        )));
                    }
                }
            }
        }
        if let Some(label) = self.exam_label {
            if label >= classes {
                return Err(Error::Argument(format!(
                    "patient {}: exam label {} out of range",
                    self.patient_id, label
                )));
            }
        }
        Ok(())
    }
}
