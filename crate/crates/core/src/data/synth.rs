//! Synthetic multi-view datasets.
//!
//! Each view feature is a prototype vector plus isotropic gaussian noise. In
//! the plain mode the prototype is indexed by the lesion class. In the
//! interaction mode two independent uniform latents `a` and `b` select the
//! prototypes of view 0 and view 1, the class is `(a + b) mod C`, and every
//! other view draws its prototype from an independent latent. Each view on
//! its own is then independent of the class, while views 0 and 1 together
//! determine it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::case::{LesionRecord, PatientCase};
use crate::data::{Dataset, Manifest, Task};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    /// Inclusive range of lesions per patient.
    pub lesions_per_patient: (usize, usize),
    pub classes: usize,
    pub views: usize,
    pub feature_width: usize,
    pub noise_sigma: f64,
    pub interaction: bool,
    /// `prototypes[latent][view]`, each of length `feature_width`.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    pub task: Task,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Prototypes drawn from N(0, scale²) with a generator seeded by `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        n_patients: usize,
        lesions_per_patient: (usize, usize),
        classes: usize,
        views: usize,
        feature_width: usize,
        noise_sigma: f64,
        interaction: bool,
        task: Task,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_9e07);
        let prototypes = (0..classes)
            .map(|_| {
                (0..views)
                    .map(|_| {
                        (0..feature_width)
                            .map(|_| StandardNormal.sample(&mut rng))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        SyntheticSpec {
            n_patients,
            lesions_per_patient,
            classes,
            views,
            feature_width,
            noise_sigma,
            interaction,
            prototypes,
            task,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lesions_per_patient;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid lesion range {lo}..={hi}")));
        }
        if self.classes < 2 || self.views == 0 || self.feature_width == 0 {
            return Err(Error::Config("need ≥ 2 classes, ≥ 1 view, width ≥ 1".into()));
        }
        if self.interaction && self.views < 2 {
            return Err(Error::Config("interaction mode needs ≥ 2 views".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise sigma {} must be ≥ 0", self.noise_sigma)));
        }
        if self.prototypes.len() != self.classes
            || self
                .prototypes
                .iter()
                .any(|p| p.len() != self.views || p.iter().any(|v| v.len() != self.feature_width))
        {
            return Err(Error::Config("prototype table does not match classes × views × width".into()));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            view_names: Manifest::default_view_names(self.views),
            feature_width: self.feature_width,
            class_names: (0..self.classes).map(|c| format!("class{c}")).collect(),
            task: self.task,
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (lo, hi) = spec.lesions_per_patient;
    let digits = spec.n_patients.max(1).to_string().len();
    let mut cases = Vec::with_capacity(spec.n_patients);
    for p in 0..spec.n_patients {
        let count = rng.random_range(lo..=hi);
        let mut lesions = Vec::with_capacity(count);
        for l in 0..count {
            let latents: Vec<usize> = (0..spec.views).map(|_| rng.random_range(0..spec.classes)).collect();
            let label = if spec.interaction {
                (latents[0] + latents[1]) % spec.classes
            } else {
                latents[0]
            };
            let features = (0..spec.views)
                .map(|v| {
                    let which = if spec.interaction || v == 0 { latents[v] } else { label };
                    let values: Vec<f64> = spec.prototypes[which][v]
                        .iter()
                        .map(|m| m + noise.sample(&mut rng))
                        .collect();
                    Some(Tensor::row(&values))
                })
                .collect();
            lesions.push(LesionRecord {
                lesion_id: format!("l{l}"),
                label,
                features,
            });
        }
        let exam_label = match spec.task {
            Task::Exam => lesions.iter().map(|l| l.label).max(),
            Task::Lesion => None,
        };
        cases.push(PatientCase {
            patient_id: format!("p{p:0digits$}"),
            lesions,
            exam_label,
            masked_view: None,
        });
    }
    Dataset::new(spec.manifest(), cases)
}
