//! Stand-in features for absent views.
//!
//! Four strategies: a zero vector, a trained vector normalized to unit
//! Frobenius norm, cosine-similarity retrieval from a database of complete
//! samples, and retrieval by a covariance-weighted similarity of view
//! difference vectors. Retrieval strategies always return a vector stored in
//! the database.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::case::{PatientCase, ViewId};
use crate::error::{Error, Result};
use crate::graph::{ExamImputations, LesionImputations};
use crate::tensor::Tensor;
use crate::Task;

/// Rows of the learnable parameter before mean pooling.
pub const LEARNABLE_ROWS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputerKind {
    Constant,
    Learnable,
    Rag,
    Covariance,
}

impl ImputerKind {
    pub const ALL: [ImputerKind; 4] = [
        ImputerKind::Constant,
        ImputerKind::Learnable,
        ImputerKind::Rag,
        ImputerKind::Covariance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ImputerKind::Constant => "constant",
            ImputerKind::Learnable => "learnable",
            ImputerKind::Rag => "rag",
            ImputerKind::Covariance => "covariance",
        }
    }
}

impl fmt::Display for ImputerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImputerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ImputerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown imputer {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DbEntry {
    pub id: String,
    pub patient_id: String,
    /// One `1×c` vector per view, in view order.
    pub features: Vec<Tensor>,
}

/// Complete samples used as the retrieval pool.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureDatabase {
    pub entries: Vec<DbEntry>,
}

impl FeatureDatabase {
    pub fn new(entries: Vec<DbEntry>) -> Result<Self> {
        let db = FeatureDatabase { entries };
        db.validate()?;
        Ok(db)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let Some(first) = self.entries.first() else {
            return Ok(());
        };
        let views = first.features.len();
        let width = first.features.first().map_or(0, Tensor::cols);
        for e in &self.entries {
            if e.features.len() != views || e.features.iter().any(|f| f.shape() != [1, width]) {
                return Err(Error::Dimension(format!(
                    "database entry {} does not have {} views of width {}",
                    e.id, views, width
                )));
            }
        }
        Ok(())
    }

    /// Complete lesions (lesion-level) or complete exams as per-view means
    /// (exam-level), in case order.
    pub fn from_cases(cases: &[PatientCase], task: Task) -> Result<Self> {
        let mut entries = Vec::new();
        for case in cases {
            match task {
                Task::Lesion => {
                    for lesion in case.lesions.iter().filter(|l| l.is_complete()) {
                        entries.push(DbEntry {
                            id: format!("{}/{}", case.patient_id, lesion.lesion_id),
                            patient_id: case.patient_id.clone(),
                            features: lesion.features.iter().flatten().cloned().collect(),
                        });
                    }
                }
                Task::Exam => {
                    if case.lesions.is_empty() {
                        continue;
                    }
                    let mut features = Vec::with_capacity(case.view_count());
                    for v in 0..case.view_count() {
                        let present: Vec<Tensor> = case
                            .lesions
                            .iter()
                            .filter_map(|l| l.feature(ViewId(v)).cloned())
                            .collect();
                        let Some(first) = present.first() else { break };
                        features.push(Tensor::mean_rows(&present, first.cols())?);
                    }
                    if features.len() == case.view_count() {
                        entries.push(DbEntry {
                            id: case.patient_id.clone(),
                            patient_id: case.patient_id.clone(),
                            features,
                        });
                    }
                }
            }
        }
        FeatureDatabase::new(entries)
    }
}

pub fn impute_constant(width: usize) -> Tensor {
    Tensor::zeros(&[1, width])
}

/// Mean-pools the rows of `param` and normalizes to unit Frobenius norm.
pub fn impute_learnable(param: &Tensor) -> Result<Tensor> {
    let rows: Vec<Tensor> = (0..param.rows()).map(|r| Tensor::row(param.row_slice(r))).collect();
    Tensor::mean_rows(&rows, param.cols())?.frobenius_normalize()
}

/// Tape version of [`impute_learnable`].
pub fn learnable_on_tape(param: Var<'_>) -> Result<Var<'_>> {
    param.mean_pool_rows()?.frobenius_normalize()
}

/// Cosine similarity; `-1` when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        -1.0
    } else {
        dot / (na * nb)
    }
}

/// Index of the largest score, lowest index on ties. `None` for no scores.
fn argmax(scores: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores {
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub index: usize,
    pub score: f64,
    pub feature: Tensor,
}

fn stack(views: &[(ViewId, &Tensor)]) -> Vec<f64> {
    views.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

/// Cosine retrieval over the stacked available views.
///
/// `query` lists the available views in ascending order. Entries whose
/// `patient_id` equals `exclude_patient` are skipped.
pub fn impute_rag(
    query: &[(ViewId, &Tensor)],
    missing_view: ViewId,
    db: &FeatureDatabase,
    exclude_patient: Option<&str>,
) -> Result<Retrieval> {
    if query.is_empty() {
        return Err(Error::Argument("query has no available view".into()));
    }
    let x = stack(query);
    let scores: Vec<(usize, f64)> = db
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| Some(e.patient_id.as_str()) != exclude_patient)
        .map(|(i, e)| {
            let xi: Vec<f64> = query
                .iter()
                .flat_map(|(v, _)| e.features[v.0].data().iter().copied())
                .collect();
            (i, cosine(&x, &xi))
        })
        .collect();
    let index = argmax(scores.iter().copied())
        .ok_or_else(|| Error::InsufficientData("retrieval database is empty".into()))?;
    let score = scores.iter().find(|(i, _)| *i == index).map_or(-1.0, |s| s.1);
    Ok(Retrieval {
        index,
        score,
        feature: db.entries[index].features[missing_view.0].clone(),
    })
}

/// First view minus the sum of the remaining ones.
pub fn difference_vector(views: &[&Tensor]) -> Result<Tensor> {
    let (first, rest) = views
        .split_first()
        .ok_or_else(|| Error::Argument("difference of zero views".into()))?;
    let mut out = first.data().to_vec();
    for t in rest {
        if t.numel() != out.len() {
            return Err(Error::Dimension(format!(
                "difference vector widths {} vs {}",
                out.len(),
                t.numel()
            )));
        }
        for (o, v) in out.iter_mut().zip(t.data()) {
            *o -= v;
        }
    }
    Ok(Tensor::row(&out))
}

/// State fitted by [`fit_covariance`].
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceFit {
    pub available: Vec<ViewId>,
    pub missing: ViewId,
    pub sigma: Tensor,
    pub mu: Tensor,
    /// One difference vector per database entry, in database order.
    pub deltas: Vec<Tensor>,
    /// Score with centered deltas and the pseudo-inverse covariance instead of
    /// `Δqᵀ Σ Δj`.
    pub centered: bool,
    sigma_inv: Option<Tensor>,
}

pub fn fit_covariance(db: &FeatureDatabase, available: &[ViewId], missing: ViewId) -> Result<CovarianceFit> {
    let n = db.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 database entries, got {n}"
        )));
    }
    if available.is_empty() || available.contains(&missing) {
        return Err(Error::Config(format!(
            "invalid available views {available:?} for missing {missing}"
        )));
    }
    let deltas = db
        .entries
        .iter()
        .map(|e| {
            let views: Vec<&Tensor> = available.iter().map(|v| &e.features[v.0]).collect();
            difference_vector(&views)
        })
        .collect::<Result<Vec<_>>>()?;
    let c = deltas[0].numel();
    let mut mu = vec![0.0; c];
    for d in &deltas {
        for (m, v) in mu.iter_mut().zip(d.data()) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut sigma = vec![0.0; c * c];
    for d in &deltas {
        let centered: Vec<f64> = d.data().iter().zip(&mu).map(|(v, m)| v - m).collect();
        for i in 0..c {
            for j in i..c {
                sigma[i * c + j] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..c {
        for j in i..c {
            let v = sigma[i * c + j] / denom;
            sigma[i * c + j] = v;
            sigma[j * c + i] = v;
        }
    }
    Ok(CovarianceFit {
        available: available.to_vec(),
        missing,
        sigma: Tensor::matrix(c, c, sigma)?,
        mu: Tensor::row(&mu),
        deltas,
        centered: false,
        sigma_inv: None,
    })
}

impl CovarianceFit {
    pub fn from_parts(
        available: Vec<ViewId>,
        missing: ViewId,
        sigma: Tensor,
        mu: Tensor,
        deltas: Vec<Tensor>,
        centered: bool,
    ) -> Self {
        CovarianceFit {
            available,
            missing,
            sigma,
            mu,
            deltas,
            centered: false,
            sigma_inv: None,
        }
        .with_centered(centered)
    }

    /// Switches to `(Δq−μ)ᵀ Σ⁺ (Δj−μ)` scoring.
    pub fn with_centered(mut self, centered: bool) -> Self {
        self.centered = centered;
        self.sigma_inv = centered.then(|| pseudo_inverse(&self.sigma));
        self
    }

    pub fn score(&self, query_delta: &[f64], j: usize) -> f64 {
        let c = query_delta.len();
        let (sigma, q, d): (&Tensor, Vec<f64>, Vec<f64>) = if self.centered {
            let mu = self.mu.data();
            (
                self.sigma_inv.as_ref().unwrap_or(&self.sigma),
                query_delta.iter().zip(mu).map(|(a, b)| a - b).collect(),
                self.deltas[j].data().iter().zip(mu).map(|(a, b)| a - b).collect(),
            )
        } else {
            (&self.sigma, query_delta.to_vec(), self.deltas[j].data().to_vec())
        };
        let mut s = 0.0;
        for a in 0..c {
            let row = sigma.row_slice(a);
            let inner: f64 = row.iter().zip(&d).map(|(x, y)| x * y).sum();
            s += q[a] * inner;
        }
        s
    }
}

/// Retrieval by `s_j = Δqᵀ Σ Δj` over the fitted database deltas.
pub fn impute_covariance(
    query: &[(ViewId, &Tensor)],
    fit: &CovarianceFit,
    db: &FeatureDatabase,
    exclude_patient: Option<&str>,
) -> Result<Retrieval> {
    let views: Vec<ViewId> = query.iter().map(|(v, _)| *v).collect();
    if views != fit.available {
        return Err(Error::Config(format!(
            "query views {:?} differ from fitted views {:?}",
            views, fit.available
        )));
    }
    if db.len() != fit.deltas.len() {
        return Err(Error::Config("covariance fit does not match database".into()));
    }
    let q: Vec<&Tensor> = query.iter().map(|(_, t)| *t).collect();
    let dq = difference_vector(&q)?;
    let scores: Vec<(usize, f64)> = (0..db.len())
        .filter(|&j| Some(db.entries[j].patient_id.as_str()) != exclude_patient)
        .map(|j| (j, fit.score(dq.data(), j)))
        .collect();
    let index = argmax(scores.iter().copied())
        .ok_or_else(|| Error::InsufficientData("retrieval database is empty".into()))?;
    let score = scores.iter().find(|(i, _)| *i == index).map_or(0.0, |s| s.1);
    Ok(Retrieval {
        index,
        score,
        feature: db.entries[index].features[fit.missing.0].clone(),
    })
}

/// Moore–Penrose pseudo-inverse of a symmetric matrix by Jacobi
/// eigendecomposition.
fn pseudo_inverse(sym: &Tensor) -> Tensor {
    let n = sym.rows();
    let mut a: Vec<f64> = sym.data().to_vec();
    let mut v = Tensor::identity(n).into_data();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let max = eig.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let tol = max * n as f64 * f64::EPSILON;
    let mut out = vec![0.0; n * n];
    for (k, &e) in eig.iter().enumerate() {
        if e.abs() <= tol {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] += v[i * n + k] * v[j * n + k] / e;
            }
        }
    }
    Tensor::matrix(n, n, out).expect("square")
}

/// A configured imputation strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct Imputer {
    pub kind: ImputerKind,
    pub width: usize,
    pub learnable: Option<Arc<Tensor>>,
    pub db: Option<FeatureDatabase>,
    pub cov: Option<CovarianceFit>,
}

impl Imputer {
    pub fn constant(width: usize) -> Self {
        Imputer {
            kind: ImputerKind::Constant,
            width,
            learnable: None,
            db: None,
            cov: None,
        }
    }

    pub fn learnable(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..LEARNABLE_ROWS * width)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let param = Tensor::matrix(LEARNABLE_ROWS, width, data).expect("shape");
        Imputer {
            kind: ImputerKind::Learnable,
            width,
            learnable: Some(Arc::new(param)),
            db: None,
            cov: None,
        }
    }

    pub fn rag(db: FeatureDatabase) -> Result<Self> {
        let width = db
            .entries
            .first()
            .and_then(|e| e.features.first())
            .map(Tensor::cols)
            .ok_or_else(|| Error::InsufficientData("retrieval database is empty".into()))?;
        Ok(Imputer {
            kind: ImputerKind::Rag,
            width,
            learnable: None,
            db: Some(db),
            cov: None,
        })
    }

    pub fn covariance(db: FeatureDatabase, available: &[ViewId], missing: ViewId, centered: bool) -> Result<Self> {
        let fit = fit_covariance(&db, available, missing)?.with_centered(centered);
        let width = fit.sigma.rows();
        Ok(Imputer {
            kind: ImputerKind::Covariance,
            width,
            learnable: None,
            db: Some(db),
            cov: Some(fit),
        })
    }

    /// Builds an imputer of `kind` from training cases. Retrieval strategies
    /// draw on the complete samples of `train`.
    pub fn fit(
        kind: ImputerKind,
        train: &[PatientCase],
        task: Task,
        views: usize,
        width: usize,
        missing: ViewId,
        seed: u64,
    ) -> Result<Self> {
        match kind {
            ImputerKind::Constant => Ok(Imputer::constant(width)),
            ImputerKind::Learnable => Ok(Imputer::learnable(width, seed)),
            ImputerKind::Rag => Imputer::rag(FeatureDatabase::from_cases(train, task)?),
            ImputerKind::Covariance => {
                let available: Vec<ViewId> = (0..views).map(ViewId).filter(|&v| v != missing).collect();
                Imputer::covariance(FeatureDatabase::from_cases(train, task)?, &available, missing, false)
            }
        }
    }

    pub fn learnable_param(&self) -> Option<&Tensor> {
        self.learnable.as_deref()
    }

    /// Current output of the learnable strategy.
    pub fn learnable_vector(&self) -> Result<Tensor> {
        let p = self
            .learnable
            .as_ref()
            .ok_or_else(|| Error::Config("imputer has no learnable parameter".into()))?;
        impute_learnable(p)
    }

    /// Feature for `missing_view` given the available views of one sample.
    pub fn impute(
        &self,
        available: &[(ViewId, &Tensor)],
        missing_view: ViewId,
        exclude_patient: Option<&str>,
    ) -> Result<Tensor> {
        match self.kind {
            ImputerKind::Constant => Ok(impute_constant(self.width)),
            ImputerKind::Learnable => self.learnable_vector(),
            ImputerKind::Rag => {
                let db = self.db.as_ref().ok_or_else(|| Error::Config("rag imputer has no database".into()))?;
                Ok(impute_rag(available, missing_view, db, exclude_patient)?.feature)
            }
            ImputerKind::Covariance => {
                let db = self
                    .db
                    .as_ref()
                    .ok_or_else(|| Error::Config("covariance imputer has no database".into()))?;
                let fit = self
                    .cov
                    .as_ref()
                    .ok_or_else(|| Error::Config("covariance imputer is not fitted".into()))?;
                if fit.missing != missing_view {
                    return Err(Error::Config(format!(
                        "covariance fitted for {}, asked for {}",
                        fit.missing, missing_view
                    )));
                }
                Ok(impute_covariance(available, fit, db, exclude_patient)?.feature)
            }
        }
    }

    /// Imputations for every absent (lesion, view) slot of a case.
    pub fn impute_lesions(&self, case: &PatientCase, exclude_patient: Option<&str>) -> Result<LesionImputations> {
        let mut out = HashMap::new();
        for (j, lesion) in case.lesions.iter().enumerate() {
            let available: Vec<(ViewId, &Tensor)> = lesion
                .features
                .iter()
                .enumerate()
                .filter_map(|(v, f)| f.as_ref().map(|f| (ViewId(v), f)))
                .collect();
            for v in (0..lesion.features.len()).map(ViewId) {
                if lesion.feature(v).is_none() {
                    let f = self
                        .impute(&available, v, exclude_patient)
                        .map_err(|e| e.context(format!("patient {}, lesion {}", case.patient_id, lesion.lesion_id)))?;
                    out.insert((j, v), f);
                }
            }
        }
        Ok(out)
    }

    /// Imputations for every view absent from all lesions of a case.
    pub fn impute_exam(&self, case: &PatientCase, exclude_patient: Option<&str>) -> Result<ExamImputations> {
        let views = case.view_count();
        let mut means = Vec::with_capacity(views);
        for v in (0..views).map(ViewId) {
            let present: Vec<Tensor> = case.lesions.iter().filter_map(|l| l.feature(v).cloned()).collect();
            means.push(match present.first() {
                Some(first) => Some(Tensor::mean_rows(&present, first.cols())?),
                None => None,
            });
        }
        let available: Vec<(ViewId, &Tensor)> = means
            .iter()
            .enumerate()
            .filter_map(|(v, m)| m.as_ref().map(|m| (ViewId(v), m)))
            .collect();
        let mut out = HashMap::new();
        for (v, m) in means.iter().enumerate() {
            if m.is_none() {
                let f = self
                    .impute(&available, ViewId(v), exclude_patient)
                    .map_err(|e| e.context(format!("patient {}", case.patient_id)))?;
                out.insert(ViewId(v), f);
            }
        }
        Ok(out)
    }
}
