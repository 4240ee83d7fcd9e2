//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "GIIMCKPT" | u32 version | u64 header length | header JSON
//! u64 tensor count | per tensor: u64 name length, name, u64 rank,
//!                    u64 dims…, f64 values (row-major)
//! ```
//!
//! The header carries the manifest, the architecture and the imputer
//! configuration; every real number lives in the tensor section so values
//! survive bit for bit.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::case::ViewId;
use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::imputation::{CovarianceFit, DbEntry, FeatureDatabase, Imputer, ImputerKind};
use crate::model::{Architecture, Classifier};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainedModel;

const MAGIC: &[u8; 8] = b"GIIMCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    manifest: Manifest,
    architecture: Architecture,
    seed: u64,
    missing_view: ViewId,
    imputer: ImputerKind,
    width: usize,
    params: Vec<String>,
    db: Option<Vec<(String, String)>>,
    cov: Option<CovHeader>,
}

#[derive(Serialize, Deserialize)]
struct CovHeader {
    available: Vec<ViewId>,
    missing: ViewId,
    centered: bool,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    put_u64(out, t.shape().len() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a trained model to bytes.
pub fn to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let imp = &model.imputer;
    let params = model.classifier.params();
    let header = Header {
        manifest: model.manifest.clone(),
        architecture: model.classifier.architecture(),
        seed: model.seed,
        missing_view: model.missing_view,
        imputer: imp.kind,
        width: imp.width,
        params: params.iter().map(|(n, _)| n.to_string()).collect(),
        db: imp.db.as_ref().map(|db| {
            db.entries
                .iter()
                .map(|e| (e.id.clone(), e.patient_id.clone()))
                .collect()
        }),
        cov: imp.cov.as_ref().map(|f| CovHeader {
            available: f.available.clone(),
            missing: f.missing,
            centered: f.centered,
        }),
    };
    let header = serde_json::to_vec(&header)?;

    let mut tensors: Vec<(String, &Tensor)> = params.iter().map(|(n, t)| (format!("model/{n}"), t)).collect();
    if let Some(p) = imp.learnable_param() {
        tensors.push(("imputer/learnable".into(), p));
    }
    if let Some(db) = &imp.db {
        for (i, e) in db.entries.iter().enumerate() {
            for (v, f) in e.features.iter().enumerate() {
                tensors.push((format!("imputer/db/{i}/{v}"), f));
            }
        }
    }
    if let Some(fit) = &imp.cov {
        tensors.push(("imputer/cov/sigma".into(), &fit.sigma));
        tensors.push(("imputer/cov/mu".into(), &fit.mu));
        for (i, d) in fit.deltas.iter().enumerate() {
            tensors.push((format!("imputer/cov/delta/{i}"), d));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u64(&mut out, header.len() as u64);
    out.extend_from_slice(&header);
    put_u64(&mut out, tensors.len() as u64);
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("length {v} exceeds remaining data")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.len()?;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if numel.checked_mul(8).is_none_or(|b| b > self.buf.len()) {
            return Err(Error::Checkpoint(format!("tensor {name} is truncated")));
        }
        let data = self
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

/// Inverse of [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let n = r.len()?;
    let header: Header = serde_json::from_slice(r.take(n)?)?;
    header.manifest.validate()?;
    let count = r.u64()?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };

    let mut params = ParamStore::new();
    for name in &header.params {
        params.push(name.clone(), take(&format!("model/{name}"))?);
    }
    let m = &header.manifest;
    let classifier = Classifier::from_params(&header.architecture, m.feature_width, m.views(), m.classes(), params)?;

    let learnable = match header.imputer {
        ImputerKind::Learnable => Some(Arc::new(take("imputer/learnable")?)),
        _ => None,
    };
    let db = match &header.db {
        Some(ids) => {
            let mut entries = Vec::with_capacity(ids.len());
            for (i, (id, patient_id)) in ids.iter().enumerate() {
                let features = (0..m.views())
                    .map(|v| take(&format!("imputer/db/{i}/{v}")))
                    .collect::<Result<Vec<_>>>()?;
                entries.push(DbEntry {
                    id: id.clone(),
                    patient_id: patient_id.clone(),
                    features,
                });
            }
            Some(FeatureDatabase::new(entries)?)
        }
        None => None,
    };
    let cov = match &header.cov {
        Some(c) => {
            let n = db.as_ref().map_or(0, FeatureDatabase::len);
            let deltas = (0..n)
                .map(|i| take(&format!("imputer/cov/delta/{i}")))
                .collect::<Result<Vec<_>>>()?;
            Some(CovarianceFit::from_parts(
                c.available.clone(),
                c.missing,
                take("imputer/cov/sigma")?,
                take("imputer/cov/mu")?,
                deltas,
                c.centered,
            ))
        }
        None => None,
    };
    if let Some(name) = tensors.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(TrainedModel {
        manifest: header.manifest,
        classifier,
        imputer: Imputer {
            kind: header.imputer,
            width: header.width,
            learnable,
            db,
            cov,
        },
        missing_view: header.missing_view,
        seed: header.seed,
    })
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = fs::File::create(path).map_err(|e| Error::from(e).context(format!("creating {}", path.display())))?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    from_bytes(&bytes).map_err(|e| e.context(format!("loading {}", path.display())))
}
