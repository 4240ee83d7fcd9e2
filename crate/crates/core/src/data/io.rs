//! Manifest (a JSON object) and case files (one JSON patient record per line).
//!
//! ```text
//! {"patient_id":"p1","exam_label":null,"lesions":[
//!   {"lesion_id":"a","label":2,"features":{"arterial":[0.1,...],"venous":null}}]}
//! ```
//!
//! Every manifest view must appear in `features`; `null` marks an absent view.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::case::{LesionRecord, PatientCase, ViewId};
use crate::data::{Dataset, Manifest};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLesion {
    lesion_id: String,
    label: usize,
    features: BTreeMap<String, Option<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCase {
    patient_id: String,
    #[serde(default)]
    exam_label: Option<usize>,
    #[serde(default)]
    masked_view: Option<String>,
    lesions: Vec<RawLesion>,
}

struct Features<'a> {
    manifest: &'a Manifest,
    slots: &'a [Option<Tensor>],
}

impl Serialize for Features<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.slots.len()))?;
        for (name, slot) in self.manifest.view_names.iter().zip(self.slots) {
            map.serialize_entry(name, &slot.as_ref().map(Tensor::data))?;
        }
        map.end()
    }
}

#[derive(Serialize)]
struct OutLesion<'a> {
    lesion_id: &'a str,
    label: usize,
    features: Features<'a>,
}

#[derive(Serialize)]
struct OutCase<'a> {
    patient_id: &'a str,
    exam_label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    masked_view: Option<&'a str>,
    lesions: Vec<OutLesion<'a>>,
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    manifest.validate()?;
    Ok(manifest)
}

fn parse_line(manifest: &Manifest, line: &str, path: &str, lineno: usize) -> Result<PatientCase> {
    let err = |message: String| Error::Parse {
        path: path.to_string(),
        line: lineno,
        message,
    };
    let raw: RawCase = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    if raw.lesions.is_empty() {
        return Err(err(format!("patient {} has no lesions", raw.patient_id)));
    }
    let mut seen = HashSet::new();
    let mut lesions = Vec::with_capacity(raw.lesions.len());
    for l in raw.lesions {
        if !seen.insert(l.lesion_id.clone()) {
            return Err(err(format!(
                "patient {}: duplicate lesion id {}",
                raw.patient_id, l.lesion_id
            )));
        }
        if l.label >= manifest.classes() {
            return Err(err(format!(
                "patient {}, lesion {}: label {} out of range for {} classes",
                raw.patient_id,
                l.lesion_id,
                l.label,
                manifest.classes()
            )));
        }
        for name in l.features.keys() {
            if manifest.view_id(name).is_none() {
                return Err(err(format!(
                    "patient {}, lesion {}: unknown view {:?}",
                    raw.patient_id, l.lesion_id, name
                )));
            }
        }
        let mut features = Vec::with_capacity(manifest.views());
        for name in &manifest.view_names {
            let slot = l.features.get(name).ok_or_else(|| {
                err(format!(
                    "patient {}, lesion {}: view {} not listed (use null for absent)",
                    raw.patient_id, l.lesion_id, name
                ))
            })?;
            features.push(match slot {
                None => None,
                Some(values) => {
                    if values.len() != manifest.feature_width {
                        return Err(err(format!(
                            "patient {}, lesion {}, view {}: {} values, expected {}",
                            raw.patient_id,
                            l.lesion_id,
                            name,
                            values.len(),
                            manifest.feature_width
                        )));
                    }
                    Some(Tensor::row(values))
                }
            });
        }
        if features.iter().all(Option::is_none) {
            return Err(err(format!(
                "patient {}, lesion {}: no view present",
                raw.patient_id, l.lesion_id
            )));
        }
        lesions.push(LesionRecord {
            lesion_id: l.lesion_id,
            label: l.label,
            features,
        });
    }
    if let Some(label) = raw.exam_label {
        if label >= manifest.classes() {
            return Err(err(format!(
                "patient {}: exam label {} out of range",
                raw.patient_id, label
            )));
        }
    }
    let masked_view = match raw.masked_view {
        None => None,
        Some(name) => Some(
            manifest
                .view_id(&name)
                .ok_or_else(|| err(format!("unknown masked view {name:?}")))?,
        ),
    };
    lesions.sort_by(|a, b| a.lesion_id.cmp(&b.lesion_id));
    Ok(PatientCase {
        patient_id: raw.patient_id,
        lesions,
        exam_label: raw.exam_label,
        masked_view,
    })
}

/// Reads a case file; cases come back sorted by patient id, lesions by
/// lesion id.
pub fn read_cases(manifest: &Manifest, path: &Path) -> Result<Vec<PatientCase>> {
    let file = fs::File::open(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    let shown = path.display().to_string();
    let mut cases = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case = parse_line(manifest, &line, &shown, i + 1)?;
        if !ids.insert(case.patient_id.clone()) {
            return Err(Error::Parse {
                path: shown,
                line: i + 1,
                message: format!("duplicate patient id {}", case.patient_id),
            });
        }
        cases.push(case);
    }
    cases.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    Ok(cases)
}

pub fn load_dataset(manifest_path: &Path, cases_path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(manifest_path)?;
    let cases = read_cases(&manifest, cases_path)?;
    Dataset::new(manifest, cases)
}

pub fn write_cases(manifest: &Manifest, cases: &[PatientCase], out: &mut impl Write) -> Result<()> {
    for c in cases {
        let record = OutCase {
            patient_id: &c.patient_id,
            exam_label: c.exam_label,
            masked_view: c.masked_view.map(|ViewId(v)| manifest.view_names[v].as_str()),
            lesions: c
                .lesions
                .iter()
                .map(|l| OutLesion {
                    lesion_id: &l.lesion_id,
                    label: l.label,
                    features: Features {
                        manifest,
                        slots: &l.features,
                    },
                })
                .collect(),
        };
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes the manifest and the case file.
pub fn save_dataset(dataset: &Dataset, manifest_path: &Path, cases_path: &Path) -> Result<()> {
    let mut m = serde_json::to_string_pretty(&dataset.manifest)?;
    m.push('\n');
    fs::write(manifest_path, m)?;
    let mut out = std::io::BufWriter::new(fs::File::create(cases_path)?);
    write_cases(&dataset.manifest, &dataset.cases, &mut out)?;
    out.flush()?;
    Ok(())
}
