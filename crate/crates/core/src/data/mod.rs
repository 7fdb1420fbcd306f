//! Data pipeline: manifest ingestion, the uncertain-label policy,
//! patient-grouped splitting, synthetic data and augmentation.

pub mod augment;
pub mod pgm;
pub mod splits;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 5;
pub const LABEL_NAMES: [&str; NUM_CLASSES] =
    ["Atelectasis", "Cardiomegaly", "Consolidation", "Edema", "Pleural Effusion"];

pub const MANIFEST_HEADER: &str = "image_path,patient_id,l1,l2,l3,l4,l5";

/// Grayscale image with row-major pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> GrayImage {
        GrayImage { width, height, pixels: vec![0.0; width * height] }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Replicate the single channel into a [C, H, W] model input tensor.
    pub fn to_model_input(&self, channels: usize) -> Tensor {
        let mut data = Vec::with_capacity(channels * self.pixels.len());
        for _ in 0..channels {
            data.extend_from_slice(&self.pixels);
        }
        Tensor::new(vec![channels, self.height, self.width], data).expect("image shape")
    }
}

/// Raw label values: 1 positive, 0 negative, -1 uncertain.
pub type RawLabels = [i8; NUM_CLASSES];

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub image_path: String,
    pub patient_id: String,
    pub raw_labels: RawLabels,
    /// Set once the uncertainty policy has been applied.
    pub resolved_labels: Option<[u8; NUM_CLASSES]>,
}

impl Record {
    /// Resolved labels as f64 targets; panics if the policy was not applied.
    pub fn targets(&self) -> [f64; NUM_CLASSES] {
        let r = self.resolved_labels.expect("uncertainty policy not applied");
        [r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64, r[4] as f64]
    }
}

/// How uncertain (-1) labels are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyPolicy {
    /// Treat uncertain as positive.
    #[default]
    UOnes,
    /// Treat uncertain as negative.
    UZeros,
}

impl UncertaintyPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "u_ones" => Ok(UncertaintyPolicy::UOnes),
            "u_zeros" => Ok(UncertaintyPolicy::UZeros),
            other => Err(Error::Config(format!("unknown policy '{other}' (u_ones | u_zeros)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            UncertaintyPolicy::UOnes => "u_ones",
            UncertaintyPolicy::UZeros => "u_zeros",
        }
    }
}

/// Parse a manifest CSV: header `image_path,patient_id,l1,l2,l3,l4,l5`,
/// labels in {1, 0, -1}.
pub fn load_manifest(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Vec<Record>> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Parse { line: 1, msg: "empty manifest, expected header".into() });
    };
    if header.trim() != MANIFEST_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("bad header '{}', expected '{MANIFEST_HEADER}'", header.trim()),
        });
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let mut raw = [0i8; NUM_CLASSES];
        for (k, slot) in raw.iter_mut().enumerate() {
            let v = fields[2 + k].trim();
            *slot = match v {
                "1" => 1,
                "0" => 0,
                "-1" => -1,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("label {} value '{other}' not in {{1, 0, -1}}", k + 1),
                    })
                }
            };
        }
        records.push(Record {
            image_path: fields[0].trim().to_string(),
            patient_id: fields[1].trim().to_string(),
            raw_labels: raw,
            resolved_labels: None,
        });
    }
    Ok(records)
}

/// Serialize records back to manifest CSV text.
pub fn manifest_to_csv(records: &[Record]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.image_path,
            r.patient_id,
            r.raw_labels[0],
            r.raw_labels[1],
            r.raw_labels[2],
            r.raw_labels[3],
            r.raw_labels[4]
        ));
    }
    out
}

/// Resolve uncertain labels in place.
pub fn apply_policy(records: &mut [Record], policy: UncertaintyPolicy) {
    let uncertain_value = match policy {
        UncertaintyPolicy::UOnes => 1u8,
        UncertaintyPolicy::UZeros => 0u8,
    };
    for r in records {
        let mut resolved = [0u8; NUM_CLASSES];
        for (k, &raw) in r.raw_labels.iter().enumerate() {
            resolved[k] = match raw {
                1 => 1,
                0 => 0,
                _ => uncertain_value,
            };
        }
        r.resolved_labels = Some(resolved);
    }
}

/// Records plus their decoded images, ready for training.
pub struct LoadedDataset {
    pub records: Vec<Record>,
    pub images: Vec<GrayImage>,
}

impl LoadedDataset {
    /// Load a manifest and every referenced image (paths are relative to the
    /// manifest's directory), applying the uncertainty policy.
    pub fn load(manifest_path: &Path, policy: UncertaintyPolicy) -> Result<LoadedDataset> {
        let mut records = load_manifest(manifest_path)?;
        apply_policy(&mut records, policy);
        let base: PathBuf =
            manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let mut images = Vec::with_capacity(records.len());
        for r in &records {
            images.push(pgm::read(&base.join(&r.image_path))?);
        }
        Ok(LoadedDataset { records, images })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// n x 5 resolved targets for the given record indices.
    pub fn targets_for(&self, ids: &[usize]) -> Vec<[f64; NUM_CLASSES]> {
        ids.iter().map(|&i| self.records[i].targets()).collect()
    }
}
