//! Patient-grouped test/fold/fraction split planning.
//!
//! Patients are the unit of shuffling for the test split and the per-fold
//! train/val splits, so no patient's images ever straddle a boundary.
//! Fraction subsets are nested record-level prefixes inside each fold's
//! training set, so the data-fraction sweep is monotone in data rather than
//! resampling noise.

use serde::{Deserialize, Serialize};

use super::Record;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_FRACTIONS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    pub folds: usize,
    pub test_frac: f64,
    pub val_frac: f64,
    pub fractions: Vec<f64>,
    /// Order fraction prefixes so label patterns interleave.
    pub stratify: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            folds: 5,
            test_frac: 0.2,
            val_frac: 0.2,
            fractions: DEFAULT_FRACTIONS.to_vec(),
            stratify: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldEntry {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Nested record-id subsets, aligned with `FoldPlan::fractions`.
    pub fraction_subsets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    /// Uncertainty policy the ids were produced under; callers record it
    /// before serializing.
    #[serde(default)]
    pub policy: String,
    pub patient_grouped: bool,
    pub fractions: Vec<f64>,
    pub test: Vec<usize>,
    pub folds: Vec<FoldEntry>,
}

impl FoldPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<FoldPlan> {
        Ok(serde_json::from_str(text)?)
    }

    /// Training ids of fold `fold` at fraction `f`; `f >= 1` means the full
    /// training set.
    pub fn train_subset(&self, fold: usize, f: f64) -> Result<&[usize]> {
        let entry = self
            .folds
            .get(fold)
            .ok_or_else(|| Error::Config(format!("fold {fold} out of range")))?;
        if f >= 1.0 {
            return Ok(&entry.train);
        }
        let idx = self
            .fractions
            .iter()
            .position(|&x| (x - f).abs() < 1e-9)
            .ok_or_else(|| Error::Config(format!("fraction {f} not in the plan")))?;
        Ok(&entry.fraction_subsets[idx])
    }
}

/// Deterministic patient-grouped planning: `test_frac` of patients go to the
/// shared test split; each fold re-splits the remaining pool into
/// train / val by patient; nested fraction prefixes are drawn per fold.
pub fn plan_splits(records: &[Record], seed: u64, cfg: &SplitConfig) -> Result<FoldPlan> {
    if cfg.folds == 0 {
        return Err(Error::Planning("at least one fold required".into()));
    }
    // unique patients in first-appearance order, with their record ids
    let mut patients: Vec<&str> = Vec::new();
    let mut ids_of: std::collections::HashMap<&str, Vec<usize>> = std::collections::HashMap::new();
    for (i, r) in records.iter().enumerate() {
        match ids_of.entry(r.patient_id.as_str()) {
            std::collections::hash_map::Entry::Vacant(e) => {
                patients.push(&r.patient_id);
                e.insert(vec![i]);
            }
            std::collections::hash_map::Entry::Occupied(mut e) => e.get_mut().push(i),
        }
    }
    if patients.len() < 5 {
        return Err(Error::Planning(format!(
            "{} patients, need at least 5 for patient-grouped splitting",
            patients.len()
        )));
    }
    let by_patient = |name: &str| -> &[usize] { &ids_of[name] };

    let mut order: Vec<usize> = (0..patients.len()).collect();
    Rng::derive(seed, &[0x7E57]).shuffle(&mut order);

    let n_test = ((cfg.test_frac * patients.len() as f64).round() as usize)
        .clamp(1, patients.len() - 2);
    let test_patients: Vec<&str> = order[..n_test].iter().map(|&i| patients[i]).collect();
    let pool_patients: Vec<&str> = order[n_test..].iter().map(|&i| patients[i]).collect();
    if pool_patients.len() < 2 {
        return Err(Error::Planning("pool too small for train/val splitting".into()));
    }

    let mut test: Vec<usize> = Vec::new();
    for p in &test_patients {
        test.extend_from_slice(by_patient(p));
    }

    let mut folds = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let mut pool = pool_patients.clone();
        Rng::derive(seed, &[0xF0, fold as u64]).shuffle(&mut pool);
        let n_val =
            ((cfg.val_frac * pool.len() as f64).round() as usize).clamp(1, pool.len() - 1);
        let mut val: Vec<usize> = Vec::new();
        for p in &pool[..n_val] {
            val.extend_from_slice(by_patient(p));
        }
        let mut train: Vec<usize> = Vec::new();
        for p in &pool[n_val..] {
            train.extend_from_slice(by_patient(p));
        }

        // nested record-level prefixes
        let mut shuffled = train.clone();
        Rng::derive(seed, &[0xF5AC, fold as u64]).shuffle(&mut shuffled);
        if cfg.stratify {
            shuffled = interleave_by_label_pattern(records, shuffled);
        }
        let fraction_subsets = cfg
            .fractions
            .iter()
            .map(|&f| {
                let n = ((f * shuffled.len() as f64).round() as usize).max(1).min(shuffled.len());
                shuffled[..n].to_vec()
            })
            .collect();
        folds.push(FoldEntry { train, val, fraction_subsets });
    }

    Ok(FoldPlan {
        seed,
        policy: String::new(),
        patient_grouped: true,
        fractions: cfg.fractions.clone(),
        test,
        folds,
    })
}

/// Round-robin over groups of identical raw label patterns so every prefix
/// sees each pattern roughly proportionally.
fn interleave_by_label_pattern(records: &[Record], shuffled: Vec<usize>) -> Vec<usize> {
    let mut groups: Vec<(RawKey, Vec<usize>)> = Vec::new();
    for id in shuffled {
        let key = records[id].raw_labels;
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(id),
            None => groups.push((key, vec![id])),
        }
    }
    let mut out = Vec::new();
    let mut cursor = vec![0usize; groups.len()];
    loop {
        let mut emitted = false;
        for (gi, (_, ids)) in groups.iter().enumerate() {
            if cursor[gi] < ids.len() {
                out.push(ids[cursor[gi]]);
                cursor[gi] += 1;
                emitted = true;
            }
        }
        if !emitted {
            break;
        }
    }
    out
}

type RawKey = [i8; super::NUM_CLASSES];
