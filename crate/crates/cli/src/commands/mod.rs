pub mod eval;
pub mod params;
pub mod saliency;
pub mod sweep;
pub mod synth;
pub mod train;

use std::path::Path;

use cxrlab_core::data::augment::AugmentConfig;
use cxrlab_core::data::splits::{plan_splits, FoldPlan, SplitConfig};
use cxrlab_core::data::{LoadedDataset, UncertaintyPolicy};
use cxrlab_core::models::Family;
use cxrlab_core::train::TrainConfig;
use cxrlab_core::Result;

use crate::config::manifest_path;

/// Desk-scale augmentation: the synthetic patterns are location-coded, so
/// mirroring is withheld; rotation, intensity jitter and light erasing stay.
pub fn desk_augment() -> AugmentConfig {
    AugmentConfig {
        ops_per_image: 1,
        flip_prob: 0.0,
        rotate_max_deg: 5.0,
        intensity_jitter: 0.1,
        erase_prob: 0.1,
        erase_area: (0.02, 0.1),
    }
}

/// Family defaults under the desk profile (batch 32, reduced augmentation)
/// or the paper profile (batch 128, full augmentation).
pub fn base_train_config(family: Family, paper_scale: bool) -> TrainConfig {
    let mut cfg = TrainConfig::for_family(family);
    if paper_scale {
        cfg.batch_size = 128;
        cfg.augment = AugmentConfig::default();
    } else {
        cfg.batch_size = 32;
        cfg.augment = desk_augment();
    }
    cfg
}

/// Load the dataset behind `data` and plan splits with the given seed.
pub fn load_and_plan(
    data: &Path,
    policy: UncertaintyPolicy,
    split_seed: u64,
    split_cfg: &SplitConfig,
) -> Result<(LoadedDataset, FoldPlan)> {
    let manifest = manifest_path(data)?;
    let dataset = LoadedDataset::load(&manifest, policy)?;
    let mut plan = plan_splits(&dataset.records, split_seed, split_cfg)?;
    plan.policy = policy.as_str().to_string();
    Ok((dataset, plan))
}

/// Convert a 1-based fold flag to a plan index.
pub fn fold_index(fold: usize, plan: &FoldPlan) -> Result<usize> {
    if fold == 0 || fold > plan.folds.len() {
        return Err(cxrlab_core::Error::Config(format!(
            "fold {fold} out of range 1..={}",
            plan.folds.len()
        )));
    }
    Ok(fold - 1)
}
