//! Synthetic dataset generator.
//!
//! Images are noisy lung-like grayscale backgrounds; each of the five classes
//! corresponds to a bright blob in a fixed region of a 5-region layout, so a
//! per-class logistic regression on region means separates the data by
//! construction. A configurable share of positive labels is emitted as -1 to
//! exercise the uncertainty policy, and synthetic patient ids group images.

use std::path::Path;

use super::{manifest_to_csv, GrayImage, Record, NUM_CLASSES};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub size: usize,
    pub noise_sigma: f64,
    pub blob_amplitude: f64,
    pub marginals: [f64; NUM_CLASSES],
    /// (source class, target class, copy probability); keep the pair's
    /// marginals equal so copying does not shift them.
    pub cooccur: Vec<(usize, usize, f64)>,
    /// Probability that a positive label is emitted as uncertain (-1).
    pub uncertain_prob: f64,
    pub max_images_per_patient: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 32,
            noise_sigma: 0.05,
            blob_amplitude: 0.45,
            marginals: [0.30, 0.25, 0.30, 0.25, 0.35],
            cooccur: vec![(0, 2, 0.2)],
            uncertain_prob: 0.05,
            max_images_per_patient: 3,
        }
    }
}

/// Pixel rectangle (y0, y1, x0, x1), half-open, of class `k`'s pattern
/// region in an h x w image.
pub fn region_rect(k: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let f = |a: f64, n: usize| (a * n as f64).round() as usize;
    match k {
        0 => (f(0.12, h), f(0.40, h), f(0.10, w), f(0.42, w)),
        1 => (f(0.12, h), f(0.40, h), f(0.58, w), f(0.90, w)),
        2 => (f(0.45, h), f(0.72, h), f(0.10, w), f(0.42, w)),
        3 => (f(0.45, h), f(0.72, h), f(0.58, w), f(0.90, w)),
        _ => (f(0.75, h), f(0.95, h), f(0.30, w), f(0.70, w)),
    }
}

/// Mean intensity inside class `k`'s region.
pub fn region_mean(img: &GrayImage, k: usize) -> f64 {
    let (y0, y1, x0, x1) = region_rect(k, img.height, img.width);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            sum += img.at(y, x);
            count += 1;
        }
    }
    sum / count.max(1) as f64
}

/// All five region means: the feature vector of the learnability oracle.
pub fn region_features(img: &GrayImage) -> [f64; NUM_CLASSES] {
    let mut out = [0.0; NUM_CLASSES];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = region_mean(img, k);
    }
    out
}

/// Render one image for the given true labels.
pub fn render(labels: &[u8; NUM_CLASSES], spec: &SynthSpec, rng: &mut Rng) -> GrayImage {
    let s = spec.size;
    let mut img = GrayImage::new(s, s);
    let (cx_l, cx_r, cy) = (0.32 * s as f64, 0.68 * s as f64, 0.52 * s as f64);
    let (rx, ry) = (0.20 * s as f64, 0.30 * s as f64);
    for y in 0..s {
        for x in 0..s {
            let mut v = 0.12;
            for &cx in &[cx_l, cx_r] {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    v += 0.25;
                }
            }
            v += spec.noise_sigma * rng.normal();
            img.pixels[y * s + x] = v;
        }
    }
    for (k, &on) in labels.iter().enumerate() {
        if on == 0 {
            continue;
        }
        let (y0, y1, x0, x1) = region_rect(k, s, s);
        // bright bar on the inner 70% of the region
        let inset_y = ((y1 - y0) as f64 * 0.15).round() as usize;
        let inset_x = ((x1 - x0) as f64 * 0.15).round() as usize;
        for y in y0 + inset_y..y1.saturating_sub(inset_y) {
            for x in x0 + inset_x..x1.saturating_sub(inset_x) {
                img.pixels[y * s + x] += spec.blob_amplitude;
            }
        }
    }
    for v in &mut img.pixels {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Generate `n` images and their manifest records, deterministically.
pub fn synth_generate(n: usize, seed: u64, spec: &SynthSpec) -> (Vec<GrayImage>, Vec<Record>) {
    let mut label_rng = Rng::derive(seed, &[0x1ABE1]);
    let mut patient_rng = Rng::derive(seed, &[0x9A7]);
    let mut images = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);

    let mut patient_idx = 0usize;
    let mut remaining_in_patient = 0usize;
    for i in 0..n {
        if remaining_in_patient == 0 {
            patient_idx += 1;
            remaining_in_patient = 1 + patient_rng.below(spec.max_images_per_patient);
        }
        remaining_in_patient -= 1;

        let mut labels = [0u8; NUM_CLASSES];
        for (k, slot) in labels.iter_mut().enumerate() {
            *slot = u8::from(label_rng.bernoulli(spec.marginals[k]));
        }
        for &(a, b, rho) in &spec.cooccur {
            if label_rng.bernoulli(rho) {
                labels[b] = labels[a];
            }
        }

        let mut pixel_rng = Rng::derive(seed, &[0x1F9, i as u64]);
        images.push(render(&labels, spec, &mut pixel_rng));

        let mut raw = [0i8; NUM_CLASSES];
        for (k, slot) in raw.iter_mut().enumerate() {
            *slot = if labels[k] == 1 {
                if label_rng.bernoulli(spec.uncertain_prob) {
                    -1
                } else {
                    1
                }
            } else {
                0
            };
        }
        records.push(Record {
            image_path: format!("images/img_{i:05}.pgm"),
            patient_id: format!("synthP{patient_idx:05}"),
            raw_labels: raw,
            resolved_labels: None,
        });
    }
    (images, records)
}

/// Write images and manifest under `dir` (creates `dir/images/`).
pub fn write_dataset(dir: &Path, images: &[GrayImage], records: &[Record]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    for (img, rec) in images.iter().zip(records) {
        super::pgm::write(&dir.join(&rec.image_path), img)?;
    }
    std::fs::write(dir.join("manifest.csv"), manifest_to_csv(records))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_region_outshines_negative_by_twice_noise_sigma() {
        let spec = SynthSpec::default();
        for k in 0..NUM_CLASSES {
            let mut labels = [0u8; NUM_CLASSES];
            labels[k] = 1;
            let pos = render(&labels, &spec, &mut Rng::new(100 + k as u64));
            let neg = render(&[0; NUM_CLASSES], &spec, &mut Rng::new(200 + k as u64));
            let margin = region_mean(&pos, k) - region_mean(&neg, k);
            assert!(
                margin >= 2.0 * spec.noise_sigma,
                "class {k}: margin {margin} below {}",
                2.0 * spec.noise_sigma
            );
        }
    }

    #[test]
    fn label_marginals_match_configuration_within_two_percent() {
        let spec = SynthSpec::default();
        let n = 10_000;
        let (_, records) = synth_generate(n, 42, &spec);
        for k in 0..NUM_CLASSES {
            // uncertain (-1) counts as positive: it is only emitted for
            // positives
            let count = records.iter().filter(|r| r.raw_labels[k] != 0).count();
            let freq = count as f64 / n as f64;
            assert!(
                (freq - spec.marginals[k]).abs() <= 0.02,
                "class {k}: {freq} vs {}",
                spec.marginals[k]
            );
        }
    }

    #[test]
    fn uncertain_share_of_positives_near_five_percent() {
        let (_, records) = synth_generate(10_000, 7, &SynthSpec::default());
        let mut pos = 0usize;
        let mut unc = 0usize;
        for r in &records {
            for &v in &r.raw_labels {
                if v != 0 {
                    pos += 1;
                    if v == -1 {
                        unc += 1;
                    }
                }
            }
        }
        let share = unc as f64 / pos as f64;
        assert!((share - 0.05).abs() < 0.02, "uncertain share {share}");
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let spec = SynthSpec::default();
        let (img_a, rec_a) = synth_generate(50, 9, &spec);
        let (img_b, rec_b) = synth_generate(50, 9, &spec);
        assert_eq!(img_a, img_b);
        assert_eq!(rec_a, rec_b);
    }

    #[test]
    fn patients_group_consecutive_images() {
        let (_, records) = synth_generate(200, 3, &SynthSpec::default());
        let mut sizes = std::collections::HashMap::new();
        for r in &records {
            *sizes.entry(r.patient_id.clone()).or_insert(0usize) += 1;
        }
        assert!(sizes.len() > 60, "expected many patients, got {}", sizes.len());
        assert!(sizes.values().all(|&n| (1..=3).contains(&n)));
    }

    #[test]
    fn regions_are_disjoint_rectangles() {
        for h in [32usize, 64] {
            let mut covered = vec![false; h * h];
            for k in 0..NUM_CLASSES {
                let (y0, y1, x0, x1) = region_rect(k, h, h);
                assert!(y0 < y1 && x0 < x1 && y1 <= h && x1 <= h);
                for y in y0..y1 {
                    for x in x0..x1 {
                        assert!(!covered[y * h + x], "regions overlap at ({y},{x})");
                        covered[y * h + x] = true;
                    }
                }
            }
        }
    }
}
