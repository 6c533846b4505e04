//! Synthetic grayscale dataset with a closed-form classification rule.
//!
//! Each class draws a distinct number of bright disks (`2^class`) on a dim
//! noisy background. Disk positions come from a fixed slot layout scaled to
//! the resolution; a per-patient offset moves a patient's disks together and
//! per-image jitter perturbs each disk slightly. The bright-pixel count is
//! therefore a Bayes-separating statistic by construction, and
//! [`oracle_classify`] implements exactly that threshold rule.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{DatasetManifest, ManifestRecord};
use crate::error::Error;
use crate::math;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::Result;

/// Generation request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub patients_per_class: usize,
    pub images_per_patient: usize,
    pub resolution: usize,
    pub seed: u64,
}

/// One generated image with its identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticImage {
    pub class: usize,
    pub patient_id: String,
    pub file_name: String,
    pub resolution: usize,
    /// Row-major `H x W` intensities in 0..=255.
    pub pixels: Vec<u8>,
}

impl SyntheticImage {
    /// Raw 0-255 tensor view of the pixels, shape `[1,H,W]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64).collect();
        Tensor::new(vec![1, self.resolution, self.resolution], data).expect("square image")
    }
}

/// Most slots the layout provides; bounds the class count at 5 (16 disks).
const MAX_CLASSES: usize = 5;

const SYNTH_PATIENT_TAG: u64 = u64::from_le_bytes(*b"synthpat");
const SYNTH_IMAGE_TAG: u64 = u64::from_le_bytes(*b"synthimg");

fn disk_count(class: usize) -> usize {
    1 << class
}

fn disk_radius(resolution: usize) -> f64 {
    resolution as f64 / 17.8
}

/// Fixed slot layout: center, then rings of 6 and 12 positions, staggered.
fn slot_layout(resolution: usize) -> Vec<(f64, f64)> {
    let c = (resolution as f64 - 1.0) / 2.0;
    let mut slots = vec![(c, c)];
    let two_pi = 2.0 * core::f64::consts::PI;
    for i in 0..6 {
        let ang = two_pi * i as f64 / 6.0;
        let r = 0.22 * resolution as f64;
        slots.push((c + r * math::cos(ang), c + r * math::sin(ang)));
    }
    for i in 0..12 {
        let ang = two_pi * (i as f64 + 0.5) / 12.0;
        let r = 0.36 * resolution as f64;
        slots.push((c + r * math::cos(ang), c + r * math::sin(ang)));
    }
    slots
}

fn render(
    resolution: usize,
    centers: &[(f64, f64)],
    disk_level: f64,
    rng: &mut SplitMix64,
) -> Vec<u8> {
    let r = disk_radius(resolution);
    let mut pixels = vec![0u8; resolution * resolution];
    for y in 0..resolution {
        for x in 0..resolution {
            let bg = 18.0 + rng.range_f64(0.0, 36.0);
            // Coverage-based edge so disks are smooth but stay far above
            // the 128 threshold inside.
            let mut coverage: f64 = 0.0;
            for &(cx, cy) in centers {
                let d = math::sqrt((x as f64 - cx) * (x as f64 - cx) + (y as f64 - cy) * (y as f64 - cy));
                coverage = coverage.max((r + 0.5 - d).clamp(0.0, 1.0));
            }
            let v = bg + coverage * (disk_level - bg);
            pixels[y * resolution + x] = math::round(v.clamp(0.0, 255.0)) as u8;
        }
    }
    pixels
}

/// Generates the full image set deterministically from the spec.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticImage>> {
    if spec.classes == 0 || spec.patients_per_class == 0 || spec.images_per_patient == 0 {
        return Err(Error::invalid("generate_synthetic", "all counts must be at least 1"));
    }
    if spec.classes > MAX_CLASSES {
        return Err(Error::invalid(
            "generate_synthetic",
            format!("at most {MAX_CLASSES} classes have distinct motifs"),
        ));
    }
    if spec.resolution < 16 {
        return Err(Error::invalid("generate_synthetic", "resolution must be at least 16"));
    }
    let slots = slot_layout(spec.resolution);
    let mut images = Vec::new();
    for class in 0..spec.classes {
        let n_disks = disk_count(class);
        for patient in 0..spec.patients_per_class {
            let mut prng = SplitMix64::derive(
                spec.seed,
                &[SYNTH_PATIENT_TAG, class as u64, patient as u64],
            );
            let patient_dx = prng.range_f64(-1.5, 1.5);
            let patient_dy = prng.range_f64(-1.5, 1.5);
            let patient_id = format!("c{class}p{patient:03}");
            for image in 0..spec.images_per_patient {
                let mut irng = SplitMix64::derive(
                    spec.seed,
                    &[SYNTH_IMAGE_TAG, class as u64, patient as u64, image as u64],
                );
                let gx = irng.range_f64(-0.5, 0.5);
                let gy = irng.range_f64(-0.5, 0.5);
                let centers: Vec<(f64, f64)> = slots[..n_disks]
                    .iter()
                    .map(|&(sx, sy)| {
                        let jx = irng.range_f64(-0.75, 0.75);
                        let jy = irng.range_f64(-0.75, 0.75);
                        (sx + patient_dx + gx + jx, sy + patient_dy + gy + jy)
                    })
                    .collect();
                let disk_level = 235.0 - irng.range_f64(0.0, 20.0);
                let pixels = render(spec.resolution, &centers, disk_level, &mut irng);
                images.push(SyntheticImage {
                    class,
                    patient_id: patient_id.clone(),
                    file_name: format!("c{class}_p{patient:03}_i{image:02}.pgm"),
                    resolution: spec.resolution,
                    pixels,
                });
            }
        }
    }
    Ok(images)
}

/// Manifest over generated images (paths are the bare file names).
pub fn manifest_for(images: &[SyntheticImage], classes: usize) -> Result<DatasetManifest> {
    let class_names = (0..classes).map(|c| format!("class{c}")).collect();
    let records = images
        .iter()
        .map(|img| ManifestRecord {
            path: img.file_name.clone(),
            patient_id: img.patient_id.clone(),
            label: img.class,
        })
        .collect();
    DatasetManifest::new(records, class_names)
}

/// The closed-form rule the generator is built around: count pixels above
/// 128 and pick the class whose expected disk area is closest.
pub fn oracle_classify(pixels: &[u8], resolution: usize, classes: usize) -> usize {
    let bright = pixels.iter().filter(|&&p| p > 128).count() as f64;
    let r = disk_radius(resolution);
    let area = core::f64::consts::PI * r * r;
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for c in 0..classes {
        let expected = disk_count(c) as f64 * area;
        let dist = (bright - expected).abs();
        if dist < best_dist {
            best_dist = dist;
            best = c;
        }
    }
    best
}
