//! Synthetic image dataset with per-class templates.
//!
//! Each class gets a distinct deterministic template; samples are the
//! template plus seeded Gaussian noise, clamped to [0, 1]. Every image
//! carries one mask region at a class-independent location (the synthetic
//! "face"), so privacy masking has something to chew on while the class
//! signal lives everywhere else.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::{Dataset, Image, MaskRegion, Sample};
use crate::error::{Error, Result};

/// Location of the synthetic face box: class-independent, roughly the upper
/// middle of the frame.
pub fn face_region(image_size: usize) -> MaskRegion {
    let side = (3 * image_size / 8).max(2);
    let row0 = image_size / 8;
    let col0 = (image_size - side) / 2;
    MaskRegion {
        row0,
        col0,
        row1: row0 + side,
        col1: col0 + side,
    }
}

pub fn synth_generate(
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    noise_level: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::invalid("num_classes must be at least 2"));
    }
    if image_size < 8 {
        return Err(Error::invalid("image_size must be at least 8"));
    }
    if samples_per_class == 0 {
        return Err(Error::invalid("samples_per_class must be positive"));
    }
    if noise_level < 0.0 {
        return Err(Error::invalid("noise_level must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let npix = image_size * image_size;

    // Templates kept away from the clamp boundaries so additive noise stays
    // roughly symmetric.
    let templates: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..npix).map(|_| rng.gen_range(0.15..0.85)).collect())
        .collect();

    let region = face_region(image_size);
    let mut ids = Vec::with_capacity(num_classes * samples_per_class);
    let mut samples = Vec::with_capacity(num_classes * samples_per_class);
    for (class, template) in templates.iter().enumerate() {
        for _ in 0..samples_per_class {
            let pixels: Vec<f64> = template
                .iter()
                .map(|&t| {
                    let n: f64 = rng.sample(StandardNormal);
                    (t + noise_level * n).clamp(0.0, 1.0)
                })
                .collect();
            let image = Image::new(image_size, image_size, 1, pixels, vec![region])?;
            ids.push(format!("s{:06}", samples.len()));
            samples.push(Sample {
                x: image,
                z: None,
                y: class,
            });
        }
    }
    Ok(Dataset {
        num_classes,
        height: image_size,
        width: image_size,
        channels: 1,
        ids,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels_balanced() {
        let ds = synth_generate(4, 50, 16, 0.05, 7).unwrap();
        assert_eq!(ds.len(), 200);
        for class in 0..4 {
            assert_eq!(ds.labels().iter().filter(|&&y| y == class).count(), 50);
        }
    }

    #[test]
    fn zero_noise_makes_same_class_samples_identical() {
        let ds = synth_generate(3, 4, 8, 0.0, 11).unwrap();
        let first: Vec<&Sample> = ds.samples.iter().filter(|s| s.y == 2).collect();
        assert!(first.windows(2).all(|w| w[0].x.pixels == w[1].x.pixels));
    }

    #[test]
    fn negative_noise_rejected() {
        assert!(synth_generate(4, 5, 16, -0.1, 7).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synth_generate(4, 10, 16, 0.05, 42).unwrap();
        let b = synth_generate(4, 10, 16, 0.05, 42).unwrap();
        for (sa, sb) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(sa.x.pixels, sb.x.pixels);
        }
    }

    #[test]
    fn nearest_template_classifier_is_perfect() {
        // Independent oracle: classify each sample by the nearest per-class
        // pixel centroid computed from the generated data itself.
        let ds = synth_generate(4, 50, 16, 0.05, 7).unwrap();
        let npix = 16 * 16;
        let mut centroids = vec![vec![0.0f64; npix]; 4];
        let mut counts = vec![0usize; 4];
        for s in &ds.samples {
            counts[s.y] += 1;
            for (c, &p) in centroids[s.y].iter_mut().zip(s.x.pixels.iter()) {
                *c += p;
            }
        }
        for (c, &n) in centroids.iter_mut().zip(counts.iter()) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let correct = ds
            .samples
            .iter()
            .filter(|s| {
                let mut best = (f64::INFINITY, 0);
                for (k, c) in centroids.iter().enumerate() {
                    let d: f64 = c
                        .iter()
                        .zip(s.x.pixels.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                best.1 == s.y
            })
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn every_image_has_the_face_region() {
        let ds = synth_generate(2, 3, 16, 0.05, 9).unwrap();
        let expect = face_region(16);
        for s in &ds.samples {
            assert_eq!(s.x.mask_regions, vec![expect]);
        }
    }
}
