//! Generated 1x8x8 Gaussian-blob dataset for the class-split stream.
//! Not derived from any benchmark data; it exists to exercise the CNN
//! path on spatial inputs at test scale.
//!
//! Classes differ by blob radius and peak intensity, which survive global
//! average pooling; positions are jittered and carry no class signal.

use cnorm::{Dataset, SeededRng};

const SIDE: usize = 8;

/// Renders `per_class` images for each of `classes` classes.
pub fn blob_dataset(classes: usize, per_class: usize, rng: &mut SeededRng) -> Dataset {
    let pixels = SIDE * SIDE;
    let n = classes * per_class;
    let mut images = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        let frac = (c + 1) as f64 / classes as f64;
        let radius = 0.7 + 1.6 * frac;
        let peak = 0.55 + 0.45 * ((c % 2) as f64);
        for _ in 0..per_class {
            let cx = 3.5 + 1.2 * rng.gen_symmetric(1.0);
            let cy = 3.5 + 1.2 * rng.gen_symmetric(1.0);
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let v = peak * (-d2 / (2.0 * radius * radius)).exp()
                        + 0.03 * rng.gen_symmetric(1.0);
                    images.push(v.clamp(0.0, 1.0) as f32);
                }
            }
            labels.push(c as u8);
        }
    }
    Dataset::new(images, labels, SIDE, SIDE).expect("consistent synthetic dataset")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_have_requested_shape_and_labels() {
        let mut rng = SeededRng::new(1);
        let ds = blob_dataset(4, 10, &mut rng);
        assert_eq!(ds.len(), 40);
        assert_eq!((ds.rows, ds.cols), (8, 8));
        for c in 0..4u8 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 10);
        }
        assert!(ds.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn same_seed_same_data() {
        let a = blob_dataset(2, 5, &mut SeededRng::new(9));
        let b = blob_dataset(2, 5, &mut SeededRng::new(9));
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn class_mean_intensities_are_separated() {
        let mut rng = SeededRng::new(3);
        let ds = blob_dataset(4, 25, &mut rng);
        let mut means = vec![0.0f64; 4];
        for i in 0..ds.len() {
            let c = ds.labels[i] as usize;
            means[c] += ds.image(i).iter().map(|&v| v as f64).sum::<f64>();
        }
        for m in &mut means {
            *m /= 25.0 * 64.0;
        }
        for c in 0..3 {
            assert!(
                (means[c + 1] - means[c]).abs() > 0.01,
                "classes {c} and {} not separated: {means:?}",
                c + 1
            );
        }
    }
}
