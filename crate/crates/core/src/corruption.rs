//! Additive Gaussian and salt-and-pepper noise at fixed levels.
//!
//! Image `j` of a corrupted set draws from `ChaCha8Rng` seeded with the spec's
//! seed on stream `j`, so results are independent of batching, thread count
//! and platform.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const GAUSSIAN_SIGMAS: [f64; 3] = [0.2, 0.4, 0.8];
pub const SALT_PEPPER_FRACTIONS: [f64; 3] = [0.02, 0.04, 0.08];
pub const LEVELS: u8 = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorruptionError {
    #[error("noise level {0} out of range 0..={LEVELS}")]
    Level(u8),
    #[error("clean noise must have level 0, got {0}")]
    CleanLevel(u8),
    #[error("expected images [N, C, H, W], got {0:?}")]
    Shape(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Clean,
    Gaussian,
    SaltPepper,
}

impl NoiseKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Gaussian => "gaussian",
            Self::SaltPepper => "salt_pepper",
        }
    }
}

/// Level 0 is clean for every kind; levels 1..=3 index the fixed parameter
/// tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level: u8,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, level: u8, seed: u64) -> Result<Self, CorruptionError> {
        let s = Self { kind, level, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn clean() -> Self {
        Self { kind: NoiseKind::Clean, level: 0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), CorruptionError> {
        if self.level > LEVELS {
            return Err(CorruptionError::Level(self.level));
        }
        if self.kind == NoiseKind::Clean && self.level != 0 {
            return Err(CorruptionError::CleanLevel(self.level));
        }
        Ok(())
    }

    /// sigma for Gaussian, pixel fraction for salt-and-pepper, 0 when clean.
    pub fn param(&self) -> Result<f64, CorruptionError> {
        self.validate()?;
        if self.level == 0 {
            return Ok(0.0);
        }
        let i = usize::from(self.level - 1);
        Ok(match self.kind {
            NoiseKind::Clean => 0.0,
            NoiseKind::Gaussian => GAUSSIAN_SIGMAS[i],
            NoiseKind::SaltPepper => SALT_PEPPER_FRACTIONS[i],
        })
    }

    pub fn is_identity(&self) -> bool {
        self.kind == NoiseKind::Clean || self.level == 0
    }

    pub fn label(&self) -> String {
        format!("{}_{}", self.kind.label(), self.level)
    }
}

fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn gaussian(image: &mut [f32], sigma: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in image {
        *v = (f64::from(*v) + normal.sample(rng)).clamp(0.0, 1.0) as f32;
    }
}

fn salt_pepper(image: &mut [f32], channels: usize, pixels: usize, fraction: f64, rng: &mut ChaCha8Rng) {
    let count = (fraction * pixels as f64).round() as usize;
    let chosen = index::sample(rng, pixels, count);
    let pepper = count / 2;
    for (k, pixel) in chosen.into_iter().enumerate() {
        let value = if k < pepper { 0.0 } else { 1.0 };
        for c in 0..channels {
            image[c * pixels + pixel] = value;
        }
    }
}

/// Corrupts a batch whose first image has global index `first_index`.
/// Images must lie in `[0, 1]`; outputs always do.
pub fn corrupt_from(images: &Tensor<f32>, spec: &NoiseSpec, first_index: u64) -> Result<Tensor<f32>, CorruptionError> {
    let param = spec.param()?;
    let &[_, c, h, w] = images.shape() else {
        return Err(CorruptionError::Shape(images.shape().to_vec()));
    };
    let mut out = images.clone();
    out.set_requires_grad(false);
    if spec.is_identity() || param == 0.0 {
        return Ok(out);
    }
    let per_image = c * h * w;
    if per_image == 0 {
        return Ok(out);
    }
    out.data_mut().par_chunks_mut(per_image).enumerate().for_each(|(j, img)| {
        let mut rng = image_rng(spec.seed, first_index + j as u64);
        match spec.kind {
            NoiseKind::Gaussian => gaussian(img, param, &mut rng),
            NoiseKind::SaltPepper => salt_pepper(img, c, h * w, param, &mut rng),
            NoiseKind::Clean => {}
        }
    });
    Ok(out)
}

pub fn corrupt(images: &Tensor<f32>, spec: &NoiseSpec) -> Result<Tensor<f32>, CorruptionError> {
    corrupt_from(images, spec, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn images(n: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([n, 3, 8, 8], |_| r.random_range(0.0..=1.0f32))
    }

    #[test]
    fn level_tables() {
        let g = |l| NoiseSpec::new(NoiseKind::Gaussian, l, 0).unwrap().param().unwrap();
        let s = |l| NoiseSpec::new(NoiseKind::SaltPepper, l, 0).unwrap().param().unwrap();
        assert_eq!([g(0), g(1), g(2), g(3)], [0.0, 0.2, 0.4, 0.8]);
        assert_eq!([s(0), s(1), s(2), s(3)], [0.0, 0.02, 0.04, 0.08]);
        assert_eq!(NoiseSpec::new(NoiseKind::Gaussian, 4, 0), Err(CorruptionError::Level(4)));
        assert_eq!(NoiseSpec::new(NoiseKind::Clean, 1, 0), Err(CorruptionError::CleanLevel(1)));
    }

    #[test]
    fn clean_and_level_zero_are_bit_identical() {
        let x = images(3, 1);
        for spec in [NoiseSpec::clean(), NoiseSpec { kind: NoiseKind::SaltPepper, level: 0, seed: 5 }] {
            assert_eq!(corrupt(&x, &spec).unwrap(), x);
        }
    }

    #[test]
    fn salt_pepper_alters_exact_pixel_count() {
        let x = Tensor::full([4, 3, 32, 32], 0.5f32);
        for level in 1..=3 {
            let spec = NoiseSpec::new(NoiseKind::SaltPepper, level, 9).unwrap();
            let y = corrupt(&x, &spec).unwrap();
            let expected = (spec.param().unwrap() * 1024.0).round() as usize;
            for img in y.data().chunks(3 * 1024) {
                let changed: Vec<usize> = (0..1024).filter(|&p| img[p] != 0.5).collect();
                assert_eq!(changed.len(), expected);
                let zeros = changed.iter().filter(|&&p| img[p] == 0.0).count();
                assert_eq!(zeros, expected / 2);
                for &p in &changed {
                    assert!(img[p] == 0.0 || img[p] == 1.0);
                    assert_eq!(img[1024 + p], img[p]);
                    assert_eq!(img[2048 + p], img[p]);
                }
            }
        }
    }

    #[test]
    fn seeded_and_batch_independent() {
        let x = images(6, 2);
        let spec = NoiseSpec::new(NoiseKind::Gaussian, 2, 77).unwrap();
        let a = corrupt(&x, &spec).unwrap();
        assert_eq!(a, corrupt(&x, &spec).unwrap());
        let tail = corrupt_from(&x.slice_outer(4, 6).unwrap(), &spec, 4).unwrap();
        assert_eq!(tail, a.slice_outer(4, 6).unwrap());
        let other = corrupt(&x, &NoiseSpec { seed: 78, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    /// Standard deviation of `clamp(0.5 + sigma * Z, 0, 1)` by Simpson
    /// integration over the normal density.
    fn clipped_std(sigma: f64) -> f64 {
        let n = 20_000;
        let (lo, hi) = (-10.0, 10.0);
        let h = (hi - lo) / n as f64;
        let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let moment = |k: i32| {
            (0..=n)
                .map(|i| {
                    let z = lo + i as f64 * h;
                    let x = (0.5 + sigma * z).clamp(0.0, 1.0);
                    let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    w * x.powi(k) * pdf(z)
                })
                .sum::<f64>()
                * h
                / 3.0
        };
        (moment(2) - moment(1).powi(2)).sqrt()
    }

    #[test]
    fn clamped_gaussian_std_matches_integrated_oracle() {
        let x = Tensor::full([326, 3, 32, 32], 0.5f32);
        let spec = NoiseSpec::new(NoiseKind::Gaussian, 2, 1).unwrap();
        let y = corrupt(&x, &spec).unwrap();
        let n = y.numel() as f64;
        assert!(n >= 1e6);
        let mean = y.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = y.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        let oracle = clipped_std(0.4);
        assert!((oracle - 0.3256).abs() < 1e-3, "{oracle}");
        assert!((var.sqrt() - oracle).abs() < 2e-3, "{} vs {oracle}", var.sqrt());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn output_stays_in_unit_range(seed in any::<u64>(), level in 0u8..=3, sp in any::<bool>()) {
            let kind = if sp { NoiseKind::SaltPepper } else { NoiseKind::Gaussian };
            let y = corrupt(&images(2, seed), &NoiseSpec { kind, level, seed }).unwrap();
            prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
