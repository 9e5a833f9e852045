//! Targeted L-infinity attacks (BIM and random-start PGD) and the median
//! minimal perturbation over a set of images.
//!
//! Attacks descend the cross-entropy of the target class at the model's
//! decision logits (the final step of an unrolled network), with gradients
//! flowing through the whole unroll. Each iterate is projected onto the
//! intersection of the epsilon ball around the clean image and `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::network::{Classifier, NetworkError};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::training::predictions;

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("non-finite input gradient at step {step} (epsilon {epsilon})")]
    NonFinite { step: usize, epsilon: f64 },
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("no correctly classified images to attack")]
    NoEligibleImages,
}

pub type Result<T, E = AttackError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Bim,
    Rpgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// The class with the lowest clean logit.
    LeastLikely,
    /// `(label + k) mod classes`.
    Offset(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// Ascending, positive L-infinity budgets.
    pub epsilons: Vec<f64>,
    pub steps: usize,
    /// Step size is `step_factor * epsilon / steps`.
    pub step_factor: f64,
    pub target: TargetRule,
    /// Unroll length of the attacked network.
    pub timesteps: usize,
    pub seed: u64,
}

/// `1/255 * sqrt(2)^k` for `k = 0..=12`, i.e. 1/255 up to 64/255.
pub fn default_epsilons() -> Vec<f64> {
    (0..=12).map(|k| 2f64.powf(k as f64 / 2.0) / 255.0).collect()
}

impl AttackConfig {
    pub fn new(method: AttackMethod) -> Self {
        Self { method, epsilons: default_epsilons(), steps: 40, step_factor: 2.5, target: TargetRule::LeastLikely, timesteps: 10, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AttackError::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return bad(format!("epsilons must be positive and finite: {:?}", self.epsilons));
        }
        if self.epsilons.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("epsilons must be strictly ascending: {:?}", self.epsilons));
        }
        if !(self.step_factor > 0.0) {
            return bad("step_factor must be positive".into());
        }
        Ok(())
    }
}

fn logits_of<C: Classifier<f32>>(model: &C, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let l = model.logits(&mut tape, x)?;
    Ok(tape.value(l).clone())
}

pub fn predict<C: Classifier<f32>>(model: &C, image: &Tensor<f32>) -> Result<usize> {
    Ok(predictions(&logits_of(model, image)?)[0])
}

/// Target class of a single image under `rule`.
pub fn choose_target<C: Classifier<f32>>(model: &C, image: &Tensor<f32>, label: usize, rule: TargetRule) -> Result<usize> {
    let logits = logits_of(model, image)?;
    let classes = logits.numel();
    Ok(match rule {
        TargetRule::LeastLikely => {
            let d = logits.data();
            (0..classes).fold(0, |best, i| if d[i] < d[best] { i } else { best })
        }
        TargetRule::Offset(k) => (label + k) % classes,
    })
}

/// Targeted cross-entropy and its gradient with respect to a single input
/// image `[1, C, H, W]`.
pub fn input_gradient<C: Classifier<f32>>(model: &C, image: &Tensor<f32>, target: usize) -> Result<(f32, Tensor<f32>, usize)> {
    let mut tape = Tape::new();
    let x = tape.variable(image.clone());
    let logits = model.logits(&mut tape, x)?;
    let predicted = predictions(tape.value(logits))[0];
    let loss = tape.cross_entropy(logits, &[target])?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let g = grads.get(x).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; image.numel()]);
    Ok((value, Tensor::new(image.shape().to_vec(), g)?, predicted))
}

fn project(x: &mut [f32], clean: &[f32], eps: f32) {
    for (v, &c) in x.iter_mut().zip(clean) {
        let lo = (c - eps).max(0.0);
        let hi = (c + eps).min(1.0);
        *v = v.clamp(lo, hi);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub success: bool,
    /// Last iterate (the first successful one when `success`).
    pub adversarial: Tensor<f32>,
    pub steps_taken: usize,
}

/// One targeted attack at budget `eps`. Succeeds as soon as an iterate is
/// classified as `target`.
pub fn attack<C: Classifier<f32>>(
    model: &C,
    image: &Tensor<f32>,
    target: usize,
    eps: f64,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackOutcome> {
    let clean = image.data();
    let mut x = image.clone();
    x.set_requires_grad(false);
    if eps <= 0.0 {
        let success = predict(model, &x)? == target;
        return Ok(AttackOutcome { success, adversarial: x, steps_taken: 0 });
    }
    let e = eps as f32;
    if cfg.method == AttackMethod::Rpgd {
        for v in x.data_mut() {
            *v += rng.random_range(-e..=e);
        }
        project(x.data_mut(), clean, e);
    }
    let step = (cfg.step_factor * eps / cfg.steps as f64) as f32;
    for k in 0..cfg.steps {
        let (_, g, predicted) = input_gradient(model, &x, target)?;
        if predicted == target {
            return Ok(AttackOutcome { success: true, adversarial: x, steps_taken: k });
        }
        if !g.is_finite() {
            return Err(AttackError::NonFinite { step: k, epsilon: eps });
        }
        for (v, &gi) in x.data_mut().iter_mut().zip(g.data()) {
            *v -= step * gi.signum() * f32::from(gi != 0.0);
        }
        project(x.data_mut(), clean, e);
    }
    let success = predict(model, &x)? == target;
    Ok(AttackOutcome { success, adversarial: x, steps_taken: cfg.steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub index: usize,
    pub label: usize,
    pub target: usize,
    /// Smallest successful grid budget; `None` when every budget failed.
    pub min_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub method: AttackMethod,
    pub epsilons: Vec<f64>,
    pub images: Vec<ImageResult>,
    /// Median of the per-image minimal budgets with failures counted as
    /// infinite; serialized as `null` when infinite.
    #[serde(with = "infinite_as_null")]
    pub median: f64,
    /// Fraction of attacked images fooled at or below each budget.
    pub success_rate: Vec<f64>,
    /// Misclassified images left out.
    pub skipped: usize,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Median with `None` treated as larger than every value.
pub fn median_with_failures(values: &[Option<f64>]) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if b.is_infinite() {
            b
        } else {
            0.5 * (a + b)
        }
    }
}

/// Sweeps the budgets upward for one image and returns the first that
/// succeeds (0 if the image is already classified as the target).
pub fn minimal_epsilon<C: Classifier<f32>>(model: &C, image: &Tensor<f32>, target: usize, cfg: &AttackConfig, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
    if predict(model, image)? == target {
        return Ok(Some(0.0));
    }
    for &eps in &cfg.epsilons {
        if attack(model, image, target, eps, cfg, rng)?.success {
            return Ok(Some(eps));
        }
    }
    Ok(None)
}

/// Attacks every correctly classified image of `data`; image `j` draws its
/// random start from stream `j` of the configured seed.
pub fn median_min_perturbation<C: Classifier<f32> + Sync>(model: &C, data: &Dataset, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let per_image = (0..data.len())
        .into_par_iter()
        .map(|j| -> Result<Option<ImageResult>> {
            let image = data.images.slice_outer(j, j + 1)?;
            let label = data.labels[j];
            if predict(model, &image)? != label {
                return Ok(None);
            }
            let target = choose_target(model, &image, label, cfg.target)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(j as u64);
            let min_epsilon = minimal_epsilon(model, &image, target, cfg, &mut rng)?;
            Ok(Some(ImageResult { index: j, label, target, min_epsilon }))
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped = per_image.iter().filter(|r| r.is_none()).count();
    let images: Vec<ImageResult> = per_image.into_iter().flatten().collect();
    if images.is_empty() {
        return Err(AttackError::NoEligibleImages);
    }
    let mins: Vec<Option<f64>> = images.iter().map(|r| r.min_epsilon).collect();
    let success_rate = cfg
        .epsilons
        .iter()
        .map(|&e| mins.iter().filter(|m| m.is_some_and(|m| m <= e)).count() as f64 / mins.len() as f64)
        .collect();
    Ok(AttackResult { method: cfg.method, epsilons: cfg.epsilons.clone(), median: median_with_failures(&mins), images, success_rate, skipped })
}
