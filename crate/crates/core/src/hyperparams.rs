//! The four coefficients of the predictive-coding update and their
//! unconstrained training representation.
//!
//! `mu`, `gamma` and `beta` weight memory, feed-forward drive and feedback
//! drive and always sum to one; `alpha` is the step size of the error
//! correction term. During optimization the triple is carried as three free
//! auxiliary reals pushed through a logistic-then-normalize map, and `alpha`
//! as a raw real clamped at zero after every step.

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::tensor::{Real, Result as TensorResult, Tape, Tensor, Var};

pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HyperParamError {
    #[error("mu + gamma + beta = {0}, expected 1")]
    NotNormalized(f64),
    #[error("{name} = {value} outside its valid range")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("expected {expected} hyper-parameter sets, got {got}")]
    CountMismatch { expected: usize, got: usize },
}

fn sig9<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    let rounded: f64 = format!("{v:.8e}").parse().map_err(serde::ser::Error::custom)?;
    s.serialize_f64(rounded)
}

fn finite<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let v = f64::deserialize(d)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(serde::de::Error::custom("non-finite hyper-parameter"))
    }
}

/// Constrained coefficients of one PCoder's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    #[serde(serialize_with = "sig9", deserialize_with = "finite")]
    pub mu: f64,
    #[serde(serialize_with = "sig9", deserialize_with = "finite")]
    pub gamma: f64,
    #[serde(serialize_with = "sig9", deserialize_with = "finite")]
    pub beta: f64,
    #[serde(serialize_with = "sig9", deserialize_with = "finite")]
    pub alpha: f64,
}

impl HyperParams {
    pub fn new(mu: f64, gamma: f64, beta: f64, alpha: f64) -> Result<Self, HyperParamError> {
        let hp = Self { mu, gamma, beta, alpha };
        hp.validate()?;
        Ok(hp)
    }

    /// Pure feed-forward configuration: `gamma = 1`, everything else zero.
    pub fn feedforward() -> Self {
        Self { mu: 0.0, gamma: 1.0, beta: 0.0, alpha: 0.0 }
    }

    /// The pinned values used while training feedback weights for classification.
    pub fn supervised_training() -> Self {
        let third = 1.0 / 3.0;
        Self { mu: third, gamma: third, beta: third, alpha: 0.01 }
    }

    pub fn validate(&self) -> Result<(), HyperParamError> {
        for (name, value) in [("mu", self.mu), ("gamma", self.gamma), ("beta", self.beta)] {
            if !(-SUM_TOLERANCE..=1.0 + SUM_TOLERANCE).contains(&value) {
                return Err(HyperParamError::OutOfRange { name, value });
            }
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(HyperParamError::OutOfRange { name: "alpha", value: self.alpha });
        }
        let sum = self.mu + self.gamma + self.beta;
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(HyperParamError::NotNormalized(sum));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.mu, self.gamma, self.beta, self.alpha]
    }
}

/// Ablation switches removing the feedback term and/or the error-correction term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpMask {
    #[serde(default)]
    pub zero_beta: bool,
    #[serde(default)]
    pub zero_alpha: bool,
}

impl HpMask {
    pub const NONE: Self = Self { zero_beta: false, zero_alpha: false };
    pub const ZERO_BETA: Self = Self { zero_beta: true, zero_alpha: false };
    pub const ZERO_ALPHA: Self = Self { zero_beta: false, zero_alpha: true };

    pub fn label(&self) -> &'static str {
        match (self.zero_beta, self.zero_alpha) {
            (false, false) => "full",
            (true, false) => "zero_beta",
            (false, true) => "zero_alpha",
            (true, true) => "zero_beta_alpha",
        }
    }

    /// Which of (mu, gamma, beta) take part in the normalization.
    pub fn active(&self) -> [bool; 3] {
        [true, true, !self.zero_beta]
    }
}

/// Zeroes the masked terms. When `beta` is removed, `mu` and `gamma` are
/// rescaled to sum to one again.
pub fn apply_mask(hp: &HyperParams, mask: HpMask) -> HyperParams {
    let mut out = *hp;
    if mask.zero_beta {
        let s = hp.mu + hp.gamma;
        if s > 0.0 {
            out.mu = hp.mu / s;
            out.gamma = hp.gamma / s;
        } else {
            out.mu = 0.0;
            out.gamma = 1.0;
        }
        out.beta = 0.0;
    }
    if mask.zero_alpha {
        out.alpha = 0.0;
    }
    out
}

/// Unconstrained representation used by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxParams {
    pub mu_aux: f64,
    pub gamma_aux: f64,
    pub beta_aux: f64,
    pub alpha_raw: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Logistic-normalized map from auxiliary reals to a valid [`HyperParams`].
pub fn constrain(aux: &AuxParams) -> HyperParams {
    constrain_masked(aux, HpMask::NONE)
}

/// [`constrain`] with ablated terms excluded from the normalization.
pub fn constrain_masked(aux: &AuxParams, mask: HpMask) -> HyperParams {
    let sm = sigmoid(aux.mu_aux);
    let sg = sigmoid(aux.gamma_aux);
    let sb = if mask.zero_beta { 0.0 } else { sigmoid(aux.beta_aux) };
    let z = sm + sg + sb;
    HyperParams {
        mu: sm / z,
        gamma: sg / z,
        beta: sb / z,
        alpha: if mask.zero_alpha { 0.0 } else { aux.alpha_raw.max(0.0) },
    }
}

/// Draws three independent uniforms for (mu, gamma, beta), stored as their
/// logits, and alpha uniform in [0, 1].
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R) -> AuxParams {
    const EDGE: f64 = 1e-6;
    let mut draw = || rng.random::<f64>().clamp(EDGE, 1.0 - EDGE);
    let (m, g, b) = (draw(), draw(), draw());
    let alpha_raw = rng.random::<f64>();
    AuxParams { mu_aux: logit(m), gamma_aux: logit(g), beta_aux: logit(b), alpha_raw }
}

/// Auxiliary parameters whose constrained image is `hp` (exact up to rounding
/// for any `hp` with all three weights strictly inside (0, 1)).
pub fn aux_from_constrained(hp: &HyperParams) -> AuxParams {
    const EDGE: f64 = 1e-9;
    // Scale so every weight fits strictly inside (0, 1) as a sigmoid output.
    let l = |p: f64| logit((p * 0.5).clamp(EDGE, 1.0 - EDGE));
    AuxParams { mu_aux: l(hp.mu), gamma_aux: l(hp.gamma), beta_aux: l(hp.beta), alpha_raw: hp.alpha }
}

/// Sharing of hyper-parameters across PCoders.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HpMode {
    /// One quadruple broadcast to every PCoder.
    #[default]
    Shared,
    /// An independent quadruple per PCoder.
    Separate,
}

impl HpMode {
    pub fn count(self, pcoders: usize) -> usize {
        match self {
            HpMode::Shared => 1,
            HpMode::Separate => pcoders,
        }
    }
}

/// Recorded scalars standing for one PCoder's coefficients on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HpVars {
    pub mu: Var,
    pub gamma: Var,
    pub beta: Var,
    pub alpha: Var,
}

impl HpVars {
    /// Fixed coefficients (no gradient). Fails if `hp` is invalid.
    pub fn constant<T: Real>(tape: &mut Tape<T>, hp: &HyperParams) -> Result<Self, HyperParamError> {
        hp.validate()?;
        let mut c = |v: f64| tape.constant(Tensor::scalar(T::lit(v)));
        Ok(Self { mu: c(hp.mu), gamma: c(hp.gamma), beta: c(hp.beta), alpha: c(hp.alpha) })
    }
}

/// Trainable auxiliary parameters as tensors: `aux = [mu, gamma, beta]`
/// (shape `[3]`) and `alpha` (shape `[1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableHp<T: Real = f32> {
    pub aux: Tensor<T>,
    pub alpha: Tensor<T>,
}

impl<T: Real> TrainableHp<T> {
    pub fn from_aux(aux: &AuxParams, mask: HpMask) -> Self {
        let a = [aux.mu_aux, aux.gamma_aux, aux.beta_aux].map(T::lit);
        let aux_t = Tensor::new([3], a.to_vec()).expect("rank-1 of 3").with_grad();
        let mut alpha = Tensor::new([1], vec![T::lit(aux.alpha_raw.max(0.0))]).expect("rank-1 of 1");
        if mask.zero_alpha {
            alpha.data_mut()[0] = T::zero();
        } else {
            alpha = alpha.with_grad();
        }
        Self { aux: aux_t, alpha }
    }

    pub fn to_aux(&self) -> AuxParams {
        let a = self.aux.data();
        AuxParams {
            mu_aux: a[0].as_f64(),
            gamma_aux: a[1].as_f64(),
            beta_aux: a[2].as_f64(),
            alpha_raw: self.alpha.data()[0].as_f64(),
        }
    }

    pub fn constrained(&self, mask: HpMask) -> HyperParams {
        constrain_masked(&self.to_aux(), mask)
    }

    /// Records the constrained coefficients on `tape`, differentiable with
    /// respect to the unmasked auxiliary entries.
    pub fn bind(&self, tape: &mut Tape<T>, mask: HpMask) -> TensorResult<(HpVars, HpBinding)> {
        let aux = tape.param(&self.aux);
        let simplex = tape.sigmoid_simplex(aux, &mask.active())?;
        let mu = tape.select(simplex, 0)?;
        let gamma = tape.select(simplex, 1)?;
        let beta = tape.select(simplex, 2)?;
        let alpha_leaf = tape.param(&self.alpha);
        let alpha = tape.select(alpha_leaf, 0)?;
        Ok((HpVars { mu, gamma, beta, alpha }, HpBinding { aux, alpha: alpha_leaf }))
    }

    pub fn zero_grad(&mut self) {
        self.aux.zero_grad();
        self.alpha.zero_grad();
    }

    /// Keeps alpha non-negative after an optimizer step.
    pub fn clamp_alpha(&mut self) {
        let a = &mut self.alpha.data_mut()[0];
        if *a < T::zero() {
            *a = T::zero();
        }
    }
}

/// Leaf handles of a bound [`TrainableHp`], used to collect gradients.
#[derive(Debug, Clone, Copy)]
pub struct HpBinding {
    pub aux: Var,
    pub alpha: Var,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn symmetric_aux_gives_thirds() {
        let hp = constrain(&AuxParams { mu_aux: 0.0, gamma_aux: 0.0, beta_aux: 0.0, alpha_raw: 0.2 });
        for v in [hp.mu, hp.gamma, hp.beta] {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
        assert_eq!(hp.alpha, 0.2);
    }

    #[test]
    fn saturated_mu() {
        let hp = constrain(&AuxParams { mu_aux: 10.0, gamma_aux: -10.0, beta_aux: -10.0, alpha_raw: 0.0 });
        // sigma(10) / (sigma(10) + 2 sigma(-10)), evaluated directly.
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect = s(10.0) / (s(10.0) + 2.0 * s(-10.0));
        assert!(close(hp.mu, expect, 1e-15));
        assert!(close(hp.mu, 0.99991, 1e-5));
    }

    #[test]
    fn negative_alpha_raw_clamps() {
        let hp = constrain(&AuxParams { mu_aux: 1.0, gamma_aux: 2.0, beta_aux: 3.0, alpha_raw: -0.5 });
        assert_eq!(hp.alpha, 0.0);
        hp.validate().unwrap();
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_uniform(&mut ChaCha8Rng::seed_from_u64(7));
        let b = init_uniform(&mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        constrain(&a).validate().unwrap();
    }

    #[test]
    fn alpha_draws_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mean = (0..n).map(|_| init_uniform(&mut rng).alpha_raw).sum::<f64>() / n as f64;
        assert!((0.48..=0.52).contains(&mean), "{mean}");
    }

    #[test]
    fn mask_examples() {
        let third = 1.0 / 3.0;
        let hp = HyperParams::new(third, third, third, 0.3).unwrap();
        let m = apply_mask(&hp, HpMask::ZERO_BETA);
        assert!(close(m.mu, 0.5, 1e-15) && close(m.gamma, 0.5, 1e-15));
        assert_eq!((m.beta, m.alpha), (0.0, 0.3));
        let m = apply_mask(&hp, HpMask::ZERO_ALPHA);
        assert_eq!(m, HyperParams { alpha: 0.0, ..hp });
        assert_eq!(apply_mask(&hp, HpMask::NONE), hp);
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(matches!(HyperParams::new(0.5, 0.5, 0.5, 0.0), Err(HyperParamError::NotNormalized(_))));
        assert!(HyperParams::new(1.2, -0.2, 0.0, 0.0).is_err());
        assert!(HyperParams::new(0.0, 1.0, 0.0, -0.1).is_err());
        assert!(HyperParams::new(0.0, 1.0, 0.0, f64::NAN).is_err());
    }

    #[test]
    fn masked_constrain_matches_apply_mask() {
        let aux = AuxParams { mu_aux: 0.3, gamma_aux: -1.2, beta_aux: 2.0, alpha_raw: 0.4 };
        let a = constrain_masked(&aux, HpMask::ZERO_BETA);
        let b = apply_mask(&constrain(&aux), HpMask::ZERO_BETA);
        assert!(close(a.mu, b.mu, 1e-15) && close(a.gamma, b.gamma, 1e-15));
    }

    #[test]
    fn aux_round_trip_from_constrained() {
        let hp = HyperParams::new(0.2, 0.3, 0.5, 0.7).unwrap();
        let back = constrain(&aux_from_constrained(&hp));
        for (a, b) in back.as_array().iter().zip(hp.as_array()) {
            assert!(close(*a, b, 1e-12));
        }
    }

    #[test]
    fn json_uses_nine_significant_digits() {
        let hp = HyperParams { mu: 1.0 / 3.0, gamma: 1.0 / 3.0, beta: 1.0 / 3.0, alpha: 0.01 };
        let s = serde_json::to_string(&hp).unwrap();
        assert!(s.contains("0.333333333"), "{s}");
        assert!(!s.contains("0.3333333333"), "{s}");
        assert!(serde_json::from_str::<HyperParams>(r#"{"mu":1,"gamma":0,"beta":0,"alpha":0,"x":1}"#).is_err());
    }

    #[test]
    fn tape_binding_matches_constrain_and_masks_gradient() {
        let aux = AuxParams { mu_aux: 0.5, gamma_aux: -0.25, beta_aux: 1.5, alpha_raw: 0.3 };
        let hp = TrainableHp::<f64>::from_aux(&aux, HpMask::ZERO_BETA);
        let mut tape = Tape::new();
        let (vars, binding) = hp.bind(&mut tape, HpMask::ZERO_BETA).unwrap();
        let expect = constrain_masked(&aux, HpMask::ZERO_BETA);
        assert!(close(tape.value(vars.mu).data()[0], expect.mu, 1e-15));
        assert_eq!(tape.value(vars.beta).data()[0], 0.0);
        let s = tape.add(vars.beta, vars.mu).unwrap();
        let s = tape.add(s, vars.alpha).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(binding.aux).unwrap()[2], 0.0);
        assert_eq!(g.get(binding.alpha).unwrap(), &[1.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn constrain_is_always_valid(m in -30.0f64..30.0, g in -30.0f64..30.0, b in -30.0f64..30.0, a in -5.0f64..5.0) {
                let hp = constrain(&AuxParams { mu_aux: m, gamma_aux: g, beta_aux: b, alpha_raw: a });
                prop_assert!(hp.validate().is_ok());
                prop_assert!((hp.mu + hp.gamma + hp.beta - 1.0).abs() < 1e-12);
            }

            #[test]
            fn each_weight_increases_in_its_own_aux(m in -5.0f64..5.0, g in -5.0f64..5.0, b in -5.0f64..5.0, d in 0.01f64..2.0) {
                let base = AuxParams { mu_aux: m, gamma_aux: g, beta_aux: b, alpha_raw: 0.0 };
                let h0 = constrain(&base);
                let up_mu = constrain(&AuxParams { mu_aux: m + d, ..base }).mu;
                let up_gamma = constrain(&AuxParams { gamma_aux: g + d, ..base }).gamma;
                let up_beta = constrain(&AuxParams { beta_aux: b + d, ..base }).beta;
                prop_assert!(up_mu > h0.mu);
                prop_assert!(up_gamma > h0.gamma);
                prop_assert!(up_beta > h0.beta);
            }
        }
    }
}
