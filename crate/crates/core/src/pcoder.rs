//! One predictive-coding block.
//!
//! A PCoder owns a feed-forward map `F` (conv, ReLU, optional 2x2 max-pool)
//! producing its state, and a feedback decoder `B` (optional bilinear 2x
//! upsampling then a 3x3 transposed conv) predicting the activity of the
//! layer below from that state. Its state evolves as
//!
//! ```text
//! m(t+1) = mu * m(t) + gamma * F(below(t+1)) + beta * B_above(above(t)) - alpha * g(t)
//! ```
//!
//! where `g(t)` is the scaled gradient of this block's own prediction error
//! with respect to its state.
//!
//! By default the error gradient enters the update as a detached value:
//! gradients flow through `alpha` and through the other terms, never through
//! the dependence of `g` on the states. [`ErrorGradient::Differentiable`]
//! records `g` as tape operations instead, which makes every tape gradient
//! the exact derivative of the unrolled map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hyperparams::{HpVars, HyperParamError};
use crate::layers::{Conv, ConvTranspose};
use crate::tensor::{self, Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum PcoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    HyperParams(#[from] HyperParamError),
    #[error("decoder output {predicted:?} does not match prediction target {target:?}")]
    DecoderShape { predicted: [usize; 3], target: [usize; 3] },
}

pub type Result<T, E = PcoderError> = std::result::Result<T, E>;

/// How the error-correction term is recorded on the tape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorGradient {
    /// A constant: no gradient flows through its dependence on the states.
    #[default]
    Detached,
    /// Linear tape operations of the prediction residual.
    Differentiable,
}

/// Feedback decoder `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T: Real = f32> {
    pub upsample: bool,
    pub deconv: ConvTranspose<T>,
}

/// Tape handles of one PCoder's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundPcoder {
    pub ff_weight: Var,
    pub ff_bias: Var,
    pub fb_weight: Var,
    pub fb_bias: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pcoder<T: Real = f32> {
    pub ff: Conv<T>,
    pub pool: bool,
    pub fb: Decoder<T>,
    target_shape: [usize; 3],
    state_shape: [usize; 3],
    target_elems: usize,
    receptive_field: usize,
}

fn ff_output_shape(target: [usize; 3], cout: usize, kernel: usize, padding: usize, pool: bool) -> Result<[usize; 3]> {
    let h = tensor::conv_out_extent(target[1], kernel, 1, padding)?;
    let w = tensor::conv_out_extent(target[2], kernel, 1, padding)?;
    Ok(if pool { [cout, h / 2, w / 2] } else { [cout, h, w] })
}

fn decoder_output_shape(state: [usize; 3], cout: usize, kernel: usize, padding: usize, upsample: bool) -> Result<[usize; 3]> {
    let (h, w) = if upsample { (2 * state[1], 2 * state[2]) } else { (state[1], state[2]) };
    Ok([
        cout,
        tensor::conv_transpose_out_extent(h, kernel, 1, padding)?,
        tensor::conv_transpose_out_extent(w, kernel, 1, padding)?,
    ])
}

impl<T: Real> Pcoder<T> {
    /// Builds a PCoder whose state is `pool(relu(conv(x)))` for inputs of
    /// shape `target_shape`, with a decoder predicting `target_shape` back.
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        target_shape: [usize; 3],
        out_channels: usize,
        kernel: usize,
        padding: usize,
        pool: bool,
    ) -> Result<Self> {
        let ff = Conv::new(rng, target_shape[0], out_channels, kernel, padding);
        let deconv = ConvTranspose::new(rng, out_channels, target_shape[0], 3, 1);
        Self::from_parts(ff, pool, Decoder { upsample: pool, deconv }, target_shape)
    }

    /// Assembles a PCoder from explicit layers, validating that the decoder
    /// reproduces the target shape.
    pub fn from_parts(ff: Conv<T>, pool: bool, fb: Decoder<T>, target_shape: [usize; 3]) -> Result<Self> {
        let state_shape = ff_output_shape(target_shape, ff.out_channels(), ff.kernel(), ff.padding, pool)?;
        let predicted = decoder_output_shape(
            state_shape,
            fb.deconv.out_channels(),
            fb.deconv.kernel(),
            fb.deconv.padding,
            fb.upsample,
        )?;
        if predicted != target_shape || fb.deconv.weight.shape()[0] != state_shape[0] {
            return Err(PcoderError::DecoderShape { predicted, target: target_shape });
        }
        let k = fb.deconv.kernel();
        let s = if fb.upsample { 2 } else { 1 };
        Ok(Self {
            target_elems: target_shape.iter().product(),
            receptive_field: k * k * target_shape[0] * s * s,
            ff,
            pool,
            fb,
            target_shape,
            state_shape,
        })
    }

    /// Same block at another precision.
    pub fn cast<U: Real>(&self) -> Pcoder<U> {
        Pcoder {
            ff: self.ff.cast(),
            pool: self.pool,
            fb: Decoder { upsample: self.fb.upsample, deconv: self.fb.deconv.cast() },
            target_shape: self.target_shape,
            state_shape: self.state_shape,
            target_elems: self.target_elems,
            receptive_field: self.receptive_field,
        }
    }

    /// Per-sample shape of the state `m`.
    pub fn state_shape(&self) -> [usize; 3] {
        self.state_shape
    }

    /// Per-sample shape of the prediction target (the layer below).
    pub fn target_shape(&self) -> [usize; 3] {
        self.target_shape
    }

    /// `K`: elements of the prediction target per sample.
    pub fn target_elems(&self) -> usize {
        self.target_elems
    }

    /// `C`: target elements influenced by one state element through the
    /// decoder (`k * k * c_out * s^2`).
    pub fn receptive_field(&self) -> usize {
        self.receptive_field
    }

    pub fn params(&self) -> [&Tensor<T>; 4] {
        [&self.ff.weight, &self.ff.bias, &self.fb.deconv.weight, &self.fb.deconv.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.ff.weight, &mut self.ff.bias, &mut self.fb.deconv.weight, &mut self.fb.deconv.bias]
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundPcoder {
        BoundPcoder {
            ff_weight: tape.param(&self.ff.weight),
            ff_bias: tape.param(&self.ff.bias),
            fb_weight: tape.param(&self.fb.deconv.weight),
            fb_bias: tape.param(&self.fb.deconv.bias),
        }
    }

    /// Feed-forward drive `F(x)`.
    pub fn feedforward(&self, tape: &mut Tape<T>, bound: &BoundPcoder, x: Var) -> Result<Var> {
        let h = self.ff.forward(tape, bound.ff_weight, bound.ff_bias, x)?;
        let h = tape.relu(h)?;
        Ok(if self.pool { tape.maxpool2x2(h)? } else { h })
    }

    /// Initial state: a plain feed-forward pass.
    pub fn forward_init(&self, tape: &mut Tape<T>, bound: &BoundPcoder, input_below: Var) -> Result<Var> {
        self.feedforward(tape, bound, input_below)
    }

    /// Decoder output `B(m)`, shaped like the layer below.
    pub fn predict(&self, tape: &mut Tape<T>, bound: &BoundPcoder, state: Var) -> Result<Var> {
        let h = if self.fb.upsample { tape.upsample_bilinear2x(state)? } else { state };
        let d = &self.fb.deconv;
        Ok(tape.conv_transpose2d(h, bound.fb_weight, Some(bound.fb_bias), d.stride, d.padding)?)
    }

    /// Mean squared prediction error over all elements, batch included.
    pub fn prediction_error(&self, tape: &Tape<T>, prediction: Var, target: Var) -> Result<T> {
        let (p, t) = (tape.value(prediction), tape.value(target));
        if p.shape() != t.shape() {
            return Err(tensor::TensorError::ShapeMismatch {
                op: "prediction_error",
                detail: format!("{:?} vs {:?}", p.shape(), t.shape()),
            }
            .into());
        }
        let sum: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(sum / T::lit(p.numel().max(1) as f64))
    }

    /// `sqrt(K^2 / C)` times the per-sample gradient of the prediction error
    /// with respect to the state, i.e. `(2 / sqrt(C)) * B^T (prediction - target)`
    /// with `B^T` the adjoint of the decoder's linear part. The result does not
    /// depend on the batch size.
    pub fn scaled_error_gradient(&self, tape: &Tape<T>, prediction: Var, target: Var) -> Result<Tensor<T>> {
        let (p, t) = (tape.value(prediction), tape.value(target));
        if p.shape() != t.shape() {
            return Err(tensor::TensorError::ShapeMismatch {
                op: "scaled_error_gradient",
                detail: format!("{:?} vs {:?}", p.shape(), t.shape()),
            }
            .into());
        }
        let residual: Vec<T> = p.data().iter().zip(t.data()).map(|(&a, &b)| a - b).collect();
        let ps = p.dims4()?;
        let d = &self.fb.deconv;
        let (back, bs) = tensor::conv2d(&residual, ps, d.weight.data(), d.weight.dims4()?, None, d.stride, d.padding)?;
        let (mut g, gs) = if self.fb.upsample {
            let xs = [bs[0], bs[1], bs[2] / 2, bs[3] / 2];
            (tensor::upsample_bilinear2x_backward(&back, xs)?, xs)
        } else {
            (back, bs)
        };
        let factor = T::lit(2.0 / (self.receptive_field as f64).sqrt());
        g.iter_mut().for_each(|v| *v *= factor);
        Ok(Tensor::new(gs.to_vec(), g)?)
    }

    /// [`Self::scaled_error_gradient`] recorded as tape operations, so that
    /// gradients flow into the prediction, the target and the decoder weight.
    pub fn error_gradient_var(&self, tape: &mut Tape<T>, bound: &BoundPcoder, prediction: Var, target: Var) -> Result<Var> {
        let residual = tape.sub(prediction, target)?;
        let d = &self.fb.deconv;
        let back = tape.conv2d(residual, bound.fb_weight, None, d.stride, d.padding)?;
        let g = if self.fb.upsample { tape.upsample_bilinear2x_adjoint(back)? } else { back };
        Ok(tape.scale(g, T::lit(2.0 / (self.receptive_field as f64).sqrt()))?)
    }

    /// One update of this PCoder's state.
    ///
    /// `ff_input` is the already-updated state of the block below (or the
    /// image), `fb_prediction` the prediction of this block's state made by
    /// the block above from its previous state (absent for the top block, in
    /// which case the feedback term is dropped), `error_gradient` the output
    /// of [`Self::scaled_error_gradient`] at the previous state. Terms whose
    /// coefficient is a recorded constant zero are skipped; they would
    /// contribute exactly zero.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundPcoder,
        state: Var,
        ff_input: Var,
        fb_prediction: Option<Var>,
        error_gradient: Option<Var>,
        hp: &HpVars,
    ) -> Result<Var> {
        let is_zero = |tape: &Tape<T>, v: Var| !tape.needs_grad(v) && tape.value(v).data()[0] == T::zero();
        let ff = self.feedforward(tape, bound, ff_input)?;
        let mut next = tape.mul_scalar(ff, hp.gamma)?;
        if !is_zero(tape, hp.mu) {
            let mem = tape.mul_scalar(state, hp.mu)?;
            next = tape.add(mem, next)?;
        }
        if let Some(fb) = fb_prediction {
            if !is_zero(tape, hp.beta) {
                let term = tape.mul_scalar(fb, hp.beta)?;
                next = tape.add(next, term)?;
            }
        }
        if let Some(g) = error_gradient {
            if !is_zero(tape, hp.alpha) {
                let term = tape.mul_scalar(g, hp.alpha)?;
                next = tape.sub(next, term)?;
            }
        }
        Ok(next)
    }
}
