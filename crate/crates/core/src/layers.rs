//! Parameter-holding layers. Weights use fan-in scaled uniform bounds
//! (`1/sqrt(fan_in)`), biases start at zero.

use rand::Rng;

use crate::tensor::{Real, Result, Tape, Tensor, Var};

fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: [usize; 4], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(-bound..bound)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T: Real = f32> {
    /// `[out, in, k, k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cin: usize, cout: usize, kernel: usize, padding: usize) -> Self {
        Self {
            weight: uniform(rng, [cout, cin, kernel, kernel], cin * kernel * kernel),
            bias: Tensor::zeros([cout]),
            stride: 1,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, tape: &mut Tape<T>, w: Var, b: Var, x: Var) -> Result<Var> {
        tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    pub fn cast<U: Real>(&self) -> Conv<U> {
        Conv { weight: self.weight.cast(), bias: self.bias.cast(), stride: self.stride, padding: self.padding }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose<T: Real = f32> {
    /// `[in, out, k, k]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> ConvTranspose<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cin: usize, cout: usize, kernel: usize, padding: usize) -> Self {
        Self {
            weight: uniform(rng, [cin, cout, kernel, kernel], cin * kernel * kernel),
            bias: Tensor::zeros([cout]),
            stride: 1,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn cast<U: Real>(&self) -> ConvTranspose<U> {
        ConvTranspose { weight: self.weight.cast(), bias: self.bias.cast(), stride: self.stride, padding: self.padding }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Real = f32> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, out: usize) -> Self {
        let w = uniform::<T, R>(rng, [out, fan_in, 1, 1], fan_in);
        Self { weight: w.reshape([out, fan_in]).expect("same numel"), bias: Tensor::zeros([out]) }
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

/// Dense stack with ReLU between layers (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T: Real = f32> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> Head<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut width = fan_in;
        for &h in hidden.iter().chain(std::iter::once(&classes)) {
            layers.push(Dense::new(rng, width, h));
            width = h;
        }
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    /// `vars` holds (weight, bias) per layer.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, _) in self.layers.iter().enumerate() {
            h = tape.dense(h, vars[2 * i], Some(vars[2 * i + 1]))?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn cast<U: Real>(&self) -> Head<U> {
        Head { layers: self.layers.iter().map(Dense::cast).collect() }
    }
}
