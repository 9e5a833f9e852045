//! The shallow predictive-coding network, its feed-forward baselines, and
//! the unrolled dynamics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hyperparams::{HpVars, HyperParamError, HyperParams};
use crate::layers::{Conv, Head};
use crate::pcoder::{BoundPcoder, ErrorGradient, Pcoder, PcoderError};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};
use crate::weights::{self, WeightsError};

pub const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];
pub const CLASSES: usize = 10;
pub const HIDDEN: usize = 120;

/// Parameters of the forward path (encoders and head) of the shallow net.
pub const SHALLOW_FORWARD_PARAMS: usize = 64_564;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pcoder(#[from] PcoderError),
    #[error(transparent)]
    HyperParams(#[from] HyperParamError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error("expected 1 or {pcoders} hyper-parameter sets, got {got}")]
    HpCount { got: usize, pcoders: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

/// Anything that maps a batch of images to class logits on a tape.
pub trait Classifier<T: Real> {
    /// The logits a decision is based on (the final time-step for unrolled
    /// networks).
    fn logits(&self, tape: &mut Tape<T>, images: Var) -> Result<Var>;
}

/// Encoder stage description: `pool(relu(conv_k(x)))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub pool: bool,
}

impl StageSpec {
    pub const fn pooled(channels: usize, kernel: usize) -> Self {
        Self { channels, kernel, padding: kernel / 2, pool: true }
    }
}

pub const SHALLOW_STAGES: [StageSpec; 3] = [StageSpec::pooled(12, 5), StageSpec::pooled(18, 5), StageSpec::pooled(24, 5)];

fn numel(shape: [usize; 3]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcNet<T: Real = f32> {
    pub pcoders: Vec<Pcoder<T>>,
    pub head: Head<T>,
    pub error_gradient: ErrorGradient,
    input_shape: [usize; 3],
}

/// Tape handles of every network parameter.
#[derive(Debug, Clone)]
pub struct BoundNet {
    pub pcoders: Vec<BoundPcoder>,
    pub head: Vec<Var>,
}

/// Result of an unroll over `T` steps. Index `t` runs over `0..=T`.
#[derive(Debug, Clone)]
pub struct Unrolled {
    pub logits: Vec<Var>,
    /// `states[t][i]`: state of PCoder `i` at step `t`.
    pub states: Vec<Vec<Var>>,
    /// `errors[t][i]`: prediction error of PCoder `i` at step `t`.
    pub errors: Vec<Vec<f64>>,
}

impl<T: Real> PcNet<T> {
    /// Stacks PCoders per `stages` on inputs of `input_shape`, followed by a
    /// dense head.
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        input_shape: [usize; 3],
        stages: &[StageSpec],
        hidden: &[usize],
        classes: usize,
    ) -> Result<Self> {
        let mut pcoders = Vec::with_capacity(stages.len());
        let mut below = input_shape;
        for s in stages {
            let pc = Pcoder::new(rng, below, s.channels, s.kernel, s.padding, s.pool)?;
            below = pc.state_shape();
            pcoders.push(pc);
        }
        let head = Head::new(rng, numel(below), hidden, classes);
        Self::from_parts(input_shape, pcoders, head)
    }

    /// Validates that each PCoder predicts the state of the one below (the
    /// image for the first) and that the head reads the top state.
    pub fn from_parts(input_shape: [usize; 3], pcoders: Vec<Pcoder<T>>, head: Head<T>) -> Result<Self> {
        if pcoders.is_empty() {
            return Err(NetworkError::Architecture("no PCoders".into()));
        }
        let mut below = input_shape;
        for (i, pc) in pcoders.iter().enumerate() {
            if pc.target_shape() != below {
                return Err(NetworkError::Architecture(format!(
                    "PCoder {i} predicts {:?} but the layer below is {below:?}",
                    pc.target_shape()
                )));
            }
            below = pc.state_shape();
        }
        let fan_in = head.layers.first().map(|l| l.weight.shape()[1]);
        if fan_in != Some(numel(below)) {
            return Err(NetworkError::Architecture(format!("head reads {fan_in:?} features, top state has {}", numel(below))));
        }
        Ok(Self { pcoders, head, error_gradient: ErrorGradient::Detached, input_shape })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Same network at another precision.
    pub fn cast<U: Real>(&self) -> PcNet<U> {
        PcNet {
            pcoders: self.pcoders.iter().map(Pcoder::cast).collect(),
            head: self.head.cast(),
            error_gradient: self.error_gradient,
            input_shape: self.input_shape,
        }
    }

    pub fn len(&self) -> usize {
        self.pcoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pcoders.is_empty()
    }

    /// Parameters of the encoders and head, i.e. the plain feed-forward network.
    pub fn forward_param_count(&self) -> usize {
        let enc: usize = self.pcoders.iter().map(|p| p.ff.weight.numel() + p.ff.bias.numel()).sum();
        enc + self.head.param_count()
    }

    pub fn feedback_param_count(&self) -> usize {
        self.pcoders.iter().map(|p| p.fb.deconv.weight.numel() + p.fb.deconv.bias.numel()).sum()
    }

    /// Every parameter with a stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, pc) in self.pcoders.iter().enumerate() {
            let [a, b, c, d] = pc.params();
            out.push((format!("pcoder{i}.ff.weight"), a));
            out.push((format!("pcoder{i}.ff.bias"), b));
            out.push((format!("pcoder{i}.fb.weight"), c));
            out.push((format!("pcoder{i}.fb.bias"), d));
        }
        head_names(self.head.params(), &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, pc) in self.pcoders.iter_mut().enumerate() {
            let [a, b, c, d] = pc.params_mut();
            out.push((format!("pcoder{i}.ff.weight"), a));
            out.push((format!("pcoder{i}.ff.bias"), b));
            out.push((format!("pcoder{i}.fb.weight"), c));
            out.push((format!("pcoder{i}.fb.bias"), d));
        }
        head_names(self.head.params_mut(), &mut out);
        out
    }

    /// Encoder and head parameters.
    pub fn forward_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for pc in &mut self.pcoders {
            out.push(&mut pc.ff.weight);
            out.push(&mut pc.ff.bias);
        }
        out.extend(self.head.params_mut());
        out
    }

    /// Decoder parameters.
    pub fn feedback_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for pc in &mut self.pcoders {
            out.push(&mut pc.fb.deconv.weight);
            out.push(&mut pc.fb.deconv.bias);
        }
        out
    }

    /// Sets the gradient flag on the forward path and on the decoders.
    pub fn set_trainable(&mut self, forward: bool, feedback: bool) {
        self.forward_params_mut().into_iter().for_each(|p| p.set_requires_grad(forward));
        self.feedback_params_mut().into_iter().for_each(|p| p.set_requires_grad(feedback));
    }

    pub fn is_frozen(&self) -> bool {
        self.named_params().iter().all(|(_, p)| !p.requires_grad())
    }

    pub fn zero_grad(&mut self) {
        self.named_params_mut().into_iter().for_each(|(_, p)| p.zero_grad());
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundNet {
        let pcoders = self.pcoders.iter().map(|p| p.bind(tape)).collect();
        let head = self.head.params().into_iter().map(|p| tape.param(p)).collect();
        BoundNet { pcoders, head }
    }

    /// Feed-forward states of every PCoder (the `t = 0` initialization).
    pub fn forward_states(&self, tape: &mut Tape<T>, bound: &BoundNet, images: Var) -> Result<Vec<Var>> {
        let mut states = Vec::with_capacity(self.len());
        let mut x = images;
        for (pc, b) in self.pcoders.iter().zip(&bound.pcoders) {
            x = pc.forward_init(tape, b, x)?;
            states.push(x);
        }
        Ok(states)
    }

    pub fn classify(&self, tape: &mut Tape<T>, bound: &BoundNet, top_state: Var) -> Result<Var> {
        Ok(self.head.forward(tape, &bound.head, top_state)?)
    }

    /// Plain feed-forward logits.
    pub fn forward_ff(&self, tape: &mut Tape<T>, bound: &BoundNet, images: Var) -> Result<Var> {
        let states = self.forward_states(tape, bound, images)?;
        self.classify(tape, bound, *states.last().expect("non-empty"))
    }

    /// Runs the dynamics for `steps` updates after the feed-forward
    /// initialization. `hps` holds one set shared by all PCoders or one per
    /// PCoder.
    ///
    /// Within a step every prediction and error gradient is computed from the
    /// states of the previous step; PCoders are then updated in ascending
    /// order so each feed-forward drive sees the freshly updated state below.
    pub fn unroll(&self, tape: &mut Tape<T>, bound: &BoundNet, images: Var, hps: &[HpVars], steps: usize) -> Result<Unrolled> {
        let n = self.len();
        if hps.len() != 1 && hps.len() != n {
            return Err(NetworkError::HpCount { got: hps.len(), pcoders: n });
        }
        let hp = |i: usize| &hps[if hps.len() == 1 { 0 } else { i }];
        let is_const_zero = |tape: &Tape<T>, v: Var| !tape.needs_grad(v) && tape.value(v).data()[0] == T::zero();

        let mut states = self.forward_states(tape, bound, images)?;
        let mut out = Unrolled { logits: Vec::new(), states: Vec::new(), errors: Vec::new() };
        for t in 0..=steps {
            out.logits.push(self.classify(tape, bound, states[n - 1])?);
            let mut preds = Vec::with_capacity(n);
            let mut errors = Vec::with_capacity(n);
            for (i, (pc, b)) in self.pcoders.iter().zip(&bound.pcoders).enumerate() {
                let target = if i == 0 { images } else { states[i - 1] };
                let p = pc.predict(tape, b, states[i])?;
                errors.push(pc.prediction_error(tape, p, target)?.as_f64());
                preds.push(p);
            }
            out.errors.push(errors);
            out.states.push(states.clone());
            if t == steps {
                break;
            }
            let mut next: Vec<Var> = Vec::with_capacity(n);
            for (i, (pc, b)) in self.pcoders.iter().zip(&bound.pcoders).enumerate() {
                let target = if i == 0 { images } else { states[i - 1] };
                let grad = if is_const_zero(tape, hp(i).alpha) {
                    None
                } else if self.error_gradient == ErrorGradient::Detached {
                    let g = pc.scaled_error_gradient(tape, preds[i], target)?;
                    Some(tape.constant(g))
                } else {
                    Some(pc.error_gradient_var(tape, b, preds[i], target)?)
                };
                let ff_input = if i == 0 { images } else { next[i - 1] };
                let fb = preds.get(i + 1).copied();
                next.push(pc.step(tape, b, states[i], ff_input, fb, grad, hp(i))?);
            }
            states = next;
        }
        Ok(out)
    }
}

fn head_names<P>(params: Vec<P>, out: &mut Vec<(String, P)>) {
    for (j, p) in params.into_iter().enumerate() {
        let kind = if j % 2 == 0 { "weight" } else { "bias" };
        out.push((format!("head.{}.{kind}", j / 2), p));
    }
}

impl PcNet<f32> {
    /// The three-PCoder shallow network for 32x32 RGB images.
    pub fn shallow<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let net = Self::new(rng, IMAGE_SHAPE, &SHALLOW_STAGES, &[HIDDEN], CLASSES).expect("shallow architecture is valid");
        debug_assert_eq!(net.forward_param_count(), SHALLOW_FORWARD_PARAMS);
        net
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let named = self.named_params();
        Ok(weights::save(path, named.iter().map(|(n, t)| (n.as_str(), *t)))?)
    }

    /// Loads weights saved by [`Self::save`] from a network of identical
    /// architecture.
    pub fn load_weights(&mut self, path: &std::path::Path) -> Result<()> {
        let entries = weights::load(path)?;
        Ok(weights::assign(self.named_params_mut(), entries)?)
    }
}

/// A [`PcNet`] run for a fixed number of steps with fixed coefficients,
/// classified at its final step.
#[derive(Debug, Clone)]
pub struct FixedUnroll<'a, T: Real = f32> {
    pub net: &'a PcNet<T>,
    pub hps: Vec<HyperParams>,
    pub steps: usize,
}

impl<T: Real> Classifier<T> for FixedUnroll<'_, T> {
    fn logits(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let bound = self.net.bind(tape);
        let hps = self.hps.iter().map(|h| HpVars::constant(tape, h)).collect::<Result<Vec<_>, _>>()?;
        let u = self.net.unroll(tape, &bound, images, &hps, self.steps)?;
        Ok(*u.logits.last().expect("at least t = 0"))
    }
}

/// The feed-forward path of a [`PcNet`].
#[derive(Debug, Clone, Copy)]
pub struct FeedForward<'a, T: Real = f32>(pub &'a PcNet<T>);

impl<T: Real> Classifier<T> for FeedForward<'_, T> {
    fn logits(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let bound = self.0.bind(tape);
        self.0.forward_ff(tape, &bound, images)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    /// The shallow network's forward path.
    Same,
    /// 7x7 kernels.
    Kernel,
    /// Channels 16/24/32.
    Feat,
    /// An extra unpooled 24-channel 5x5 conv after the last stage.
    Deep,
}

impl BaselineVariant {
    pub const ALL: [Self; 4] = [Self::Same, Self::Kernel, Self::Feat, Self::Deep];

    pub fn label(self) -> &'static str {
        match self {
            Self::Same => "same",
            Self::Kernel => "kernel",
            Self::Feat => "feat",
            Self::Deep => "deep",
        }
    }

    pub fn stages(self) -> Vec<StageSpec> {
        match self {
            Self::Same => SHALLOW_STAGES.to_vec(),
            Self::Kernel => SHALLOW_STAGES.iter().map(|s| StageSpec::pooled(s.channels, 7)).collect(),
            Self::Feat => vec![StageSpec::pooled(16, 5), StageSpec::pooled(24, 5), StageSpec::pooled(32, 5)],
            Self::Deep => {
                let mut s = SHALLOW_STAGES.to_vec();
                s.push(StageSpec { channels: 24, kernel: 5, padding: 2, pool: false });
                s
            }
        }
    }
}

/// Plain feed-forward conv stack with a dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineNet<T: Real = f32> {
    pub variant: BaselineVariant,
    pub convs: Vec<(Conv<T>, bool)>,
    pub head: Head<T>,
}

impl<T: Real> BaselineNet<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, variant: BaselineVariant) -> Self {
        let mut convs = Vec::new();
        let [mut c, mut h, mut w] = IMAGE_SHAPE;
        for s in variant.stages() {
            convs.push((Conv::new(rng, c, s.channels, s.kernel, s.padding), s.pool));
            c = s.channels;
            if s.pool {
                (h, w) = (h / 2, w / 2);
            }
        }
        let head = Head::new(rng, c * h * w, &[HIDDEN], CLASSES);
        Self { variant, convs, head }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.convs.iter().flat_map(|(c, _)| [&c.weight, &c.bias]).collect();
        out.extend(self.head.params());
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (c, _)) in self.convs.iter_mut().enumerate() {
            out.push((format!("conv{i}.weight"), &mut c.weight));
            out.push((format!("conv{i}.bias"), &mut c.bias));
        }
        head_names(self.head.params_mut(), &mut out);
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (c, _)) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &c.weight));
            out.push((format!("conv{i}.bias"), &c.bias));
        }
        head_names(self.head.params(), &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.params_mut().into_iter().for_each(|p| p.set_requires_grad(flag));
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.param(p)).collect()
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &[Var], images: Var) -> Result<Var> {
        let mut x = images;
        for (i, (conv, pool)) in self.convs.iter().enumerate() {
            x = conv.forward(tape, bound[2 * i], bound[2 * i + 1], x)?;
            x = tape.relu(x)?;
            if *pool {
                x = tape.maxpool2x2(x)?;
            }
        }
        Ok(self.head.forward(tape, &bound[2 * self.convs.len()..], x)?)
    }
}

impl BaselineNet<f32> {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let named = self.named_params();
        Ok(weights::save(path, named.iter().map(|(n, t)| (n.as_str(), *t)))?)
    }

    pub fn load_weights(&mut self, path: &std::path::Path) -> Result<()> {
        let entries = weights::load(path)?;
        Ok(weights::assign(self.named_params_mut(), entries)?)
    }
}

impl<T: Real> Classifier<T> for BaselineNet<T> {
    fn logits(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        let bound = self.bind(tape);
        self.forward(tape, &bound, images)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn images<T: Real>(n: usize, shape: [usize; 3], seed: u64) -> Tensor<T> {
        let mut r = rng(seed);
        Tensor::from_fn([n, shape[0], shape[1], shape[2]], |_| T::lit(r.random_range(0.0..1.0)))
    }

    /// Layer-by-layer count: conv `k*k*cin*cout + cout`, dense `in*out + out`.
    fn hand_count(convs: &[(usize, usize, usize)], dense: &[(usize, usize)]) -> usize {
        convs.iter().map(|&(k, i, o)| k * k * i * o + o).sum::<usize>() + dense.iter().map(|&(i, o)| i * o + o).sum::<usize>()
    }

    #[test]
    fn parameter_counts() {
        let head = |f| [(f, 120), (120, 10)];
        let same = hand_count(&[(5, 3, 12), (5, 12, 18), (5, 18, 24)], &head(384));
        assert_eq!(same, SHALLOW_FORWARD_PARAMS);
        let net = PcNet::shallow(&mut rng(0));
        assert_eq!(net.forward_param_count(), same);
        let decoders = hand_count(&[(3, 12, 3), (3, 18, 12), (3, 24, 18)], &[]);
        assert_eq!(net.feedback_param_count(), decoders);

        let expect = [
            (BaselineVariant::Same, same),
            (BaselineVariant::Kernel, hand_count(&[(7, 3, 12), (7, 12, 18), (7, 18, 24)], &head(384))),
            (BaselineVariant::Feat, hand_count(&[(5, 3, 16), (5, 16, 24), (5, 24, 32)], &head(512))),
            (BaselineVariant::Deep, hand_count(&[(5, 3, 12), (5, 12, 18), (5, 18, 24), (5, 24, 24)], &head(384))),
        ];
        for (v, count) in expect {
            let b = BaselineNet::<f32>::new(&mut rng(1), v);
            assert_eq!(b.param_count(), count, "{}", v.label());
            if v != BaselineVariant::Same {
                assert!(count > same);
            }
        }
        assert_eq!(expect.map(|e| e.1), [64_564, 80_980, 92_842, 78_988]);
    }

    #[test]
    fn shallow_shapes_and_determinism() {
        let net = PcNet::shallow(&mut rng(7));
        let states: Vec<_> = net.pcoders.iter().map(|p| p.state_shape()).collect();
        assert_eq!(states, [[12, 16, 16], [18, 8, 8], [24, 4, 4]]);
        assert_eq!(net.pcoders[0].target_shape(), IMAGE_SHAPE);
        assert_eq!(net, PcNet::shallow(&mut rng(7)));
        assert_ne!(net, PcNet::shallow(&mut rng(8)));
    }

    #[test]
    fn mismatched_stack_is_rejected() {
        let mut r = rng(0);
        let a = Pcoder::<f32>::new(&mut r, [3, 8, 8], 4, 3, 1, true).unwrap();
        let b = Pcoder::<f32>::new(&mut r, [5, 4, 4], 6, 3, 1, false).unwrap();
        let head = Head::new(&mut r, 96, &[], 2);
        assert!(matches!(PcNet::from_parts([3, 8, 8], vec![a.clone(), b], head.clone()), Err(NetworkError::Architecture(_))));
        let bad_head = Head::new(&mut r, 10, &[], 2);
        assert!(PcNet::from_parts([3, 8, 8], vec![a], bad_head).is_err());
    }

    #[test]
    fn every_baseline_outputs_ten_logits() {
        for v in BaselineVariant::ALL {
            let b = BaselineNet::<f32>::new(&mut rng(2), v);
            let mut tape = Tape::new();
            let x = tape.constant(images(2, IMAGE_SHAPE, 3));
            let y = b.logits(&mut tape, x).unwrap();
            assert_eq!(tape.shape(y), &[2, 10]);
        }
    }

    fn small_net() -> PcNet<f64> {
        PcNet::new(&mut rng(4), [3, 8, 8], &[StageSpec::pooled(4, 3), StageSpec::pooled(5, 3)], &[7], 3).unwrap()
    }

    fn run(net: &PcNet<f64>, x: &Tensor<f64>, hps: &[HyperParams], steps: usize) -> (Vec<Tensor<f64>>, Vec<Vec<f64>>, Vec<Vec<Tensor<f64>>>) {
        let mut tape = Tape::new();
        let b = net.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let hv: Vec<_> = hps.iter().map(|h| HpVars::constant(&mut tape, h).unwrap()).collect();
        let u = net.unroll(&mut tape, &b, xv, &hv, steps).unwrap();
        let logits = u.logits.iter().map(|&v| tape.value(v).clone()).collect();
        let states = u.states.iter().map(|s| s.iter().map(|&v| tape.value(v).clone()).collect()).collect();
        (logits, u.errors, states)
    }

    #[test]
    fn zero_steps_is_the_feedforward_classifier() {
        let net = small_net();
        let x = images(3, [3, 8, 8], 5);
        let (logits, errors, _) = run(&net, &x, &[HyperParams::supervised_training()], 0);
        assert_eq!(logits.len(), 1);
        assert_eq!(errors.len(), 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let ff = FeedForward(&net).logits(&mut tape, xv).unwrap();
        assert_eq!(&logits[0], tape.value(ff));
    }

    #[test]
    fn feedforward_coefficients_freeze_the_logits() {
        let net = small_net();
        let x = images(2, [3, 8, 8], 6);
        let (logits, _, _) = run(&net, &x, &[HyperParams::feedforward()], 4);
        assert_eq!(logits.len(), 5);
        for l in &logits[1..] {
            assert!(l.max_abs_diff(&logits[0]) < 1e-12);
        }
    }

    #[test]
    fn unroll_is_deterministic_and_recurrence_matters() {
        let net = small_net();
        let x = images(2, [3, 8, 8], 7);
        let hp = [HyperParams::new(0.2, 0.3, 0.5, 0.1).unwrap()];
        let (a, ea, _) = run(&net, &x, &hp, 3);
        let (b, eb, _) = run(&net, &x, &hp, 3);
        assert_eq!(a, b);
        assert_eq!(ea, eb);
        assert!(a[3].max_abs_diff(&a[0]) > 1e-6);
    }

    #[test]
    fn recorded_errors_match_recorded_states() {
        let net = small_net();
        let x = images(2, [3, 8, 8], 8);
        let hps = [HyperParams::new(0.2, 0.3, 0.5, 0.1).unwrap(), HyperParams::new(0.1, 0.6, 0.3, 0.4).unwrap()];
        let (_, errors, states) = run(&net, &x, &hps, 3);
        for (t, st) in states.iter().enumerate() {
            for (i, pc) in net.pcoders.iter().enumerate() {
                let mut tape = Tape::new();
                let b = pc.bind(&mut tape);
                let s = tape.constant(st[i].clone());
                let target = tape.constant(if i == 0 { x.clone() } else { st[i - 1].clone() });
                let p = pc.predict(&mut tape, &b, s).unwrap();
                let e = pc.prediction_error(&tape, p, target).unwrap();
                assert!((e - errors[t][i]).abs() < 1e-12);
                assert_eq!(st[i].shape()[1..], pc.state_shape());
            }
        }
    }

    #[test]
    fn wrong_hp_count_is_rejected() {
        let net = small_net();
        let mut tape = Tape::new();
        let b = net.bind(&mut tape);
        let x = tape.constant(images(1, [3, 8, 8], 9));
        let h = HpVars::constant(&mut tape, &HyperParams::feedforward()).unwrap();
        let err = net.unroll(&mut tape, &b, x, &[h, h, h], 1).unwrap_err();
        assert!(matches!(err, NetworkError::HpCount { got: 3, pcoders: 2 }));
    }

    /// Straight-line reference built directly on the kernels, no tape.
    fn reference(net: &PcNet<f64>, x: &Tensor<f64>, hp: &HyperParams, steps: usize) -> Vec<Vec<f64>> {
        let xs = x.dims4().unwrap();
        let enc = |pc: &Pcoder<f64>, v: &[f64], s: [usize; 4]| {
            let (c, cs) = tensor::conv2d(v, s, pc.ff.weight.data(), pc.ff.weight.dims4().unwrap(), Some(pc.ff.bias.data()), 1, pc.ff.padding).unwrap();
            let r: Vec<f64> = c.iter().map(|v| v.max(0.0)).collect();
            let (p, _, ps) = tensor::maxpool2x2(&r, cs).unwrap();
            (p, ps)
        };
        let dec = |pc: &Pcoder<f64>, v: &[f64], s: [usize; 4]| {
            let (u, us) = tensor::upsample_bilinear2x(v, s).unwrap();
            let d = &pc.fb.deconv;
            tensor::conv_transpose2d(&u, us, d.weight.data(), d.weight.dims4().unwrap(), Some(d.bias.data()), 1, 1).unwrap()
        };
        let head = |v: &[f64]| {
            let mut h = v.to_vec();
            for (j, l) in net.head.layers.iter().enumerate() {
                let (o, i) = (l.weight.shape()[0], l.weight.shape()[1]);
                h = (0..o).map(|r| l.bias.data()[r] + (0..i).map(|c| l.weight.data()[r * i + c] * h[c]).sum::<f64>()).collect();
                if j + 1 < net.head.layers.len() {
                    h.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            h
        };
        let (m1, s1) = enc(&net.pcoders[0], x.data(), xs);
        let (m2, s2) = enc(&net.pcoders[1], &m1, s1);
        let mut m = [m1, m2];
        let mut out = vec![head(&m[1])];
        let shapes = [s1, s2];
        for _ in 0..steps {
            let (p1, _) = dec(&net.pcoders[0], &m[0], s1);
            let (p2, _) = dec(&net.pcoders[1], &m[1], s2);
            let g = |i: usize, p: &[f64], target: &[f64]| {
                let pc = &net.pcoders[i];
                let res: Vec<f64> = p.iter().zip(target).map(|(a, b)| a - b).collect();
                let ts = if i == 0 { xs } else { shapes[0] };
                let d = &pc.fb.deconv;
                let (c, cs) = tensor::conv2d(&res, ts, d.weight.data(), d.weight.dims4().unwrap(), None, 1, 1).unwrap();
                let up = tensor::upsample_bilinear2x_backward(&c, [cs[0], cs[1], cs[2] / 2, cs[3] / 2]).unwrap();
                let scale = 2.0 / (pc.receptive_field() as f64).sqrt();
                up.into_iter().map(|v| v * scale).collect::<Vec<f64>>()
            };
            let g1 = g(0, &p1, x.data());
            let g2 = g(1, &p2, &m[0]);
            let (f1, _) = enc(&net.pcoders[0], x.data(), xs);
            let n1: Vec<f64> = (0..f1.len()).map(|k| hp.mu * m[0][k] + hp.gamma * f1[k] + hp.beta * p2[k] - hp.alpha * g1[k]).collect();
            let (f2, _) = enc(&net.pcoders[1], &n1, s1);
            let n2: Vec<f64> = (0..f2.len()).map(|k| hp.mu * m[1][k] + hp.gamma * f2[k] - hp.alpha * g2[k]).collect();
            m = [n1, n2];
            out.push(head(&m[1]));
        }
        out
    }

    #[test]
    fn matches_straight_line_reference() {
        let net = small_net();
        let x = images(1, [3, 8, 8], 10);
        let hp = HyperParams::new(0.25, 0.35, 0.4, 0.3).unwrap();
        let (logits, _, _) = run(&net, &x, &[hp], 2);
        let oracle = reference(&net, &x, &hp, 2);
        for (l, o) in logits.iter().zip(&oracle) {
            for (a, b) in l.data().iter().zip(o) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn weights_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.pcw");
        let net = PcNet::shallow(&mut rng(11));
        net.save(&path).unwrap();
        let mut other = PcNet::shallow(&mut rng(12));
        other.load_weights(&path).unwrap();
        assert_eq!(net, other);
        let mut base = BaselineNet::<f32>::new(&mut rng(13), BaselineVariant::Deep);
        assert!(base.load_weights(&path).is_err());
    }

    #[test]
    fn trainable_flags() {
        let mut net = PcNet::<f32>::shallow(&mut rng(14));
        net.set_trainable(false, false);
        assert!(net.is_frozen());
        net.set_trainable(true, false);
        assert!(net.pcoders.iter().all(|p| p.ff.weight.requires_grad() && !p.fb.deconv.weight.requires_grad()));
    }
}
