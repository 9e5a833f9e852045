//! Finite-difference gradient oracles shared by the gradient-check and
//! acceptance targets.
#![allow(dead_code)]

use std::path::Path;

use pcdyn::data::{write_cifar10, Dataset, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES};
use pcdyn::hyperparams::{AuxParams, HpMask, HpVars, TrainableHp};
use pcdyn::network::{PcNet, CLASSES, IMAGE_SHAPE};
use pcdyn::pcoder::ErrorGradient;
use pcdyn::tensor::{conv2d, conv_transpose2d, Real, Tape, Tensor, Var};
use pcdyn::training::mean_unrolled_ce;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const END_TO_END_TOL: f64 = 1e-2;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero and pairwise distinct with high probability,
/// so relu and max-pool stay differentiable under the probe step.
fn away_from_kinks(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Evaluates `mse(op(inputs), target)` and returns its value and, when
/// requested, the gradient with respect to every input entry.
fn eval<F>(inputs: &[Tensor<f64>], target_seed: u64, op: &F, with_grad: bool) -> (f64, Vec<Vec<f64>>)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = op(&mut tape, &vars);
    let mut trng = ChaCha8Rng::seed_from_u64(target_seed);
    let target = tape.constant(random(&mut trng, tape.shape(out)));
    let loss = tape.mse(out, target).unwrap();
    let value = tape.value(loss).data()[0];
    if !with_grad {
        return (value, Vec::new());
    }
    let grads = tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    (value, g)
}

/// Norm-relative error between the analytic gradient and central differences,
/// over all entries of all inputs.
fn primitive_error<F>(inputs: Vec<Tensor<f64>>, seed: u64, op: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let (_, analytic) = eval(&inputs, seed, &op, true);
    let (mut diff, mut reference) = (Vec::new(), Vec::new());
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut probe = inputs.clone();
            probe[i].data_mut()[j] += H;
            let up = eval(&probe, seed, &op, false).0;
            probe[i].data_mut()[j] -= 2.0 * H;
            let down = eval(&probe, seed, &op, false).0;
            let fd = (up - down) / (2.0 * H);
            reference.push(fd);
            diff.push(analytic[i][j] - fd);
        }
    }
    norm(&diff) / norm(&reference).max(1e-12)
}


/// Norm-relative finite-difference error of every primitive on the tape,
/// each under several shapes and argument settings.
pub fn primitive_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut check = |name: String, inputs: Vec<Tensor<f64>>, seed: u64, op: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var| {
        out.push((name, primitive_error(inputs, seed, op)));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, padding, h) in [(1, 0, 5), (1, 1, 4), (2, 1, 5), (1, 2, 3)] {
        let inputs = vec![random(&mut rng, &[2, 2, h, h]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[3])];
        check(format!("conv2d s{stride} p{padding}"), inputs, 2, &|t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, padding).unwrap());
    }
    let inputs = vec![random(&mut rng, &[1, 2, 4, 4]), random(&mut rng, &[2, 2, 3, 3])];
    check("conv2d without bias".into(), inputs, 3, &|t, v| t.conv2d(v[0], v[1], None, 1, 1).unwrap());
    for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let inputs = vec![random(&mut rng, &[2, 3, 3, 3]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[2])];
        check(format!("conv_transpose2d s{stride} p{padding}"), inputs, 5, &|t, v| {
            t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, padding).unwrap()
        });
    }
    check("upsample".into(), vec![random(&mut rng, &[2, 2, 3, 4])], 7, &|t, v| t.upsample_bilinear2x(v[0]).unwrap());
    check("upsample adjoint".into(), vec![random(&mut rng, &[2, 2, 6, 4])], 8, &|t, v| t.upsample_bilinear2x_adjoint(v[0]).unwrap());
    check("maxpool".into(), vec![away_from_kinks(&mut rng, &[2, 2, 4, 6])], 9, &|t, v| t.maxpool2x2(v[0]).unwrap());
    check("relu".into(), vec![away_from_kinks(&mut rng, &[3, 5])], 10, &|t, v| t.relu(v[0]).unwrap());
    let inputs = vec![random(&mut rng, &[3, 2, 2, 2]), random(&mut rng, &[4, 8]), random(&mut rng, &[4])];
    check("dense".into(), inputs, 12, &|t, v| t.dense(v[0], v[1], Some(v[2])).unwrap());
    let pair = vec![random(&mut rng, &[2, 3]), random(&mut rng, &[2, 3])];
    check("add".into(), pair.clone(), 13, &|t, v| t.add(v[0], v[1]).unwrap());
    check("sub".into(), pair.clone(), 14, &|t, v| t.sub(v[0], v[1]).unwrap());
    check("mse".into(), pair, 15, &|t, v| t.mse(v[0], v[1]).unwrap());
    check("scale".into(), vec![random(&mut rng, &[5])], 16, &|t, v| t.scale(v[0], -1.7).unwrap());
    let scaled = vec![random(&mut rng, &[2, 3]), random(&mut rng, &[])];
    check("mul_scalar".into(), scaled, 17, &|t, v| t.mul_scalar(v[0], v[1]).unwrap());
    check("sum".into(), vec![random(&mut rng, &[2, 3])], 18, &|t, v| t.sum(v[0]).unwrap());
    check("mean".into(), vec![random(&mut rng, &[2, 3])], 19, &|t, v| t.mean(v[0]).unwrap());
    check("select".into(), vec![random(&mut rng, &[4])], 20, &|t, v| t.select(v[0], 2).unwrap());
    check("reshape".into(), vec![random(&mut rng, &[2, 6])], 21, &|t, v| t.reshape(v[0], &[3, 4]).unwrap());
    check("softmax".into(), vec![random(&mut rng, &[3, 5])], 23, &|t, v| t.softmax(v[0]).unwrap());
    check("cross_entropy".into(), vec![random(&mut rng, &[4, 5])], 24, &|t, v| t.cross_entropy(v[0], &[0, 4, 2, 2]).unwrap());
    for active in [[true, true, true], [true, true, false]] {
        check(format!("sigmoid_simplex {active:?}"), vec![random(&mut rng, &[3])], 25, &move |t, v| {
            t.sigmoid_simplex(v[0], &active).unwrap()
        });
    }
    out
}

/// `<conv(x), y> - <x, conv_transpose(y)>` relative to the inner product,
/// over random shapes, strides and paddings; returns the worst case.
pub fn adjoint_suite(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let mut worst = 0.0f64;
    for instance in 0..instances {
        let stride = 1 + instance % 2;
        let k = [1, 3, 5][instance % 3];
        let padding = rng.random_range(0..=k / 2);
        let cin = rng.random_range(1..4);
        let cout = rng.random_range(1..4);
        let n = rng.random_range(1..3);
        // Output extent (h + 2p - k) / s + 1 must be exact so the transposed
        // map lands back on h.
        let h = k - 2 * padding + stride * rng.random_range(1..4);
        let x = random(&mut rng, &[n, cin, h, h]);
        let w = random(&mut rng, &[cout, cin, k, k]);
        let (cx, cs) = conv2d(x.data(), [n, cin, h, h], w.data(), [cout, cin, k, k], None, stride, padding).unwrap();
        let y = random(&mut rng, &cs);
        let (ty, ts) = conv_transpose2d(y.data(), cs, w.data(), [cout, cin, k, k], None, stride, padding).unwrap();
        assert_eq!(ts, [n, cin, h, h]);
        let lhs: f64 = cx.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(&ty).map(|(a, b)| a * b).sum();
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    worst
}

/// Mean cross-entropy over t = 1..=T of a network whose per-PCoder
/// coefficients come from `aux` through the constraining map.
fn hp_loss<T: Real>(net: &PcNet<T>, images: &Tensor<T>, labels: &[usize], aux: &[AuxParams], mask: HpMask, steps: usize) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let x = tape.constant(images.clone());
    let hps: Vec<TrainableHp<T>> = aux.iter().map(|a| TrainableHp::from_aux(a, mask)).collect();
    let mut vars: Vec<HpVars> = Vec::new();
    let mut bindings = Vec::new();
    for h in &hps {
        let (v, b) = h.bind(&mut tape, mask).unwrap();
        vars.push(v);
        bindings.push(b);
    }
    let u = net.unroll(&mut tape, &bound, x, &vars, steps).unwrap();
    let loss = mean_unrolled_ce(&mut tape, &u.logits, labels).unwrap();
    let value = tape.value(loss).data()[0].as_f64();
    let grads = tape.backward(loss).unwrap();
    let mut flat = Vec::new();
    for b in &bindings {
        let aux = grads.get(b.aux).map_or_else(|| vec![0.0; 3], |g| g.iter().map(|v| v.as_f64()).collect());
        let alpha = grads.get(b.alpha).map_or(0.0, |g| g[0].as_f64());
        flat.extend(aux);
        flat.push(alpha);
    }
    (value, flat)
}

fn entry(aux: &mut AuxParams, k: usize) -> &mut f64 {
    match k {
        0 => &mut aux.mu_aux,
        1 => &mut aux.gamma_aux,
        2 => &mut aux.beta_aux,
        _ => &mut aux.alpha_raw,
    }
}

pub struct EndToEnd {
    /// Per sampled parameter: (analytic f32, central difference f64).
    pub pairs: Vec<(f64, f64)>,
}

impl EndToEnd {
    pub fn max_rel(&self) -> f64 {
        self.pairs.iter().map(|&(a, fd)| (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12)).fold(0.0, f64::max)
    }
}

/// Analytic 32-bit gradient of the unrolled hp loss (T = 10, shallow
/// network, separate coefficients per PCoder) against 64-bit central
/// differences, on 5 sampled auxiliary parameters.
pub fn end_to_end(mode: ErrorGradient, mask: HpMask, seed: u64) -> EndToEnd {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net: PcNet<f32> = PcNet::shallow(&mut rng);
    net.error_gradient = mode;
    net.set_trainable(false, false);
    let n = 4;
    let images = Tensor::from_fn([n, IMAGE_SHAPE[0], IMAGE_SHAPE[1], IMAGE_SHAPE[2]], |_| rng.random_range(0.0..1.0f32));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..CLASSES)).collect();
    let aux: Vec<AuxParams> = (0..net.len())
        .map(|_| AuxParams {
            mu_aux: rng.random_range(-1.0..1.0),
            gamma_aux: rng.random_range(-1.0..1.0),
            beta_aux: rng.random_range(-1.0..1.0),
            alpha_raw: if mask.zero_alpha { 0.0 } else { rng.random_range(0.05..0.5) },
        })
        .collect();
    let steps = 10;
    let (_, analytic) = hp_loss(&net, &images, &labels, &aux, mask, steps);
    let wide = net.cast::<f64>();
    let wide_images = images.cast::<f64>();
    // Entries 4i+3 (alpha) are not differentiable under the zero_alpha mask.
    let candidates: Vec<usize> = (0..analytic.len()).filter(|i| !(mask.zero_alpha && i % 4 == 3)).collect();
    let picked = rand::seq::index::sample(&mut rng, candidates.len(), 5);
    let h = 1e-5;
    let pairs = picked
        .iter()
        .map(|p| {
            let flat = candidates[p];
            let mut probe = aux.clone();
            let base = *entry(&mut probe[flat / 4], flat % 4);
            *entry(&mut probe[flat / 4], flat % 4) = base + h;
            let up = hp_loss(&wide, &wide_images, &labels, &probe, mask, steps).0;
            *entry(&mut probe[flat / 4], flat % 4) = base - h;
            let down = hp_loss(&wide, &wide_images, &labels, &probe, mask, steps).0;
            (analytic[flat], (up - down) / (2.0 * h))
        })
        .collect();
    EndToEnd { pairs }
}


/// Class `c` brightens one of ten horizontal bands in one channel.
pub fn synthetic(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let mut data = Vec::with_capacity(n * 3072);
    for &l in &labels {
        for c in 0..3 {
            for y in 0..32 {
                for _x in 0..32 {
                    let band = y * 10 / 32 == l && c == l % 3;
                    let base = if band { 0.8 } else { 0.3 };
                    data.push(base + rng.random_range(-0.2..0.2f32));
                }
            }
        }
    }
    Dataset::new(Tensor::new([n, 3, 32, 32], data).unwrap(), labels).unwrap()
}

/// Five training files of `per_file` images and a test file of `test` images.
pub fn write_synthetic_cifar(dir: &Path, per_file: usize, test: usize) {
    for (i, f) in CIFAR_TRAIN_FILES.iter().enumerate() {
        write_cifar10(&dir.join(f), &synthetic(per_file, i as u64)).unwrap();
    }
    write_cifar10(&dir.join(CIFAR_TEST_FILE), &synthetic(test, 99)).unwrap();
}

