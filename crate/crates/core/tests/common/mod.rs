//! Finite-difference gradient checks shared by the test targets. Each check
//! returns the worst relative error it saw.

#![allow(dead_code)]

use proact::activation::{activation_backward, activation_forward, hyrelu, hyrelu_grad};
use proact::hardening::kd_loss;
use proact::{ActivationKind, LayerSpec, Network, Tensor, Threshold, ThresholdSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub const H: f64 = 1e-5;
pub const INSTANCES: usize = 100;
const PROBES: usize = 12;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Distinct values at least 0.01 apart, so max-pooling has no near-ties.
fn spread_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `LayerSpec::backward` on the scalar loss `<forward(x), r>`, probing
/// random input and parameter coordinates.
pub fn layer_worst(layer: &LayerSpec, input_shape: &[usize], seed: u64) -> f64 {
    let spread = matches!(layer, LayerSpec::MaxPool2d { .. });
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let batch = rng.gen_range(1..4);
        let mut shape = vec![batch];
        shape.extend(input_shape);
        let x = if spread {
            spread_tensor(&mut rng, shape)
        } else {
            random_tensor(&mut rng, shape)
        };
        let params: Vec<Tensor> = layer
            .param_shapes()
            .into_iter()
            .map(|s| random_tensor(&mut rng, s))
            .collect();
        let out = layer.forward(&params, &x).unwrap();
        let r = random_tensor(&mut rng, out.shape().to_vec());
        let (gx, gp) = layer.backward(&params, &x, &r, true).unwrap();
        let loss = |p: &[Tensor], x: &Tensor| dot(&layer.forward(p, x).unwrap(), &r);

        for _ in 0..PROBES {
            let i = rng.gen_range(0..x.len());
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += H;
            xm.data_mut()[i] -= H;
            let fd = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * H);
            worst = worst.max(rel_err(gx.data()[i], fd));
        }
        for (t, g) in gp.iter().enumerate() {
            for _ in 0..PROBES {
                let i = rng.gen_range(0..params[t].len());
                let (mut pp, mut pm) = (params.clone(), params.clone());
                pp[t].data_mut()[i] += H;
                pm[t].data_mut()[i] -= H;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * H);
                worst = worst.max(rel_err(g.data()[i], fd));
            }
        }
    }
    worst
}

/// Every layer kind with a representative geometry.
pub fn layer_cases() -> Vec<(LayerSpec, Vec<usize>)> {
    vec![
        (
            LayerSpec::Dense {
                inputs: 7,
                outputs: 5,
            },
            vec![7],
        ),
        (
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            vec![2, 6, 6],
        ),
        (
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 2,
                stride: 2,
                padding: 0,
            },
            vec![1, 6, 6],
        ),
        (
            LayerSpec::MaxPool2d {
                kernel: 2,
                stride: 2,
            },
            vec![2, 6, 6],
        ),
        (
            LayerSpec::AvgPool2d {
                kernel: 2,
                stride: 2,
            },
            vec![2, 6, 6],
        ),
        (LayerSpec::Flatten, vec![2, 3, 3]),
    ]
}

fn away_from(rng: &mut impl Rng, points: &[f64]) -> f64 {
    loop {
        let x: f64 = rng.gen_range(-3.0..6.0);
        if points.iter().all(|p| (x - p).abs() > 0.01) {
            return x;
        }
    }
}

/// Input and threshold gradients of an activation slot under `kind`.
pub fn activation_worst(kind: ActivationKind, seed: u64) -> f64 {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let n = 6;
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let lambdas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();
        let thr = if kind == ActivationKind::Hyrelu && rng.gen_bool(0.5) {
            Threshold::Layer(lambdas[0])
        } else {
            Threshold::Neuron(lambdas.clone())
        };
        let set = ThresholdSet::new(kind, rng.gen_range(2.0..20.0)).with(0, thr.clone());
        let policy = (kind != ActivationKind::Relu).then_some((&set, &thr));
        let batch = 3;
        let x: Vec<f64> = (0..batch * n)
            .map(|i| {
                let l = thr.values()[if thr.len() == 1 { 0 } else { i % n }];
                away_from(&mut rng, &[0.0, l])
            })
            .collect();
        let x = Tensor::new(vec![batch, n], x).unwrap();
        let r = random_tensor(&mut rng, vec![batch, n]);
        let (gx, gl) = activation_backward(policy, &x, &r, true).unwrap();
        let loss = |x: &Tensor| dot(&activation_forward(policy, x), &r);
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += H;
            xm.data_mut()[i] -= H;
            worst = worst.max(rel_err(gx.data()[i], (loss(&xp) - loss(&xm)) / (2.0 * H)));
        }
        if kind.is_smooth() {
            let gl = gl.unwrap();
            for j in 0..thr.len() {
                let mut tp = thr.clone();
                tp.values_mut()[j] += H;
                let mut tm = thr.clone();
                tm.values_mut()[j] -= H;
                let fp = dot(&activation_forward(Some((&set, &tp)), &x), &r);
                let fm = dot(&activation_forward(Some((&set, &tm)), &x), &r);
                worst = worst.max(rel_err(gl[j], (fp - fm) / (2.0 * H)));
            }
        }
    }
    worst
}

pub const ACTIVATION_KINDS: [ActivationKind; 4] = [
    ActivationKind::Relu,
    ActivationKind::ClippedRelu,
    ActivationKind::Hyrelu,
    ActivationKind::FitactNeuronwise,
];

/// Both partials of the scalar HyReLU.
pub fn hyrelu_scalar_worst(seed: u64) -> f64 {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let lambda = rng.gen_range(0.5..5.0);
        let k = rng.gen_range(1.0..20.0);
        let x = away_from(&mut rng, &[0.0]);
        let (dx, dl) = hyrelu_grad(x, lambda, k).unwrap();
        let fx =
            (hyrelu(x + h, lambda, k).unwrap() - hyrelu(x - h, lambda, k).unwrap()) / (2.0 * h);
        let fl =
            (hyrelu(x, lambda + h, k).unwrap() - hyrelu(x, lambda - h, k).unwrap()) / (2.0 * h);
        worst = worst.max(rel_err(dx, fx)).max(rel_err(dl, fl));
    }
    worst
}

/// Student-logit gradient of the distillation loss.
pub fn kd_worst(seed: u64) -> f64 {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let s = random_tensor(&mut rng, vec![3, 5]);
        let t = random_tensor(&mut rng, vec![3, 5]);
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
        let temp = rng.gen_range(1.0..8.0);
        let out = kd_loss(&s, &t, &labels, &[1.0, 2.0], temp, 1e-3).unwrap();
        for i in 0..s.len() {
            let (mut p, mut m) = (s.clone(), s.clone());
            p.data_mut()[i] += H;
            m.data_mut()[i] -= H;
            let fd = (kd_loss(&p, &t, &labels, &[1.0, 2.0], temp, 1e-3)
                .unwrap()
                .loss
                - kd_loss(&m, &t, &labels, &[1.0, 2.0], temp, 1e-3)
                    .unwrap()
                    .loss)
                / (2.0 * H);
            worst = worst.max(rel_err(out.grad.data()[i], fd));
        }
    }
    worst
}

pub fn small_cnn(seed: u64) -> Network {
    let mut net = Network::new(
        "cnn",
        vec![1, 6, 6],
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Activation,
            LayerSpec::MaxPool2d {
                kernel: 2,
                stride: 2,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 18,
                outputs: 8,
            },
            LayerSpec::Activation,
            LayerSpec::Dense {
                inputs: 8,
                outputs: 4,
            },
        ],
    )
    .unwrap();
    net.init_params(seed);
    net
}

/// d(distillation loss)/d(lambda) through a whole network, every threshold.
pub fn threshold_worst(networks: u64) -> f64 {
    let gamma = 1e-2;
    let mut worst: f64 = 0.0;
    for seed in 0..networks {
        let net = small_cnn(seed);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(100 + seed);
        let x = random_tensor(&mut rng, vec![4, 1, 6, 6]);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..4)).collect();
        let teacher = net.forward(None, &x).unwrap();
        let set = ThresholdSet::new(ActivationKind::Hyrelu, 10.0)
            .with(1, Threshold::Layer(rng.gen_range(0.2..1.5)))
            .with(
                5,
                Threshold::Neuron((0..8).map(|_| rng.gen_range(0.2..1.5)).collect()),
            );
        let objective = |s: &ThresholdSet| {
            let logits = net.forward(Some(s), &x).unwrap();
            kd_loss(&logits, &teacher, &labels, &s.values(), 4.0, gamma)
                .unwrap()
                .loss
        };

        let trace = net.trace_from(0, Some(&set), &x).unwrap();
        let kd = kd_loss(
            trace.last().unwrap(),
            &teacher,
            &labels,
            &set.values(),
            4.0,
            gamma,
        )
        .unwrap();
        let grads = net
            .backward(0, 0, Some(&set), &trace, kd.grad, false, &[1, 5])
            .unwrap();
        let values = set.values();
        let analytic: Vec<f64> = grads
            .thresholds
            .values()
            .flatten()
            .zip(&values)
            .map(|(g, v)| g + 2.0 * gamma * v)
            .collect();
        for (i, &a) in analytic.iter().enumerate() {
            let (mut vp, mut vm) = (values.clone(), values.clone());
            vp[i] += H;
            vm[i] -= H;
            let (mut sp, mut sm) = (set.clone(), set.clone());
            sp.set_values(&vp).unwrap();
            sm.set_values(&vm).unwrap();
            worst = worst.max(rel_err(a, (objective(&sp) - objective(&sm)) / (2.0 * H)));
        }
    }
    worst
}
