//! Independent oracles shared by the integration suites and the acceptance
//! target. Nothing here calls the code paths it is used to check.
#![allow(dead_code)]

use std::path::PathBuf;

use cgp_nas::catalog::{Activation, LayerCatalog, LayerSpec};
use cgp_nas::genome::{CgpParams, Genome, NodeGene, PhenoLayer, Phenotype};
use cgp_nas::shapecheck::TensorShape;
use cgp_nas::trainer::{Mode, Network, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Dataset root: `$CGP_NAS_DATA`, else `/root/data`.
pub fn data_root() -> PathBuf {
    std::env::var_os("CGP_NAS_DATA").map_or_else(|| PathBuf::from("/root/data"), PathBuf::from)
}

/// Uniform genome over all legal genes, with no viability filtering.
pub fn raw_random_genome<R: Rng>(params: &CgpParams, catalog: &LayerCatalog, rng: &mut R) -> Genome {
    let nodes = (1..=params.cols)
        .map(|col| {
            let function = rng.gen_range(0..catalog.len());
            let arity = if matches!(catalog.entries()[function], LayerSpec::Add) { 2 } else { 1 };
            let lo = col.saturating_sub(params.levels_back);
            NodeGene {
                function,
                inputs: (0..arity).map(|_| rng.gen_range(lo..col)).collect(),
            }
        })
        .collect();
    let output = rng.gen_range(0..=params.cols);
    Genome::new(*params, nodes, output, catalog).expect("legal by construction")
}

/// Reachability by fixed-point iteration over the full edge list.
pub fn brute_force_active(g: &Genome) -> Vec<usize> {
    let cols = g.params().cols;
    let mut reach = vec![false; cols + 1];
    if g.output() > 0 {
        reach[g.output()] = true;
    }
    loop {
        let mut changed = false;
        for c in 1..=cols {
            if !reach[c] {
                continue;
            }
            for &src in &g.node(c).inputs {
                if src > 0 && !reach[src] {
                    reach[src] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    (1..=cols).filter(|&c| reach[c]).collect()
}

/// Direct same-padded stride-1 convolution over NHWC data; weight index
/// `((ky * k + kx) * cin + ci) * f + fo`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(x: &[f64], batch: usize, h: usize, w: usize, cin: usize, k: usize, f: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut y = vec![0.0; batch * h * w * f];
    for n in 0..batch {
        for oy in 0..h {
            for ox in 0..w {
                for fo in 0..f {
                    let mut acc = bias[fo];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as isize + ky as isize - pad;
                            let ix = ox as isize + kx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[((n * h + iy as usize) * w + ix as usize) * cin + ci];
                                acc += xv * weight[((ky * k + kx) * cin + ci) * f + fo];
                            }
                        }
                    }
                    y[((n * h + oy) * w + ox) * f + fo] = acc;
                }
            }
        }
    }
    y
}

/// Layer kinds exercised by the gradient suite.
pub const GRADIENT_KINDS: [&str; 18] = [
    "conv3", "conv5", "maxpool", "avgpool", "globalavgpool", "relu", "elu", "selu", "sigmoid", "softmax", "softplus",
    "softsign", "tanh", "exponential", "dropout", "batchnorm", "dense", "add",
];

/// A small random network around one layer of `kind`: `(phenotype, input shape)`.
pub fn gradient_case<R: Rng>(kind: &str, rng: &mut R) -> (Phenotype, TensorShape) {
    let h = rng.gen_range(2..=5);
    let w = rng.gen_range(2..=5);
    let c = rng.gen_range(1..=3);
    let spatial = TensorShape::spatial(h, w, c);
    let single = |spec| Phenotype::chain([spec]);
    let act = |which| single(LayerSpec::Activation { which });
    match kind {
        "conv3" | "conv5" => {
            let kernel = if kind == "conv3" { 3 } else { 5 };
            (single(LayerSpec::Conv { filters: rng.gen_range(1..=3), kernel }), spatial)
        }
        "maxpool" => (single(LayerSpec::MaxPool), TensorShape::spatial(2 * rng.gen_range(1..=2) + rng.gen_range(0..=1), w.max(2), c)),
        "avgpool" => (single(LayerSpec::AvgPool), TensorShape::spatial(h.max(2), w.max(2), c)),
        "globalavgpool" => (single(LayerSpec::GlobalAvgPool), spatial),
        "relu" => (act(Activation::Relu), spatial),
        "elu" => (act(Activation::Elu), spatial),
        "selu" => (act(Activation::Selu), spatial),
        "sigmoid" => (act(Activation::Sigmoid), spatial),
        "softmax" => (act(Activation::Softmax), spatial),
        "softplus" => (act(Activation::Softplus), spatial),
        "softsign" => (act(Activation::Softsign), spatial),
        "tanh" => (act(Activation::Tanh), spatial),
        "exponential" => (act(Activation::Exponential), spatial),
        "dropout" => (single(LayerSpec::Dropout { rate: 0.2 }), spatial),
        "batchnorm" => (
            single(LayerSpec::BatchNorm {
                momentum: 0.99,
                epsilon: 0.001,
            }),
            spatial,
        ),
        "dense" => (
            Phenotype::chain([
                LayerSpec::Dense {
                    units: rng.gen_range(2..=6),
                },
                LayerSpec::Activation { which: Activation::Tanh },
            ]),
            TensorShape::flat(rng.gen_range(2..=8)),
        ),
        "add" => {
            let mut p = single(LayerSpec::Conv { filters: c, kernel: 3 });
            p.layers.push(PhenoLayer {
                spec: LayerSpec::Add,
                inputs: vec![0, 1],
            });
            (p, spatial)
        }
        other => panic!("unknown gradient kind {other}"),
    }
}

const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(a: f64, n: f64) -> f64 {
    rel_error_floored(a, n, REL_FLOOR)
}

pub fn rel_error_floored(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn ce_loss(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize], mask_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let pass = net.forward(x.clone(), Mode::Train, &mut rng).expect("case compiles");
    let p = pass.probabilities();
    let classes = p.shape().numel();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -p.data()[i * classes + y].ln())
        .sum::<f64>()
        / labels.len() as f64
}

/// Worst relative error between analytic and central-difference gradients
/// over every trainable parameter and every input element.
pub fn gradient_check(kind: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, shape) = gradient_case(kind, &mut rng);
    let mut net = Network::<f64>::build(&p, shape, &mut rng).expect("case compiles");
    // Perturb biases and batch-norm affine terms off their zero/one init.
    for block in net.params_mut() {
        if block.trainable {
            for v in block.values.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let batch = rng.gen_range(2..=4);
    let x = Tensor::new(batch, shape, (0..batch * shape.numel()).map(|_| rng.gen_range(-1.5..1.5)).collect());
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..10)).collect();
    let mask_seed = rng.gen();

    // Central differences lose about eps * |loss| / h to cancellation, so the
    // floor grows with the loss: a saturated softmax (loss ~ 9) leaves
    // gradients near 1e-7 that the oracle cannot resolve to 1e-4.
    let floor = REL_FLOOR * ce_loss(&net, &x, &labels, mask_seed).abs().max(1.0);

    let mut frng = ChaCha8Rng::seed_from_u64(mask_seed);
    let pass = net.forward(x.clone(), Mode::Train, &mut frng).unwrap();
    let (_, grads) = net.backward(&pass, &labels, true).unwrap();

    let mut worst: f64 = 0.0;
    for b in 0..net.params().len() {
        if !net.params()[b].trainable {
            continue;
        }
        for i in 0..net.params()[b].values.len() {
            let orig = net.params()[b].values[i];
            net.params_mut()[b].values[i] = orig + FD_STEP;
            let up = ce_loss(&net, &x, &labels, mask_seed);
            net.params_mut()[b].values[i] = orig - FD_STEP;
            let down = ce_loss(&net, &x, &labels, mask_seed);
            net.params_mut()[b].values[i] = orig;
            let (a, n) = (grads.params[b][i], (up - down) / (2.0 * FD_STEP));
            worst = worst.max(rel_error_floored(a, n, floor));
        }
    }
    let dx = grads.input.expect("input gradient requested");
    for i in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let up = ce_loss(&net, &xp, &labels, mask_seed);
        xp.data_mut()[i] -= 2.0 * FD_STEP;
        let down = ce_loss(&net, &xp, &labels, mask_seed);
        let (a, n) = (dx.data()[i], (up - down) / (2.0 * FD_STEP));
        worst = worst.max(rel_error_floored(a, n, floor));
    }
    worst
}

/// Fitness = active node count / cols.
pub fn active_fraction(g: &Genome) -> f64 {
    brute_force_active(g).len() as f64 / g.params().cols as f64
}

/// MNIST label counts of the canonical files.
pub const MNIST_TRAIN_HISTOGRAM: [usize; 10] = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949];
pub const MNIST_TEST_HISTOGRAM: [usize; 10] = [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009];

fn be_header(magic: u32, dims: &[u32]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b
}

/// Writes an easy 28x28 IDX dataset to `dir`: class `k` lights a band of
/// rows `2k..2k+3`, plus uniform noise. Returns `(images, labels)` paths.
pub fn write_synthetic_idx(dir: &std::path::Path, prefix: &str, n: usize, seed: u64) -> (PathBuf, PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = be_header(2051, &[n as u32, 28, 28]);
    let mut labels = be_header(2049, &[n as u32]);
    for i in 0..n {
        let k = (i % 10) as u8;
        labels.push(k);
        for r in 0..28 {
            for _ in 0..28 {
                let band = r >= 2 * k as usize && r < 2 * k as usize + 3;
                let base: u8 = if band { 200 } else { 0 };
                images.push(base.saturating_add(rng.gen_range(0..50)));
            }
        }
    }
    std::fs::create_dir_all(dir).unwrap();
    let (ip, lp) = (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")));
    std::fs::write(&ip, images).unwrap();
    std::fs::write(&lp, labels).unwrap();
    (ip, lp)
}
