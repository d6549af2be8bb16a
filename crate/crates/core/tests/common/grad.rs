//! Central finite differences at 64-bit against the analytic gradients.
//!
//! Error measure per tensor: ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂).

use fedpeft::model::{build_model, GlobalModel, ModelSpec, VitSpec};
use fedpeft::peft::{apply_mode, Bottleneck, PromptInit, TuningMode};
use fedpeft::tensor::{Graph, Tensor, Var};
use fedpeft::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Projects the op output onto fixed random weights so every output
/// coordinate contributes to the scalar loss.
fn check_op<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out_shape = {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.shape(out).to_vec()
    };
    let proj = randn(&out_shape, &mut rng);
    let loss = |g: &mut Graph<f64>, vars: &[Var]| -> Var {
        let out = f(g, vars).unwrap();
        let p = g.input(proj.clone());
        let m = g.mul(out, p).unwrap();
        g.sum(m)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone(), true)).collect();
    let l = loss(&mut g, &vars);
    let grads = g.backward(l).unwrap();

    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let eval = |delta: f64| {
                let mut perturbed = inputs.clone();
                perturbed[i].data_mut()[j] += delta;
                let mut g = Graph::inference();
                let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
                let l = loss(&mut g, &vars);
                g.value(l).data()[0]
            };
            numeric[j] = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err < TOL, "{name}: input {i} relative error {err:e}");
        assert!(numeric.iter().any(|v| *v != 0.0), "{name}: input {i} has a vanishing gradient");
    }
}

pub fn matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check_op("matmul 2d", vec![randn(&[3, 4], &mut rng), randn(&[4, 5], &mut rng)], |g, v| g.matmul(v[0], v[1]));
    check_op("matmul shared rhs", vec![randn(&[2, 3, 4], &mut rng), randn(&[4, 5], &mut rng)], |g, v| {
        g.matmul(v[0], v[1])
    });
    check_op("matmul batched", vec![randn(&[2, 3, 4], &mut rng), randn(&[2, 4, 2], &mut rng)], |g, v| {
        g.matmul(v[0], v[1])
    });
}

pub fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check_op("add", vec![randn(&[2, 3], &mut rng), randn(&[2, 3], &mut rng)], |g, v| g.add(v[0], v[1]));
    check_op("add broadcast", vec![randn(&[2, 3, 4], &mut rng), randn(&[4], &mut rng)], |g, v| g.add(v[0], v[1]));
    check_op("mul broadcast", vec![randn(&[2, 3], &mut rng), randn(&[3], &mut rng)], |g, v| g.mul(v[0], v[1]));
    check_op("scale", vec![randn(&[5], &mut rng)], |g, v| Ok(g.scale(v[0], -1.7)));
    check_op("gelu", vec![randn(&[3, 5], &mut rng)], |g, v| Ok(g.gelu(v[0])));
}

pub fn normalisation_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check_op("softmax", vec![randn(&[3, 6], &mut rng)], |g, v| g.softmax(v[0]));
    check_op("layer_norm", vec![randn(&[2, 3, 8], &mut rng)], |g, v| g.layer_norm(v[0]));
}

pub fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check_op("concat", vec![randn(&[2, 1, 4], &mut rng), randn(&[2, 3, 4], &mut rng)], |g, v| {
        g.concat(&[v[0], v[1]], 1)
    });
    check_op("slice", vec![randn(&[2, 5, 3], &mut rng)], |g, v| g.slice(v[0], 1, 1, 3));
    check_op("reshape", vec![randn(&[2, 6], &mut rng)], |g, v| g.reshape(v[0], vec![3, 4]));
    check_op("permute", vec![randn(&[2, 3, 4], &mut rng)], |g, v| g.permute(v[0], &[1, 0, 2]));
    check_op("transpose_last", vec![randn(&[2, 3, 4], &mut rng)], |g, v| g.transpose_last(v[0]));
    check_op("expand", vec![randn(&[3, 2], &mut rng)], |g, v| Ok(g.expand(v[0], 4)));
    check_op("mean", vec![randn(&[3, 2], &mut rng)], |g, v| Ok(g.mean(v[0])));
}

pub fn cross_entropy_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = randn(&[4, 3], &mut rng);
    let labels = [0usize, 2, 1, 2];
    check_op("cross_entropy", vec![logits.clone()], |g, v| g.cross_entropy(v[0], &labels));

    // Independent value oracle: -log softmax via log-sum-exp.
    let mut expected = 0.0;
    for (row, &y) in logits.data().chunks(3).zip(&labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        expected += lse - row[y];
    }
    expected /= 4.0;
    let mut g = Graph::inference();
    let x = g.input(logits);
    let l = g.cross_entropy(x, &labels).unwrap();
    assert!((g.value(l).data()[0] - expected).abs() < 1e-14);
}

fn tiny_vit(depth: usize) -> ModelSpec {
    ModelSpec::Vit(VitSpec {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 8,
        mlp_hidden_dim: 16,
        depth,
        num_heads: 2,
        num_classes: 3,
    })
}

/// Moves every weight off its structured initial value so no gradient is
/// trivially zero (zero up-projections, unit norm scales, zero biases).
fn jitter(model: &mut GlobalModel<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in model.weights_mut() {
        for v in w.data_mut() {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn batch(model: &GlobalModel<f64>, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = model.spec().input_shape().iter().product();
    let samples: Vec<Vec<f32>> = (0..3).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let refs: Vec<&[f32]> = samples.iter().map(|s| s.as_slice()).collect();
    (model.prepare_input(&refs).unwrap(), vec![0, 2, 1])
}

fn model_loss(model: &GlobalModel<f64>, input: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut g = Graph::inference();
    let f = model.forward(&mut g, input).unwrap();
    let l = g.cross_entropy(f.logits, labels).unwrap();
    g.value(l).data()[0]
}

/// Checks every trainable tensor; returns the analytic gradients by name.
fn check_model(model: &GlobalModel<f64>, seed: u64) -> Vec<(String, Vec<f64>)> {
    let (input, labels) = batch(model, seed);
    let (_, grads) = model.loss_and_gradients(&input, &labels).unwrap();
    let mut out = Vec::new();
    for (i, (entry, grad)) in model.registry().entries().iter().zip(&grads).enumerate() {
        let Some(analytic) = grad else {
            assert!(!entry.trainable);
            continue;
        };
        let mut numeric = vec![0.0; analytic.len()];
        let mut probe = model.clone();
        for j in 0..analytic.len() {
            let orig = probe.weights()[i].data()[j];
            probe.weights_mut()[i].data_mut()[j] = orig + STEP;
            let up = model_loss(&probe, &input, &labels);
            probe.weights_mut()[i].data_mut()[j] = orig - STEP;
            let down = model_loss(&probe, &input, &labels);
            probe.weights_mut()[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * STEP);
        }
        let err = rel_err(analytic, &numeric);
        assert!(err < TOL, "{}: relative error {err:e}", entry.name);
        out.push((entry.name.clone(), analytic.clone()));
    }
    out
}

pub fn full_vit_four_blocks() {
    let mut m = build_model::<f64>(&tiny_vit(4), 7).unwrap();
    jitter(&mut m, 8);
    let grads = check_model(&m, 9);
    assert_eq!(grads.len(), m.registry().len());
}

pub fn adapter_vit() {
    let m = build_model::<f64>(&tiny_vit(2), 10).unwrap();
    let mut m = apply_mode(
        m,
        TuningMode::Adapter {
            bottleneck: Bottleneck::Width(4),
        },
        11,
    )
    .unwrap();
    jitter(&mut m, 12);
    let grads = check_model(&m, 13);
    let adapter_tensors = grads.iter().filter(|(n, _)| n.contains("adapter")).count();
    assert_eq!(adapter_tensors, 2 * 4);
}

pub fn prompt_vit_reaches_every_layer() {
    let m = build_model::<f64>(&tiny_vit(2), 14).unwrap();
    let mut m = apply_mode(
        m,
        TuningMode::Prompt {
            length: 3,
            init: PromptInit::default(),
        },
        15,
    )
    .unwrap();
    jitter(&mut m, 16);
    let grads = check_model(&m, 17);
    let (_, prompt) = grads.iter().find(|(n, _)| n == "prompt_tokens").expect("prompt gradient");
    let per_layer = prompt.len() / 2;
    for layer in prompt.chunks(per_layer) {
        assert!(layer.iter().all(|v| *v != 0.0));
    }
}

pub fn mlp_full() {
    let spec = ModelSpec::Mlp(fedpeft::model::MlpSpec {
        input_dim: 5,
        hidden_dims: vec![7, 6],
        num_classes: 3,
    });
    let mut m = build_model::<f64>(&spec, 18).unwrap();
    jitter(&mut m, 19);
    check_model(&m, 20);
}

/// Every op check, then every composed model.
pub const SUITE: [(&str, fn()); 9] = [
    ("matmul", matmul_ops),
    ("elementwise", elementwise_ops),
    ("normalisation", normalisation_ops),
    ("structural", structural_ops),
    ("cross_entropy", cross_entropy_ops),
    ("vit", full_vit_four_blocks),
    ("adapter", adapter_vit),
    ("prompt", prompt_vit_reaches_every_layer),
    ("mlp", mlp_full),
];
