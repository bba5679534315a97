//! Finite-difference audits of the autodiff kernel: every tape primitive
//! under random shapes, and the composed generation, understanding, and
//! autoencoding losses probed at random parameter coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_vocab, synth_benchmark, ParallelPair, SynthSpec, EOS};
use crate::kernel::gradcheck::{max_rel_err, numeric_grad};
use crate::kernel::tape::{gru_cell, GruParams, Tape, Var};
use crate::kernel::tensor::Tensor;
use crate::models::{Graph, ModelConfig, ModelSet};
use crate::mr::schema_from_corpus;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random values away from zero, for kinked activations.
fn rand_tensor_off_origin(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let sign = if rng.random_range(0..2) == 0 { -1.0 } else { 1.0 };
            sign * rng.random_range(0.1..2.0)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Contract any output to a scalar with fixed full-rank coefficients so
/// every element influences the root.
fn dot_reduce(tape: &mut Tape, v: Var) -> Var {
    let shape = tape.shape(v).to_vec();
    if shape.len() == 2 {
        let (m, n) = (shape[0], shape[1]);
        let left = Tensor::new(vec![1, m], (0..m).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap();
        let l = tape.input(&left);
        let row = tape.matmul(l, v).unwrap();
        let right = Tensor::vector((0..n).map(|i| 0.2 + 0.13 * i as f64).collect()).unwrap();
        let r = tape.input(&right);
        tape.matmul(row, r).unwrap()
    } else {
        let n = shape[0];
        let left = Tensor::new(vec![1, n], (0..n).map(|i| 0.3 + 0.17 * i as f64).collect()).unwrap();
        let l = tape.input(&left);
        tape.matmul(l, v).unwrap()
    }
}

/// Analytic-versus-numeric gradient of a scalar build over every input
/// tensor; returns the worst relative error.
fn audit(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let root = build(&mut tape, &vars);
    tape.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad(*v).to_vec()).collect();

    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let f = |x: &[f64]| {
            let mut probe = inputs.to_vec();
            probe[i] = Tensor::new(inputs[i].shape().to_vec(), x.to_vec()).unwrap();
            let mut t = Tape::new();
            let vs: Vec<Var> = probe.iter().map(|p| t.input(p)).collect();
            let r = build(&mut t, &vs);
            t.value(r)[0]
        };
        let numeric = numeric_grad(f, inputs[i].data(), 1e-5);
        worst = worst.max(max_rel_err(&analytic[i], &numeric));
    }
    worst
}

/// Every differentiable tape primitive under random shapes and values.
/// Returns the worst relative error over all trials.
pub fn audit_primitives(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let m = rng.random_range(1..4usize);
        let k = rng.random_range(1..4usize);
        let n = rng.random_range(1..4usize);

        let a = rand_tensor(&mut rng, vec![m, k]);
        let b = rand_tensor(&mut rng, vec![k, n]);
        worst = worst.max(audit(&[a, b], &|t, v| {
            let o = t.matmul(v[0], v[1]).unwrap();
            dot_reduce(t, o)
        }));

        let a = rand_tensor(&mut rng, vec![m, k]);
        let x = rand_tensor(&mut rng, vec![k]);
        worst = worst.max(audit(&[a, x], &|t, v| {
            let o = t.matmul(v[0], v[1]).unwrap();
            dot_reduce(t, o)
        }));

        let a = rand_tensor(&mut rng, vec![n]);
        let b = rand_tensor(&mut rng, vec![n]);
        worst = worst.max(audit(&[a, b], &|t, v| {
            let o = t.add(v[0], v[1]).unwrap();
            dot_reduce(t, o)
        }));

        let a = rand_tensor(&mut rng, vec![n]);
        let b = rand_tensor(&mut rng, vec![n]);
        worst = worst.max(audit(&[a, b], &|t, v| {
            let o = t.hadamard(v[0], v[1]).unwrap();
            dot_reduce(t, o)
        }));

        let c = rng.random_range(-2.0..2.0);
        let a = rand_tensor(&mut rng, vec![n]);
        worst = worst.max(audit(&[a], &move |t, v| {
            let o = t.scale(v[0], c);
            dot_reduce(t, o)
        }));

        let a = rand_tensor(&mut rng, vec![n]);
        worst = worst.max(audit(&[a], &|t, v| {
            let o = t.one_minus(v[0]);
            dot_reduce(t, o)
        }));

        let a = rand_tensor(&mut rng, vec![n]);
        worst = worst.max(audit(&[a], &|t, v| {
            let o = t.tanh(v[0]);
            dot_reduce(t, o)
        }));

        let a = rand_tensor(&mut rng, vec![n]);
        worst = worst.max(audit(&[a], &|t, v| {
            let o = t.sigmoid(v[0]);
            dot_reduce(t, o)
        }));

        let a = rand_tensor_off_origin(&mut rng, vec![n]);
        worst = worst.max(audit(&[a], &|t, v| {
            let o = t.relu(v[0]);
            dot_reduce(t, o)
        }));

        let a = rand_tensor(&mut rng, vec![m]);
        let b = rand_tensor(&mut rng, vec![n]);
        worst = worst.max(audit(&[a, b], &|t, v| {
            let o = t.concat(v[0], v[1]).unwrap();
            dot_reduce(t, o)
        }));

        let rows = rng.random_range(2..5usize);
        let table = rand_tensor(&mut rng, vec![rows, k]);
        let id = rng.random_range(0..rows);
        worst = worst.max(audit(&[table], &move |t, v| {
            let o = t.embed(v[0], id).unwrap();
            dot_reduce(t, o)
        }));

        let classes = rng.random_range(2..6usize);
        let logits = rand_tensor(&mut rng, vec![classes]);
        let target = rng.random_range(0..classes);
        worst = worst.max(audit(&[logits], &move |t, v| {
            t.softmax_ce(v[0], target).unwrap()
        }));

        let parts: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, vec![n])).collect();
        worst = worst.max(audit(&parts, &|t, v| {
            let o = t.add_many(v).unwrap();
            dot_reduce(t, o)
        }));

        let (d, h) = (rng.random_range(1..4usize), rng.random_range(1..4usize));
        let mut inputs = vec![
            rand_tensor(&mut rng, vec![d]),
            rand_tensor(&mut rng, vec![h]),
        ];
        for shape in [
            vec![h, d],
            vec![h, h],
            vec![h],
            vec![h, d],
            vec![h, h],
            vec![h],
            vec![h, d],
            vec![h, h],
            vec![h],
        ] {
            inputs.push(rand_tensor(&mut rng, shape));
        }
        worst = worst.max(audit(&inputs, &|t, v| {
            let p = GruParams {
                wz: v[2],
                uz: v[3],
                bz: v[4],
                wr: v[5],
                ur: v[6],
                br: v[7],
                wh: v[8],
                uh: v[9],
                bh: v[10],
            };
            let o = gru_cell(t, v[0], v[1], &p).unwrap();
            dot_reduce(t, o)
        }));
    }
    worst
}

fn text_targets(model: &ModelSet, text: &[String]) -> Vec<usize> {
    let mut ids = model.vocab.encode(text);
    ids.push(EOS);
    ids
}

fn loss_root(model: &ModelSet, g: &mut Graph, kind: usize, pair: &ParallelPair) -> Var {
    match kind {
        0 => {
            let latent = model.encode_mr_g(g, &pair.mr).unwrap();
            let targets = text_targets(model, &pair.text);
            model.decode_nll_g(g, latent, &targets).unwrap().0
        }
        1 => {
            let latent = model.encode_text_g(g, &pair.text).unwrap();
            model.heads_nll_g(g, latent, &pair.mr).unwrap()
        }
        2 => {
            let latent = model.encode_text_g(g, &pair.text).unwrap();
            let targets = text_targets(model, &pair.text);
            model.decode_nll_g(g, latent, &targets).unwrap().0
        }
        _ => {
            let latent = model.encode_mr_g(g, &pair.mr).unwrap();
            model.heads_nll_g(g, latent, &pair.mr).unwrap()
        }
    }
}

fn forward_loss(model: &ModelSet, kind: usize, pair: &ParallelPair) -> f64 {
    let mut g = Graph::new(&model.params);
    let root = loss_root(model, &mut g, kind, pair);
    g.tape.value(root)[0]
}

/// The composed generation, understanding, and both autoencoding losses on a
/// small trained-shape model: analytic parameter gradients against central
/// differences at randomly probed coordinates.
pub fn audit_composed_losses(trials: usize, seed: u64) -> f64 {
    let spec = SynthSpec {
        n_slots: 3,
        values_per_slot: 3,
        n_clean: 12,
        n_unlabeled_mrs: 4,
        seed: 5,
    };
    let (ds, _) = synth_benchmark(&spec).unwrap();
    let vocab = build_vocab(&ds, 1).unwrap();
    let schema = schema_from_corpus(ds.all_mrs(), 1_000_000).unwrap();
    let config = ModelConfig {
        embed_dim: 5,
        hidden_dim: 6,
        latent_dim: 4,
        encoder_layers: 1,
        max_decode_len: 20,
    };
    let model = ModelSet::new(config, vocab, schema, 77);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let pair = &ds.pairs[rng.random_range(0..ds.pairs.len())];
        let kind = trial % 4;

        let mut g = Graph::new(&model.params);
        let root = loss_root(&model, &mut g, kind, pair);
        g.tape.backward(root).unwrap();
        let grads = g.grads();
        let bound: Vec<&String> = grads.keys().collect();

        for _ in 0..3 {
            let name = bound[rng.random_range(0..bound.len())].clone();
            let len = model.params.get(&name).unwrap().len();
            let idx = rng.random_range(0..len);
            let analytic = grads[&name][idx];

            let eps = 1e-5;
            let mut probe = model.clone();
            let orig = probe.params.get(&name).unwrap().data()[idx];
            probe.params.get_mut(&name).unwrap().data_mut()[idx] = orig + eps;
            let plus = forward_loss(&probe, kind, pair);
            probe.params.get_mut(&name).unwrap().data_mut()[idx] = orig - eps;
            let minus = forward_loss(&probe, kind, pair);
            let numeric = (plus - minus) / (2.0 * eps);

            worst = worst.max(max_rel_err(&[analytic], &[numeric]));
        }
    }
    worst
}
