use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thoughtlab::model::{MetaInit, Model, ModelConfig};
use thoughtlab::rl::{sequence_loss_and_grads, RewardSource};
use thoughtlab::tensor::{check_graph_fn, compare_gradients, finite_difference, Graph, Tensor, Var, Visibility};
use thoughtlab::thought::{generate_thoughts, scorable_positions, Decoding, ThoughtConfig};

const EPS: f64 = 1e-4;
const FLOOR: f64 = 1e-4;
const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalarizes `x` with fixed random weights so every element gets a distinct gradient.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(x), -1.0, 1.0);
    let w = g.constant(w);
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let r = check_graph_fn(&inputs, EPS, FLOOR, |g, v| Ok(f(g, v))).unwrap();
    assert!(r.checked > 0);
    assert!(r.max_rel_error < TOL, "{name}: rel error {:e} at {:?}", r.max_rel_error, r.worst);
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
    let row = rand_tensor(&mut rng, &[4], -2.0, 2.0);
    let pos = rand_tensor(&mut rng, &[3, 4], 0.5, 3.0);
    check("add", vec![a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        project(g, y, 1)
    });
    check("add broadcast", vec![a.clone(), row.clone()], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        project(g, y, 2)
    });
    check("sub", vec![a.clone(), row.clone()], |g, v| {
        let y = g.sub(v[1], v[0]).unwrap();
        project(g, y, 3)
    });
    check("mul", vec![a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        project(g, y, 4)
    });
    check("mul broadcast", vec![a.clone(), row.clone()], |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        project(g, y, 5)
    });
    check("scalars", vec![a.clone()], |g, v| {
        let y = g.add_scalar(v[0], 0.7);
        let y = g.mul_scalar(y, -1.3);
        let y = g.neg(y);
        project(g, y, 6)
    });
    check("exp", vec![a.clone()], |g, v| {
        let y = g.exp(v[0]);
        project(g, y, 7)
    });
    check("log", vec![pos], |g, v| {
        let y = g.log(v[0]);
        project(g, y, 8)
    });
    check("gelu", vec![a.clone()], |g, v| {
        let y = g.gelu(v[0]);
        project(g, y, 9)
    });
    check("sigmoid", vec![a], |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, 10)
    });
}

#[test]
fn linear_algebra_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[5, 2], -1.0, 1.0);
    let gamma = rand_tensor(&mut rng, &[5], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[5], -0.5, 0.5);
    check("matmul", vec![a.clone(), b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        project(g, y, 11)
    });
    check("softmax", vec![a.clone()], |g, v| {
        let y = g.softmax(v[0]);
        project(g, y, 12)
    });
    check("log_softmax", vec![a.clone()], |g, v| {
        let y = g.log_softmax(v[0]);
        project(g, y, 13)
    });
    check("layer_norm", vec![a.clone(), gamma, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        project(g, y, 14)
    });
    check("transpose", vec![a.clone()], |g, v| {
        let y = g.transpose(v[0]).unwrap();
        project(g, y, 15)
    });
    check("reshape", vec![a.clone()], |g, v| {
        let y = g.reshape(v[0], &[5, 3]).unwrap();
        project(g, y, 16)
    });
    check("sum_last", vec![a.clone()], |g, v| {
        let y = g.sum_last(v[0]);
        project(g, y, 17)
    });
    check("mean", vec![a], |g, v| {
        let y = g.exp(v[0]);
        g.mean(y)
    });
}

#[test]
fn indexing_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let table = rand_tensor(&mut rng, &[6, 3], -1.0, 1.0);
    let a = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    check("embedding", vec![table.clone()], |g, v| {
        let y = g.embedding(v[0], &[1, 4, 1, 0, 5]).unwrap();
        project(g, y, 18)
    });
    check("concat rows", vec![a.clone(), b.clone()], |g, v| {
        let y = g.concat(&[v[0], v[1]], 0).unwrap();
        project(g, y, 19)
    });
    check("concat cols", vec![a.clone(), a.clone()], |g, v| {
        let y = g.concat(&[v[0], v[1]], 1).unwrap();
        project(g, y, 20)
    });
    check("slice", vec![a.clone()], |g, v| {
        let y = g.slice(v[0], 1, 1, 3).unwrap();
        project(g, y, 21)
    });
    check("gather_rows", vec![a.clone()], |g, v| {
        let y = g.gather_rows(v[0], &[3, 0, 3, 2]).unwrap();
        project(g, y, 22)
    });
    check("pick", vec![a.clone()], |g, v| {
        let y = g.pick(v[0], &[2, 0, 1, 1]).unwrap();
        project(g, y, 23)
    });
    // The fill constant swamps a finite-difference step, so the mask is
    // checked the way it is used: ahead of a softmax.
    check("masked_fill", vec![a], |g, v| {
        let y = g.masked_fill(v[0], &[true, false, true], &[3]).unwrap();
        let y = g.log_softmax(y);
        let y = g.pick(y, &[0, 2, 2, 0]).unwrap();
        g.sum(y)
    });
}

#[test]
fn sparse_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let qkv = rand_tensor(&mut rng, &[6, 12], -1.0, 1.0);
    let vis = Arc::new(
        Visibility::from_rows(vec![vec![0], vec![0, 1], vec![0, 2], vec![0, 1, 3], vec![2, 4], vec![0, 1, 2, 3, 4, 5]]).unwrap(),
    );
    check("attention", vec![qkv], move |g, v| {
        let y = g.attention(v[0], 2, vis.clone()).unwrap();
        project(g, y, 24)
    });
}

#[test]
fn full_training_loss() {
    let c = ModelConfig {
        vocab_size: 7,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 64,
        seed: 4,
        meta_init: MetaInit::Mean,
    };
    let mut model = Model::<f32>::init(&c).unwrap().cast::<f64>();
    // At the default embedding scale the layer norms see inputs with a tiny
    // spread, and the step-size error of a 1e-4 difference alone reaches ~3e-5.
    let names: Vec<String> = model.names().iter().map(|s| s.to_string()).collect();
    for (name, p) in names.iter().zip(model.params.iter_mut()) {
        if name.ends_with("_emb") {
            p.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
    }
    let tokens = [1u32, 4, 2, 6, 0, 3, 5];
    let cfg = ThoughtConfig::new(3, 2);
    let pos = scorable_positions(tokens.len(), 2);
    let batch = generate_thoughts(&model, &tokens, &pos, &cfg, Decoding::Sample { seed: 2 }).unwrap();
    let (_, _, rewards) =
        sequence_loss_and_grads(&model, &tokens, &batch, &cfg, 1.0, RewardSource::Computed { clip: None }).unwrap();
    assert!(rewards.iter().flat_map(|r| &r.rewards).any(|&r| r != 0.0));
    let fixed = RewardSource::Fixed(&rewards);
    let (_, analytic, _) = sequence_loss_and_grads(&model, &tokens, &batch, &cfg, 1.0, fixed).unwrap();
    let mut params = model.params.clone();
    let mut probe = model.clone();
    let numeric = finite_difference(&mut params, EPS, |xs| {
        probe.params = xs.to_vec();
        sequence_loss_and_grads(&probe, &tokens, &batch, &cfg, 1.0, fixed).map(|r| r.0)
    })
    .unwrap();
    let r = compare_gradients(&analytic, &numeric, FLOOR);
    assert_eq!(r.checked, model.num_parameters());
    assert!(r.max_rel_error < TOL, "rel error {:e} at {:?}", r.max_rel_error, r.worst);
}
