use convcap::tensor::{dropout_mask, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
        .unwrap()
        .requiring_grad()
}

/// Contracts `out` against fixed random weights so every output entry matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let w = random(&shape, seed ^ 0xabc);
    let w = g.constant(&shape, w.into_data()).unwrap();
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

/// Central-difference check of every input of `build`. Returns the worst
/// relative error.
fn check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &vs);
        let s = project(&mut g, out, 7);
        g.value(s)[0]
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = build(&mut g, &vs);
    let s = project(&mut g, out, 7);
    g.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vs[k]).unwrap().to_vec();
        for i in 0..t.numel() {
            let mut ts = inputs.to_vec();
            ts[k].data_mut()[i] += h;
            let up = eval(&ts);
            ts[k].data_mut()[i] -= 2.0 * h;
            let down = eval(&ts);
            let numeric = (up - down) / (2.0 * h);
            let e = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(e);
        }
    }
    worst
}

const TOL: f64 = 1e-5;

#[test]
fn matmul_grad() {
    let e = check(&[random(&[3, 4], 1), random(&[4, 2], 2)], |g, v| g.matmul(v[0], v[1]).unwrap());
    assert!(e < TOL, "{e}");
}

#[test]
fn elementwise_grads() {
    let ins = [random(&[3, 4], 3), random(&[3, 4], 4)];
    assert!(check(&ins, |g, v| g.add(v[0], v[1]).unwrap()) < TOL);
    assert!(check(&ins, |g, v| g.mul(v[0], v[1]).unwrap()) < TOL);
    assert!(check(&ins[..1], |g, v| g.scale(v[0], -2.5)) < TOL);
    assert!(check(&ins[..1], |g, v| g.relu(v[0])) < TOL);
    assert!(check(&ins[..1], |g, v| g.sigmoid(v[0])) < TOL);
    assert!(check(&ins[..1], |g, v| g.tanh(v[0])) < TOL);
}

#[test]
fn shape_op_grads() {
    let a = random(&[3, 4], 5);
    let b = random(&[3, 2], 6);
    let c = random(&[2, 4], 7);
    let row = random(&[4], 8);
    assert!(check(&[a.clone(), b], |g, v| g.concat(&[v[0], v[1]], 1).unwrap()) < TOL);
    assert!(check(&[a.clone(), c], |g, v| g.concat(&[v[0], v[1]], 0).unwrap()) < TOL);
    assert!(check(std::slice::from_ref(&a), |g, v| g.slice(v[0], 1, 1, 2).unwrap()) < TOL);
    assert!(check(std::slice::from_ref(&a), |g, v| g.slice(v[0], 0, 1, 2).unwrap()) < TOL);
    assert!(check(std::slice::from_ref(&row), |g, v| g.broadcast_rows(v[0], 3)) < TOL);
    assert!(check(&[a, row], |g, v| g.add_row(v[0], v[1]).unwrap()) < TOL);
}

#[test]
fn conv_glu_softmax_grads() {
    let x = random(&[5, 3], 9);
    let k = random(&[3, 3, 4], 10);
    let b = random(&[4], 11);
    assert!(check(&[x, k, b], |g, v| g.causal_conv1d(v[0], v[1], v[2]).unwrap()) < TOL);
    let y = random(&[4, 6], 12);
    assert!(check(std::slice::from_ref(&y), |g, v| g.glu(v[0]).unwrap()) < TOL);
    assert!(check(std::slice::from_ref(&y), |g, v| g.softmax(v[0], 1).unwrap()) < TOL);
    assert!(check(&[y], |g, v| g.softmax(v[0], 0).unwrap()) < TOL);
}

#[test]
fn embedding_weight_norm_dropout_grads() {
    let table = random(&[5, 3], 13);
    assert!(check(&[table], |g, v| g.embedding(v[0], &[4, 0, 4, 2]).unwrap()) < TOL);
    let wv = random(&[2, 3, 4], 14);
    let wg = random(&[4], 15);
    assert!(check(&[wv, wg], |g, v| g.weight_norm(v[0], v[1]).unwrap()) < TOL);
    let x = random(&[4, 5], 16);
    assert!(check(&[x], |g, v| g.dropout(v[0], 0.4, 99, true).unwrap()) < TOL);
}

#[test]
fn nll_grad() {
    let logits = random(&[3, 4], 17);
    let e = check(&[logits], |g, v| {
        let p = g.softmax(v[0], 1).unwrap();
        g.nll(p, &[1, 3, 0], 0.5).unwrap()
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn dropout_mean_is_preserved() {
    let n = 100_000;
    let p = 0.3;
    let mask = dropout_mask(n, p, 2024);
    let mean: f64 = mask.iter().sum::<f64>() / n as f64;
    // each entry has variance p/(1-p)
    let sd = (p / (1.0 - p) / n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * sd, "mean {mean}");
}

#[test]
fn dropout_is_identity_in_eval() {
    let mut g = Graph::new();
    let x = g.leaf(&random(&[3, 3], 1));
    assert_eq!(g.dropout(x, 0.5, 1, false).unwrap(), x);
    assert!(g.dropout(x, 1.0, 1, true).is_err());
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(&random(&[2, 2], 1));
    assert!(g.backward(x).is_err());
}

fn shape_and_seed() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..6, 1usize..6, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one((r, c, seed) in shape_and_seed(), scale in 0.1f64..50.0) {
        let mut g = Graph::new();
        let mut t = random(&[r, c], seed);
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
        let x = g.leaf(&t);
        let s = g.softmax(x, 1).unwrap();
        let v = g.value(s);
        for i in 0..r {
            let sum: f64 = v[i * c..(i + 1) * c].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(v[i * c..(i + 1) * c].iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn conv_output_ignores_future_rows(t in 2usize..7, k in 1usize..4, seed in any::<u64>(), at in 0usize..7) {
        let at = at % t;
        let x = random(&[t, 3], seed);
        let kern = random(&[k, 3, 2], seed ^ 1);
        let bias = random(&[2], seed ^ 2);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let (xv, kv, bv) = (g.leaf(x), g.leaf(&kern), g.leaf(&bias));
            let y = g.causal_conv1d(xv, kv, bv).unwrap();
            g.value(y).to_vec()
        };
        let base = run(&x);
        let mut moved = x.clone();
        for v in &mut moved.data_mut()[at * 3..(at + 1) * 3] {
            *v += 1.0;
        }
        let after = run(&moved);
        prop_assert_eq!(&base[..at * 2], &after[..at * 2]);
    }

    #[test]
    fn dropout_mask_replays(len in 1usize..200, p in 0.0f64..0.9, seed in any::<u64>()) {
        prop_assert_eq!(dropout_mask(len, p, seed), dropout_mask(len, p, seed));
    }

    #[test]
    fn replay_is_deterministic((r, c, seed) in shape_and_seed()) {
        let run = || {
            let mut g = Graph::new();
            let a = g.leaf(&random(&[r, c], seed));
            let b = g.leaf(&random(&[c, r], seed ^ 5));
            let m = g.matmul(a, b).unwrap();
            let t = g.tanh(m);
            let s = g.sum(t);
            g.backward(s).unwrap();
            (g.value(s).to_vec(), g.grad(a).unwrap().to_vec())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn gradients_accumulate_until_zeroed((r, c, seed) in shape_and_seed()) {
        let mut g = Graph::new();
        let a = g.leaf(&random(&[r, c], seed));
        let t = g.tanh(a);
        let s = g.sum(t);
        g.backward(s).unwrap();
        let once = g.grad(a).unwrap().to_vec();
        g.backward(s).unwrap();
        let twice = g.grad(a).unwrap().to_vec();
        for (x, y) in once.iter().zip(&twice) {
            prop_assert_eq!(2.0 * x, *y);
        }
        g.zero_grad();
        prop_assert!(g.grad(a).is_none_or(|d| d.iter().all(|&v| v == 0.0)));
    }
}
