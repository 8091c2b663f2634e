use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central-difference check of every input entry of a scalar function.
fn check<F>(inputs: Vec<Tensor>, f: F)
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    let eps = 1e-6;
    for (idx, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[idx])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for e in 0..t.len() {
            let eval = |delta: f64| {
                let g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let mut x = x.clone();
                        if i == idx {
                            x.data_mut()[e] += delta;
                        }
                        g.leaf(x, true)
                    })
                    .collect();
                let o = f(&g, &vars);
                let v = g.value(o).data()[0];
                v
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-7);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "input {idx} entry {e}: analytic {a} numeric {numeric}"
            );
        }
    }
}

/// Weighted sum with fixed random weights so every output entry matters.
fn weighted(g: &Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(x, w);
    g.sum(p)
}

#[test]
fn elementwise_and_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let r = rand_tensor(&mut rng, &[4]);
    check(vec![a, b, r], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let ar = g.add_row(m, v[2]);
        let mr = g.mul_row(ar, v[2]);
        let sc = g.scale(mr, 0.7);
        let n = g.add_n(&[sc, v[0], v[1]]);
        let rows = g.scale_rows(n, Rc::new(vec![1.0, -2.0, 0.5]));
        weighted(g, rows, 2)
    });
}

#[test]
fn matmul_linear_gelu_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[5, 4]);
    let w = rand_tensor(&mut rng, &[4, 6]);
    let b = rand_tensor(&mut rng, &[6]);
    let gm = rand_tensor(&mut rng, &[6]);
    let bt = rand_tensor(&mut rng, &[6]);
    check(vec![x, w, b, gm, bt], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]));
        let y = g.gelu(y);
        let y = g.layer_norm(y, Some(v[3]), Some(v[4]), 1e-5);
        weighted(g, y, 4)
    });
}

#[test]
fn softmax_and_reshaping_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[2, 3]);
    check(vec![a, b], |g, v| {
        let c = g.concat_rows(&[v[0], v[1]]);
        let sm = g.softmax_rows(c);
        let cc = g.concat_cols(&[sm, c]);
        let sl = g.slice_rows(cc, 1, 4);
        let sc = g.slice_cols(sl, 2, 3);
        let ga = g.gather_rows(sc, Rc::new(vec![0, 3, 3, 1]));
        let r = g.reshape(ga, &[3, 4]);
        let m = g.mean(r);
        let w = weighted(g, r, 6);
        g.add(m, w)
    });
}

#[test]
fn pairwise_distance_bias_and_rigid_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[3, 3]);
    let b = rand_tensor(&mut rng, &[4, 3]);
    let tau = rand_tensor(&mut rng, &[2]);
    check(vec![a, b, tau], |g, v| {
        let t = g.rigid_transform(
            v[0],
            [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            [0.5, 0.1, -0.2],
        );
        let d = g.pairwise_l1(t, v[1]);
        let bias = g.distance_bias(d, v[2], 1, 2);
        weighted(g, bias, 8)
    });
}

#[test]
fn attention_gradients_with_bias_and_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = rand_tensor(&mut rng, &[3, 4]);
    let k = rand_tensor(&mut rng, &[5, 4]);
    let v = rand_tensor(&mut rng, &[5, 6]);
    let bias = rand_tensor(&mut rng, &[2, 3, 5]);
    let mask = Rc::new(vec![true, false, true, true, false]);
    check(vec![q, k, v, bias], move |g, x| {
        let o = g.attention(
            x[0],
            x[1],
            x[2],
            2,
            Some(x[3]),
            Some(AttnMask::Keys(mask.clone())),
        );
        weighted(g, o, 10)
    });
}

#[test]
fn attention_matches_explicit_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (nq, nk, d) = (2, 3, 4);
    let q = rand_tensor(&mut rng, &[nq, d]);
    let k = rand_tensor(&mut rng, &[nk, d]);
    let v = rand_tensor(&mut rng, &[nk, d]);
    let g = Graph::new();
    let (vq, vk, vv) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let o = g.value(g.attention(vq, vk, vv, 1, None, None));
    for i in 0..nq {
        let scores: Vec<f64> = (0..nk)
            .map(|j| (0..d).map(|c| q.row(i)[c] * k.row(j)[c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for c in 0..d {
            let want: f64 = (0..nk)
                .map(|j| (scores[j] - m).exp() / z * v.row(j)[c])
                .sum();
            assert!((o.row(i)[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn fully_masked_query_yields_zero_row() {
    let g = Graph::new();
    let q = g.constant(Tensor::full(&[2, 2], 1.0));
    let k = g.constant(Tensor::full(&[2, 2], 1.0));
    let v = g.constant(Tensor::full(&[2, 2], 3.0));
    let mask = AttnMask::Full(Rc::new(vec![false, false, true, false]));
    let o = g.value(g.attention(q, k, v, 1, None, Some(mask)));
    assert_eq!(o.row(0), &[0.0, 0.0]);
    assert_eq!(o.row(1), &[3.0, 3.0]);
}

#[test]
fn parameters_share_one_leaf_per_graph() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[2], vec![1.0, 2.0]));
    let g = Graph::with_params(&store);
    let a = g.param(id);
    let b = g.param(id);
    assert_eq!(a, b);
    let s = g.mul(a, b);
    let out = g.sum(s);
    let grads = g.backward(out);
    assert_eq!(grads.param(id).unwrap().data(), &[2.0, 4.0]);
}
