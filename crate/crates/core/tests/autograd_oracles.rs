use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rpp::autograd::Graph;
use rpp::data::pretrain_batch;
use rpp::gradcheck::{finite_diff_coords, relative_error};
use rpp::model::{attention, build_model, forward_pretrain, pretrain_grads, ModelConfig};
use rpp::{ParamSet, Tensor};

fn inputs(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[test]
fn composite_two_by_two_matches_hand_evaluation() {
    // loss = CE(softmax(x·W)), x = [[1,2],[0,-1]], W = [[0.5,-1],[2,0.25]], targets [1,0]
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap(), true);
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.param("w");
    let logits = g.matmul(x, w);
    let t = g.input("t");
    let loss = g.cross_entropy(logits, t, None);
    let ins = inputs(&[("x", Tensor::matrix(2, 2, vec![1.0, 2.0, 0.0, -1.0]).unwrap()), ("t", Tensor::vector(vec![1.0, 0.0]))]);
    let eval = g.evaluate(&ps, &ins).unwrap();

    // row 0 logits: [0.5 + 4, -1 + 0.5] = [4.5, -0.5]; row 1: [-2, -0.25]
    let nll0 = -(-0.5f64 - (4.5f64.exp() + (-0.5f64).exp()).ln());
    let nll1 = -(-2.0f64 - ((-2.0f64).exp() + (-0.25f64).exp()).ln());
    let want = (nll0 + nll1) / 2.0;
    assert!((eval.scalar(loss).unwrap() - want).abs() < 1e-14);

    // dL/dW = xᵀ (p − y) / 2
    let p0 = [4.5f64.exp(), (-0.5f64).exp()];
    let p1 = [(-2.0f64).exp(), (-0.25f64).exp()];
    let (s0, s1) = (p0[0] + p0[1], p1[0] + p1[1]);
    let d0 = [p0[0] / s0, p0[1] / s0 - 1.0];
    let d1 = [p1[0] / s1 - 1.0, p1[1] / s1];
    let xm = [[1.0, 2.0], [0.0, -1.0]];
    let grads = g.backprop(&ps, &eval, loss).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let want = (xm[0][i] * d0[j] + xm[1][i] * d1[j]) / 2.0;
            assert!((grads["w"].data()[i * 2 + j] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn three_layer_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand_t = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let mut ps = ParamSet::new();
    ps.insert("w1", rand_t(&[4, 5]), true);
    ps.insert("b1", rand_t(&[5]), false);
    ps.insert("w2", rand_t(&[5, 5]), true);
    ps.insert("w3", rand_t(&[5, 3]), true);
    ps.insert("g", rand_t(&[5]), false);
    ps.insert("beta", rand_t(&[5]), false);
    let x = rand_t(&[6, 4]);

    let mut g = Graph::new();
    let xi = g.input("x");
    let (w1, b1, w2, w3, gm, bt) = (g.param("w1"), g.param("b1"), g.param("w2"), g.param("w3"), g.param("g"), g.param("beta"));
    let h = g.matmul(xi, w1);
    let h = g.add_bias(h, b1);
    let h = g.gelu(h);
    let h2 = g.matmul(h, w2);
    let h2 = g.tanh(h2);
    let h2 = g.layer_norm(h2, gm, bt, 1e-5);
    let logits = g.matmul(h2, w3);
    let t = g.input("t");
    let loss = g.cross_entropy(logits, t, None);
    let ins = inputs(&[("x", x), ("t", Tensor::vector(vec![0.0, 1.0, 2.0, 2.0, 1.0, 0.0]))]);

    let eval = g.evaluate(&ps, &ins).unwrap();
    let grads = g.backprop(&ps, &eval, loss).unwrap();
    let coords: Vec<(String, usize)> =
        ps.iter().flat_map(|(n, p)| (0..p.value.len()).map(move |i| (n.to_string(), i))).collect();
    let fd = finite_diff_coords(|p| Ok(g.evaluate(p, &ins)?.scalar(loss).unwrap()), &ps, 1e-6, &coords).unwrap();
    for ((name, i), num) in coords.iter().zip(fd) {
        let err = relative_error(grads[name].data()[*i], num, 1e-6);
        assert!(err < 1e-4, "{name}[{i}] backprop {} fd {num}", grads[name].data()[*i]);
    }
}

#[test]
fn toy_transformer_gradient_spot_check() {
    let cfg = ModelConfig { layers: 1, hidden: 8, heads: 2, vocab: 16, seq_len: 8, ffn: 16, seed: 4 };
    let model = build_model(cfg).unwrap();
    let corpus = rpp::data::gen_pretrain_corpus(1, 200, &cfg).unwrap();
    let batch = pretrain_batch(&corpus, 3, 0.3, 9).unwrap();
    let (_, grads) = pretrain_grads(&model.params, &cfg, &batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let coords: Vec<(String, usize)> = (0..60)
        .map(|_| {
            let n = &names[rng.random_range(0..names.len())];
            (n.clone(), rng.random_range(0..model.params.tensor(n).unwrap().len()))
        })
        .collect();
    let fd = finite_diff_coords(|p| Ok(forward_pretrain(p, &cfg, &batch)?.loss), &model.params, 1e-5, &coords).unwrap();
    for ((name, i), num) in coords.iter().zip(fd) {
        let err = relative_error(grads[name].data()[*i], num, 1e-6);
        assert!(err < 1e-4, "{name}[{i}] backprop {} fd {num}", grads[name].data()[*i]);
    }
}

fn dense_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum()).collect()
        })
        .collect()
}

#[test]
fn attention_matches_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = |r: usize, c: usize| -> Vec<Vec<f64>> { (0..r).map(|_| (0..c).map(|_| rng.random_range(-2.0..2.0)).collect()).collect() };
    let (q, k, v) = (m(3, 8), m(3, 8), m(3, 8));
    let t = |x: &Vec<Vec<f64>>| Tensor::matrix(x.len(), x[0].len(), x.concat()).unwrap();
    let got = attention(&t(&q), &t(&k), &t(&v), 8).unwrap();
    let want = dense_attention(&q, &k, &v).concat();
    let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "max abs diff {diff}");
}

#[test]
fn prunable_count_closed_form() {
    let (l, h, f) = (2usize, 64usize, 256usize);
    let formula = l * (4 * h * h + h * f + f * h);
    assert_eq!(formula, 98_304);
    let model = build_model(ModelConfig { layers: l, hidden: h, ffn: f, ..Default::default() }).unwrap();
    assert_eq!(model.params.prunable_count(), formula);
    // every prunable tensor is a per-layer attention or feed-forward matrix
    let names: Vec<&str> = model.params.prunable().map(|(n, _)| n).collect();
    assert_eq!(names.len(), 12);
    assert!(names.iter().all(|n| n.starts_with("layer") && n.ends_with(".w")));
}
