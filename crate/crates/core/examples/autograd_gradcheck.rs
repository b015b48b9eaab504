//! Builds a two-layer graph by hand and checks reverse-mode gradients
//! against central finite differences.

use std::collections::BTreeMap;

use rpp::autograd::Graph;
use rpp::gradcheck::{finite_diff_gradient, relative_error};
use rpp::{ParamSet, Tensor};

fn main() -> rpp::Result<()> {
    let mut params = ParamSet::new();
    params.insert("w1", Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?, true);
    params.insert("w2", Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 * 0.91).cos()).collect())?, true);

    let mut g = Graph::new();
    let x = g.input("x");
    let (w1, w2) = (g.param("w1"), g.param("w2"));
    let h = g.matmul(x, w1);
    let h = g.gelu(h);
    let logits = g.matmul(h, w2);
    let t = g.input("t");
    let loss = g.cross_entropy(logits, t, None);

    let mut inputs = BTreeMap::new();
    inputs.insert("x".to_string(), Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75])?);
    inputs.insert("t".to_string(), Tensor::vector(vec![1.0, 0.0]));

    let eval = g.evaluate(&params, &inputs)?;
    println!("loss {:.6}", eval.scalar(loss).unwrap());
    let grads = g.backprop(&params, &eval, loss)?;
    let fd = finite_diff_gradient(|p| Ok(g.evaluate(p, &inputs)?.scalar(loss).unwrap()), &params, 1e-5)?;
    for name in ["w1", "w2"] {
        let worst = grads[name]
            .data()
            .iter()
            .zip(fd[name].data())
            .map(|(a, b)| relative_error(*a, *b, 1e-6))
            .fold(0.0, f64::max);
        println!("{name}: max relative error {worst:.2e}");
    }
    Ok(())
}
