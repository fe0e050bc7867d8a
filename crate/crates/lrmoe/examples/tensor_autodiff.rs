//! The autodiff core in miniature: build a two-layer function, backprop,
//! and confirm the analytic gradients against central finite differences.
//!
//! Run: cargo run --release -p lrmoe --example tensor_autodiff

use lrmoe::gradcheck;
use lrmoe::tensor::{add_bias, matmul, mean_all, relu, softmax, sum_all, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::uniform(vec![4, 6], 1.0, &mut rng);
    let w1 = Tensor::uniform(vec![6, 8], 0.4, &mut rng);
    let b1 = Tensor::zeros(vec![8]);
    let w2 = Tensor::uniform(vec![8, 3], 0.4, &mut rng);

    let forward = || {
        let h = relu(&add_bias(&matmul(&x, &w1).unwrap(), &b1).unwrap());
        mean_all(&softmax(&matmul(&h, &w2).unwrap()))
    };

    let loss = forward();
    println!("loss = {:.6}", loss.item());
    loss.backward().unwrap();
    let g = w1.grad().unwrap();
    println!("dL/dW1 first row: {:?}", &g[..8.min(g.len())]);

    for (name, param) in [("w1", &w1), ("w2", &w2), ("x", &x)] {
        let report = gradcheck::check_tensor(
            name,
            param,
            forward,
            gradcheck::DEFAULT_EPS,
            gradcheck::DEFAULT_REL_TOL,
        );
        println!("{report}");
        assert!(report.pass);
    }

    // reductions accumulate in f64: a million tiny values sum cleanly
    let tiny = Tensor::full(vec![1000, 1000], 1e-4);
    println!("sum of 1e6 * 1e-4 = {:.6}", sum_all(&tiny).item());
}
