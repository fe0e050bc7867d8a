//! Frame-wise language routing in isolation: densify a spiky greedy LID
//! decode into full-coverage routes, dispatch frames to per-language
//! experts, and show that the arithmetic cost does not grow with the
//! number of experts.
//!
//! Run: cargo run --release -p lrmoe --example routing_alignment

use lrmoe::encoder::FfnParams;
use lrmoe::routing::{balance_loss, densify_alignment, mle_dispatch, BalanceStats};
use lrmoe::tensor::{mac_count, reset_mac_counter, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    // a CTC-style greedy LID decode is mostly blank
    let greedy = [0usize, 2, 0, 0, 2, 0, 1, 0, 0, 1, 1, 0];
    let align = densify_alignment(&greedy);
    println!("greedy : {greedy:?}");
    println!("routes : {:?}", align.routes);
    println!("degenerate: {}", align.degenerate);

    let all_blank = densify_alignment(&[0, 0, 0, 0]);
    println!("all-blank fallback: {:?} (flagged: {})", all_blank.routes, all_blank.degenerate);

    // dispatch: one expert FFN evaluated per frame, whatever K is
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames = 12usize;
    let d = 16usize;
    let x = Tensor::uniform(vec![frames, d], 1.0, &mut rng);
    for k in [2usize, 4, 8] {
        let experts: Vec<FfnParams> = (0..k).map(|_| FfnParams::init(d, 32, &mut rng)).collect();
        let routes: Vec<usize> = (0..frames).map(|t| t % k + 1).collect();
        reset_mac_counter();
        let _ = mle_dispatch(&x, &routes, &experts).unwrap();
        println!("K={k}: dispatch cost {} MACs", mac_count());
    }

    // the load-balance regularizer of the unsupervised baseline
    let uniform = BalanceStats {
        dispatch_fraction: vec![0.25; 4],
        mean_gate_prob: vec![0.25; 4],
    };
    let collapsed = BalanceStats {
        dispatch_fraction: vec![1.0, 0.0, 0.0, 0.0],
        mean_gate_prob: vec![1.0, 0.0, 0.0, 0.0],
    };
    println!(
        "balance loss: uniform {} vs collapsed {}",
        balance_loss(&uniform),
        balance_loss(&collapsed)
    );
}
