//! CTC loss against the brute-force path oracle, plus greedy and beam
//! decoding on a toy posteriorgram.
//!
//! Run: cargo run --release -p lrmoe --example ctc_decoding

use lrmoe::ctc::{ctc_loss, greedy_collapse, oracle, prefix_beam_search, CtcLabelSeq};
use lrmoe::tensor::{log_softmax, no_grad, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    // hand case: two uniform frames over {blank, 1}; paths for [1] are
    // blank-1, 1-blank, 1-1, so P = 3/4
    let lp = Tensor::from_vec(vec![2, 2], vec![0.5f32.ln(); 4]).unwrap();
    let labels = CtcLabelSeq::new(vec![1]).unwrap();
    let (nll, grad) = ctc_loss(&lp, &labels).unwrap();
    println!("uniform T=2: nll = {:.6} (ln 4/3 = {:.6})", nll.item(), (4.0f32 / 3.0).ln());
    println!("analytic dL/dlog_probs: {:?}", &grad.data()[..]);

    // random instance vs the exponential path oracle
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lp = oracle::random_log_probs(5, 3, &mut rng);
    let labels = CtcLabelSeq::new(vec![2, 1]).unwrap();
    let (nll, _) = ctc_loss(&lp, &labels).unwrap();
    let brute = -oracle::path_enumeration_prob(&lp, labels.labels()).ln();
    println!("random T=5 V=3: dp {:.8} vs enumeration {brute:.8}", nll.item());

    // decoding: a peaked posteriorgram decodes identically under greedy
    // collapse and beam search
    let picks = [1usize, 1, 0, 2, 2, 0, 1];
    let mut logits = vec![0.0f32; picks.len() * 3];
    for (t, &p) in picks.iter().enumerate() {
        logits[t * 3 + p] = 9.0;
    }
    let peaked = no_grad(|| log_softmax(&Tensor::from_vec(vec![picks.len(), 3], logits).unwrap()));
    let greedy = greedy_collapse(&picks);
    let beamed = prefix_beam_search(&peaked, 10).unwrap();
    println!("greedy: {:?}", greedy.labels());
    println!("beam10: {:?}", beamed.labels());
    assert_eq!(greedy, beamed);

    // on flat distributions the beam can disagree with greedy; wider beams
    // never score worse
    let flat = oracle::random_log_probs(6, 3, &mut rng);
    for beam in [1usize, 4, 16, 64] {
        let hyp = prefix_beam_search(&flat, beam).unwrap();
        let p = oracle::path_enumeration_prob(&flat, hyp.labels());
        println!("beam {beam:>2}: {:?} with P = {p:.6}", hyp.labels());
    }
}
