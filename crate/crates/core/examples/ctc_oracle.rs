//! CTC on a hand-sized problem: forward-backward loss against exhaustive
//! path enumeration, its gradient, and best-path decoding.

use numcore::Tensor;
use unitrans::ctc::{best_path_decode, collapse, ctc_brute_force, ctc_loss, min_frames};
use unitrans::units::UnitSeq;

fn main() -> unitrans::Result<()> {
    // 5 frames over units {0, 1} plus blank (column 2)
    let probs = [
        [0.6, 0.1, 0.3],
        [0.5, 0.2, 0.3],
        [0.1, 0.2, 0.7],
        [0.2, 0.6, 0.2],
        [0.1, 0.7, 0.2],
    ];
    let lp = Tensor::new(vec![5, 3], probs.iter().flatten().map(|p: &f64| p.ln()).collect())?;
    for target in [vec![0, 1], vec![0, 0], vec![1, 0, 1], vec![0, 1, 0, 1, 0, 1]] {
        let t = UnitSeq(target.clone());
        let out = ctc_loss(&lp, &t)?;
        let exact = ctc_brute_force(&lp, &t)?;
        println!(
            "target {target:?}: needs {} frames, P = {:.6} (enumeration {exact:.6}), loss {:.4}",
            min_frames(&target),
            (-out.loss).exp(),
            out.loss
        );
    }
    let out = ctc_loss(&lp, &UnitSeq(vec![0, 1]))?;
    println!("d loss / d log p for target [0, 1]:");
    for row in out.grad.chunks(3) {
        println!("  {:>8.4} {:>8.4} {:>8.4}", row[0], row[1], row[2]);
    }
    println!("collapse [0 0 2 0 1 1 2] -> {:?}", collapse(&[0, 0, 2, 0, 1, 1, 2], 2));
    println!("best path -> {:?}", best_path_decode(&lp)?.tokens());
    Ok(())
}
