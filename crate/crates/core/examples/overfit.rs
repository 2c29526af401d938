//! Overfits the toy learned model on one phantom patch and prints the loss
//! every 50 steps.
//!
//! cargo run --release -p dernn-core --example overfit -- [steps] [lr] [seed]

use std::time::Instant;

use dernn::cassi::{Mask2D, SensingOperator};
use dernn::phantom::phantom;
use dernn::train::{init_params, train_overfit, TrainConfig};

fn main() -> dernn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().map_or(500, |s| s.parse().unwrap());
    let lr = args.get(1).map_or(2e-3, |s| s.parse().unwrap());
    let seed = args.get(2).map_or(0, |s| s.parse().unwrap());

    let (h, w, b) = (32, 32, 4);
    let truth = phantom(h, w, b, seed)?;
    let phi = SensingOperator::from_mask(&Mask2D::random_binary(h, w, seed)?, b, 2)?;
    let recon = dernn::train::toy_recon(b, 3);
    let params = init_params(&recon, seed);
    println!("{} parameters", params.scalar_count());
    let cfg = TrainConfig {
        lr,
        warmup_steps: 20,
        ..TrainConfig::new(recon, steps, seed)
    };
    let t0 = Instant::now();
    let (_, curve) = train_overfit(&truth, &phi, params, &cfg)?;
    for r in curve.iter().filter(|r| r.step % 50 == 0 || r.step + 1 == steps) {
        println!("{:4} lr {:.2e} loss {:.6}", r.step, r.lr, r.loss);
    }
    let (first, last) = (curve[0].loss, curve.last().unwrap().loss);
    println!("ratio {:.2} in {:.1?}", first / last, t0.elapsed());
    Ok(())
}
