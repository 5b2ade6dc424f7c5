//! Fits a two-layer network to XOR with the tape and AdamW.

use fedsparse_tensor::{Adam, AdamConfig, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0])?;
    let labels = [0, 1, 1, 0];
    let mut w1 = Tensor::randn(&[8, 2], 1.0, &mut rng).with_requires_grad(true);
    let mut b1 = Tensor::zeros(&[8]).with_requires_grad(true);
    let mut w2 = Tensor::randn(&[2, 8], 1.0, &mut rng).with_requires_grad(true);
    let mut opt = Adam::new(AdamConfig { learning_rate: 0.05, ..Default::default() });

    for step in 0..=300 {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let (w1v, b1v, w2v) = (tape.leaf(&w1), tape.leaf(&b1), tape.leaf(&w2));
        let h = tape.linear(xv, w1v, Some(b1v))?;
        let h = tape.gelu(h);
        let logits = tape.linear(h, w2v, None)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        if step % 50 == 0 {
            let preds: Vec<usize> = tape.value(logits).chunks(2).map(|r| usize::from(r[1] > r[0])).collect();
            println!("step {step:>3}  loss {:.4}  predictions {preds:?}", tape.value(loss)[0]);
        }
        let grads = tape.backward(loss)?;
        for t in [&mut w1, &mut b1, &mut w2] {
            t.zero_grad();
            grads.accumulate_into(t)?;
        }
        opt.step([("w1", &mut w1), ("b1", &mut b1), ("w2", &mut w2)])?;
    }
    Ok(())
}
