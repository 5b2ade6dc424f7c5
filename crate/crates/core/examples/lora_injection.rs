//! Injects adapters into a dual encoder, checks that a fresh injection leaves
//! the outputs untouched, and reports the trainable share.

use fedsparse::encoder::{Classifier, DualEncoder, EncoderConfig, Site, Tower};
use fedsparse::lora::inject;
use fedsparse::nn::{Mode, ModuleExt};
use fedsparse::rng::SimRng;
use fedsparse_tensor::Tape;
use rand::{Rng, SeedableRng};

fn main() -> fedsparse::Result<()> {
    let cfg = EncoderConfig::default();
    let mut rng = SimRng::seed_from_u64(1);
    let mut base = DualEncoder::new(cfg.clone(), &mut rng)?;
    let images: Vec<f32> = (0..4 * cfg.pixels_per_image()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let prompts: Vec<Vec<usize>> = (0..10).map(|k| (0..cfg.max_tokens).map(|t| (k * 7 + t) % cfg.vocab_size).collect()).collect();

    let mut tape = Tape::new();
    let before = base.logits(&mut tape, &images, 4, &prompts, &mut Mode::Eval)?;
    let before = tape.value(before).to_vec();

    let mut model = inject(base, 4, 0.1, &[Site::Q, Site::V], &mut rng)?;
    let mut tape = Tape::new();
    let after = model.logits(&mut tape, &images, 4, &prompts, &mut Mode::Eval)?;
    let deviation = before.iter().zip(tape.value(after)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("max output change after injection: {deviation}");

    let p = model.trainable_proportion();
    println!("all adapters active: {} of {} parameters ({:.3}%)", p.trainable, p.total, 100.0 * p.value());
    model.set_all_active(false);
    for tower in Tower::BOTH {
        model.set_layer_active(tower, cfg.depth - 1, true)?;
    }
    let p = model.trainable_proportion();
    println!("top layer only:      {} of {} parameters ({:.3}%)", p.trainable, p.total, 100.0 * p.value());
    println!("frozen base weights: {}", model.base.num_params() - model.base.num_trainable());
    println!("first adapter tensors: {:?}", model.adapter_state(false)[..4].iter().map(|a| a.name.as_str()).collect::<Vec<_>>());
    Ok(())
}
