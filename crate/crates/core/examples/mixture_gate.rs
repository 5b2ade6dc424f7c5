//! Builds the two-expert mixture and shows how the gate weight moves the
//! logits between the experts.

use fedsparse::encoder::{Classifier, DualEncoder, EncoderConfig, Site};
use fedsparse::lora::inject;
use fedsparse::mofm::{mix_logits, MixtureModel};
use fedsparse::nn::{Mode, ModuleExt};
use fedsparse::rng::SimRng;
use fedsparse_tensor::Tape;
use rand::{Rng, SeedableRng};

fn main() -> fedsparse::Result<()> {
    let cfg = EncoderConfig::default();
    let mut rng = SimRng::seed_from_u64(3);
    let mut expert = inject(DualEncoder::new(cfg.clone(), &mut rng)?, 4, 0.1, &[Site::Q, Site::V], &mut rng)?;
    expert.set_all_active(false);
    let mut mixture = MixtureModel::new(expert, &mut rng)?;
    println!("gate adapter: {} trainable of {} gate parameters ({:.2}%)", mixture.gate.adapter.num_trainable(), mixture.gate.num_params(), 100.0 * mixture.gate.adapter_ratio());

    let images: Vec<f32> = (0..3 * cfg.pixels_per_image()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let prompts: Vec<Vec<usize>> = (0..4).map(|k| (0..cfg.max_tokens).map(|t| (3 * k + t) % cfg.vocab_size).collect()).collect();
    let mut tape = Tape::new();
    let (_, lambda) = mixture.forward(&mut tape, &images, 3, &prompts, &mut Mode::Eval)?;
    println!("fresh gate weights: {:?}", tape.value(lambda));

    let global = tape.constant(vec![1, 4], vec![2.0, 0.0, 1.0, -1.0])?;
    let local = tape.constant(vec![1, 4], vec![-1.0, 3.0, 1.0, 0.0])?;
    for l in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let lam = tape.constant(vec![1, 1], vec![l])?;
        let mixed = mix_logits(&mut tape, global, local, lam)?;
        println!("lambda {l:.2}: {:?}", tape.value(mixed));
    }
    let mut tape = Tape::new();
    let y = mixture.logits(&mut tape, &images, 3, &prompts, &mut Mode::Eval)?;
    println!("mixture logits for the first image: {:?}", &tape.value(y)[..4]);
    Ok(())
}
