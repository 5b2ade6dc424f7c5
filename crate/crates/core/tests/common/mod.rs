#![allow(dead_code)]

use fedsparse::config::{ExperimentConfig, Method};
use fedsparse::encoder::EncoderConfig;
use fedsparse::rng::SimRng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// One-block towers small enough for finite differences.
pub fn micro_encoder() -> EncoderConfig {
    EncoderConfig {
        depth: 1,
        width: 8,
        heads: 2,
        mlp_ratio: 2,
        feature_dim: 4,
        image_size: 4,
        channels: 1,
        patch_size: 2,
        vocab_size: 8,
        max_tokens: 3,
    }
}

pub fn small_encoder() -> EncoderConfig {
    EncoderConfig { depth: 3, width: 16, heads: 2, feature_dim: 8, image_size: 8, patch_size: 4, vocab_size: 16, max_tokens: 4, ..Default::default() }
}

/// A run that finishes in well under a second.
pub fn quick_config(method: Method, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        model: EncoderConfig { depth: 2, width: 16, heads: 2, feature_dim: 8, image_size: 8, patch_size: 4, vocab_size: 16, max_tokens: 4, ..Default::default() },
        ..Default::default()
    };
    c.federation.method = method;
    c.federation.num_clients = 4;
    c.federation.rounds_stage1 = 2;
    c.federation.rounds_stage2 = 3;
    c.federation.learning_rate = 1e-2;
    c.data.num_classes = 4;
    c.data.per_class = 20;
    c.data.alpha = 0.5;
    c.data.seed = seed;
    c.data.min_client_samples = 4;
    c
}

/// The strongly non-IID desk setting used for directional comparisons.
pub fn desk_config(method: Method, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.federation.method = method;
    c.federation.rounds_stage1 = 8;
    c.federation.rounds_stage2 = 8;
    c.federation.learning_rate = 1e-2;
    c.data.alpha = 0.1;
    c.data.seed = seed;
    c
}

pub fn images(n: usize, cfg: &EncoderConfig, seed: u64) -> Vec<f32> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    (0..n * cfg.pixels_per_image()).map(|_| StandardNormal.sample(&mut r)).collect()
}

pub fn prompts(k: usize, cfg: &EncoderConfig, seed: u64) -> Vec<Vec<usize>> {
    use rand::Rng;
    let mut r = rng(seed);
    (0..k).map(|_| (0..cfg.max_tokens).map(|_| r.random_range(0..cfg.vocab_size)).collect()).collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Feeds `stream` to a fresh controller for a `depth`-layer encoder and checks
/// the schedule laws. Returns the activated layers.
pub fn check_sal_stream(q: usize, threshold: f64, depth: usize, stream: &[f64]) -> Result<Vec<usize>, String> {
    use fedsparse::sal::SalState;
    let mut sal = SalState::new(q, threshold, depth).map_err(|e| e.to_string())?;
    let mut history: Vec<f64> = Vec::new();
    let mut layers: Vec<usize> = Vec::new();
    for (i, &acc) in stream.iter().enumerate() {
        // Hand-rolled mean of the last q accuracies before this one.
        let expected = (history.len() >= q).then(|| {
            let window = &history[history.len() - q..];
            acc - window.iter().sum::<f64>() / q as f64
        });
        let exhausted_before = sal.is_exhausted();
        let event = sal.observe(acc);
        history.push(acc);
        match (event, expected) {
            (Some(_), None) => return Err(format!("activation at step {i} before the queue filled")),
            (Some(ev), Some(d)) => {
                if (ev.delta - d).abs() > 1e-9 {
                    return Err(format!("step {i}: factor {} vs oracle {d}", ev.delta));
                }
                if d >= threshold {
                    return Err(format!("step {i}: activation with factor {d} ≥ {threshold}"));
                }
                if exhausted_before {
                    return Err(format!("step {i}: activation after exhaustion"));
                }
                if layers.last().is_some_and(|&l| ev.layer >= l) || ev.layer + 1 >= depth {
                    return Err(format!("step {i}: layer {} breaks top-down order after {layers:?}", ev.layer));
                }
                layers.push(ev.layer);
            }
            (None, Some(d)) => {
                if d < threshold && !exhausted_before {
                    return Err(format!("step {i}: plateau ({d} < {threshold}) without activation"));
                }
            }
            (None, None) => {}
        }
    }
    Ok(layers)
}

/// Largest total-variation distance between a client's class distribution and uniform.
pub fn max_tv_to_uniform(parts: &[Vec<usize>], labels: &[usize], k: usize) -> f64 {
    parts
        .iter()
        .filter(|p| !p.is_empty())
        .map(|p| {
            let mut counts = vec![0usize; k];
            p.iter().for_each(|&i| counts[labels[i]] += 1);
            counts.iter().map(|&c| (c as f64 / p.len() as f64 - 1.0 / k as f64).abs()).sum::<f64>() / 2.0
        })
        .fold(0.0, f64::max)
}

/// Mean over clients of the share held by each client's most common class.
pub fn mean_top_share(parts: &[Vec<usize>], labels: &[usize], k: usize) -> f64 {
    let shares: Vec<f64> = parts.iter().filter(|p| !p.is_empty()).map(|p| top_share(p, labels, k)).collect();
    shares.iter().sum::<f64>() / shares.len() as f64
}

pub fn top_share(part: &[usize], labels: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    part.iter().for_each(|&i| counts[labels[i]] += 1);
    *counts.iter().max().unwrap() as f64 / part.len() as f64
}

pub fn balanced_labels(k: usize, per_class: usize) -> Vec<usize> {
    (0..k).flat_map(|c| std::iter::repeat_n(c, per_class)).collect()
}

/// Replays the next shared round's local training on copies of every client
/// and returns each client's trained parameters, in client order.
pub fn replay_local_training(fed: &fedsparse::federation::Federation) -> Vec<Vec<fedsparse::nn::NamedArray>> {
    use fedsparse::federation::train_classifier;
    let f = &fed.config.federation;
    fed.clients
        .iter()
        .map(|c| {
            let mut c = c.clone();
            let mut local = fed.shared.clone();
            train_classifier(&mut local, &mut c.optimizer, &mut c.rng, &fed.data, &c.train, f.local_epochs, f.batch_size).unwrap();
            local.trainable_state()
        })
        .collect()
}

/// Element-wise mean in f64, computed without the library's reduction.
pub fn mean_f64(arrays: &[Vec<fedsparse::nn::NamedArray>]) -> Vec<Vec<f64>> {
    let n = arrays.len() as f64;
    (0..arrays[0].len())
        .map(|p| {
            (0..arrays[0][p].data.len())
                .map(|i| arrays.iter().map(|a| a[p].data[i] as f64).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

/// Parameter count of a dual encoder, from its geometry alone.
pub fn base_param_oracle(c: &fedsparse::encoder::EncoderConfig) -> u64 {
    let (w, hid) = (c.width as u64, (c.width * c.mlp_ratio) as u64);
    let block = 2 * w + 4 * (w * w + w) + 2 * w + (w * hid + hid) + (hid * w + w);
    let trunk = c.depth as u64 * block + 2 * w + w * c.feature_dim as u64;
    let patch_dim = (c.patch_size * c.patch_size * c.channels) as u64;
    let patches = ((c.image_size / c.patch_size) * (c.image_size / c.patch_size)) as u64;
    let visual = trunk + patch_dim * w + w + patches * w;
    let text = trunk + c.vocab_size as u64 * w + c.max_tokens as u64 * w;
    visual + text + 1
}
