//! Synthetic class-structured images with prompt tokens, and Dirichlet
//! label-skew partitioning across clients.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, tags, SimRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Side of the coarse per-class grid that is upsampled into the signal.
    pub pattern_grid: usize,
    pub signal: f32,
    pub noise: f32,
    pub prompt_len: usize,
    pub vocab_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            per_class: 100,
            image_size: 16,
            channels: 3,
            pattern_grid: 4,
            signal: 1.0,
            noise: 1.0,
            prompt_len: 8,
            vocab_size: 64,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("data.num_classes", "at least 2 classes are required"));
        }
        if self.per_class < 2 * self.num_classes {
            return Err(Error::config(
                "data.per_class",
                format!("needs at least {} samples per class for {} classes", 2 * self.num_classes, self.num_classes),
            ));
        }
        for (field, v) in [("image_size", self.image_size), ("channels", self.channels), ("pattern_grid", self.pattern_grid)] {
            if v == 0 {
                return Err(Error::config(format!("data.{field}"), "must be at least 1"));
            }
        }
        if self.prompt_len == 0 || self.vocab_size == 0 {
            return Err(Error::config("data.prompt_len", "prompts need at least one token from a non-empty vocabulary"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.signal.is_finite()) {
            return Err(Error::config("data.noise", "signal and noise must be finite, noise non-negative"));
        }
        Ok(())
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub seed: u64,
    /// `N` images of `H×W×C`, row-major, back to back.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub class_prompts: Vec<Vec<usize>>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.spec.pixels_per_image();
        &self.images[i * n..(i + 1) * n]
    }

    /// Images and labels for `indices`, in order.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let mut images = Vec::with_capacity(indices.len() * self.spec.pixels_per_image());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }
}

/// Samples are class-major: indices `c·n .. (c+1)·n` belong to class `c`.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = rng_for(seed, tags::DATA);
    let (k, s, c, g) = (spec.num_classes, spec.image_size, spec.channels, spec.pattern_grid);
    let unit = Normal::new(0.0f32, 1.0).expect("unit normal");

    let patterns: Vec<Vec<f32>> = (0..k)
        .map(|_| {
            let coarse: Vec<f32> = (0..g * g * c).map(|_| unit.sample(&mut rng)).collect();
            upsample(&coarse, g, s, c)
        })
        .collect();
    let class_prompts = distinct_prompts(k, spec.prompt_len, spec.vocab_size, &mut rng)?;

    let mut images = Vec::with_capacity(k * spec.per_class * spec.pixels_per_image());
    let mut labels = Vec::with_capacity(k * spec.per_class);
    for (class, pattern) in patterns.iter().enumerate() {
        for _ in 0..spec.per_class {
            images.extend(pattern.iter().map(|&p| spec.signal * p + spec.noise * unit.sample(&mut rng)));
            labels.push(class);
        }
    }
    Ok(SyntheticDataset { spec: spec.clone(), seed, images, labels, class_prompts })
}

/// Bilinear upsampling of a `g×g×c` grid to `s×s×c`.
fn upsample(coarse: &[f32], g: usize, s: usize, c: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(s * s * c);
    let coord = |i: usize| -> (usize, usize, f32) {
        let x = ((i as f32 + 0.5) * g as f32 / s as f32 - 0.5).clamp(0.0, (g - 1) as f32);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(g - 1), x - lo as f32)
    };
    for y in 0..s {
        let (y0, y1, fy) = coord(y);
        for x in 0..s {
            let (x0, x1, fx) = coord(x);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| coarse[(yy * g + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

fn distinct_prompts(k: usize, len: usize, vocab: usize, rng: &mut SimRng) -> Result<Vec<Vec<usize>>> {
    let mut prompts: Vec<Vec<usize>> = Vec::with_capacity(k);
    for _ in 0..1000 * k {
        if prompts.len() == k {
            break;
        }
        let p: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        if !prompts.contains(&p) {
            prompts.push(p);
        }
    }
    if prompts.len() < k {
        return Err(Error::config("data.prompt_len", format!("cannot form {k} distinct prompts of {len} tokens over {vocab} ids")));
    }
    Ok(prompts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Smallest acceptable client partition; draws violating it are redone.
    pub min_samples: usize,
}

impl PartitionSpec {
    pub fn new(num_clients: usize, alpha: f64, seed: u64) -> Self {
        PartitionSpec { num_clients, alpha, seed, min_samples: 1 }
    }
}

pub const MAX_PARTITION_RETRIES: usize = 100;

/// Splits each class across clients with proportions drawn from a symmetric
/// Dirichlet(α). Whole draws are redone while some client falls below
/// `min_samples`, at most [`MAX_PARTITION_RETRIES`] times.
pub fn dirichlet_partition(labels: &[usize], num_classes: usize, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(Error::config("data.alpha", format!("must be positive, got {}", spec.alpha)));
    }
    if spec.num_clients == 0 {
        return Err(Error::config("federation.num_clients", "must be at least 1"));
    }
    if spec.min_samples * spec.num_clients > labels.len() {
        return Err(Error::config(
            "data.min_client_samples",
            format!("{} clients x {} samples exceeds the dataset size {}", spec.num_clients, spec.min_samples, labels.len()),
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Input(format!("label {l} at index {i} is not below {num_classes}")));
        }
        by_class[l].push(i);
    }
    let gamma = Gamma::new(spec.alpha, 1.0).map_err(|e| Error::config("data.alpha", e.to_string()))?;
    let mut rng = rng_for(spec.seed, tags::PARTITION);
    for _ in 0..=MAX_PARTITION_RETRIES {
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); spec.num_clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props = dirichlet(&gamma, spec.num_clients, &mut rng);
            let mut start = 0;
            let mut cum = 0.0;
            for (j, p) in props.iter().enumerate() {
                cum += p;
                let end = if j + 1 == spec.num_clients { members.len() } else { ((cum * members.len() as f64).round() as usize).min(members.len()) };
                let end = end.max(start);
                parts[j].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if parts.iter().all(|p| p.len() >= spec.min_samples.max(1)) {
            for p in &mut parts {
                p.sort_unstable();
            }
            return Ok(parts);
        }
    }
    Err(Error::config(
        "data.alpha",
        format!("no partition with every client holding at least {} samples after {MAX_PARTITION_RETRIES} retries", spec.min_samples.max(1)),
    ))
}

fn dirichlet(gamma: &Gamma<f64>, n: usize, rng: &mut SimRng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|d| d / total).collect();
        }
    }
}

/// Stratified split of one client's indices into `(train, val)`.
///
/// Each class contributes `round(frac·count)` samples to validation; if that
/// leaves validation empty, one sample of the largest class moves over.
pub fn split_train_val(indices: &[usize], labels: &[usize], frac: f64, rng: &mut SimRng) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &i in indices {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for members in by_class.values_mut() {
        members.shuffle(rng);
        let take = (frac * members.len() as f64).round() as usize;
        let take = take.min(members.len());
        val.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    if val.is_empty() && indices.len() >= 2 && frac > 0.0 {
        let largest = by_class.values().max_by_key(|m| m.len()).expect("non-empty client");
        let moved = largest[0];
        train.retain(|&i| i != moved);
        val.push(moved);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_of_constant_grid_is_constant() {
        let out = upsample(&[2.0; 4 * 4 * 3], 4, 16, 3);
        assert!(out.iter().all(|&v| (v - 2.0).abs() < 1e-6));
        assert_eq!(out.len(), 16 * 16 * 3);
    }

    #[test]
    fn split_is_stratified_and_complete() {
        let labels: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let idx: Vec<usize> = (0..50).collect();
        let mut rng = rng_for(0, 0);
        let (train, val) = split_train_val(&idx, &labels, 0.2, &mut rng);
        assert_eq!(train.len() + val.len(), 50);
        assert_eq!(val.iter().filter(|&&i| labels[i] == 0).count(), 5);
        let (t, v) = split_train_val(&[0, 1], &labels, 0.2, &mut rng);
        assert_eq!((t.len(), v.len()), (1, 1));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate(&SyntheticSpec { num_classes: 1, ..Default::default() }, 0).is_err());
        assert!(generate(&SyntheticSpec { per_class: 5, ..Default::default() }, 0).is_err());
        assert!(dirichlet_partition(&[0, 1], 2, &PartitionSpec::new(2, 0.0, 0)).is_err());
    }
}
