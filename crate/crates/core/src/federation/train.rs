//! Local optimization and evaluation loops.

use fedsparse_tensor::{Adam, Tape};
use rand::seq::SliceRandom;

use crate::data::SyntheticDataset;
use crate::encoder::Classifier;
use crate::error::{Error, Result};
use crate::mofm::MixtureModel;
use crate::nn::{Mode, ModuleExt};
use crate::rng::SimRng;

/// Cuts `order` into batches of `size`, folding a trailing singleton into
/// the previous batch so batch norm always sees two or more rows.
pub fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

/// Sample-weighted mean loss over `epochs` shuffled passes.
fn run_epochs(
    indices: &[usize],
    epochs: usize,
    batch: usize,
    rng: &mut SimRng,
    mut step: impl FnMut(&[usize], &mut SimRng) -> Result<f32>,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Input("client has no training samples".into()));
    }
    let (mut total, mut seen) = (0f64, 0usize);
    let mut order = indices.to_vec();
    for _ in 0..epochs {
        order.shuffle(rng);
        for b in batches(&order, batch) {
            let loss = step(b, rng)?;
            if !loss.is_finite() {
                return Err(Error::Contract(format!("training loss diverged ({loss})")));
            }
            total += loss as f64 * b.len() as f64;
            seen += b.len();
        }
    }
    Ok(total / seen as f64)
}

pub fn train_classifier<M: Classifier>(
    model: &mut M,
    opt: &mut Adam,
    rng: &mut SimRng,
    data: &SyntheticDataset,
    indices: &[usize],
    epochs: usize,
    batch: usize,
) -> Result<f64> {
    run_epochs(indices, epochs, batch, rng, |b, rng| {
        let (images, labels) = data.gather(b);
        let mut tape = Tape::new();
        let logits = model.logits(&mut tape, &images, b.len(), &data.class_prompts, &mut Mode::Train(rng))?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss)?;
        model.absorb(&grads)?;
        opt.step(model.trainable_mut())?;
        Ok(value)
    })
}

/// Cached outputs of the frozen global expert and gate backbone for every sample.
#[derive(Clone, Debug)]
pub struct ExpertCache {
    pub classes: usize,
    pub dim: usize,
    pub logits: Vec<f32>,
    pub features: Vec<f32>,
}

impl ExpertCache {
    pub fn build(model: &MixtureModel, data: &SyntheticDataset) -> Result<Self> {
        let mut global = model.global.clone();
        let classes = data.num_classes();
        let dim = model.gate.adapter.inputs();
        let (mut logits, mut features) = (Vec::new(), Vec::new());
        let all: Vec<usize> = (0..data.len()).collect();
        for chunk in all.chunks(128) {
            let (images, _) = data.gather(chunk);
            let mut tape = Tape::new();
            let l = global.logits(&mut tape, &images, chunk.len(), &data.class_prompts, &mut Mode::Eval)?;
            let f = model.gate.features(&mut tape, &images, chunk.len())?;
            logits.extend_from_slice(tape.value(l));
            features.extend_from_slice(tape.value(f));
        }
        Ok(ExpertCache { classes, dim, logits, features })
    }

    fn rows(&self, indices: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let mut l = Vec::with_capacity(indices.len() * self.classes);
        let mut f = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            l.extend_from_slice(&self.logits[i * self.classes..(i + 1) * self.classes]);
            f.extend_from_slice(&self.features[i * self.dim..(i + 1) * self.dim]);
        }
        (l, f)
    }
}

fn mixture_forward(
    model: &mut MixtureModel,
    tape: &mut Tape,
    data: &SyntheticDataset,
    cache: &ExpertCache,
    b: &[usize],
    mode: &mut Mode,
) -> Result<(fedsparse_tensor::Var, fedsparse_tensor::Var, Vec<usize>)> {
    let (images, labels) = data.gather(b);
    let (gl, gf) = cache.rows(b);
    let gl = tape.constant(vec![b.len(), cache.classes], gl)?;
    let gf = tape.constant(vec![b.len(), cache.dim], gf)?;
    let (logits, lambda) = model.logits_from_cached(tape, &images, b.len(), &data.class_prompts, gl, gf, mode)?;
    Ok((logits, lambda, labels))
}

#[allow(clippy::too_many_arguments)]
pub fn train_mixture(
    model: &mut MixtureModel,
    opt: &mut Adam,
    rng: &mut SimRng,
    data: &SyntheticDataset,
    cache: &ExpertCache,
    indices: &[usize],
    epochs: usize,
    batch: usize,
) -> Result<f64> {
    run_epochs(indices, epochs, batch, rng, |b, rng| {
        let mut tape = Tape::new();
        let (logits, _, labels) = mixture_forward(model, &mut tape, data, cache, b, &mut Mode::Train(rng))?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss)?;
        model.absorb(&grads)?;
        opt.step(model.trainable_mut())?;
        Ok(value)
    })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(values: &[f32], classes: usize, labels: &[usize]) -> usize {
    values.chunks(classes).zip(labels).filter(|(row, &y)| argmax(row) == y).count()
}

pub fn evaluate<M: Classifier>(model: &mut M, data: &SyntheticDataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in indices.chunks(128) {
        let (images, labels) = data.gather(chunk);
        let mut tape = Tape::new();
        let logits = model.logits(&mut tape, &images, chunk.len(), &data.class_prompts, &mut Mode::Eval)?;
        correct += count_correct(tape.value(logits), data.num_classes(), &labels);
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Accuracy and mean λ of the mixture on `indices`.
pub fn evaluate_mixture(model: &mut MixtureModel, data: &SyntheticDataset, cache: &ExpertCache, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Ok((0.0, 0.5));
    }
    let (mut correct, mut lambda_sum) = (0, 0f64);
    for chunk in indices.chunks(128) {
        let mut tape = Tape::new();
        let (logits, lambda, labels) = mixture_forward(model, &mut tape, data, cache, chunk, &mut Mode::Eval)?;
        correct += count_correct(tape.value(logits), data.num_classes(), &labels);
        lambda_sum += tape.value(lambda).iter().map(|&v| v as f64).sum::<f64>();
    }
    Ok((correct as f64 / indices.len() as f64, lambda_sum / indices.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_never_end_in_a_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let sizes: Vec<usize> = batches(&order, 4).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 5]);
        let sizes: Vec<usize> = batches(&order[..8], 4).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4]);
        assert_eq!(batches(&order[..1], 4).len(), 1);
    }
}
