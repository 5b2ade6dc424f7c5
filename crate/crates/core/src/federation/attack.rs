//! Reverse-update poisoning by a fixed subset of clients.

use rand::seq::SliceRandom;

use crate::error::Result;
use crate::nn::NamedArray;
use crate::rng::{rng_for, tags};

/// Negates a parameter delta for a malicious client; identity otherwise.
pub fn apply_backdoor(mut update: Vec<NamedArray>, malicious: bool) -> Vec<NamedArray> {
    if malicious {
        for a in &mut update {
            a.data.iter_mut().for_each(|v| *v = -*v);
        }
    }
    update
}

/// `local − reference`, array by array.
pub fn delta(local: &[NamedArray], reference: &[NamedArray]) -> Result<Vec<NamedArray>> {
    crate::aggregate::check_structure(&[local, reference])?;
    Ok(local
        .iter()
        .zip(reference)
        .map(|(l, r)| NamedArray {
            name: l.name.clone(),
            shape: l.shape.clone(),
            data: l.data.iter().zip(&r.data).map(|(a, b)| a - b).collect(),
        })
        .collect())
}

/// `reference + delta`.
pub fn offset(reference: &[NamedArray], delta: &[NamedArray]) -> Result<Vec<NamedArray>> {
    crate::aggregate::check_structure(&[reference, delta])?;
    Ok(reference
        .iter()
        .zip(delta)
        .map(|(r, d)| NamedArray {
            name: r.name.clone(),
            shape: r.shape.clone(),
            data: r.data.iter().zip(&d.data).map(|(a, b)| a + b).collect(),
        })
        .collect())
}

/// What a client transmits: its parameters, or for a malicious client the
/// broadcast moved by its negated delta.
pub fn client_upload(local: Vec<NamedArray>, broadcast: &[NamedArray], malicious: bool) -> Result<Vec<NamedArray>> {
    if !malicious {
        return Ok(local);
    }
    let d = apply_backdoor(delta(&local, broadcast)?, true);
    offset(broadcast, &d)
}

/// `floor(ratio·n)` clients chosen by a seeded shuffle; a pure function of its inputs.
pub fn choose_malicious(seed: u64, n: usize, ratio: f64) -> Vec<bool> {
    let count = ((ratio * n as f64) + 1e-9).floor() as usize;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng_for(seed, tags::ATTACKERS));
    let mut flags = vec![false; n];
    for &i in ids.iter().take(count.min(n)) {
        flags[i] = true;
    }
    flags
}
