//! Server-side reductions over named-array payloads.

use crate::error::{Error, Result};
use crate::nn::NamedArray;

/// Checks that every payload has the first one's names and shapes, in order.
pub fn check_structure(payloads: &[&[NamedArray]]) -> Result<()> {
    let Some(first) = payloads.first() else {
        return Err(Error::Contract("nothing to aggregate".into()));
    };
    for (i, p) in payloads.iter().enumerate().skip(1) {
        if p.len() != first.len() {
            return Err(Error::Structure(format!("payload {i} has {} arrays, expected {}", p.len(), first.len())));
        }
        for (a, b) in first.iter().zip(p.iter()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Structure(format!(
                    "payload {i}: `{}` {:?} does not match `{}` {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
    }
    Ok(())
}

/// Element-wise `Σ_j w_j·P_j`, accumulated in f64 in the given order.
pub fn weighted_sum(payloads: &[&[NamedArray]], weights: &[f64]) -> Result<Vec<NamedArray>> {
    check_structure(payloads)?;
    if weights.len() != payloads.len() {
        return Err(Error::Contract(format!("{} weights for {} payloads", weights.len(), payloads.len())));
    }
    let first = payloads[0];
    let mut out = Vec::with_capacity(first.len());
    for (idx, proto) in first.iter().enumerate() {
        let mut acc = vec![0f64; proto.numel()];
        for (p, &w) in payloads.iter().zip(weights) {
            for (a, &v) in acc.iter_mut().zip(&p[idx].data) {
                *a += w * v as f64;
            }
        }
        out.push(NamedArray { name: proto.name.clone(), shape: proto.shape.clone(), data: acc.into_iter().map(|v| v as f32).collect() });
    }
    Ok(out)
}

/// Unweighted mean.
pub fn uniform_mean(payloads: &[&[NamedArray]]) -> Result<Vec<NamedArray>> {
    let w = 1.0 / payloads.len().max(1) as f64;
    weighted_sum(payloads, &vec![w; payloads.len()])
}

/// Weights proportional to `values`; `None` when any value is non-positive or not finite.
pub fn proportional_weights(values: &[f64]) -> Option<Vec<f64>> {
    if values.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return None;
    }
    let total: f64 = values.iter().sum();
    Some(values.iter().map(|v| v / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(name: &str, data: &[f32]) -> Vec<NamedArray> {
        vec![NamedArray { name: name.into(), shape: vec![data.len()], data: data.to_vec() }]
    }

    #[test]
    fn mean_of_three() {
        let (a, b, c) = (arr("x", &[1.0]), arr("x", &[2.0]), arr("x", &[3.0]));
        assert_eq!(uniform_mean(&[&a, &b, &c]).unwrap()[0].data, vec![2.0]);
    }

    #[test]
    fn structure_mismatch_is_an_error() {
        let (a, b) = (arr("x", &[1.0]), arr("y", &[1.0]));
        assert!(matches!(uniform_mean(&[&a, &b]), Err(Error::Structure(_))));
        let c = arr("x", &[1.0, 2.0]);
        assert!(uniform_mean(&[&a, &c]).is_err());
    }

    #[test]
    fn weights_require_positive_values() {
        assert_eq!(proportional_weights(&[1.0, 3.0]).unwrap(), vec![0.25, 0.75]);
        assert!(proportional_weights(&[1.0, 0.0]).is_none());
        assert!(proportional_weights(&[f64::NAN]).is_none());
    }
}
