//! Named-parameter modules and the small layers the encoders are built from.

use fedsparse_tensor::{BatchNormMode, Gradients, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Whether a named tensor is learned or is running state (batch-norm stats).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

/// Forward-pass mode. Training carries the generator used by dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SimRng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// A tree of named tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A detached, named copy of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Convenience operations available on every [`Module`].
pub trait ModuleExt: Module {
    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, _, _| out.push(n.to_string()));
        out
    }

    /// Count of learnable scalars (buffers excluded).
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, k| {
            if k == ParamKind::Weight {
                n += t.numel();
            }
        });
        n
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, k| {
            if k == ParamKind::Weight && t.requires_grad() {
                n += t.numel();
            }
        });
        n
    }

    fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t, k| {
            if k == ParamKind::Weight && t.requires_grad() {
                out.push(n.to_string());
            }
        });
        out
    }

    fn set_trainable(&mut self, on: bool) {
        self.visit_mut("", &mut |_, t, k| {
            if k == ParamKind::Weight {
                t.set_requires_grad(on);
            }
        });
    }

    /// Every tensor, weights and buffers, in visiting order.
    fn state(&self) -> Vec<NamedArray> {
        self.state_where(|_, _| true)
    }

    fn state_where(&self, mut keep: impl FnMut(&Tensor, ParamKind) -> bool) -> Vec<NamedArray> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t, k| {
            if keep(t, k) {
                out.push(NamedArray { name: n.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() });
            }
        });
        out
    }

    /// Overwrites the tensors named in `arrays`. Every name must exist with a
    /// matching shape; tensors not mentioned keep their values.
    fn load(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let mut pending: std::collections::BTreeMap<&str, &NamedArray> =
            arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        if pending.len() != arrays.len() {
            return Err(Error::Structure("duplicate parameter names".into()));
        }
        let mut failure = None;
        self.visit_mut("", &mut |n, t, _| {
            if let Some(a) = pending.remove(n) {
                if a.shape != t.shape() {
                    failure.get_or_insert(format!("`{n}`: expected shape {:?}, got {:?}", t.shape(), a.shape));
                } else {
                    t.data_mut().copy_from_slice(&a.data);
                }
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Structure(msg));
        }
        if let Some(name) = pending.keys().next() {
            return Err(Error::Structure(format!("unknown parameter `{name}`")));
        }
        Ok(())
    }

    /// Moves tape gradients onto the trainable tensors.
    fn absorb(&mut self, grads: &Gradients) -> Result<()> {
        let mut failure = None;
        self.visit_mut("", &mut |_, t, k| {
            if k == ParamKind::Weight && t.requires_grad() && failure.is_none() {
                if let Err(e) = grads.accumulate_into(t) {
                    failure = Some(e);
                }
            }
        });
        failure.map_or(Ok(()), |e| Err(e.into()))
    }

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, t, _| t.zero_grad());
    }

    /// Trainable tensors as `(name, tensor)` pairs for the optimizer.
    fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)>
    where
        Self: Sized,
    {
        let mut ptrs: Vec<(String, *mut Tensor)> = Vec::new();
        self.visit_mut("", &mut |n, t, k| {
            if k == ParamKind::Weight && t.requires_grad() {
                ptrs.push((n.to_string(), t as *mut Tensor));
            }
        });
        // SAFETY: visiting yields each tensor exactly once, so the pointers
        // are distinct, and they borrow from `self`, which stays mutably
        // borrowed for the lifetime of the returned references.
        ptrs.into_iter().map(|(n, p)| (n, unsafe { &mut *p })).collect()
    }

    /// FNV-1a over names, shapes and raw bits: equal hashes mean bitwise-equal weights.
    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        self.visit("", &mut |n, t, _| {
            eat(n.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        });
        h
    }
}

impl<M: Module + ?Sized> ModuleExt for M {}

pub(crate) const INIT_STD: f32 = 0.02;

/// `y = x·Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Tensor::randn(&[outputs, inputs], INIT_STD, rng),
            bias: bias.then(|| Tensor::zeros(&[outputs])),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, bias: bool) -> Self {
        Linear { weight: Tensor::zeros(&[outputs, inputs]), bias: bias.then(|| Tensor::zeros(&[outputs])) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.leaf(b));
        Ok(tape.linear(x, w, b)?)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Weight);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Weight);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm { gamma: Tensor::ones(&[dim]), beta: Tensor::zeros(&[dim]) }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.leaf(&self.gamma);
        let b = tape.leaf(&self.beta);
        Ok(tape.layer_norm(x, g, b)?)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Weight);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, ParamKind::Weight);
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Weight);
    }
}

/// Batch norm over the rows of a `[B, D]` input, with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
}

impl BatchNorm1d {
    pub fn new(dim: usize) -> Self {
        BatchNorm1d {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::ones(&[dim]),
            momentum: 0.1,
        }
    }

    /// Training mode normalizes with batch statistics and folds them into
    /// the running estimates; eval mode uses the running estimates.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        let g = tape.leaf(&self.gamma);
        let b = tape.leaf(&self.beta);
        if !train {
            return self.forward_eval(tape, x);
        }
        let (y, stats) = tape.batch_norm(x, g, b, BatchNormMode::Train)?;
        let stats = stats.expect("training mode yields batch statistics");
        let m = self.momentum;
        for (r, s) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s;
        }
        Ok(y)
    }

    pub fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.leaf(&self.gamma);
        let b = tape.leaf(&self.beta);
        let mode = BatchNormMode::Eval { running_mean: self.running_mean.data(), running_var: self.running_var.data() };
        Ok(tape.batch_norm(x, g, b, mode)?.0)
    }
}

impl Module for BatchNorm1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Weight);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Weight);
        f(&join(prefix, "running_mean"), &self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &self.running_var, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, ParamKind::Weight);
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Weight);
        f(&join(prefix, "running_mean"), &mut self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &mut self.running_var, ParamKind::Buffer);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_and_counts() {
        let mut rng = SimRng::seed_from_u64(0);
        let lin = Linear::new(3, 2, true, &mut rng);
        assert_eq!(lin.names(), vec!["weight", "bias"]);
        assert_eq!(lin.num_params(), 8);
        let bn = BatchNorm1d::new(4);
        assert_eq!(bn.num_params(), 8);
        assert_eq!(bn.state().len(), 4);
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let mut rng = SimRng::seed_from_u64(0);
        let mut lin = Linear::new(2, 2, false, &mut rng);
        let good = NamedArray { name: "weight".into(), shape: vec![2, 2], data: vec![1.0, 2.0, 3.0, 4.0] };
        lin.load(std::slice::from_ref(&good)).unwrap();
        assert_eq!(lin.weight.data(), &[1.0, 2.0, 3.0, 4.0]);
        let bad_shape = NamedArray { shape: vec![4], ..good.clone() };
        assert!(lin.load(&[bad_shape]).is_err());
        let unknown = NamedArray { name: "bias".into(), ..good };
        assert!(lin.load(&[unknown]).is_err());
    }

    #[test]
    fn trainable_mut_follows_flags() {
        let mut rng = SimRng::seed_from_u64(0);
        let mut lin = Linear::new(2, 2, true, &mut rng);
        assert!(lin.trainable_mut().is_empty());
        lin.set_trainable(true);
        let names: Vec<String> = lin.trainable_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["weight", "bias"]);
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut bn = BatchNorm1d::new(1);
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        bn.forward(&mut tape, x, true).unwrap();
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-6);
        assert!((bn.running_var.data()[0] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn fingerprint_sees_single_bit_changes() {
        let mut rng = SimRng::seed_from_u64(0);
        let mut lin = Linear::new(2, 2, true, &mut rng);
        let before = lin.fingerprint();
        let v = lin.weight.data()[0];
        lin.weight.data_mut()[0] = f32::from_bits(v.to_bits() ^ 1);
        assert_ne!(before, lin.fingerprint());
    }
}
