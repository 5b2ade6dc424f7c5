//! Low-rank adapters on the attention projections of every block.

use std::collections::BTreeMap;

use fedsparse_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::encoder::{Classifier, DualEncoder, ProjectionAdapter, Site, SiteKey, Tower};
use crate::error::{Error, Result};
use crate::nn::{join, Mode, Module, ModuleExt, NamedArray, ParamKind, INIT_STD};

/// `ΔW = A·B` for one frozen `[E, F]` matrix, with `A: [E, H]` and `B: [H, F]`.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
    pub dropout_p: f32,
    pub layer_index: usize,
    active: bool,
}

impl LoraPair {
    /// Gaussian `A`, zero `B`, active.
    pub fn new(e: usize, f: usize, rank: usize, dropout_p: f32, layer_index: usize, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 || rank > e.min(f) {
            return Err(Error::Contract(format!("rank {rank} must lie in 1..={} for a {e}x{f} matrix", e.min(f))));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Contract(format!("dropout probability {dropout_p} outside [0, 1)")));
        }
        let mut pair = LoraPair {
            a: Tensor::randn(&[e, rank], INIT_STD, rng),
            b: Tensor::zeros(&[rank, f]),
            dropout_p,
            layer_index,
            active: false,
        };
        pair.set_active(true);
        Ok(pair)
    }

    pub fn rank(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn set_active(&mut self, on: bool) {
        self.active = on;
        self.a.set_requires_grad(on);
        self.b.set_requires_grad(on);
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// The low-rank path `A·(B·drop(x))` on row inputs `[.., F]`.
    pub fn delta(&self, tape: &mut Tape, x: Var, mode: &mut Mode) -> Result<Var> {
        let x = match mode {
            Mode::Train(rng) if self.dropout_p > 0.0 => tape.dropout(x, self.dropout_p, true, &mut **rng)?,
            _ => x,
        };
        let b = tape.leaf(&self.b);
        let a = tape.leaf(&self.a);
        let h = tape.linear(x, b, None)?;
        Ok(tape.linear(h, a, None)?)
    }
}

/// `y = W0·x + A·(B·x)` for an active pair and `W0·x` otherwise, on rows of `x`.
pub fn lora_forward(tape: &mut Tape, pair: &LoraPair, w0: Var, x: Var, mode: &mut Mode) -> Result<Var> {
    let base = tape.linear(x, w0, None)?;
    if !pair.is_active() {
        return Ok(base);
    }
    let delta = pair.delta(tape, x, mode)?;
    Ok(tape.add(base, delta)?)
}

/// Exact ratio of parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Proportion {
    pub trainable: u64,
    pub total: u64,
}

impl Proportion {
    pub fn value(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }
}

/// A frozen dual encoder plus one adapter per `(tower, layer, site)`.
#[derive(Clone, Debug)]
pub struct LoraModel {
    pub base: DualEncoder,
    pairs: BTreeMap<SiteKey, LoraPair>,
}

/// Wraps `base`, freezing it and attaching an active pair at each site of every block.
pub fn inject(mut base: DualEncoder, rank: usize, dropout_p: f32, sites: &[Site], rng: &mut impl Rng) -> Result<LoraModel> {
    if sites.is_empty() {
        return Err(Error::Contract("at least one adapter site is required".into()));
    }
    base.set_trainable(false);
    let mut pairs = BTreeMap::new();
    for tower in Tower::BOTH {
        for layer in 0..base.tower(tower).depth() {
            for &site in sites {
                let w = &base.tower(tower).blocks[layer].attn.projection(site).weight;
                let (e, f) = (w.shape()[0], w.shape()[1]);
                pairs.insert(SiteKey { tower, layer, site }, LoraPair::new(e, f, rank, dropout_p, layer, rng)?);
            }
        }
    }
    Ok(LoraModel { base, pairs })
}

impl LoraModel {
    pub fn pairs(&self) -> &BTreeMap<SiteKey, LoraPair> {
        &self.pairs
    }

    pub fn pair(&self, key: &SiteKey) -> Option<&LoraPair> {
        self.pairs.get(key)
    }

    pub fn pair_mut(&mut self, key: &SiteKey) -> Option<&mut LoraPair> {
        self.pairs.get_mut(key)
    }

    pub fn depth(&self, tower: Tower) -> usize {
        self.base.tower(tower).depth()
    }

    pub fn set_layer_active(&mut self, tower: Tower, layer: usize, active: bool) -> Result<()> {
        let depth = self.depth(tower);
        if layer >= depth {
            return Err(Error::UnknownLayer { tower: tower.to_string(), layer, depth });
        }
        for (_, pair) in self.pairs.iter_mut().filter(|(k, _)| k.tower == tower && k.layer == layer) {
            pair.set_active(active);
        }
        Ok(())
    }

    pub fn set_all_active(&mut self, active: bool) {
        self.pairs.values_mut().for_each(|p| p.set_active(active));
    }

    /// Layers of `tower` whose pairs are active, ascending.
    pub fn active_layers(&self, tower: Tower) -> Vec<usize> {
        let mut layers: Vec<usize> =
            self.pairs.iter().filter(|(k, p)| k.tower == tower && p.is_active()).map(|(k, _)| k.layer).collect();
        layers.dedup();
        layers
    }

    pub fn lora_params(&self) -> usize {
        self.pairs.values().map(LoraPair::num_params).sum()
    }

    /// Active adapter parameters over all parameters, base included.
    pub fn trainable_proportion(&self) -> Proportion {
        let trainable: usize = self.pairs.values().filter(|p| p.is_active()).map(LoraPair::num_params).sum();
        Proportion { trainable: trainable as u64, total: self.num_params() as u64 }
    }

    /// Adapter tensors only; `active_only` limits them to trainable pairs.
    pub fn adapter_state(&self, active_only: bool) -> Vec<NamedArray> {
        let mut out = Vec::new();
        visit_pairs(&self.pairs, "", &mut |name, t, active| {
            if active || !active_only {
                out.push(NamedArray { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() });
            }
        });
        out
    }

    /// A plain encoder whose projections absorb the active adapters.
    pub fn merged(&self) -> DualEncoder {
        let mut base = self.base.clone();
        for (key, pair) in self.pairs.iter().filter(|(_, p)| p.is_active()) {
            let w = &mut base.tower_mut(key.tower).blocks[key.layer].attn.projection_mut(key.site).weight;
            let (e, f) = (w.shape()[0], w.shape()[1]);
            let h = pair.rank();
            let (a, b) = (pair.a.data(), pair.b.data());
            let wd = w.data_mut();
            for i in 0..e {
                for j in 0..f {
                    let delta: f32 = (0..h).map(|r| a[i * h + r] * b[r * f + j]).sum();
                    wd[i * f + j] += delta;
                }
            }
        }
        base
    }
}

fn pair_name(key: &SiteKey, part: &str) -> String {
    format!("{}.{}.{}.{part}", key.tower.name(), key.layer, key.site.name())
}

fn visit_pairs(pairs: &BTreeMap<SiteKey, LoraPair>, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, bool)) {
    for (key, pair) in pairs {
        f(&join(prefix, &pair_name(key, "A")), &pair.a, pair.is_active());
        f(&join(prefix, &pair_name(key, "B")), &pair.b, pair.is_active());
    }
}

impl Module for LoraModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.base.visit(prefix, f);
        visit_pairs(&self.pairs, prefix, &mut |n, t, _| f(n, t, ParamKind::Weight));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.base.visit_mut(prefix, f);
        for (key, pair) in self.pairs.iter_mut() {
            f(&join(prefix, &pair_name(key, "A")), &mut pair.a, ParamKind::Weight);
            f(&join(prefix, &pair_name(key, "B")), &mut pair.b, ParamKind::Weight);
        }
    }
}

impl ProjectionAdapter for LoraModel {
    fn adapt(&self, tape: &mut Tape, key: SiteKey, input: Var, base: Var, mode: &mut Mode) -> Result<Var> {
        match self.pairs.get(&key) {
            Some(pair) if pair.is_active() => {
                let delta = pair.delta(tape, input, mode)?;
                Ok(tape.add(base, delta)?)
            }
            _ => Ok(base),
        }
    }
}

impl LoraModel {
    pub fn encode_image(&self, tape: &mut Tape, images: &[f32], batch: usize, mode: &mut Mode) -> Result<Var> {
        self.base.encode_image(tape, images, batch, Some(self), mode)
    }

    pub fn encode_text(&self, tape: &mut Tape, tokens: &[Vec<usize>], mode: &mut Mode) -> Result<Var> {
        self.base.encode_text(tape, tokens, Some(self), mode)
    }
}

impl Classifier for LoraModel {
    fn logits(&mut self, tape: &mut Tape, images: &[f32], batch: usize, prompts: &[Vec<usize>], mode: &mut Mode) -> Result<Var> {
        self.base.logits_with(tape, images, batch, prompts, Some(&*self), mode)
    }
}
