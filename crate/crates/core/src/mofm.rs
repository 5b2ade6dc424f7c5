//! Mixture of a frozen global expert and a personalized local expert, mixed
//! per image by a gate.

use fedsparse_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::aggregate;
use crate::encoder::{class_logits, Classifier, Encoder, EncoderConfig, Tower};
use crate::error::{Error, Result};
use crate::lora::LoraModel;
use crate::nn::{join, BatchNorm1d, Linear, Mode, Module, ModuleExt, NamedArray, ParamKind};

/// `Linear → BatchNorm → ReLU → Linear → BatchNorm → softmax` over two experts.
#[derive(Clone, Debug)]
pub struct GateAdapter {
    pub layer1: Linear,
    pub bn1: BatchNorm1d,
    pub layer2: Linear,
    pub bn2: BatchNorm1d,
}

impl GateAdapter {
    /// Hidden width `4·inputs`; the output layer starts at zero so λ starts at 0.5.
    pub fn new(inputs: usize, rng: &mut impl Rng) -> Self {
        Self::with_hidden(inputs, 4 * inputs, rng)
    }

    pub fn with_hidden(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut adapter = GateAdapter {
            layer1: Linear::new(inputs, hidden, true, rng),
            bn1: BatchNorm1d::new(hidden),
            layer2: Linear::zeros(hidden, 2, true),
            bn2: BatchNorm1d::new(2),
        };
        adapter.set_trainable(true);
        adapter
    }

    pub fn inputs(&self) -> usize {
        self.layer1.inputs()
    }

    /// Expert weights `[B, 2]`; column 0 weighs the global expert.
    pub fn forward(&mut self, tape: &mut Tape, feats: Var, train: bool) -> Result<Var> {
        let h = self.layer1.forward(tape, feats)?;
        let h = self.bn1.forward(tape, h, train)?;
        let h = tape.relu(h);
        let z = self.layer2.forward(tape, h)?;
        let z = self.bn2.forward(tape, z, train)?;
        Ok(tape.softmax(z, 1)?)
    }

    /// λ as a `[B, 1]` column.
    pub fn lambda(&mut self, tape: &mut Tape, feats: Var, train: bool) -> Result<Var> {
        let w = self.forward(tape, feats, train)?;
        Ok(tape.narrow(w, 1, 0, 1)?)
    }
}

impl Module for GateAdapter {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.layer1.visit(&join(prefix, "layer1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.layer2.visit(&join(prefix, "layer2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.layer1.visit_mut(&join(prefix, "layer1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.layer2.visit_mut(&join(prefix, "layer2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
    }
}

/// A frozen visual tower feeding a trainable adapter.
#[derive(Clone, Debug)]
pub struct GateModel {
    pub config: EncoderConfig,
    pub backbone: Encoder,
    pub adapter: GateAdapter,
}

impl GateModel {
    /// Backbone: a frozen copy of `expert`'s visual tower with its active adapters folded in.
    pub fn from_expert(expert: &LoraModel, rng: &mut impl Rng) -> Self {
        let mut backbone = expert.merged().visual;
        backbone.set_trainable(false);
        let adapter = GateAdapter::new(expert.base.config.feature_dim, rng);
        GateModel { config: expert.base.config.clone(), backbone, adapter }
    }

    pub fn features(&self, tape: &mut Tape, images: &[f32], batch: usize) -> Result<Var> {
        self.backbone.encode_images(&self.config, tape, images, batch, None, &mut Mode::Eval)
    }

    /// Per-image λ as a `[B, 1]` column.
    pub fn gate_lambda(&mut self, tape: &mut Tape, images: &[f32], batch: usize, train: bool) -> Result<Var> {
        let feats = self.features(tape, images, batch)?;
        self.adapter.lambda(tape, feats, train)
    }

    /// Adapter trainable parameters over all gate parameters.
    pub fn adapter_ratio(&self) -> f64 {
        self.adapter.num_trainable() as f64 / self.num_params() as f64
    }
}

impl Module for GateModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.adapter.visit(&join(prefix, "adapter"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.adapter.visit_mut(&join(prefix, "adapter"), f);
    }
}

/// `λ⊙global + (1−λ)⊙local` with `λ: [B, 1]` and both logit blocks `[B, K]`.
pub fn mix_logits(tape: &mut Tape, global: Var, local: Var, lambda: Var) -> Result<Var> {
    if tape.shape(global) != tape.shape(local) {
        return Err(Error::Dimension(format!(
            "expert logits differ in shape: {:?} vs {:?}",
            tape.shape(global),
            tape.shape(local)
        )));
    }
    let g = tape.mul(global, lambda)?;
    let rest = tape.rsub_scalar(1.0, lambda);
    let l = tape.mul(local, rest)?;
    Ok(tape.add(g, l)?)
}

#[derive(Clone, Debug)]
pub struct MixtureModel {
    pub global: LoraModel,
    pub local: LoraModel,
    pub gate: GateModel,
}

impl MixtureModel {
    /// The local expert starts as an exact copy of `global` with the top layer
    /// of each tower active. `global` must have nothing trainable.
    pub fn new(global: LoraModel, rng: &mut impl Rng) -> Result<Self> {
        if global.num_trainable() != 0 {
            return Err(Error::Contract("the global expert must be frozen".into()));
        }
        let mut local = global.clone();
        for tower in Tower::BOTH {
            let top = local.depth(tower) - 1;
            local.set_layer_active(tower, top, true)?;
        }
        let gate = GateModel::from_expert(&global, rng);
        Ok(MixtureModel { global, local, gate })
    }

    /// Builds the logits from global-expert outputs computed elsewhere:
    /// `global_logits: [B, K]` and gate backbone features `[B, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn logits_from_cached(
        &mut self,
        tape: &mut Tape,
        images: &[f32],
        batch: usize,
        prompts: &[Vec<usize>],
        global_logits: Var,
        gate_features: Var,
        mode: &mut Mode,
    ) -> Result<(Var, Var)> {
        let v = self.local.encode_image(tape, images, batch, mode)?;
        let t = self.local.encode_text(tape, prompts, mode)?;
        let s = tape.leaf(&self.local.base.logit_scale);
        let local = class_logits(tape, v, t, s)?;
        let lambda = self.gate.adapter.lambda(tape, gate_features, mode.is_train())?;
        Ok((mix_logits(tape, global_logits, local, lambda)?, lambda))
    }

    /// Mixture logits and the λ column.
    pub fn forward(&mut self, tape: &mut Tape, images: &[f32], batch: usize, prompts: &[Vec<usize>], mode: &mut Mode) -> Result<(Var, Var)> {
        if self.global.base.config.feature_dim != self.local.base.config.feature_dim {
            return Err(Error::Dimension("experts disagree on feature_dim".into()));
        }
        let global = self.global.logits(tape, images, batch, prompts, &mut Mode::Eval)?;
        let feats = self.gate.features(tape, images, batch)?;
        self.logits_from_cached(tape, images, batch, prompts, global, feats, mode)
    }
}

impl Module for MixtureModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.global.visit(&join(prefix, "global"), f);
        self.local.visit(&join(prefix, "local"), f);
        self.gate.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.global.visit_mut(&join(prefix, "global"), f);
        self.local.visit_mut(&join(prefix, "local"), f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}

impl Classifier for MixtureModel {
    fn logits(&mut self, tape: &mut Tape, images: &[f32], batch: usize, prompts: &[Vec<usize>], mode: &mut Mode) -> Result<Var> {
        Ok(self.forward(tape, images, batch, prompts, mode)?.0)
    }
}

/// Result of loss-weighted adapter aggregation.
#[derive(Clone, Debug)]
pub struct GateAggregate {
    pub state: Vec<NamedArray>,
    pub weights: Vec<f64>,
    /// Set when some loss was not positive and uniform weights were used.
    pub uniform_fallback: bool,
}

/// Averages adapter payloads (weights and running statistics) with weights
/// proportional to each client's training loss.
pub fn aggregate_gate_adapters(payloads: &[&[NamedArray]], losses: &[f64]) -> Result<GateAggregate> {
    if payloads.is_empty() {
        return Err(Error::Contract("no gate adapters to aggregate".into()));
    }
    if losses.len() != payloads.len() {
        return Err(Error::Contract(format!("{} losses for {} adapters", losses.len(), payloads.len())));
    }
    let (weights, uniform_fallback) = match aggregate::proportional_weights(losses) {
        Some(w) => (w, false),
        None if payloads.len() == 1 => (vec![1.0], false),
        None => {
            log::warn!("non-positive client loss in {losses:?}; aggregating gate adapters uniformly");
            (vec![1.0 / payloads.len() as f64; payloads.len()], true)
        }
    };
    let state = aggregate::weighted_sum(payloads, &weights)?;
    Ok(GateAggregate { state, weights, uniform_fallback })
}
