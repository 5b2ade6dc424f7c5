//! In-process federation: clients, rounds, aggregation and accounting.
//!
//! A [`Federation`] advances one round per [`Federation::step`], which makes
//! checkpointing between rounds straightforward. Stage one trains shared
//! adapters; stage two trains a personal mixture per client and shares only
//! the gate adapter. The baselines reuse the stage-one round on a plain
//! encoder with some or all of its weights trainable.

pub mod attack;
pub mod ledger;
pub mod metrics;
mod train;

use fedsparse_tensor::{Adam, AdamConfig, Tape, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate;
use crate::config::{ExperimentConfig, Method};
use crate::data::{self, PartitionSpec, SyntheticDataset};
use crate::encoder::{Classifier, DualEncoder, Tower};
use crate::error::{Error, Result};
use crate::lora::{inject, LoraModel, Proportion};
use crate::mofm::{aggregate_gate_adapters, MixtureModel};
use crate::nn::{Mode, Module, ModuleExt, NamedArray, ParamKind};
use crate::rng::{rng_for, tags, SimRng};
use crate::sal::SalState;

pub use ledger::{comm_time, CommTime, Direction, PayloadLedger, Transfer};
pub use metrics::{MetricRow, SERVER};
pub use train::{batches, evaluate, evaluate_mixture, train_classifier, train_mixture, ExpertCache};

/// The server's copy of whatever is being trained jointly.
#[derive(Clone, Debug)]
pub enum SharedModel {
    Adapted(LoraModel),
    Full(DualEncoder),
}

impl SharedModel {
    pub fn trainable_proportion(&self) -> Proportion {
        match self {
            SharedModel::Adapted(m) => m.trainable_proportion(),
            SharedModel::Full(m) => Proportion { trainable: m.num_trainable() as u64, total: m.num_params() as u64 },
        }
    }

    pub fn trainable_state(&self) -> Vec<NamedArray> {
        self.state_where(|t, k| k == ParamKind::Weight && t.requires_grad())
    }
}

impl Module for SharedModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        match self {
            SharedModel::Adapted(m) => m.visit(prefix, f),
            SharedModel::Full(m) => m.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        match self {
            SharedModel::Adapted(m) => m.visit_mut(prefix, f),
            SharedModel::Full(m) => m.visit_mut(prefix, f),
        }
    }
}

impl Classifier for SharedModel {
    fn logits(&mut self, tape: &mut Tape, images: &[f32], batch: usize, prompts: &[Vec<usize>], mode: &mut Mode) -> Result<Var> {
        match self {
            SharedModel::Adapted(m) => m.logits(tape, images, batch, prompts, mode),
            SharedModel::Full(m) => m.logits(tape, images, batch, prompts, mode),
        }
    }
}

/// Builds the shared model a method starts from.
pub fn initial_model(config: &ExperimentConfig) -> Result<SharedModel> {
    let mut rng = rng_for(config.data.seed, tags::MODEL_INIT);
    let mut base = DualEncoder::new(config.model.clone(), &mut rng)?;
    Ok(match config.federation.method {
        Method::Fedms => SharedModel::Adapted(inject(base, config.lora.rank, config.lora.dropout, &config.lora.sites, &mut rng)?),
        Method::Ft => {
            base.set_trainable(true);
            SharedModel::Full(base)
        }
        Method::Lfft => {
            for tower in Tower::BOTH {
                let enc = base.tower_mut(tower);
                let depth = enc.depth();
                for block in &mut enc.blocks[depth / 2..] {
                    block.set_trainable(true);
                }
            }
            SharedModel::Full(base)
        }
    })
}

/// Per-client stage-two state.
#[derive(Clone, Debug)]
pub struct Personal {
    pub model: MixtureModel,
    pub sal: SalState,
}

#[derive(Clone, Debug)]
pub struct Client {
    pub id: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub malicious: bool,
    pub rng: SimRng,
    pub optimizer: Adam,
    pub personal: Option<Personal>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stage1,
    Stage2,
    Baseline,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub round: usize,
    pub client: usize,
    pub layer: usize,
}

pub fn optimizer_config(config: &ExperimentConfig) -> AdamConfig {
    AdamConfig { learning_rate: config.federation.learning_rate, weight_decay: config.lora.weight_decay, ..AdamConfig::default() }
}

/// Full simulation state between rounds.
pub struct Federation {
    pub config: ExperimentConfig,
    pub data: SyntheticDataset,
    pub clients: Vec<Client>,
    pub shared: SharedModel,
    /// The gate adapter most recently broadcast in stage two.
    pub gate_state: Option<Vec<NamedArray>>,
    pub cache: Option<ExpertCache>,
    pub phase: Phase,
    /// Next round to run in the current phase; 0 is the initial evaluation.
    pub next_round: usize,
    pub ledger: PayloadLedger,
    pub metrics: Vec<MetricRow>,
    pub activations: Vec<ActivationRecord>,
    /// Mean local validation accuracy of the global expert at the end of stage one.
    pub stage1_accuracy: Option<f64>,
}

impl Federation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = data::generate(&config.synthetic_spec(), config.data.seed)?;
        let parts = partition(&config, &data)?;
        let malicious = attack::choose_malicious(config.data.seed, config.federation.num_clients, config.federation.attack_ratio);
        let mut split_rng = rng_for(config.data.seed, tags::SPLIT);
        let clients = parts
            .into_iter()
            .enumerate()
            .map(|(id, idx)| {
                let (train, val) = data::split_train_val(&idx, &data.labels, config.federation.val_fraction, &mut split_rng);
                Client {
                    id,
                    train,
                    val,
                    malicious: malicious[id],
                    rng: rng_for(config.data.seed, tags::CLIENT + id as u64),
                    optimizer: Adam::new(optimizer_config(&config)),
                    personal: None,
                }
            })
            .collect();
        let shared = initial_model(&config)?;
        let phase = if config.federation.method == Method::Fedms { Phase::Stage1 } else { Phase::Baseline };
        Ok(Federation {
            config,
            data,
            clients,
            shared,
            gate_state: None,
            cache: None,
            phase,
            next_round: 0,
            ledger: PayloadLedger::new(),
            metrics: Vec::new(),
            activations: Vec::new(),
            stage1_accuracy: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Label used in metrics and ledger entries for the current phase.
    pub fn stage_label(&self) -> &'static str {
        match self.phase {
            Phase::Stage1 => "1",
            Phase::Stage2 => "2",
            Phase::Baseline => self.config.federation.method.name(),
            Phase::Done => "done",
        }
    }

    fn phase_rounds(&self) -> usize {
        let f = &self.config.federation;
        match self.phase {
            Phase::Stage1 => f.rounds_stage1,
            Phase::Stage2 => f.rounds_stage2,
            Phase::Baseline => f.rounds_stage1 + f.rounds_stage2,
            Phase::Done => 0,
        }
    }

    /// Runs the next round (or initial evaluation) and returns its metric rows.
    pub fn step(&mut self) -> Result<Vec<MetricRow>> {
        if self.phase != Phase::Done && self.next_round > self.phase_rounds() {
            match self.phase {
                Phase::Stage1 => self.begin_stage2()?,
                _ => self.phase = Phase::Done,
            }
        }
        let rows = match self.phase {
            Phase::Done => return Ok(Vec::new()),
            Phase::Stage1 | Phase::Baseline => self.shared_round()?,
            Phase::Stage2 => self.personal_round()?,
        };
        self.next_round += 1;
        if self.phase == Phase::Stage1 && self.next_round > self.phase_rounds() {
            self.stage1_accuracy = rows.iter().find(|r| r.is_server()).map(|r| r.val_accuracy);
        }
        if self.phase != Phase::Stage1 && self.next_round > self.phase_rounds() {
            self.phase = Phase::Done;
        }
        self.metrics.extend(rows.iter().cloned());
        Ok(rows)
    }

    /// Steps until done.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    /// Steps until the current phase is `Stage2` (or the run ends).
    pub fn run_stage1(&mut self) -> Result<()> {
        while self.phase == Phase::Stage1 {
            self.step()?;
        }
        Ok(())
    }

    pub fn global_expert(&self) -> Option<&LoraModel> {
        match (&self.shared, self.phase) {
            (SharedModel::Adapted(m), Phase::Stage2 | Phase::Done) if self.clients.iter().all(|c| c.personal.is_some()) => Some(m),
            _ => None,
        }
    }

    fn shared_round(&mut self) -> Result<Vec<MetricRow>> {
        let round = self.next_round;
        let stage = self.stage_label().to_string();
        let fed = &self.config.federation;
        let mut losses: Vec<Option<f64>> = vec![None; self.clients.len()];
        let mut uploaded = vec![0u64; self.clients.len()];
        let mut broadcast_bytes = 0;
        if round > 0 {
            let broadcast = self.shared.trainable_state();
            let shared = &self.shared;
            let data = &self.data;
            let results: Vec<(Vec<NamedArray>, f64)> = self
                .clients
                .par_iter_mut()
                .map(|c| {
                    let mut local = shared.clone();
                    let loss = train_classifier(&mut local, &mut c.optimizer, &mut c.rng, data, &c.train, fed.local_epochs, fed.batch_size)?;
                    let upload = attack::client_upload(local.trainable_state(), &broadcast, c.malicious)?;
                    Ok((upload, loss))
                })
                .collect::<Result<_>>()?;
            let expected: Vec<&str> = broadcast.iter().map(|a| a.name.as_str()).collect();
            for (c, (upload, _)) in self.clients.iter().zip(&results) {
                if upload.iter().map(|a| a.name.as_str()).ne(expected.iter().copied()) {
                    return Err(Error::Contract(format!("client {} uploaded parameters outside the shared set", c.id)));
                }
            }
            let payloads: Vec<&[NamedArray]> = results.iter().map(|(u, _)| u.as_slice()).collect();
            let weights = if fed.sample_weighted {
                let sizes: Vec<f64> = self.clients.iter().map(|c| c.train.len() as f64).collect();
                aggregate::proportional_weights(&sizes).expect("clients hold samples")
            } else {
                vec![1.0 / payloads.len() as f64; payloads.len()]
            };
            let merged = aggregate::weighted_sum(&payloads, &weights)?;
            self.shared.load(&merged)?;
            let params: u64 = broadcast.iter().map(|a| a.numel() as u64).sum();
            for (i, (c, (_, loss))) in self.clients.iter().zip(&results).enumerate() {
                self.ledger.record(Transfer { stage: stage.clone(), round, client: Some(c.id), direction: Direction::Upload, params });
                uploaded[i] = params * ledger::BYTES_PER_PARAM;
                losses[i] = Some(*loss);
            }
            self.ledger.record(Transfer { stage: stage.clone(), round, client: None, direction: Direction::Broadcast, params });
            broadcast_bytes = params * ledger::BYTES_PER_PARAM;
        }
        let active = match &self.shared {
            SharedModel::Adapted(m) => Some(m.active_layers(Tower::Visual).len()),
            SharedModel::Full(_) => None,
        };
        let mut rows = Vec::with_capacity(self.clients.len() + 1);
        for (i, c) in self.clients.iter().enumerate() {
            let acc = evaluate(&mut self.shared, &self.data, &c.val)?;
            rows.push(MetricRow {
                stage: stage.clone(),
                round,
                client_id: c.id.to_string(),
                train_loss: losses[i],
                val_accuracy: acc,
                active_lora_layers: active,
                uploaded_bytes: uploaded[i],
                lambda_mean: None,
            });
        }
        rows.push(server_row(&rows, stage, round, active, broadcast_bytes));
        Ok(rows)
    }

    /// Builds the frozen global expert and every client's mixture.
    fn begin_stage2(&mut self) -> Result<()> {
        let SharedModel::Adapted(trained) = &self.shared else {
            return Err(Error::Contract("stage two needs an adapter-trained global expert".into()));
        };
        let seed = self.config.data.seed;
        let lora = &self.config.lora;
        let mut expert = inject(trained.merged(), lora.rank, lora.dropout, &lora.sites, &mut rng_for(seed, tags::STAGE2_LORA))?;
        expert.set_all_active(false);
        let template = MixtureModel::new(expert.clone(), &mut rng_for(seed, tags::GATE_INIT))?;
        self.cache = Some(ExpertCache::build(&template, &self.data)?);
        self.gate_state = Some(template.gate.adapter.state());
        let depth = self.config.model.depth;
        for c in &mut self.clients {
            c.personal = Some(Personal {
                model: template.clone(),
                sal: SalState::new(self.config.sal.queue_len, self.config.sal.threshold, depth)?,
            });
            c.optimizer = Adam::new(optimizer_config(&self.config));
        }
        self.shared = SharedModel::Adapted(expert);
        self.phase = Phase::Stage2;
        self.next_round = 0;
        Ok(())
    }

    fn personal_round(&mut self) -> Result<Vec<MetricRow>> {
        let round = self.next_round;
        let stage = self.stage_label().to_string();
        let fed = &self.config.federation;
        let cache = self.cache.as_ref().expect("stage two has a cache");
        let mut losses: Vec<Option<f64>> = vec![None; self.clients.len()];
        let mut uploaded = vec![0u64; self.clients.len()];
        let mut broadcast_bytes = 0;
        if round > 0 {
            let broadcast = self.gate_state.clone().expect("stage two has a gate state");
            let data = &self.data;
            let results: Vec<(Vec<NamedArray>, f64)> = self
                .clients
                .par_iter_mut()
                .map(|c| {
                    let p = c.personal.as_mut().expect("stage-two client");
                    let loss =
                        train_mixture(&mut p.model, &mut c.optimizer, &mut c.rng, data, cache, &c.train, fed.local_epochs, fed.batch_size)?;
                    let upload = gate_upload(&p.model, &broadcast, c.malicious)?;
                    Ok((upload, loss))
                })
                .collect::<Result<_>>()?;
            let expected: Vec<&str> = broadcast.iter().map(|a| a.name.as_str()).collect();
            for (c, (upload, _)) in self.clients.iter().zip(&results) {
                if upload.iter().map(|a| a.name.as_str()).ne(expected.iter().copied()) {
                    return Err(Error::Contract(format!("client {} uploaded parameters outside the gate adapter", c.id)));
                }
            }
            let payloads: Vec<&[NamedArray]> = results.iter().map(|(u, _)| u.as_slice()).collect();
            let loss_values: Vec<f64> = results.iter().map(|(_, l)| *l).collect();
            let agg = aggregate_gate_adapters(&payloads, &loss_values)?;
            let params: u64 = agg.state.iter().map(|a| a.numel() as u64).sum();
            for (i, c) in self.clients.iter_mut().enumerate() {
                c.personal.as_mut().expect("stage-two client").model.gate.adapter.load(&agg.state)?;
                self.ledger.record(Transfer { stage: stage.clone(), round, client: Some(c.id), direction: Direction::Upload, params });
                uploaded[i] = params * ledger::BYTES_PER_PARAM;
                losses[i] = Some(loss_values[i]);
            }
            self.ledger.record(Transfer { stage: stage.clone(), round, client: None, direction: Direction::Broadcast, params });
            broadcast_bytes = params * ledger::BYTES_PER_PARAM;
            self.gate_state = Some(agg.state);
        }
        let mut rows = Vec::with_capacity(self.clients.len() + 1);
        for (i, c) in self.clients.iter_mut().enumerate() {
            let p = c.personal.as_mut().expect("stage-two client");
            let (acc, lambda) = evaluate_mixture(&mut p.model, &self.data, cache, &c.val)?;
            if round > 0 {
                if let Some(ev) = p.sal.step(&mut p.model.local, acc)? {
                    log::info!("round {round}: client {} activates layer {}", c.id, ev.layer);
                    self.activations.push(ActivationRecord { round, client: c.id, layer: ev.layer });
                }
            }
            rows.push(MetricRow {
                stage: stage.clone(),
                round,
                client_id: c.id.to_string(),
                train_loss: losses[i],
                val_accuracy: acc,
                active_lora_layers: Some(p.model.local.active_layers(Tower::Visual).len()),
                uploaded_bytes: uploaded[i],
                lambda_mean: Some(lambda),
            });
        }
        let mut server = server_row(&rows, stage, round, None, broadcast_bytes);
        server.lambda_mean = Some(rows.iter().filter_map(|r| r.lambda_mean).sum::<f64>() / rows.len() as f64);
        rows.push(server);
        Ok(rows)
    }

    /// Mean local validation accuracy reported in the most recent round.
    pub fn latest_accuracy(&self) -> Option<f64> {
        self.metrics.iter().rev().find(|r| r.is_server()).map(|r| r.val_accuracy)
    }

    pub fn malicious_clients(&self) -> Vec<usize> {
        self.clients.iter().filter(|c| c.malicious).map(|c| c.id).collect()
    }
}

/// A client's gate upload: weights and running statistics, with the weights
/// reflected about the broadcast for a malicious client. Statistics are
/// always sent as measured, since reflecting a variance can make it negative.
fn gate_upload(model: &MixtureModel, broadcast: &[NamedArray], malicious: bool) -> Result<Vec<NamedArray>> {
    let state = model.gate.adapter.state();
    if !malicious {
        return Ok(state);
    }
    let weights: std::collections::BTreeSet<String> =
        model.gate.adapter.state_where(|_, k| k == ParamKind::Weight).into_iter().map(|a| a.name).collect();
    let poisoned = attack::client_upload(state.clone(), broadcast, true)?;
    Ok(state.into_iter().zip(poisoned).map(|(own, bad)| if weights.contains(&own.name) { bad } else { own }).collect())
}

fn server_row(rows: &[MetricRow], stage: String, round: usize, active: Option<usize>, broadcast_bytes: u64) -> MetricRow {
    let n = rows.len() as f64;
    let losses: Vec<f64> = rows.iter().filter_map(|r| r.train_loss).collect();
    MetricRow {
        stage,
        round,
        client_id: SERVER.to_string(),
        train_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        val_accuracy: rows.iter().map(|r| r.val_accuracy).sum::<f64>() / n,
        active_lora_layers: active,
        uploaded_bytes: broadcast_bytes,
        lambda_mean: None,
    }
}

/// Client partitions for a configuration.
pub fn partition(config: &ExperimentConfig, data: &SyntheticDataset) -> Result<Vec<Vec<usize>>> {
    let spec = PartitionSpec {
        num_clients: config.federation.num_clients,
        alpha: config.data.alpha,
        seed: config.data.seed,
        min_samples: config.data.min_client_samples,
    };
    data::dirichlet_partition(&data.labels, data.num_classes(), &spec)
}
