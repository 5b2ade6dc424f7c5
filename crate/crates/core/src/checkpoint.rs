//! Round-boundary snapshots of a [`Federation`].
//!
//! Array names: `server.{param}` (full shared model), `gate_broadcast.{param}`,
//! and per client `client.{id}.local.{pair}`, `client.{id}.gate.{param}`,
//! `client.{id}.adam.m.{param}`, `client.{id}.adam.v.{param}`. Everything else
//! lives in the TOML metadata block.

use std::collections::BTreeMap;
use std::path::Path;

use fedsparse_tensor::{Adam, Moments};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::container::Container;
use crate::encoder::Tower;
use crate::error::{Error, Result};
use crate::federation::{
    metrics, optimizer_config, ActivationRecord, ExpertCache, Federation, Personal, Phase, SharedModel, Transfer,
};
use crate::mofm::MixtureModel;
use crate::nn::{Module, ModuleExt, NamedArray};
use crate::rng::{rng_for, tags, SimRng};
use crate::sal::{CapabilityQueue, SalState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &SimRng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream().to_string(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn rebuild(&self) -> Result<SimRng> {
        let bad = || Error::Integrity("malformed rng state".into());
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = SimRng::from_seed(seed);
        rng.set_stream(self.stream.parse().map_err(|_| bad())?);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalSnapshot {
    pub queue_len: usize,
    pub queue: Vec<f64>,
    pub threshold: f64,
    pub next_layer: usize,
    pub exhausted: bool,
    pub active_layers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSnapshot {
    pub id: usize,
    pub rng: RngState,
    pub adam_updates: u64,
    pub adam_steps: BTreeMap<String, u64>,
    pub sal: Option<SalSnapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub next_round: usize,
    pub stage1_accuracy: Option<f64>,
    pub metrics_csv: String,
    pub config: ExperimentConfig,
    pub clients: Vec<ClientSnapshot>,
    pub ledger: Vec<Transfer>,
    pub activations: Vec<ActivationRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray>,
}

fn prefixed(prefix: &str, arrays: Vec<NamedArray>) -> impl Iterator<Item = NamedArray> + '_ {
    arrays.into_iter().map(move |a| NamedArray { name: format!("{prefix}{}", a.name), ..a })
}

impl Checkpoint {
    pub fn capture(fed: &Federation) -> Result<Self> {
        let mut arrays: Vec<NamedArray> = prefixed("server.", fed.shared.state()).collect();
        if let Some(gate) = &fed.gate_state {
            arrays.extend(prefixed("gate_broadcast.", gate.clone()));
        }
        let mut clients = Vec::with_capacity(fed.clients.len());
        for c in &fed.clients {
            let sal = c.personal.as_ref().map(|p| {
                arrays.extend(prefixed(&format!("client.{}.local.", c.id), p.model.local.adapter_state(false)));
                arrays.extend(prefixed(&format!("client.{}.gate.", c.id), p.model.gate.adapter.state()));
                SalSnapshot {
                    queue_len: p.sal.queue.max_len(),
                    queue: p.sal.queue.entries().collect(),
                    threshold: p.sal.threshold,
                    next_layer: p.sal.next_layer(),
                    exhausted: p.sal.is_exhausted(),
                    active_layers: p.model.local.active_layers(Tower::Visual),
                }
            });
            let mut adam_steps = BTreeMap::new();
            for (name, m) in c.optimizer.state() {
                adam_steps.insert(name.clone(), m.step);
                for (kind, data) in [("m", &m.m), ("v", &m.v)] {
                    arrays.push(NamedArray { name: format!("client.{}.adam.{kind}.{name}", c.id), shape: vec![data.len()], data: data.clone() });
                }
            }
            clients.push(ClientSnapshot {
                id: c.id,
                rng: RngState::capture(&c.rng),
                adam_updates: c.optimizer.updates(),
                adam_steps,
                sal,
            });
        }
        let meta = CheckpointMeta {
            phase: fed.phase,
            next_round: fed.next_round,
            stage1_accuracy: fed.stage1_accuracy,
            metrics_csv: metrics::to_csv(&fed.metrics, true)?,
            config: fed.config.clone(),
            clients,
            ledger: fed.ledger.entries().to_vec(),
            activations: fed.activations.clone(),
        };
        Ok(Checkpoint { meta, arrays })
    }

    /// Weight count of the shared model stored under `server.`.
    pub fn server_params(&self) -> usize {
        self.arrays.iter().filter(|a| a.name.starts_with("server.")).map(NamedArray::numel).sum()
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = toml::to_string(&self.meta).map_err(|e| Error::Integrity(format!("cannot encode checkpoint metadata: {e}")))?;
        Ok(Container { meta, arrays: self.arrays.clone() })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let meta = toml::from_str(&c.meta).map_err(|e| Error::Integrity(format!("bad checkpoint metadata: {e}")))?;
        Ok(Checkpoint { meta, arrays: c.arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Rebuilds the federation from the stored configuration.
    pub fn restore(&self) -> Result<Federation> {
        self.restore_with(self.meta.config.clone())
    }

    /// Rebuilds the federation under `config`, which must describe the same
    /// experiment; output settings may differ.
    pub fn restore_with(&self, config: ExperimentConfig) -> Result<Federation> {
        let stored = &self.meta.config;
        if config.model != stored.model {
            return Err(Error::Structure("checkpoint was written for a different model geometry".into()));
        }
        if config.lora != stored.lora || config.sal != stored.sal || config.federation != stored.federation || config.data != stored.data {
            return Err(Error::Structure("checkpoint was written for a different experiment configuration".into()));
        }
        let mut fed = Federation::new(config)?;
        if self.meta.clients.len() != fed.clients.len() {
            return Err(Error::Structure("client count differs from the checkpoint".into()));
        }
        let mut groups: BTreeMap<String, Vec<NamedArray>> = BTreeMap::new();
        for a in &self.arrays {
            let (group, name) = split_name(&a.name)?;
            groups.entry(group).or_default().push(NamedArray { name, ..a.clone() });
        }
        let mut take = |g: &str| groups.remove(g).unwrap_or_default();

        let server = take("server");
        let expected: usize = fed.shared.state().iter().map(NamedArray::numel).sum();
        let stored_params: usize = server.iter().map(NamedArray::numel).sum();
        if stored_params != expected {
            return Err(Error::Structure(format!("checkpoint holds {stored_params} shared values, model has {expected}")));
        }
        fed.shared.load(&server)?;

        let personal = self.meta.clients.iter().any(|c| c.sal.is_some());
        if personal {
            let SharedModel::Adapted(expert) = &mut fed.shared else {
                return Err(Error::Structure("stage-two checkpoint for a baseline method".into()));
            };
            expert.set_all_active(false);
            let template = MixtureModel::new(expert.clone(), &mut rng_for(fed.config.data.seed, tags::GATE_INIT))?;
            fed.cache = Some(ExpertCache::build(&template, &fed.data)?);
            for (c, snap) in fed.clients.iter_mut().zip(&self.meta.clients) {
                let Some(sal) = &snap.sal else {
                    return Err(Error::Structure(format!("client {} has no stage-two state", c.id)));
                };
                let mut model = template.clone();
                model.local.set_all_active(false);
                for &layer in &sal.active_layers {
                    for tower in Tower::BOTH {
                        model.local.set_layer_active(tower, layer, true)?;
                    }
                }
                load_exact(&mut model.local, &take(&format!("client.{}.local", c.id)), |m| m.adapter_state(false))?;
                load_exact(&mut model.gate.adapter, &take(&format!("client.{}.gate", c.id)), |m| m.state())?;
                let mut queue = CapabilityQueue::new(sal.queue_len)?;
                sal.queue.iter().for_each(|&a| queue.push(a));
                c.personal = Some(Personal { model, sal: SalState::restore(queue, sal.threshold, sal.next_layer, sal.exhausted) });
            }
            fed.gate_state = Some(take("gate_broadcast"));
        }

        for (c, snap) in fed.clients.iter_mut().zip(&self.meta.clients) {
            if snap.id != c.id {
                return Err(Error::Structure(format!("client order differs at id {}", c.id)));
            }
            c.rng = snap.rng.rebuild()?;
            let m = take(&format!("client.{}.adam.m", c.id));
            let mut v: BTreeMap<String, NamedArray> = take(&format!("client.{}.adam.v", c.id)).into_iter().map(|a| (a.name.clone(), a)).collect();
            let mut state = BTreeMap::new();
            for first in m {
                let second = v.remove(&first.name).ok_or_else(|| Error::Integrity(format!("missing second moment for `{}`", first.name)))?;
                let step = *snap.adam_steps.get(&first.name).ok_or_else(|| Error::Integrity(format!("missing step count for `{}`", first.name)))?;
                state.insert(first.name, Moments { step, m: first.data, v: second.data });
            }
            if let Some(name) = v.keys().next() {
                return Err(Error::Integrity(format!("missing first moment for `{name}`")));
            }
            c.optimizer = Adam::restore(optimizer_config(&fed.config), snap.adam_updates, state);
        }
        if let Some(group) = groups.keys().next() {
            return Err(Error::Structure(format!("unexpected array group `{group}`")));
        }

        fed.phase = self.meta.phase;
        fed.next_round = self.meta.next_round;
        fed.stage1_accuracy = self.meta.stage1_accuracy;
        fed.metrics = metrics::from_csv(&self.meta.metrics_csv)?;
        fed.ledger = crate::federation::PayloadLedger::from_entries(self.meta.ledger.clone());
        fed.activations = self.meta.activations.clone();
        Ok(fed)
    }
}

/// Splits `client.3.adam.m.visual.0.q.A` into its group and parameter name.
fn split_name(full: &str) -> Result<(String, String)> {
    let bad = || Error::Integrity(format!("unrecognised array name `{full}`"));
    let parts: Vec<&str> = full.splitn(5, '.').collect();
    let head = match parts.first().copied() {
        Some("server") | Some("gate_broadcast") => 1,
        Some("client") => match parts.get(2).copied() {
            Some("local") | Some("gate") => 3,
            Some("adam") => 4,
            _ => return Err(bad()),
        },
        _ => return Err(bad()),
    };
    if parts.len() <= head {
        return Err(bad());
    }
    let group = parts[..head].join(".");
    Ok((group.clone(), full[group.len() + 1..].to_string()))
}

/// Loads `arrays`, which must name exactly the tensors `expected` lists.
fn load_exact<M: Module>(module: &mut M, arrays: &[NamedArray], expected: impl Fn(&M) -> Vec<NamedArray>) -> Result<()> {
    let want: Vec<String> = expected(module).into_iter().map(|a| a.name).collect();
    let got: Vec<&str> = arrays.iter().map(|a| a.name.as_str()).collect();
    if want.iter().map(String::as_str).ne(got.iter().copied()) {
        return Err(Error::Structure(format!("expected {} arrays, checkpoint holds {}", want.len(), got.len())));
    }
    module.load(arrays)
}
