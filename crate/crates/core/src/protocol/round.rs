//! The federated round state machine.

use std::collections::BTreeMap;
use std::time::Instant;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::aggregate::{
    aggregate_global_prompt, aggregate_group_nets, beta_alphas, beta_momentum_average, domain_wise_aggregate,
    BetaSchedule,
};
use super::client::{local_train_stage_a, local_train_stage_b, ClientUpdate, LocalConfig};
use crate::error::{Error, Result};
use crate::math::seeded_rng;
use crate::prompt::{NetShape, OptimizerState, PromptBank, PromptNetParams, TextEncoderStub};
use crate::store::{ClientPartition, EmbeddingStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Stage A: train the per-group prompt networks, prompts frozen.
    ClassGrouping,
    /// Stage B: train global and domain prompts, networks frozen.
    DomainDecoupling,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::ClassGrouping => "A",
            Stage::DomainDecoupling => "B",
        }
    }
}

/// How many consecutive rounds each stage runs before switching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub class_rounds: usize,
    pub domain_rounds: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            class_rounds: 1,
            domain_rounds: 1,
        }
    }
}

impl StageSchedule {
    pub fn stage_for(&self, round: usize) -> Stage {
        let period = self.class_rounds + self.domain_rounds;
        if period == 0 || round % period < self.class_rounds {
            Stage::ClassGrouping
        } else {
            Stage::DomainDecoupling
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    /// Fraction of each domain group sampled per round, in (0, 1].
    pub participation: f64,
    pub local: LocalConfig,
    pub base_lr: f64,
    pub min_lr: f64,
    /// Horizon of the cosine schedule, in rounds.
    pub total_rounds: usize,
    pub beta: BetaSchedule,
    pub normalized_momentum: bool,
    pub schedule: StageSchedule,
    /// Record wall-clock time in round logs (makes logs non-reproducible).
    pub log_timing: bool,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::Config(format!(
                "participation must be in (0, 1], got {}",
                self.participation
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.schedule.class_rounds == 0 && self.schedule.domain_rounds == 0 {
            return Err(Error::Config("stage schedule has no rounds".into()));
        }
        self.local.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.beta.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round: usize,
    /// One network per training domain, keyed by domain index.
    pub group_nets: BTreeMap<usize, PromptNetParams>,
    pub bank: PromptBank,
    pub rng_seed: u64,
    pub stage: Stage,
}

/// One line of the round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub stage: String,
    pub sampled_clients: Vec<usize>,
    /// Mean local loss per domain group, keyed by domain name.
    pub group_loss: BTreeMap<String, f64>,
    pub wall_ms: u64,
}

/// Buckets client ids by domain; every client appears exactly once.
pub fn group_by_domain(partitions: &[ClientPartition]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for p in partitions {
        groups.entry(p.domain_index).or_default().push(p.client_id);
    }
    for ids in groups.values_mut() {
        ids.sort_unstable();
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankShape {
    pub global_len: usize,
    pub domain_len: usize,
}

/// Initial state: one freshly initialized network per domain group.
pub fn init_round(
    partitions: &[ClientPartition],
    num_domains: usize,
    net_shape: NetShape,
    bank_shape: BankShape,
    seed: u64,
    schedule: &StageSchedule,
) -> Result<RoundState> {
    if partitions.is_empty() {
        return Err(Error::Config("no client partitions".into()));
    }
    let groups = group_by_domain(partitions);
    let mut group_nets = BTreeMap::new();
    for domain in 0..num_domains {
        if !groups.contains_key(&domain) {
            return Err(Error::Config(format!("training domain {domain} has no clients")));
        }
        group_nets.insert(
            domain,
            PromptNetParams::init(net_shape, seed ^ ((domain as u64 + 1) << 32))?,
        );
    }
    if let Some(extra) = groups.keys().find(|&&d| d >= num_domains) {
        return Err(Error::Config(format!("clients reference unknown domain {extra}")));
    }
    let bank = PromptBank::init(
        num_domains,
        bank_shape.global_len,
        bank_shape.domain_len,
        net_shape.token_dim,
        seed,
    )?;
    Ok(RoundState {
        round: 0,
        group_nets,
        bank,
        rng_seed: seed,
        stage: schedule.stage_for(0),
    })
}

/// Per-group participant ids for `round`, ascending.
pub fn sample_clients(
    groups: &BTreeMap<usize, Vec<usize>>,
    participation: f64,
    seed: u64,
    round: usize,
) -> BTreeMap<usize, Vec<usize>> {
    groups
        .iter()
        .map(|(&domain, ids)| {
            let take = ((participation * ids.len() as f64).ceil() as usize).min(ids.len());
            let mut pool = ids.clone();
            pool.shuffle(&mut seeded_rng(seed, &[0x5a, round as u64, domain as u64]));
            pool.truncate(take);
            pool.sort_unstable();
            (domain, pool)
        })
        .collect()
}

fn client_optimizer(config: &ProtocolConfig, round: usize, client_size: usize) -> Option<OptimizerState> {
    let per_round = config.local.steps_per_round(client_size);
    if per_round == 0 {
        return None;
    }
    let rounds = config.total_rounds.max(round + 1);
    Some(OptimizerState {
        base_lr: config.base_lr,
        min_lr: config.min_lr,
        total_steps: rounds * per_round,
        step: round * per_round,
    })
}

/// Runs one round and returns the successor state with its log line.
pub fn run_round(
    state: &RoundState,
    partitions: &[ClientPartition],
    store: &EmbeddingStore,
    stub: &TextEncoderStub,
    config: &ProtocolConfig,
) -> Result<(RoundState, RoundLog)> {
    config.validate()?;
    let started = Instant::now();
    let by_id: BTreeMap<usize, &ClientPartition> = partitions.iter().map(|p| (p.client_id, p)).collect();
    if by_id.len() != partitions.len() {
        return Err(Error::Protocol("duplicate client ids in partitions".into()));
    }
    let sampled = sample_clients(
        &group_by_domain(partitions),
        config.participation,
        state.rng_seed,
        state.round,
    );
    let mut next = state.clone();
    let mut group_loss = BTreeMap::new();
    let mut all_sampled = Vec::new();
    let mut stage_b_updates: Vec<ClientUpdate> = Vec::new();

    for (&domain, net) in &state.group_nets {
        let ids = sampled.get(&domain).map(Vec::as_slice).unwrap_or(&[]);
        if ids.is_empty() {
            warn!(
                "round {}: domain group {domain} has no sampled clients; carrying over",
                state.round
            );
            continue;
        }
        let mut updates = Vec::with_capacity(ids.len());
        for id in ids {
            let client = by_id[id];
            let opt = client_optimizer(config, state.round, client.size)
                .unwrap_or(OptimizerState::new(config.base_lr, 1));
            let seed = state.rng_seed ^ (state.round as u64).wrapping_mul(0x9e37_79b9);
            let update = match state.stage {
                Stage::ClassGrouping => {
                    local_train_stage_a(net, domain, client, store, stub, &config.local, opt, seed)?
                }
                Stage::DomainDecoupling => {
                    local_train_stage_b(&state.bank, client, store, stub, &config.local, opt, seed)?
                }
            };
            updates.push(update);
        }
        all_sampled.extend_from_slice(ids);
        let mean_loss = updates.iter().map(|u| u.local_loss).sum::<f64>() / updates.len() as f64;
        let name = store
            .domains
            .get(domain)
            .cloned()
            .unwrap_or_else(|| format!("domain_{domain}"));
        group_loss.insert(name, mean_loss);

        match state.stage {
            Stage::ClassGrouping => {
                next.group_nets
                    .insert(domain, aggregate_group_nets(&updates, net)?);
            }
            Stage::DomainDecoupling => {
                let current = &state.bank.domain_prompts[domain];
                let aggregated = domain_wise_aggregate(current, &updates)?;
                let history = &state.bank.prompt_history[domain];
                let alphas = beta_alphas(&config.beta, history.len() - 1)?;
                let smoothed =
                    beta_momentum_average(history, &alphas, &aggregated, config.normalized_momentum)?;
                next.bank.domain_prompts[domain] = smoothed;
                next.bank.prompt_history[domain].push(aggregated);
                stage_b_updates.extend(updates);
            }
        }
    }
    if state.stage == Stage::DomainDecoupling && !stage_b_updates.is_empty() {
        next.bank.global_prompt = aggregate_global_prompt(&state.bank.global_prompt, &stage_b_updates)?;
    }

    next.round = state.round + 1;
    next.stage = config.schedule.stage_for(next.round);
    all_sampled.sort_unstable();
    let log = RoundLog {
        round: state.round,
        stage: state.stage.label().to_string(),
        sampled_clients: all_sampled,
        group_loss,
        wall_ms: if config.log_timing {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
    };
    Ok((next, log))
}
