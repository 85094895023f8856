//! Local client training for both stages. Clients work on private copies;
//! only deltas leave the client.

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::math::seeded_rng;
use crate::prompt::{
    sgd_step, stage_a_loss, stage_a_loss_and_grad, stage_b_loss, stage_b_loss_and_grad, OptimizerState,
    PromptBank, PromptNetParams, TextEncoderStub,
};
use crate::store::{ClientPartition, EmbeddingStore};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub domain_index: usize,
    /// Present after a class-grouping (stage A) round.
    pub net_delta: Option<PromptNetParams>,
    /// Present after a domain-decoupling (stage B) round.
    pub domain_prompt_delta: Option<Array2<f64>>,
    pub global_prompt_delta: Option<Array2<f64>>,
    pub size: usize,
    /// Mean mini-batch loss over the local run (full-data loss if no steps ran).
    pub local_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub mix: f64,
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Argument(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(Error::Argument(format!(
                "mix must be in [0, 1], got {}",
                self.mix
            )));
        }
        Ok(())
    }

    /// Optimizer steps one client takes per round.
    pub fn steps_per_round(&self, client_size: usize) -> usize {
        self.epochs * client_size.div_ceil(self.batch_size)
    }
}

/// Seeded mini-batches for each epoch.
fn epoch_batches(client: &ClientPartition, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = client.image_indices.clone();
    order.shuffle(&mut seeded_rng(seed, &[client.client_id as u64, epoch as u64]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn check_client(client: &ClientPartition, domain: usize) -> Result<()> {
    if client.domain_index != domain {
        return Err(Error::Protocol(format!(
            "client {} belongs to domain {}, not group {domain}",
            client.client_id, client.domain_index
        )));
    }
    if client.size == 0 || client.image_indices.is_empty() {
        return Err(Error::Protocol(format!(
            "client {} owns no images",
            client.client_id
        )));
    }
    Ok(())
}

/// Trains a private copy of the group network and returns `trained − initial`.
#[allow(clippy::too_many_arguments)]
pub fn local_train_stage_a(
    net: &PromptNetParams,
    group_domain: usize,
    client: &ClientPartition,
    store: &EmbeddingStore,
    stub: &TextEncoderStub,
    local: &LocalConfig,
    opt: OptimizerState,
    seed: u64,
) -> Result<ClientUpdate> {
    local.validate()?;
    check_client(client, group_domain)?;
    let mut opt = opt;
    let mut params = net.clone();
    let mut losses = Vec::new();
    for epoch in 0..local.epochs {
        for batch in epoch_batches(client, local.batch_size, seed, epoch) {
            let (loss, grad) =
                stage_a_loss_and_grad(&params, stub, store, &batch, &client.class_indices, local.tau)?;
            sgd_step(&mut params, &grad, &mut opt)?;
            losses.push(loss);
        }
    }
    let local_loss = match losses.len() {
        0 => stage_a_loss(
            net,
            stub,
            store,
            &client.image_indices,
            &client.class_indices,
            local.tau,
        )?,
        n => losses.iter().sum::<f64>() / n as f64,
    };
    Ok(ClientUpdate {
        client_id: client.client_id,
        domain_index: client.domain_index,
        net_delta: Some(params.difference(net)?),
        domain_prompt_delta: None,
        global_prompt_delta: None,
        size: client.size,
        local_loss,
    })
}

/// Trains private copies of the global prompt and the client's domain prompt.
/// The prompt networks are not inputs here, so they cannot change.
#[allow(clippy::too_many_arguments)]
pub fn local_train_stage_b(
    bank: &PromptBank,
    client: &ClientPartition,
    store: &EmbeddingStore,
    stub: &TextEncoderStub,
    local: &LocalConfig,
    opt: OptimizerState,
    seed: u64,
) -> Result<ClientUpdate> {
    local.validate()?;
    let domain = client.domain_index;
    if domain >= bank.num_domains() {
        return Err(Error::Protocol(format!(
            "client {} domain {domain} has no domain prompt",
            client.client_id
        )));
    }
    check_client(client, domain)?;
    let mut opt = opt;
    let mut work = PromptBank {
        global_prompt: bank.global_prompt.clone(),
        domain_prompts: bank.domain_prompts.clone(),
        prompt_history: Vec::new(),
    };
    let mut losses = Vec::new();
    for epoch in 0..local.epochs {
        for batch in epoch_batches(client, local.batch_size, seed, epoch) {
            let g = stage_b_loss_and_grad(
                &work,
                domain,
                stub,
                store,
                &batch,
                &client.class_indices,
                local.tau,
                local.mix,
            )?;
            // One schedule step covers both prompts.
            let lr = crate::prompt::cosine_lr(&opt)?;
            crate::prompt::SgdTarget::descend(&mut work.global_prompt, &g.grad_global, lr)?;
            sgd_step(&mut work.domain_prompts[domain], &g.grad_domain, &mut opt)?;
            losses.push(g.loss);
        }
    }
    let local_loss = match losses.len() {
        0 => stage_b_loss(
            bank,
            domain,
            stub,
            store,
            &client.image_indices,
            &client.class_indices,
            local.tau,
            local.mix,
        )?,
        n => losses.iter().sum::<f64>() / n as f64,
    };
    Ok(ClientUpdate {
        client_id: client.client_id,
        domain_index: domain,
        net_delta: None,
        domain_prompt_delta: Some(&work.domain_prompts[domain] - &bank.domain_prompts[domain]),
        global_prompt_delta: Some(&work.global_prompt - &bank.global_prompt),
        size: client.size,
        local_loss,
    })
}
