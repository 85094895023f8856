//! Losses and exact gradients for the two alternating training stages.
//!
//! Stage A trains a domain group's prompt network with the prompt bank
//! frozen; stage B trains the global prompt and one domain prompt with the
//! prompt networks frozen.

use ndarray::{Array1, Array2, Axis};

use super::net::{forward_with_cache, prompt_net_backward};
use super::params::{PromptBank, PromptNetParams};
use super::text::{EncodedText, TextEncoderStub};
use crate::error::{Error, Result};
use crate::math::softmax_rows;
use crate::store::EmbeddingStore;

#[derive(Debug, Clone)]
pub struct StageBGrad {
    pub loss: f64,
    pub grad_global: Array2<f64>,
    pub grad_domain: Array2<f64>,
}

/// Batch images as rows plus labels local to `classes`.
fn batch_matrix(
    store: &EmbeddingStore,
    batch: &[usize],
    classes: &[usize],
    domain: Option<usize>,
) -> Result<(Array2<f64>, Vec<usize>)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if classes.is_empty() {
        return Err(Error::Argument("no classes for this client".into()));
    }
    let mut x = Array2::zeros((batch.len(), store.dim));
    let mut labels = Vec::with_capacity(batch.len());
    for (r, &i) in batch.iter().enumerate() {
        let img = store
            .images
            .get(i)
            .ok_or_else(|| Error::Argument(format!("image index {i} out of range")))?;
        if let Some(d) = domain {
            if img.domain_index != d {
                return Err(Error::Argument(format!(
                    "image {i} is from domain {}, batch expects {d}",
                    img.domain_index
                )));
            }
        }
        let label = classes
            .iter()
            .position(|&c| c == img.class_index)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "image {i} has class {} outside the client's classes",
                    img.class_index
                ))
            })?;
        x.row_mut(r).assign(&img.embedding);
        labels.push(label);
    }
    Ok((x, labels))
}

fn encode_classes(
    stub: &TextEncoderStub,
    store: &EmbeddingStore,
    prompt: &Array2<f64>,
    classes: &[usize],
) -> Result<Vec<EncodedText>> {
    classes
        .iter()
        .map(|&c| {
            let block = store
                .class_tokens
                .get(c)
                .ok_or_else(|| Error::Argument(format!("class index {c} out of range")))?;
            stub.encode_with_cache(prompt.view(), block.view())
        })
        .collect()
}

fn feature_matrix(enc: &[EncodedText]) -> Array2<f64> {
    let views: Vec<_> = enc
        .iter()
        .map(|e| e.feature.view().insert_axis(Axis(0)))
        .collect();
    ndarray::concatenate(Axis(0), &views).expect("features share width")
}

/// Mean cross-entropy of `softmax(scores/τ)` and its gradient w.r.t. scores.
fn softmax_ce(scores: &Array2<f64>, labels: &[usize], tau: f64) -> Result<(f64, Array2<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let mut probs = scores / tau;
    softmax_rows(&mut probs);
    let b = labels.len() as f64;
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        loss -= probs[[r, y]].ln();
        probs[[r, y]] -= 1.0;
    }
    probs /= tau * b;
    Ok((loss / b, probs))
}

/// Gradient of the loss w.r.t. a prompt shared by every class feature, as the
/// same vector for each of its `rows`.
fn prompt_gradient(
    stub: &TextEncoderStub,
    enc: &[EncodedText],
    grad_features: &Array2<f64>,
    rows: usize,
) -> Array2<f64> {
    let mut row = Array1::zeros(stub.token_dim());
    for (e, g) in enc.iter().zip(grad_features.rows()) {
        row += &stub.backward_prompt_row(e, &g.to_owned());
    }
    row.insert_axis(Axis(0))
        .broadcast((rows, stub.token_dim()))
        .expect("row broadcasts")
        .to_owned()
}

pub fn stage_a_loss(
    params: &PromptNetParams,
    stub: &TextEncoderStub,
    store: &EmbeddingStore,
    batch: &[usize],
    client_classes: &[usize],
    tau: f64,
) -> Result<f64> {
    let (x, labels) = batch_matrix(store, batch, client_classes, None)?;
    let tokens = store.stacked_tokens(client_classes)?;
    let (prompts, _) = forward_with_cache(params, tokens.view())?;
    let features = feature_matrix(&encode_classes(stub, store, &prompts, client_classes)?);
    softmax_ce(&x.dot(&features.t()), &labels, tau).map(|(l, _)| l)
}

/// Mean classification loss over `batch` and its exact gradient with respect
/// to every prompt-network parameter.
pub fn stage_a_loss_and_grad(
    params: &PromptNetParams,
    stub: &TextEncoderStub,
    store: &EmbeddingStore,
    batch: &[usize],
    client_classes: &[usize],
    tau: f64,
) -> Result<(f64, PromptNetParams)> {
    let (x, labels) = batch_matrix(store, batch, client_classes, None)?;
    let tokens = store.stacked_tokens(client_classes)?;
    let (prompts, cache) = forward_with_cache(params, tokens.view())?;
    let enc = encode_classes(stub, store, &prompts, client_classes)?;
    let features = feature_matrix(&enc);
    let (loss, grad_scores) = softmax_ce(&x.dot(&features.t()), &labels, tau)?;
    let grad_features = grad_scores.t().dot(&x);
    let grad_prompts = prompt_gradient(stub, &enc, &grad_features, prompts.nrows());
    Ok((loss, prompt_net_backward(params, &cache, &grad_prompts)))
}

fn check_mix(mix: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::Argument(format!("mix must be in [0, 1], got {mix}")));
    }
    Ok(())
}

fn check_domain(bank: &PromptBank, domain_index: usize) -> Result<()> {
    if domain_index >= bank.num_domains() {
        return Err(Error::Argument(format!(
            "domain {domain_index} out of range for {} domain prompts",
            bank.num_domains()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn stage_b_loss(
    bank: &PromptBank,
    domain_index: usize,
    stub: &TextEncoderStub,
    store: &EmbeddingStore,
    batch: &[usize],
    client_classes: &[usize],
    tau: f64,
    mix: f64,
) -> Result<f64> {
    check_mix(mix)?;
    check_domain(bank, domain_index)?;
    let (x, labels) = batch_matrix(store, batch, client_classes, Some(domain_index))?;
    let global = feature_matrix(&encode_classes(stub, store, &bank.global_prompt, client_classes)?);
    let domain = feature_matrix(&encode_classes(
        stub,
        store,
        &bank.domain_prompts[domain_index],
        client_classes,
    )?);
    let scores = x.dot(&global.t()) * mix + x.dot(&domain.t()) * (1.0 - mix);
    softmax_ce(&scores, &labels, tau).map(|(l, _)| l)
}

/// Loss where each class score mixes the global-prompt and domain-prompt
/// similarities, with exact gradients for both prompts.
#[allow(clippy::too_many_arguments)]
pub fn stage_b_loss_and_grad(
    bank: &PromptBank,
    domain_index: usize,
    stub: &TextEncoderStub,
    store: &EmbeddingStore,
    batch: &[usize],
    client_classes: &[usize],
    tau: f64,
    mix: f64,
) -> Result<StageBGrad> {
    check_mix(mix)?;
    check_domain(bank, domain_index)?;
    let (x, labels) = batch_matrix(store, batch, client_classes, Some(domain_index))?;
    let domain_prompt = &bank.domain_prompts[domain_index];
    let enc_global = encode_classes(stub, store, &bank.global_prompt, client_classes)?;
    let enc_domain = encode_classes(stub, store, domain_prompt, client_classes)?;
    let global = feature_matrix(&enc_global);
    let domain = feature_matrix(&enc_domain);
    let scores = x.dot(&global.t()) * mix + x.dot(&domain.t()) * (1.0 - mix);
    let (loss, grad_scores) = softmax_ce(&scores, &labels, tau)?;
    let grad_features = grad_scores.t().dot(&x);
    let grad_global = prompt_gradient(
        stub,
        &enc_global,
        &(&grad_features * mix),
        bank.global_prompt.nrows(),
    );
    let grad_domain = prompt_gradient(
        stub,
        &enc_domain,
        &(&grad_features * (1.0 - mix)),
        domain_prompt.nrows(),
    );
    Ok(StageBGrad {
        loss,
        grad_global,
        grad_domain,
    })
}
