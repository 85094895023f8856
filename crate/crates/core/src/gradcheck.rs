//! Central finite-difference verification of the analytic stage gradients.

use ndarray::Array2;
use serde::Serialize;

use crate::error::Result;
use crate::math::{gaussian_matrix, gaussian_vector, seeded_rng};
use crate::prompt::{
    stage_a_loss, stage_a_loss_and_grad, stage_b_loss, stage_b_loss_and_grad, NetShape, PromptBank,
    PromptNetParams, TextEncoderStub,
};
use crate::store::{generate_synthetic, EmbeddingStore, SyntheticSpec};

pub const FD_EPSILON: f64 = 1e-6;
pub const MAX_RELATIVE_ERROR: f64 = 1e-5;

/// A randomized problem: `d_h = 8`, two heads, three classes, two images.
pub struct GradcheckInstance {
    pub store: EmbeddingStore,
    pub stub: TextEncoderStub,
    pub net: PromptNetParams,
    pub bank: PromptBank,
    pub batch: Vec<usize>,
    pub classes: Vec<usize>,
    pub tau: f64,
    pub mix: f64,
}

impl GradcheckInstance {
    pub fn random(seed: u64) -> Result<Self> {
        let store = generate_synthetic(&SyntheticSpec {
            num_domains: 1,
            num_classes: 3,
            dim: 5,
            token_dim: 6,
            images_per_class_per_domain: 1,
            domain_shift: 0.5,
            noise: 0.3,
            seed,
        })?;
        let stub = TextEncoderStub::new(6, 5, seed.wrapping_add(1))?;
        let shape = NetShape {
            prompt_len: 2,
            hidden: 8,
            heads: 2,
            token_dim: 6,
        };
        // Unit-scale weights keep every gradient well above finite-difference
        // round-off.
        let mut rng = seeded_rng(seed, &[0x6c]);
        let mut net = PromptNetParams::init(shape, seed)?;
        let noise = gaussian_vector(net.num_values(), 0.5, &mut rng);
        for (v, n) in net.values_mut().zip(noise.iter()) {
            *v = *n;
        }
        let bank = PromptBank {
            global_prompt: gaussian_matrix(2, 6, 0.5, &mut rng),
            domain_prompts: vec![gaussian_matrix(3, 6, 0.5, &mut rng)],
            prompt_history: vec![Vec::new()],
        };
        Ok(Self {
            store,
            stub,
            net,
            bank,
            batch: vec![0, 2],
            classes: vec![0, 1, 2],
            tau: 0.5,
            mix: 0.5,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub seed: u64,
    pub stage_a_max_rel: f64,
    pub stage_b_max_rel: f64,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.stage_a_max_rel <= MAX_RELATIVE_ERROR && self.stage_b_max_rel <= MAX_RELATIVE_ERROR
    }
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)` for one parameter tensor.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn central_difference(mut loss_at: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((loss_at(FD_EPSILON)? - loss_at(-FD_EPSILON)?) / (2.0 * FD_EPSILON))
}

/// Number of values in each prompt-network field, in `values()` order.
fn field_sizes(p: &PromptNetParams) -> [usize; 8] {
    [
        p.query.len(),
        p.w_k.len(),
        p.w_v.len(),
        p.w_o.len(),
        p.mlp_w1.len(),
        p.mlp_b1.len(),
        p.mlp_w2.len(),
        p.mlp_b2.len(),
    ]
}

pub fn check_stage_a(inst: &GradcheckInstance, corrupt: bool) -> Result<f64> {
    let (_, grad) = stage_a_loss_and_grad(
        &inst.net,
        &inst.stub,
        &inst.store,
        &inst.batch,
        &inst.classes,
        inst.tau,
    )?;
    let mut analytic: Vec<f64> = grad.values().collect();
    if corrupt {
        analytic[0] += 1e-3;
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..analytic.len() {
        numeric.push(central_difference(|h| {
            let mut p = inst.net.clone();
            *p.values_mut().nth(i).expect("index in range") += h;
            stage_a_loss(&p, &inst.stub, &inst.store, &inst.batch, &inst.classes, inst.tau)
        })?);
    }
    let mut worst = 0.0f64;
    let mut offset = 0;
    for n in field_sizes(&inst.net) {
        worst = worst.max(relative_error(
            &analytic[offset..offset + n],
            &numeric[offset..offset + n],
        ));
        offset += n;
    }
    Ok(worst)
}

pub fn check_stage_b(inst: &GradcheckInstance, corrupt: bool) -> Result<f64> {
    let loss = |bank: &PromptBank| {
        stage_b_loss(
            bank,
            0,
            &inst.stub,
            &inst.store,
            &inst.batch,
            &inst.classes,
            inst.tau,
            inst.mix,
        )
    };
    let g = stage_b_loss_and_grad(
        &inst.bank,
        0,
        &inst.stub,
        &inst.store,
        &inst.batch,
        &inst.classes,
        inst.tau,
        inst.mix,
    )?;
    let mut grad_global = g.grad_global;
    if corrupt {
        grad_global[[0, 0]] += 1e-3;
    }
    let numeric_for = |select: fn(&mut PromptBank) -> &mut Array2<f64>| -> Result<Vec<f64>> {
        let len = select(&mut inst.bank.clone()).len();
        (0..len)
            .map(|i| {
                central_difference(|h| {
                    let mut b = inst.bank.clone();
                    *select(&mut b).iter_mut().nth(i).expect("index in range") += h;
                    loss(&b)
                })
            })
            .collect()
    };
    let num_global = numeric_for(|b| &mut b.global_prompt)?;
    let num_domain = numeric_for(|b| &mut b.domain_prompts[0])?;
    let a_global: Vec<f64> = grad_global.iter().copied().collect();
    let a_domain: Vec<f64> = g.grad_domain.iter().copied().collect();
    Ok(relative_error(&a_global, &num_global).max(relative_error(&a_domain, &num_domain)))
}

pub fn run_gradcheck(seed: u64, corrupt: bool) -> Result<GradcheckResult> {
    let inst = GradcheckInstance::random(seed)?;
    Ok(GradcheckResult {
        seed,
        stage_a_max_rel: check_stage_a(&inst, corrupt)?,
        stage_b_max_rel: check_stage_b(&inst, corrupt)?,
    })
}
