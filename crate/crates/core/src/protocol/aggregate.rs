//! Server-side aggregation rules. Every rule sorts its inputs by client id
//! before summing, so results do not depend on arrival order.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use super::client::ClientUpdate;
use crate::error::{Error, Result};
use crate::prompt::PromptNetParams;

/// Shape parameters of the Beta density that weights prompt history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub a: f64,
    pub b: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self { a: 2.0, b: 2.0 }
    }
}

impl BetaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0) || !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::Argument(format!(
                "beta shape parameters must be positive, got a={} b={}",
                self.a, self.b
            )));
        }
        Ok(())
    }

    pub fn pdf(&self, x: f64) -> f64 {
        ((self.a - 1.0) * x.ln() + (self.b - 1.0) * (1.0 - x).ln() - ln_beta(self.a, self.b)).exp()
    }
}

fn sorted_by_client(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if let Some(w) = sorted.windows(2).find(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Protocol(format!(
            "client {} submitted more than one update",
            w[0].client_id
        )));
    }
    Ok(sorted)
}

fn single_domain(updates: &[&ClientUpdate]) -> Result<usize> {
    let domain = updates[0].domain_index;
    if let Some(u) = updates.iter().find(|u| u.domain_index != domain) {
        return Err(Error::Protocol(format!(
            "updates mix domains {domain} and {} (client {})",
            u.domain_index, u.client_id
        )));
    }
    Ok(domain)
}

/// `current + mean(net deltas)` over one domain group.
pub fn aggregate_group_nets(updates: &[ClientUpdate], current: &PromptNetParams) -> Result<PromptNetParams> {
    if updates.is_empty() {
        return Err(Error::Argument("no updates to aggregate".into()));
    }
    let sorted = sorted_by_client(updates)?;
    single_domain(&sorted)?;
    let mut sum = current.zeros_like();
    for u in &sorted {
        let delta = u
            .net_delta
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("client {} sent no network delta", u.client_id)))?;
        sum.scaled_add(1.0, delta)?;
    }
    let mut out = current.clone();
    out.scaled_add(1.0 / sorted.len() as f64, &sum)?;
    Ok(out)
}

/// Dataset-size weighted update of one domain prompt:
/// `v + Σ|D_i|·Δ_i / Σ|D_i|`.
pub fn domain_wise_aggregate(v: &Array2<f64>, updates: &[ClientUpdate]) -> Result<Array2<f64>> {
    if updates.is_empty() {
        return Err(Error::Argument("no updates to aggregate".into()));
    }
    let sorted = sorted_by_client(updates)?;
    single_domain(&sorted)?;
    let mut weighted = Array2::<f64>::zeros(v.raw_dim());
    let mut total = 0.0;
    for u in &sorted {
        let delta = u
            .domain_prompt_delta
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("client {} sent no domain prompt delta", u.client_id)))?;
        if delta.dim() != v.dim() {
            return Err(Error::Shape(format!(
                "client {} delta {:?} vs prompt {:?}",
                u.client_id,
                delta.dim(),
                v.dim()
            )));
        }
        weighted.scaled_add(u.size as f64, delta);
        total += u.size as f64;
    }
    if !(total > 0.0) {
        return Err(Error::Argument("total dataset size is zero".into()));
    }
    Ok(v + &(weighted / total))
}

/// `v + mean(global deltas)` across every participating client.
pub fn aggregate_global_prompt(v: &Array2<f64>, updates: &[ClientUpdate]) -> Result<Array2<f64>> {
    if updates.is_empty() {
        return Err(Error::Argument("no updates to aggregate".into()));
    }
    let sorted = sorted_by_client(updates)?;
    let mut sum = Array2::<f64>::zeros(v.raw_dim());
    for u in &sorted {
        let delta = u
            .global_prompt_delta
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("client {} sent no global prompt delta", u.client_id)))?;
        if delta.dim() != v.dim() {
            return Err(Error::Shape(format!(
                "client {} delta {:?} vs prompt {:?}",
                u.client_id,
                delta.dim(),
                v.dim()
            )));
        }
        sum += delta;
    }
    Ok(v + &(sum / sorted.len() as f64))
}

/// Beta density evaluated at the interior points `(j+1)/(s+2)`, `j = 0..=s`.
pub fn beta_alphas(schedule: &BetaSchedule, s: usize) -> Result<Vec<f64>> {
    schedule.validate()?;
    let denom = (s + 2) as f64;
    let alphas: Vec<f64> = (0..=s).map(|j| schedule.pdf((j + 1) as f64 / denom)).collect();
    if let Some(bad) = alphas.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
        return Err(Error::Argument(format!(
            "beta weight {bad} is not positive and finite"
        )));
    }
    Ok(alphas)
}

/// Momentum over the aggregated prompt history.
///
/// Literal form: `Σ_j α_j V^j / Σ_j α_j + α_s V^{s+1}`.
/// Normalized form: `(Σ_j α_j V^j + α_s V^{s+1}) / (Σ_j α_j + α_s)`.
pub fn beta_momentum_average(
    history: &[Array2<f64>],
    alphas: &[f64],
    v_new: &Array2<f64>,
    normalized: bool,
) -> Result<Array2<f64>> {
    if history.is_empty() {
        return Err(Error::Argument("prompt history is empty".into()));
    }
    if history.len() != alphas.len() {
        return Err(Error::Argument(format!(
            "{} history entries but {} weights",
            history.len(),
            alphas.len()
        )));
    }
    if let Some(h) = history.iter().find(|h| h.dim() != v_new.dim()) {
        return Err(Error::Argument(format!(
            "history entry {:?} vs new prompt {:?}",
            h.dim(),
            v_new.dim()
        )));
    }
    let mut weighted = Array2::<f64>::zeros(v_new.raw_dim());
    for (h, &a) in history.iter().zip(alphas) {
        weighted.scaled_add(a, h);
    }
    let alpha_sum: f64 = alphas.iter().sum();
    let alpha_last = *alphas.last().expect("non-empty");
    if normalized {
        weighted.scaled_add(alpha_last, v_new);
        Ok(weighted / (alpha_sum + alpha_last))
    } else {
        Ok(weighted / alpha_sum + &(v_new * alpha_last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn domain_update(id: usize, size: usize, delta: Array2<f64>) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            domain_index: 0,
            net_delta: None,
            domain_prompt_delta: Some(delta),
            global_prompt_delta: None,
            size,
            local_loss: 0.0,
        }
    }

    #[test]
    fn single_client_reduces_to_v_plus_delta() {
        let v = array![[1.0, 2.0]];
        let out = domain_wise_aggregate(&v, &[domain_update(0, 4, array![[0.5, -0.5]])]).unwrap();
        assert_eq!(out, array![[1.5, 1.5]]);
    }

    #[test]
    fn size_weighted_mean() {
        let v = array![[0.0, 0.0]];
        let ups = [
            domain_update(0, 1, array![[1.0, 0.0]]),
            domain_update(1, 3, array![[0.0, 1.0]]),
        ];
        assert_eq!(domain_wise_aggregate(&v, &ups).unwrap(), array![[0.25, 0.75]]);
    }

    #[test]
    fn zero_deltas_leave_prompt_unchanged() {
        let v = array![[0.3, -7.25]];
        let ups = [
            domain_update(2, 5, Array2::zeros((1, 2))),
            domain_update(1, 3, Array2::zeros((1, 2))),
        ];
        assert_eq!(domain_wise_aggregate(&v, &ups).unwrap(), v);
    }

    #[test]
    fn empty_and_mixed_inputs_rejected() {
        let v = array![[0.0]];
        assert!(matches!(domain_wise_aggregate(&v, &[]), Err(Error::Argument(_))));
        let mut other = domain_update(1, 1, array![[1.0]]);
        other.domain_index = 1;
        let ups = [domain_update(0, 1, array![[1.0]]), other];
        assert!(matches!(domain_wise_aggregate(&v, &ups), Err(Error::Protocol(_))));
    }

    #[test]
    fn uniform_beta_gives_unit_weights() {
        let alphas = beta_alphas(&BetaSchedule { a: 1.0, b: 1.0 }, 5).unwrap();
        assert_eq!(alphas.len(), 6);
        for a in alphas {
            assert!((a - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_two_two_closed_form() {
        let alphas = beta_alphas(&BetaSchedule::default(), 1).unwrap();
        // 6·x·(1−x) at x = 1/3 and 2/3
        for a in &alphas {
            assert!((a - 4.0 / 3.0).abs() < 1e-12);
        }
        let single = beta_alphas(&BetaSchedule { a: 0.5, b: 3.0 }, 0).unwrap();
        assert_eq!(single.len(), 1);
        assert!(single[0] > 0.0);
    }

    #[test]
    fn invalid_beta_rejected() {
        assert!(beta_alphas(&BetaSchedule { a: 0.0, b: 1.0 }, 2).is_err());
    }

    #[test]
    fn momentum_worked_examples() {
        let out = beta_momentum_average(&[array![[0.0]]], &[1.0], &array![[5.0]], false).unwrap();
        assert_eq!(out, array![[5.0]]);
        let out = beta_momentum_average(
            &[array![[1.0]], array![[3.0]]],
            &[1.0, 1.0],
            &array![[2.0]],
            false,
        )
        .unwrap();
        assert_eq!(out, array![[4.0]]);
    }

    #[test]
    fn normalized_momentum_fixes_constant_inputs() {
        let v = array![[0.7, -1.5]];
        let history = vec![v.clone(); 4];
        let alphas = beta_alphas(&BetaSchedule::default(), 3).unwrap();
        let out = beta_momentum_average(&history, &alphas, &v, true).unwrap();
        for (a, b) in out.iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_rejects_length_mismatch() {
        let h = [array![[1.0]]];
        assert!(beta_momentum_average(&h, &[1.0, 2.0], &array![[1.0]], false).is_err());
        assert!(beta_momentum_average(&[], &[], &array![[1.0]], false).is_err());
    }
}
