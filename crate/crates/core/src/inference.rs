//! Domain-guided aggregation inference and its ablation baselines.
//!
//! Each domain group's network produces prompts for the target classes; every
//! path (one per domain plus the global prompt) scores the image against its
//! own class features, and the per-path score vectors are mixed by weights
//! before a temperature softmax.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{l2_norm, softmax_scaled};
use crate::prompt::{prompt_net_forward, softmax_probs, PromptBank, PromptNetParams, TextEncoderStub};
use crate::store::EmbeddingStore;

pub const UNCERTAINTY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceModel {
    pub group_nets: BTreeMap<usize, PromptNetParams>,
    pub bank: PromptBank,
    pub stub: TextEncoderStub,
    /// Classification temperature.
    pub tau: f64,
    /// Domain-weight temperature.
    pub tau_w: f64,
    /// If set, the global path gets this fixed weight and the domain weights
    /// are rescaled to sum to `1 − w_g`.
    pub fixed_global_weight: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    DomainGuided,
    Average,
    Uncertainty,
}

impl Aggregator {
    pub const ALL: [Aggregator; 3] = [
        Aggregator::DomainGuided,
        Aggregator::Average,
        Aggregator::Uncertainty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::DomainGuided => "domain_guided",
            Aggregator::Average => "average",
            Aggregator::Uncertainty => "uncertainty",
        }
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregator::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown aggregator {s:?}; expected domain_guided, average or uncertainty"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionReport {
    pub probs: Array1<f64>,
    /// `(w_1..w_M, w_g)`
    pub domain_weights: Array1<f64>,
    pub predicted: usize,
    /// Weighted similarity mixture before the softmax.
    pub mixed_scores: Array1<f64>,
}

/// Text features for one target class set, precomputed once per evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    /// `[n × dim]` per domain, in ascending domain order.
    pub per_domain: Vec<Array2<f64>>,
    /// `[n × dim]` from the global prompt.
    pub global: Array2<f64>,
    /// `[(M + 1) × dim]` domain probes (domain prompts, then global prompt)
    /// encoded with the mean class block.
    pub probes: Array2<f64>,
}

impl TextFeatures {
    pub fn num_paths(&self) -> usize {
        self.per_domain.len() + 1
    }

    pub fn num_classes(&self) -> usize {
        self.global.nrows()
    }

    /// Similarity vectors of one image for every path (domains, then global).
    pub fn path_scores(&self, image_emb: ArrayView1<f64>) -> Result<Vec<Array1<f64>>> {
        check_image(image_emb, self.global.ncols())?;
        Ok(self
            .per_domain
            .iter()
            .chain(std::iter::once(&self.global))
            .map(|z| z.dot(&image_emb))
            .collect())
    }
}

fn check_image(image_emb: ArrayView1<f64>, dim: usize) -> Result<()> {
    if image_emb.len() != dim {
        return Err(Error::Shape(format!(
            "image dimension {} vs text dimension {dim}",
            image_emb.len()
        )));
    }
    let n = l2_norm(image_emb);
    if (n - 1.0).abs() > 1e-4 {
        return Err(Error::Contract(format!(
            "image embedding has norm {n}, expected 1"
        )));
    }
    Ok(())
}

fn stack_rows(rows: Vec<Array1<f64>>) -> Array2<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("rows share width")
}

impl InferenceModel {
    pub fn validate(&self) -> Result<()> {
        let keys: Vec<usize> = self.group_nets.keys().copied().collect();
        let expect: Vec<usize> = (0..self.bank.num_domains()).collect();
        if keys != expect {
            return Err(Error::Argument(format!(
                "group networks {keys:?} do not match {} domain prompts",
                self.bank.num_domains()
            )));
        }
        if !(self.tau > 0.0) || !(self.tau_w > 0.0) {
            return Err(Error::Argument("temperatures must be positive".into()));
        }
        if let Some(w) = self.fixed_global_weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Argument(format!("fixed global weight {w} not in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Per-domain and global class features for the given class token blocks.
    /// The classes need not have appeared in any training partition.
    pub fn build_text_features(&self, class_tokens: &[Array2<f64>]) -> Result<TextFeatures> {
        self.validate()?;
        if class_tokens.is_empty() {
            return Err(Error::Argument("no target classes".into()));
        }
        let td = self.stub.token_dim();
        let len = class_tokens[0].nrows();
        if let Some(bad) = class_tokens.iter().find(|b| b.ncols() != td || b.nrows() != len) {
            return Err(Error::Argument(format!(
                "class token block {:?} does not match ({len}, {td})",
                bad.dim()
            )));
        }
        let views: Vec<_> = class_tokens.iter().map(|b| b.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views).expect("blocks share width");
        let encode_all = |prompt: &Array2<f64>| -> Result<Array2<f64>> {
            let rows = class_tokens
                .iter()
                .map(|block| self.stub.encode(prompt.view(), block.view()))
                .collect::<Result<Vec<_>>>()?;
            Ok(stack_rows(rows))
        };
        let per_domain = self
            .group_nets
            .values()
            .map(|net| encode_all(&prompt_net_forward(net, stacked.view())?))
            .collect::<Result<Vec<_>>>()?;
        let global = encode_all(&self.bank.global_prompt)?;

        let mut mean_block = Array2::<f64>::zeros((len, td));
        for block in class_tokens {
            mean_block += block;
        }
        mean_block /= class_tokens.len() as f64;
        let probes = self
            .bank
            .domain_prompts
            .iter()
            .chain(std::iter::once(&self.bank.global_prompt))
            .map(|p| self.stub.encode(p.view(), mean_block.view()))
            .collect::<Result<Vec<_>>>()?;
        Ok(TextFeatures {
            per_domain,
            global,
            probes: stack_rows(probes),
        })
    }

    /// Softmax at `tau_w` over the image's similarity to each domain probe and
    /// the global probe.
    pub fn domain_weights(&self, features: &TextFeatures, image_emb: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_image(image_emb, features.probes.ncols())?;
        let scores = features.probes.dot(&image_emb);
        Ok(self.weights_from_probe_scores(scores.view()))
    }

    pub fn weights_from_probe_scores(&self, scores: ArrayView1<f64>) -> Array1<f64> {
        match self.fixed_global_weight {
            None => softmax_scaled(scores, self.tau_w),
            Some(w_g) => {
                let m = scores.len() - 1;
                let mut out = Array1::zeros(m + 1);
                let domain = softmax_scaled(scores.slice(ndarray::s![..m]), self.tau_w);
                out.slice_mut(ndarray::s![..m]).assign(&(domain * (1.0 - w_g)));
                out[m] = w_g;
                out
            }
        }
    }

    /// Mixes per-path similarity vectors with the given weights, then applies
    /// the classification softmax.
    pub fn predict_with_weights(
        &self,
        features: &TextFeatures,
        image_emb: ArrayView1<f64>,
        weights: Array1<f64>,
    ) -> Result<PredictionReport> {
        let paths = features.path_scores(image_emb)?;
        if weights.len() != paths.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} paths",
                weights.len(),
                paths.len()
            )));
        }
        let mut mixed = Array1::<f64>::zeros(features.num_classes());
        for (w, s) in weights.iter().zip(&paths) {
            mixed.scaled_add(*w, s);
        }
        let probs = softmax_probs(mixed.view(), self.tau)?;
        Ok(PredictionReport {
            predicted: argmax(probs.view()),
            probs,
            domain_weights: weights,
            mixed_scores: mixed,
        })
    }

    pub fn predict_domain_guided(
        &self,
        features: &TextFeatures,
        image_emb: ArrayView1<f64>,
    ) -> Result<PredictionReport> {
        let weights = self.domain_weights(features, image_emb)?;
        self.predict_with_weights(features, image_emb, weights)
    }

    pub fn predict_average(
        &self,
        features: &TextFeatures,
        image_emb: ArrayView1<f64>,
    ) -> Result<PredictionReport> {
        let n = features.num_paths();
        self.predict_with_weights(features, image_emb, Array1::from_elem(n, 1.0 / n as f64))
    }

    /// Inverse-entropy weighting of the paths' own class distributions.
    pub fn predict_uncertainty(
        &self,
        features: &TextFeatures,
        image_emb: ArrayView1<f64>,
    ) -> Result<PredictionReport> {
        let paths = features.path_scores(image_emb)?;
        let mut weights = Array1::zeros(paths.len());
        for (w, s) in weights.iter_mut().zip(&paths) {
            *w = 1.0 / (entropy(softmax_probs(s.view(), self.tau)?.view()) + UNCERTAINTY_EPS);
        }
        let total = weights.sum();
        weights /= total;
        self.predict_with_weights(features, image_emb, weights)
    }

    pub fn predict(
        &self,
        aggregator: Aggregator,
        features: &TextFeatures,
        image_emb: ArrayView1<f64>,
    ) -> Result<PredictionReport> {
        match aggregator {
            Aggregator::DomainGuided => self.predict_domain_guided(features, image_emb),
            Aggregator::Average => self.predict_average(features, image_emb),
            Aggregator::Uncertainty => self.predict_uncertainty(features, image_emb),
        }
    }
}

pub fn entropy(probs: ArrayView1<f64>) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub aggregator: Aggregator,
    /// Accuracy per evaluation domain that has at least one sample.
    pub per_domain: BTreeMap<String, f64>,
    /// Macro average over `per_domain`.
    pub average: f64,
    pub n_samples: usize,
}

impl EvalResults {
    /// Fixed-width table: one column per domain, then the average.
    pub fn to_table(&self, domain_order: &[String]) -> String {
        let cols: Vec<&String> = domain_order
            .iter()
            .filter(|d| self.per_domain.contains_key(*d))
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "Method");
        for d in &cols {
            let _ = write!(out, "{:>12}", truncate(d, 11));
        }
        let _ = writeln!(out, "{:>12}", "Average");
        let _ = write!(out, "{:<16}", self.aggregator.name());
        for d in &cols {
            let _ = write!(out, "{:>12.2}", 100.0 * self.per_domain[*d]);
        }
        let _ = writeln!(out, "{:>12.2}", 100.0 * self.average);
        out
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Accuracy over the store's images whose class is in `target_classes`,
/// predicting among those classes only.
pub fn evaluate(
    model: &InferenceModel,
    store: &EmbeddingStore,
    aggregator: Aggregator,
    target_classes: &[usize],
) -> Result<EvalResults> {
    if target_classes.is_empty() {
        return Err(Error::Argument("no target classes".into()));
    }
    let blocks = target_classes
        .iter()
        .map(|&c| {
            store
                .class_tokens
                .get(c)
                .cloned()
                .ok_or_else(|| Error::Argument(format!("unknown class index {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let features = model.build_text_features(&blocks)?;
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for img in &store.images {
        let Some(truth) = target_classes.iter().position(|&c| c == img.class_index) else {
            continue;
        };
        let report = model.predict(aggregator, &features, img.embedding.view())?;
        let entry = counts.entry(img.domain_index).or_default();
        entry.0 += usize::from(report.predicted == truth);
        entry.1 += 1;
    }
    if counts.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let per_domain: BTreeMap<String, f64> = counts
        .iter()
        .map(|(&d, &(hit, n))| (store.domains[d].clone(), hit as f64 / n as f64))
        .collect();
    let average = per_domain.values().sum::<f64>() / per_domain.len() as f64;
    Ok(EvalResults {
        aggregator,
        per_domain,
        average,
        n_samples: counts.values().map(|c| c.1).sum(),
    })
}
