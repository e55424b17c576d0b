//! Training objective: task loss with optional distillation, normalized cost
//! penalties and squared-ReLU retention quotas.

use serde::{Deserialize, Serialize};

use crate::cost::{expected_cost_terms, CostConstants};
use crate::error::{Error, Result};
use crate::gating::GateValues;
use crate::model::ModelConfig;
use crate::tensor::{Graph, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyConfig {
    pub lambda_macro: f64,
    pub lambda_micro: f64,
    pub beta_head: f64,
    pub beta_dim: f64,
    pub beta_ffn: f64,
    /// Minimum soft head count per layer.
    pub k_min: f64,
    /// Minimum surviving fraction of value dimensions per head.
    pub gamma_attn: f64,
    /// Minimum surviving fraction of neurons per FFN.
    pub gamma_ffn: f64,
    pub alpha_kd: f64,
    pub t_kd: f64,
    pub quota_source: QuotaSource,
}

/// Which gate values the retention quotas count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuotaSource {
    /// `σ(α)`: deterministic soft counts.
    Probabilities,
    /// The gates drawn for the forward pass of the step.
    Samples,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda_macro: 0.0,
            lambda_micro: 0.0,
            beta_head: 10.0,
            beta_dim: 10.0,
            beta_ffn: 10.0,
            k_min: 1.0,
            gamma_attn: 0.25,
            gamma_ffn: 0.25,
            alpha_kd: 0.7,
            t_kd: 4.0,
            quota_source: QuotaSource::Probabilities,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let nonneg = [
            ("lambda_macro", self.lambda_macro),
            ("lambda_micro", self.lambda_micro),
            ("beta_head", self.beta_head),
            ("beta_dim", self.beta_dim),
            ("beta_ffn", self.beta_ffn),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be a finite non-negative number, got {v}")));
            }
        }
        if !(0.0..=model.heads as f64).contains(&self.k_min) {
            return Err(Error::invalid("k_min", format!("must lie in [0, {}]", model.heads)));
        }
        for (name, v) in [("gamma_attn", self.gamma_attn), ("gamma_ffn", self.gamma_ffn), ("alpha_kd", self.alpha_kd)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(self.t_kd > 0.0 && self.t_kd.is_finite()) {
            return Err(Error::invalid("t_kd", "must be positive"));
        }
        Ok(())
    }
}

fn softmax_rows(logits: &[f64], classes: usize, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / t));
        let e: Vec<f64> = row.iter().map(|&v| (v / t - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Cross-entropy, blended with temperature-scaled distillation when teacher
/// logits are given.
///
/// With a teacher the loss is `(1 - α)·CE + α·T²·KL(p_teacher ‖ p_student)`,
/// both distributions softened by `T`.
pub fn task_loss<T: Scalar>(
    g: &mut Graph<T>,
    student: Var,
    labels: &[usize],
    teacher: Option<&[f64]>,
    cfg: &PenaltyConfig,
) -> Result<Var> {
    let logp = g.log_softmax(student)?;
    let ce = g.nll(logp, labels)?;
    let Some(teacher) = teacher else { return Ok(ce) };
    let shape = g.shape(student).to_vec();
    if teacher.len() != g.value(student).len() {
        return Err(Error::Shape {
            op: "task_loss",
            lhs: shape,
            rhs: vec![teacher.len()],
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    let t = cfg.t_kd;
    let pt = softmax_rows(teacher, classes, t);
    let self_term: f64 = pt.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();

    let soft = g.scale(student, 1.0 / t);
    let log_ps = g.log_softmax(soft)?;
    let pt = g.constant_from(shape, pt.into_iter().map(T::from_f64).collect())?;
    let cross = g.mul(pt, log_ps)?;
    let cross = g.sum(cross);
    // KL = (Σ p_t ln p_t - Σ p_t ln p_s) / B
    let kl = g.scale(cross, -1.0 / batch as f64);
    let kl = g.add_scalar(kl, self_term / batch as f64);

    let a = cfg.alpha_kd;
    let ce = g.scale(ce, 1.0 - a);
    let kd = g.scale(kl, a * t * t);
    g.add(ce, kd)
}

/// `(L_macro, L_micro)`: head cost and dimension+neuron cost, each divided
/// by the dense prunable total.
pub fn cost_penalties<T: Scalar>(g: &mut Graph<T>, probs: &GateValues, k: &CostConstants) -> Result<(Var, Var)> {
    let terms = expected_cost_terms(g, probs, k)?;
    let norm = 1.0 / k.dense_prunable_total as f64;
    let macro_ = g.scale(terms.heads, norm);
    let micro = g.add(terms.dims, terms.neurons)?;
    let micro = g.scale(micro, norm);
    Ok((macro_, micro))
}

#[derive(Clone, Copy, Debug)]
pub struct FeasibilityTerms {
    pub head: Var,
    pub dim: Var,
    pub ffn: Var,
    /// `β_head·head + β_dim·dim + β_ffn·ffn`.
    pub total: Var,
}

/// `Σ ReLU(quota - Σ p)²` over the last axis of `p`.
fn quota<T: Scalar>(g: &mut Graph<T>, p: Var, quota: f64) -> Result<Var> {
    let count = g.sum_last(p)?;
    let neg = g.scale(count, -1.0);
    let short = g.add_scalar(neg, quota);
    let short = g.relu(short);
    let sq = g.mul(short, short)?;
    Ok(g.sum(sq))
}

/// Retention quotas on gate probabilities.
pub fn feasibility_penalty<T: Scalar>(
    g: &mut Graph<T>,
    probs: &GateValues,
    cfg: &PenaltyConfig,
    model: &ModelConfig,
) -> Result<FeasibilityTerms> {
    let head = quota(g, probs.head, cfg.k_min)?;
    let dim = quota(g, probs.dim, cfg.gamma_attn * model.head_dim as f64)?;
    let ffn = quota(g, probs.neuron, cfg.gamma_ffn * model.ffn_dim as f64)?;
    let a = g.scale(head, cfg.beta_head);
    let b = g.scale(dim, cfg.beta_dim);
    let c = g.scale(ffn, cfg.beta_ffn);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(FeasibilityTerms { head, dim, ffn, total })
}

/// The scalar terms that make up the total loss.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub task: Var,
    pub macro_cost: Var,
    pub micro_cost: Var,
    pub feasibility: Var,
}

/// `task + λ_macro·L_macro + λ_micro·L_micro + L_feas`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, parts: &LossParts, cfg: &PenaltyConfig) -> Result<Var> {
    let named = [
        ("task loss", parts.task),
        ("L_macro", parts.macro_cost),
        ("L_micro", parts.micro_cost),
        ("L_feasibility", parts.feasibility),
    ];
    for (name, v) in named {
        if !g.item(v).is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
    }
    let m = g.scale(parts.macro_cost, cfg.lambda_macro);
    let u = g.scale(parts.micro_cost, cfg.lambda_micro);
    let s = g.add(parts.task, m)?;
    let s = g.add(s, u)?;
    g.add(s, parts.feasibility)
}
