//! Prunable-compute accounting.
//!
//! Cost is expressed through three per-unit constants. Every live head pays
//! `C1` (Q/K/V projections and the attention map), every live value
//! dimension under a live head pays `C2`, every live FFN neuron inside a live
//! block pays `C3`. All values are "formula units": the factor 2 of each term
//! is kept, so they read like FLOPs; halving gives multiply-accumulates.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gating::{ArchitectureMask, BankVars, GateBank, GateValues, SeededRng};
use crate::model::ModelConfig;
use crate::tensor::{Graph, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostConstants {
    pub c1: u64,
    pub c2: u64,
    pub c3: u64,
    /// Patch embedding, layer norms and classifier; never prunable.
    pub c_const: u64,
    pub dense_prunable_total: u64,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
}

/// `(C1, C2, C3)` for sequence length `n`, width `d` and head dim `dh`.
pub fn unit_costs(n: u64, d: u64, dh: u64) -> (u64, u64, u64) {
    let c1 = 2 * n * d * (3 * dh) + 2 * n * n * dh;
    let c2 = 2 * n * d + 2 * n * n;
    let c3 = 4 * n * d;
    (c1, c2, c3)
}

pub fn cost_constants(cfg: &ModelConfig) -> CostConstants {
    let n = cfg.seq_len() as u64;
    let d = cfg.embed_dim as u64;
    let dh = cfg.head_dim as u64;
    let (l, h, f) = (cfg.layers as u64, cfg.heads as u64, cfg.ffn_dim as u64);
    let (c1, c2, c3) = unit_costs(n, d, dh);
    let patches = cfg.num_patches() as u64;
    let patch_embed = 2 * patches * cfg.patch_dim() as u64 * d;
    let norms = (2 * l + 1) * 2 * n * d;
    let classifier = 2 * d * cfg.num_classes as u64;
    CostConstants {
        c1,
        c2,
        c3,
        c_const: patch_embed + norms + classifier,
        dense_prunable_total: l * h * (c1 + dh * c2) + l * f * c3,
        layers: cfg.layers,
        heads: cfg.heads,
        head_dim: cfg.head_dim,
        ffn_dim: cfg.ffn_dim,
    }
}

impl CostConstants {
    /// Dense prunable total plus the static overhead.
    pub fn dense_total(&self) -> u64 {
        self.dense_prunable_total + self.c_const
    }
}

/// Expected cost split into the head term and the two micro terms.
#[derive(Clone, Copy, Debug)]
pub struct CostTerms {
    /// `C1 · Σ p_g`.
    pub heads: Var,
    /// `C2 · Σ p_g · p_d`.
    pub dims: Var,
    /// `C3 · Σ p_b · p_c`.
    pub neurons: Var,
}

impl CostTerms {
    pub fn total<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        let s = g.add(self.heads, self.dims)?;
        g.add(s, self.neurons)
    }
}

/// Expected cost terms from gate probabilities (or any values in `[0, 1]`).
pub fn expected_cost_terms<T: Scalar>(g: &mut Graph<T>, p: &GateValues, k: &CostConstants) -> Result<CostTerms> {
    let (l, h) = (k.layers, k.heads);
    let heads_sum = g.sum(p.head);
    let heads = g.scale(heads_sum, k.c1 as f64);

    let pg = g.reshape(p.head, [l, h, 1])?;
    let joint = g.mul(pg, p.dim)?;
    let dims_sum = g.sum(joint);
    let dims = g.scale(dims_sum, k.c2 as f64);

    let pb = g.reshape(p.block, [l, 1])?;
    let joint = g.mul(pb, p.neuron)?;
    let neurons_sum = g.sum(joint);
    let neurons = g.scale(neurons_sum, k.c3 as f64);
    Ok(CostTerms { heads, dims, neurons })
}

/// Differentiable expected prunable cost of a bound gate bank.
pub fn expected_cost<T: Scalar>(g: &mut Graph<T>, bank: &BankVars, k: &CostConstants) -> Result<Var> {
    let p = bank.probabilities(g);
    expected_cost_terms(g, &p, k)?.total(g)
}

/// Expected cost of a bank evaluated in `f64`, outside of training.
pub fn expected_cost_value<T: Scalar>(bank: &GateBank<T>, k: &CostConstants) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars = bank.cast::<f64>().bind(&mut g);
    let c = expected_cost(&mut g, &vars, k)?;
    Ok(g.item(c))
}

/// Discrete cost of one layer, counted unit by unit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub heads: u64,
    pub dims: u64,
    pub neurons: u64,
    pub cost: u64,
}

/// Per-layer unit counts and costs of a binary mask.
pub fn layer_counts(mask: &ArchitectureMask, k: &CostConstants) -> Vec<LayerCount> {
    let mut out = Vec::with_capacity(mask.layers);
    for l in 0..mask.layers {
        let mut c = LayerCount::default();
        for h in 0..mask.heads {
            if !mask.head[l * mask.heads + h] {
                continue;
            }
            c.heads += 1;
            c.cost += k.c1;
            for j in 0..mask.head_dim {
                if mask.dim[(l * mask.heads + h) * mask.head_dim + j] {
                    c.dims += 1;
                    c.cost += k.c2;
                }
            }
        }
        if mask.block[l] {
            for n in 0..mask.ffn_dim {
                if mask.neuron[l * mask.ffn_dim + n] {
                    c.neurons += 1;
                    c.cost += k.c3;
                }
            }
        }
        out.push(c);
    }
    out
}

/// Exact discrete prunable cost of a mask, by enumeration of live units.
pub fn oracle_count(mask: &ArchitectureMask, k: &CostConstants) -> u64 {
    layer_counts(mask, k).iter().map(|c| c.cost).sum()
}

/// How gate noise is shared inside one macro-structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCoupling {
    /// Every gate draws its own noise.
    Independent,
    /// A head and all its dimension gates share one draw, likewise a block
    /// and its neuron gates.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    pub samples: usize,
    /// Sample mean of the discrete cost.
    pub sample_mean: f64,
    /// `Σ w_i · mean(z_i)` over the same samples.
    pub linear_estimate: f64,
    /// `Σ w_i · E[z_i]` with exact joint-state probabilities for the sampler.
    pub analytic: f64,
    /// Cost assuming independent gates, `Σ w_i · Π σ(α)`.
    pub factorized: f64,
    pub abs_gap: f64,
    pub rel_gap: f64,
}

fn sigmoid(x: f64) -> f64 {
    crate::gating::gate_probability(x)
}

/// Compares the Monte-Carlo mean of the discrete cost with the linear
/// combination of joint-state expectations.
///
/// The gaps are measured between `sample_mean` and `analytic`.
pub fn monte_carlo_linearity_check<T: Scalar>(
    bank: &GateBank<T>,
    k: &CostConstants,
    samples: usize,
    rng: &mut SeededRng,
    coupling: NoiseCoupling,
) -> LinearityReport {
    let logits = |t: &crate::tensor::Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
    let (ag, ab, ad, ac) = (logits(&bank.head), logits(&bank.block), logits(&bank.dim), logits(&bank.neuron));
    let (layers, heads, dh, dffn) = (k.layers, k.heads, k.head_dim, k.ffn_dim);

    let mut mask = ArchitectureMask {
        layers,
        heads,
        head_dim: dh,
        ffn_dim: dffn,
        head: vec![false; ag.len()],
        block: vec![false; ab.len()],
        dim: vec![false; ad.len()],
        neuron: vec![false; ac.len()],
    };
    // joint-state hit counts
    let mut hits_head = vec![0u64; ag.len()];
    let mut hits_dim = vec![0u64; ad.len()];
    let mut hits_neuron = vec![0u64; ac.len()];
    let mut total = 0.0f64;
    for _ in 0..samples {
        for (i, a) in ag.iter().enumerate() {
            let eps = rng.logistic();
            mask.head[i] = a + eps > 0.0;
            for j in 0..dh {
                let e = if coupling == NoiseCoupling::Shared { eps } else { rng.logistic() };
                mask.dim[i * dh + j] = ad[i * dh + j] + e > 0.0;
            }
        }
        for (l, a) in ab.iter().enumerate() {
            let eps = rng.logistic();
            mask.block[l] = a + eps > 0.0;
            for n in 0..dffn {
                let e = if coupling == NoiseCoupling::Shared { eps } else { rng.logistic() };
                mask.neuron[l * dffn + n] = ac[l * dffn + n] + e > 0.0;
            }
        }
        total += oracle_count(&mask, k) as f64;
        for i in 0..ag.len() {
            if mask.head[i] {
                hits_head[i] += 1;
                for j in 0..dh {
                    hits_dim[i * dh + j] += u64::from(mask.dim[i * dh + j]);
                }
            }
        }
        for l in 0..ab.len() {
            if mask.block[l] {
                for n in 0..dffn {
                    hits_neuron[l * dffn + n] += u64::from(mask.neuron[l * dffn + n]);
                }
            }
        }
    }
    let s = samples.max(1) as f64;
    let sum_hits = |h: &[u64]| h.iter().sum::<u64>() as f64 / s;
    let linear_estimate =
        k.c1 as f64 * sum_hits(&hits_head) + k.c2 as f64 * sum_hits(&hits_dim) + k.c3 as f64 * sum_hits(&hits_neuron);

    // exact joint probabilities
    let joint = |outer: f64, inner: f64| match coupling {
        NoiseCoupling::Independent => sigmoid(outer) * sigmoid(inner),
        // both fire iff eps > -min(outer, inner)
        NoiseCoupling::Shared => sigmoid(outer.min(inner)),
    };
    let mut analytic = 0.0;
    let mut factorized = 0.0;
    for (i, &a) in ag.iter().enumerate() {
        analytic += k.c1 as f64 * sigmoid(a);
        factorized += k.c1 as f64 * sigmoid(a);
        for j in 0..dh {
            analytic += k.c2 as f64 * joint(a, ad[i * dh + j]);
            factorized += k.c2 as f64 * sigmoid(a) * sigmoid(ad[i * dh + j]);
        }
    }
    for (l, &a) in ab.iter().enumerate() {
        for n in 0..dffn {
            analytic += k.c3 as f64 * joint(a, ac[l * dffn + n]);
            factorized += k.c3 as f64 * sigmoid(a) * sigmoid(ac[l * dffn + n]);
        }
    }
    let sample_mean = total / s;
    let abs_gap = (sample_mean - analytic).abs();
    let rel_gap = if analytic > 0.0 { abs_gap / analytic } else { abs_gap };
    LinearityReport {
        samples,
        sample_mean,
        linear_estimate,
        analytic,
        factorized,
        abs_gap,
        rel_gap,
    }
}

/// Mean of the relaxed cost `Σ w_i ẑ_i` over `samples` noisy draws at `tau`,
/// and its gap to the discrete cost of `harden(bank, 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftHardGap {
    pub tau: f64,
    pub mean_soft_cost: f64,
    pub hard_cost: u64,
    pub gap: f64,
    /// `gap / dense_prunable_total`.
    pub gap_fraction: f64,
}

pub fn soft_hard_gap<T: Scalar>(
    bank: &GateBank<T>,
    k: &CostConstants,
    tau: f64,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<SoftHardGap> {
    let hard_cost = oracle_count(&crate::gating::harden(bank, 0.5)?, k);
    let mode = crate::gating::GateMode::Soft;
    let mut total = 0.0;
    for _ in 0..samples {
        let mut g = Graph::<f64>::new();
        let vars = bank.cast::<f64>().bind(&mut g);
        let s = vars.sample(&mut g, tau, rng, mode)?;
        let terms = expected_cost_terms(&mut g, &s.soft, k)?;
        let c = terms.total(&mut g)?;
        total += g.item(c);
    }
    let mean_soft_cost = total / samples.max(1) as f64;
    let gap = (mean_soft_cost - hard_cost as f64).abs();
    Ok(SoftHardGap {
        tau,
        mean_soft_cost,
        hard_cost,
        gap,
        gap_fraction: gap / k.dense_prunable_total as f64,
    })
}

/// Baseline mask at a target cost: every head and block kept, the same
/// fraction of value dimensions and FFN neurons kept in every head and
/// layer (the leading indices). If even zero width exceeds the target, heads
/// are removed uniformly from the back of each layer.
pub fn uniform_ratio_mask(cfg: &ModelConfig, k: &CostConstants, target: u64) -> ArchitectureMask {
    let mut best = ArchitectureMask::filled(cfg, false);
    for keep_heads in (1..=cfg.heads).rev() {
        // widths scale together by ratio r, searched on the dimension grid
        let steps = cfg.head_dim.max(cfg.ffn_dim);
        for s in (0..=steps).rev() {
            let r = s as f64 / steps as f64;
            let dims = ((cfg.head_dim as f64 * r).round() as usize).max(1);
            let neurons = (cfg.ffn_dim as f64 * r).round() as usize;
            let mut m = ArchitectureMask::filled(cfg, false);
            for l in 0..cfg.layers {
                m.block[l] = true;
                for h in 0..keep_heads {
                    m.head[l * cfg.heads + h] = true;
                    for j in 0..dims {
                        m.dim[(l * cfg.heads + h) * cfg.head_dim + j] = true;
                    }
                }
                for n in 0..neurons {
                    m.neuron[l * cfg.ffn_dim + n] = true;
                }
            }
            if oracle_count(&m, k) <= target {
                return m;
            }
            best = m;
        }
    }
    best
}
