//! Gate logits, Gumbel-Sigmoid sampling, temperature annealing and hardening.
//!
//! Four gate families share one layout convention:
//!
//! | family | shape            | role                              |
//! |--------|------------------|-----------------------------------|
//! | head   | `[L, H]`         | keeps or removes a whole head     |
//! | block  | `[L]`            | keeps or removes a whole FFN      |
//! | dim    | `[L, H, D_h]`    | value-path dimension inside a head |
//! | neuron | `[L, D_ffn]`     | hidden neuron inside an FFN       |
//!
//! A sampled gate is `sigmoid((alpha + eps) / tau)` with Logistic noise `eps`.
//! Because `eps` is symmetric around zero, the event `z > 0.5` has probability
//! `sigmoid(alpha)` at every temperature; that probability drives the cost
//! model and hardening.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Logits are clipped to this range after every optimizer step.
pub const LOGIT_CLIP: f64 = 12.0;
/// Default logit for a freshly built bank, `sigmoid(3) ≈ 0.953`.
pub const DEFAULT_INIT_LOGIT: f64 = 3.0;
const NOISE_CLAMP: f64 = 1e-6;

/// Deterministic random source. Only constructible from an explicit seed.
#[derive(Clone, Debug)]
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream derived from the same seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    /// Draw of Logistic(0, 1) noise, `ln u - ln(1 - u)` with `u` clamped
    /// to `[1e-6, 1 - 1e-6]`.
    pub fn logistic(&mut self) -> f64 {
        let u: f64 = self.0.random::<f64>().clamp(NOISE_CLAMP, 1.0 - NOISE_CLAMP);
        u.ln() - (1.0 - u).ln()
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Relaxed value `sigmoid((alpha + eps) / tau)`.
    Soft,
    /// Forward uses `1[z > 0.5]`, backward uses the relaxed value.
    HardSte,
    /// Relaxed value with `eps = 0`.
    Deterministic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateFamily {
    Head,
    Block,
    Dim,
    Neuron,
}

impl GateFamily {
    pub const ALL: [GateFamily; 4] = [GateFamily::Head, GateFamily::Block, GateFamily::Dim, GateFamily::Neuron];

    pub fn name(self) -> &'static str {
        match self {
            GateFamily::Head => "head",
            GateFamily::Block => "block",
            GateFamily::Dim => "dim",
            GateFamily::Neuron => "neuron",
        }
    }
}

impl fmt::Display for GateFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for GateFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GateFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid("gate_family", format!("unknown family {s:?}")))
    }
}

/// Probability that a sampled gate exceeds 0.5, `sigmoid(alpha)`.
pub fn gate_probability(alpha: f64) -> f64 {
    if alpha >= 0.0 {
        1.0 / (1.0 + (-alpha).exp())
    } else {
        let e = alpha.exp();
        e / (1.0 + e)
    }
}

/// One relaxed gate draw outside of any graph.
pub fn sample_soft(alpha: f64, tau: f64, rng: &mut SeededRng, mode: GateMode) -> Result<f64> {
    check_tau(tau)?;
    let eps = match mode {
        GateMode::Deterministic => 0.0,
        _ => rng.logistic(),
    };
    let z = gate_probability((alpha + eps) / tau);
    Ok(match mode {
        GateMode::HardSte => f64::from(u8::from(z > 0.5)),
        _ => z,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("tau", format!("temperature must be positive, got {tau}")))
    }
}

/// Relaxed and forward gate values recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct SampledGate {
    pub soft: Var,
    /// What the model consumes: `soft` itself, or its straight-through
    /// hardening in [`GateMode::HardSte`].
    pub value: Var,
}

/// Samples one gate tensor on the graph.
pub fn sample_gate<T: Scalar>(
    g: &mut Graph<T>,
    alpha: Var,
    tau: f64,
    rng: &mut SeededRng,
    mode: GateMode,
) -> Result<SampledGate> {
    check_tau(tau)?;
    let shifted = match mode {
        GateMode::Deterministic => alpha,
        GateMode::Soft | GateMode::HardSte => {
            let n = g.value(alpha).len();
            let noise = (0..n).map(|_| T::from_f64(rng.logistic())).collect();
            let eps = g.constant_from(g.shape(alpha).to_vec(), noise)?;
            g.add(alpha, eps)?
        }
    };
    let scaled = g.scale(shifted, 1.0 / tau);
    let soft = g.sigmoid(scaled);
    let value = match mode {
        GateMode::HardSte => g.straight_through(soft),
        _ => soft,
    };
    Ok(SampledGate { soft, value })
}

/// Exponential temperature decay from `tau0` to `tau_min` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub tau0: f64,
    pub tau_min: f64,
    pub total_steps: u64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            tau0: 2.0,
            tau_min: 0.5,
            total_steps: 1,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.tau_min > 0.0 && self.tau_min <= self.tau0) {
            return Err(Error::invalid("anneal", "need 0 < tau_min <= tau0"));
        }
        Ok(())
    }

    /// `tau0 * (tau_min / tau0)^(step / total_steps)`; out-of-range steps clamp.
    pub fn temperature(&self, step: u64) -> f64 {
        let total = self.total_steps.max(1);
        let step = if step > total {
            log::warn!("anneal step {step} beyond total {total}; clamping");
            total
        } else {
            step
        };
        let frac = step as f64 / total as f64;
        if step == total {
            return self.tau_min;
        }
        self.tau0 * (self.tau_min / self.tau0).powf(frac)
    }
}

/// Learnable logits for all four gate families.
#[derive(Clone, Debug, PartialEq)]
pub struct GateBank<T: Scalar = f32> {
    pub head: Tensor<T>,
    pub block: Tensor<T>,
    pub dim: Tensor<T>,
    pub neuron: Tensor<T>,
}

/// Graph handles of a bound [`GateBank`].
#[derive(Clone, Copy, Debug)]
pub struct BankVars {
    pub head: Var,
    pub block: Var,
    pub dim: Var,
    pub neuron: Var,
}

/// Gate values consumed by the gated model, one var per family.
#[derive(Clone, Copy, Debug)]
pub struct GateValues {
    pub head: Var,
    pub block: Var,
    pub dim: Var,
    pub neuron: Var,
}

/// A full draw of all four families.
#[derive(Clone, Copy, Debug)]
pub struct GateSample {
    pub soft: GateValues,
    pub values: GateValues,
    pub mode: GateMode,
}

impl<T: Scalar> GateBank<T> {
    pub fn new(cfg: &ModelConfig, init: f64) -> Self {
        let v = T::from_f64(init);
        Self {
            head: Tensor::full([cfg.layers, cfg.heads], v).with_grad(),
            block: Tensor::full([cfg.layers], v).with_grad(),
            dim: Tensor::full([cfg.layers, cfg.heads, cfg.head_dim], v).with_grad(),
            neuron: Tensor::full([cfg.layers, cfg.ffn_dim], v).with_grad(),
        }
    }

    pub fn family(&self, f: GateFamily) -> &Tensor<T> {
        match f {
            GateFamily::Head => &self.head,
            GateFamily::Block => &self.block,
            GateFamily::Dim => &self.dim,
            GateFamily::Neuron => &self.neuron,
        }
    }

    pub fn family_mut(&mut self, f: GateFamily) -> &mut Tensor<T> {
        match f {
            GateFamily::Head => &mut self.head,
            GateFamily::Block => &mut self.block,
            GateFamily::Dim => &mut self.dim,
            GateFamily::Neuron => &mut self.neuron,
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.head, &self.block, &self.dim, &self.neuron]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.head, &mut self.block, &mut self.dim, &mut self.neuron]
    }

    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = [
            vec![cfg.layers, cfg.heads],
            vec![cfg.layers],
            vec![cfg.layers, cfg.heads, cfg.head_dim],
            vec![cfg.layers, cfg.ffn_dim],
        ];
        for (f, shape) in GateFamily::ALL.into_iter().zip(expect) {
            if self.family(f).shape() != shape {
                return Err(Error::Shape {
                    op: "gate_bank",
                    lhs: self.family(f).shape().to_vec(),
                    rhs: shape,
                });
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BankVars {
        BankVars {
            head: g.param(&self.head),
            block: g.param(&self.block),
            dim: g.param(&self.dim),
            neuron: g.param(&self.neuron),
        }
    }

    /// Clips every logit into `[-LOGIT_CLIP, LOGIT_CLIP]`.
    pub fn clip(&mut self) {
        let (lo, hi) = (T::from_f64(-LOGIT_CLIP), T::from_f64(LOGIT_CLIP));
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
        }
    }

    pub fn probabilities(&self, f: GateFamily) -> Vec<f64> {
        self.family(f).data().iter().map(|a| gate_probability(a.as_f64())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> GateBank<U> {
        GateBank {
            head: self.head.cast(),
            block: self.block.cast(),
            dim: self.dim.cast(),
            neuron: self.neuron.cast(),
        }
    }
}

impl BankVars {
    pub fn family(&self, f: GateFamily) -> Var {
        match f {
            GateFamily::Head => self.head,
            GateFamily::Block => self.block,
            GateFamily::Dim => self.dim,
            GateFamily::Neuron => self.neuron,
        }
    }

    /// Draws every family at temperature `tau`.
    pub fn sample<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        tau: f64,
        rng: &mut SeededRng,
        mode: GateMode,
    ) -> Result<GateSample> {
        let head = sample_gate(g, self.head, tau, rng, mode)?;
        let block = sample_gate(g, self.block, tau, rng, mode)?;
        let dim = sample_gate(g, self.dim, tau, rng, mode)?;
        let neuron = sample_gate(g, self.neuron, tau, rng, mode)?;
        Ok(GateSample {
            soft: GateValues {
                head: head.soft,
                block: block.soft,
                dim: dim.soft,
                neuron: neuron.soft,
            },
            values: GateValues {
                head: head.value,
                block: block.value,
                dim: dim.value,
                neuron: neuron.value,
            },
            mode,
        })
    }

    /// `sigmoid(alpha)` for every family.
    pub fn probabilities<T: Scalar>(&self, g: &mut Graph<T>) -> GateValues {
        GateValues {
            head: g.sigmoid(self.head),
            block: g.sigmoid(self.block),
            dim: g.sigmoid(self.dim),
            neuron: g.sigmoid(self.neuron),
        }
    }
}

/// Hardened binary architecture.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureMask {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub head: Vec<bool>,
    pub block: Vec<bool>,
    pub dim: Vec<bool>,
    pub neuron: Vec<bool>,
}

impl ArchitectureMask {
    pub fn filled(cfg: &ModelConfig, on: bool) -> Self {
        Self {
            layers: cfg.layers,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            ffn_dim: cfg.ffn_dim,
            head: vec![on; cfg.layers * cfg.heads],
            block: vec![on; cfg.layers],
            dim: vec![on; cfg.layers * cfg.heads * cfg.head_dim],
            neuron: vec![on; cfg.layers * cfg.ffn_dim],
        }
    }

    pub fn dense(cfg: &ModelConfig) -> Self {
        Self::filled(cfg, true)
    }

    pub fn head_bit(&self, l: usize, h: usize) -> bool {
        self.head[l * self.heads + h]
    }

    pub fn block_bit(&self, l: usize) -> bool {
        self.block[l]
    }

    pub fn dim_bit(&self, l: usize, h: usize, j: usize) -> bool {
        self.dim[(l * self.heads + h) * self.head_dim + j]
    }

    pub fn neuron_bit(&self, l: usize, k: usize) -> bool {
        self.neuron[l * self.ffn_dim + k]
    }

    /// A dimension is live only under a live head.
    pub fn effective_dim(&self, l: usize, h: usize, j: usize) -> bool {
        self.head_bit(l, h) && self.dim_bit(l, h, j)
    }

    /// A neuron is live only inside a live FFN block.
    pub fn effective_neuron(&self, l: usize, k: usize) -> bool {
        self.block_bit(l) && self.neuron_bit(l, k)
    }

    pub fn live_dims(&self, l: usize, h: usize) -> Vec<usize> {
        (0..self.head_dim).filter(|&j| self.effective_dim(l, h, j)).collect()
    }

    pub fn live_neurons(&self, l: usize) -> Vec<usize> {
        (0..self.ffn_dim).filter(|&k| self.effective_neuron(l, k)).collect()
    }

    pub fn live_heads(&self, l: usize) -> Vec<usize> {
        (0..self.heads).filter(|&h| self.head_bit(l, h)).collect()
    }

    pub fn family_bits(&self, f: GateFamily) -> &[bool] {
        match f {
            GateFamily::Head => &self.head,
            GateFamily::Block => &self.block,
            GateFamily::Dim => &self.dim,
            GateFamily::Neuron => &self.neuron,
        }
    }

    /// Binds the mask as constant 0/1 gate values.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Result<GateValues> {
        let bits = |b: &[bool]| b.iter().map(|&x| if x { T::one() } else { T::zero() }).collect::<Vec<T>>();
        Ok(GateValues {
            head: g.constant_from([self.layers, self.heads], bits(&self.head))?,
            block: g.constant_from([self.layers], bits(&self.block))?,
            dim: g.constant_from([self.layers, self.heads, self.head_dim], bits(&self.dim))?,
            neuron: g.constant_from([self.layers, self.ffn_dim], bits(&self.neuron))?,
        })
    }
}

/// Noise-free hardening: a bit is set iff `sigmoid(alpha) > threshold`.
pub fn harden<T: Scalar>(bank: &GateBank<T>, threshold: f64) -> Result<ArchitectureMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold", format!("must lie in (0, 1), got {threshold}")));
    }
    let bits = |t: &Tensor<T>| t.data().iter().map(|a| gate_probability(a.as_f64()) > threshold).collect();
    let hs = bank.dim.shape();
    Ok(ArchitectureMask {
        layers: hs[0],
        heads: hs[1],
        head_dim: hs[2],
        ffn_dim: bank.neuron.shape()[1],
        head: bits(&bank.head),
        block: bits(&bank.block),
        dim: bits(&bank.dim),
        neuron: bits(&bank.neuron),
    })
}

/// Every effective value-path mask of one layer reachable by the gates.
///
/// With `micro == false` the dimension gates are frozen open, so only whole
/// heads can be toggled.
pub fn reachable_attention_masks(heads: usize, head_dim: usize, micro: bool) -> BTreeSet<Vec<bool>> {
    let dim_bits = heads * head_dim;
    let dim_patterns: Vec<u64> = if micro { (0..1u64 << dim_bits).collect() } else { vec![(1u64 << dim_bits) - 1] };
    let mut out = BTreeSet::new();
    for g in 0..1u64 << heads {
        for &d in &dim_patterns {
            let eff = (0..dim_bits)
                .map(|i| (g >> (i / head_dim)) & 1 == 1 && (d >> i) & 1 == 1)
                .collect();
            out.insert(eff);
        }
    }
    out
}
