//! Joint optimization of weights and gate logits in one phase.
//!
//! Each step samples gates at the annealed temperature, runs the gated
//! forward, builds the full objective and applies AdamW to weights and
//! (at a larger learning rate, without decay) to gate logits.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{atomic_write, GatedCheckpoint};
use crate::cost::{cost_constants, expected_cost_value, oracle_count, CostConstants};
use crate::data::{augment, epoch_batches, load_dataset, synthetic_gratings, DataFormat, Dataset};
use crate::error::{Error, Result};
use crate::gating::{harden, AnnealSchedule, ArchitectureMask, GateBank, GateFamily, GateMode, SeededRng, DEFAULT_INIT_LOGIT};
use crate::model::{forward, Architecture, ModelConfig, VitWeights};
use crate::objective::{cost_penalties, feasibility_penalty, task_loss, total_loss, LossParts, PenaltyConfig, QuotaSource};
use crate::optim::{AdamConfig, AdamW};
use crate::tensor::{Graph, Tensor};

const NAN_ABORT_STEPS: usize = 10;
const EVAL_BATCH: usize = 256;
const AUGMENT_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealConfig {
    pub tau0: f64,
    pub tau_min: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self { tau0: 2.0, tau_min: 0.5 }
    }
}

/// Which gate mode each training step uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSchedule {
    /// Relaxed gates before `ste_switch_fraction` of the steps, then
    /// straight-through hard gates.
    SoftThenHardSte,
    Soft,
    HardSte,
}

/// Parameters of the built-in grating task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_samples: 2000,
            val_samples: 500,
            noise: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub anneal: AnnealConfig,
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::gate_lr_multiplier")]
    pub gate_lr_multiplier: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::init_logit")]
    pub init_logit: f64,
    #[serde(default = "defaults::gate_schedule")]
    pub gate_schedule: GateSchedule,
    #[serde(default = "defaults::ste_switch_fraction")]
    pub ste_switch_fraction: f64,
    /// `cifar10_binary` or `raw_tensor`; ignored when `synthetic` is set.
    #[serde(default = "defaults::data_format")]
    pub data_format: DataFormat,
    #[serde(default)]
    pub train_data: Option<PathBuf>,
    /// Separate validation file; otherwise `val_fraction` of the training
    /// data is held out.
    #[serde(default)]
    pub val_data: Option<PathBuf>,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    /// Keep only these source classes, relabelled in list order.
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
    /// Cap on training samples after filtering.
    #[serde(default)]
    pub max_train_samples: Option<usize>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default = "defaults::augment")]
    pub augment: bool,
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Steps between gate-trace snapshots; 0 records once per epoch.
    #[serde(default)]
    pub trace_interval: usize,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
}

mod defaults {
    use super::*;
    pub fn batch_size() -> usize {
        64
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn gate_lr_multiplier() -> f64 {
        10.0
    }
    pub fn weight_decay() -> f64 {
        0.05
    }
    pub fn init_logit() -> f64 {
        DEFAULT_INIT_LOGIT
    }
    pub fn gate_schedule() -> GateSchedule {
        GateSchedule::SoftThenHardSte
    }
    pub fn ste_switch_fraction() -> f64 {
        0.5
    }
    pub fn data_format() -> DataFormat {
        DataFormat::Cifar10Binary
    }
    pub fn val_fraction() -> f64 {
        0.2
    }
    pub fn augment() -> bool {
        true
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("run")
    }
}

impl TrainConfig {
    /// A small synthetic-data configuration with desk defaults.
    pub fn synthetic(model: ModelConfig, epochs: usize) -> Self {
        serde_json::from_value(serde_json::json!({
            "model": model,
            "epochs": epochs,
            "synthetic": SyntheticConfig::default(),
        }))
        .expect("valid defaults")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.penalty.validate(&self.model)?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("gate_lr_multiplier", self.gate_lr_multiplier),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.ste_switch_fraction) {
            return Err(Error::invalid("ste_switch_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction", "must lie in [0, 1)"));
        }
        AnnealSchedule {
            tau0: self.anneal.tau0,
            tau_min: self.anneal.tau_min,
            total_steps: 1,
        }
        .validate()?;
        if self.synthetic.is_none() {
            match &self.train_data {
                None => return Err(Error::invalid("train_data", "missing dataset path")),
                Some(p) if !p.exists() => {
                    return Err(Error::invalid("train_data", format!("{} does not exist", p.display())))
                }
                _ => {}
            }
            if let Some(p) = &self.val_data {
                if !p.exists() {
                    return Err(Error::invalid("val_data", format!("{} does not exist", p.display())));
                }
            }
        }
        if let Some(p) = &self.teacher_checkpoint {
            if !p.exists() {
                return Err(Error::invalid("teacher_checkpoint", format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }
}

/// Loads (or generates) the training and validation sets.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let model = &cfg.model;
    let (mut train, mut val) = if let Some(s) = &cfg.synthetic {
        let side = model.image_size;
        let train = synthetic_gratings(s.train_samples, model.channels, side, s.noise, cfg.seed);
        let val = synthetic_gratings(s.val_samples, model.channels, side, s.noise, cfg.seed ^ 0x5eed_0000_0000_0001);
        (train, val)
    } else {
        let path = cfg.train_data.as_ref().ok_or_else(|| Error::invalid("train_data", "missing dataset path"))?;
        let mut train = load_dataset(path, cfg.data_format)?;
        if let Some(c) = &cfg.classes {
            train = train.filter_classes(c);
        }
        let val = match &cfg.val_data {
            Some(p) => {
                let mut v = load_dataset(p, cfg.data_format)?;
                if let Some(c) = &cfg.classes {
                    v = v.filter_classes(c);
                }
                v
            }
            None => {
                let (t, v) = train.split(cfg.val_fraction, &mut SeededRng::stream(cfg.seed, 3));
                train = t;
                v
            }
        };
        (train, val)
    };
    if let Some(n) = cfg.max_train_samples {
        train = train.take_first(n);
    }
    for (name, ds) in [("train_data", &train), ("val_data", &val)] {
        if ds.is_empty() {
            return Err(Error::invalid(name, "dataset is empty"));
        }
        if (ds.channels, ds.height, ds.width) != (model.channels, model.image_size, model.image_size) {
            return Err(Error::invalid(
                name,
                format!(
                    "images are {}x{}x{}, model expects {}x{}x{}",
                    ds.channels, ds.height, ds.width, model.channels, model.image_size, model.image_size
                ),
            ));
        }
        ds.check_labels(model.num_classes)?;
    }
    val.images.shrink_to_fit();
    Ok((train, val))
}

/// Classification accuracy on `ds`; `mask` selects hard gates, `None`
/// runs the architecture ungated.
pub fn evaluate(weights: &VitWeights<f32>, arch: &Architecture, mask: Option<&ArchitectureMask>, ds: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = ds.batch(chunk);
        let logits = predict(weights, arch, mask, &x)?;
        let classes = arch.config.num_classes;
        for (row, &label) in logits.data().chunks(classes).zip(&y) {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            correct += usize::from(arg == label);
        }
    }
    Ok(correct as f64 / ds.len().max(1) as f64)
}

/// Logits of a frozen model.
pub fn predict(
    weights: &VitWeights<f32>,
    arch: &Architecture,
    mask: Option<&ArchitectureMask>,
    images: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let vars = weights.bind_frozen(&mut g);
    let gates = match mask {
        Some(m) => Some(m.bind(&mut g)?),
        None => None,
    };
    let out = forward(&mut g, arch, &vars, images, gates.as_ref())?;
    Ok(g.tensor(out.logits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub tau: f64,
    pub task_loss: f64,
    #[serde(rename = "L_macro")]
    pub l_macro: f64,
    #[serde(rename = "L_micro")]
    pub l_micro: f64,
    #[serde(rename = "L_feas")]
    pub l_feas: f64,
    pub expected_cost_fraction: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTraceRecord {
    pub step: u64,
    pub layer: usize,
    pub gate_family: GateFamily,
    /// `h` for heads, `0` for blocks, `h.j` for dimensions, `k` for neurons.
    pub index: String,
    pub probability: f64,
    pub tau: f64,
    pub expected_cost_fraction: f64,
}

/// One snapshot of every gate.
pub fn trace_snapshot(bank: &GateBank<f32>, step: u64, tau: f64, cost_fraction: f64) -> Vec<GateTraceRecord> {
    let shape = bank.dim.shape();
    let (layers, heads, dh) = (shape[0], shape[1], shape[2]);
    let ffn = bank.neuron.shape()[1];
    let mut out = Vec::new();
    for f in GateFamily::ALL {
        let probs = bank.probabilities(f);
        for (i, &p) in probs.iter().enumerate() {
            let (layer, index) = match f {
                GateFamily::Head => (i / heads, (i % heads).to_string()),
                GateFamily::Block => (i, "0".to_string()),
                GateFamily::Dim => (i / (heads * dh), format!("{}.{}", (i / dh) % heads, i % dh)),
                GateFamily::Neuron => (i / ffn, (i % ffn).to_string()),
            };
            out.push(GateTraceRecord {
                step,
                layer,
                gate_family: f,
                index,
                probability: p,
                tau,
                expected_cost_fraction: cost_fraction,
            });
        }
    }
    debug_assert!(out.iter().all(|r| r.layer < layers));
    out
}

pub const TRACE_HEADER: &str = "step,layer,gate_family,index,probability,tau,expected_cost_fraction";
pub const METRICS_HEADER: &str = "step,epoch,tau,task_loss,L_macro,L_micro,L_feas,expected_cost_fraction,val_acc";

fn trace_lines(out: &mut String, records: &[GateTraceRecord]) {
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6}",
            r.step, r.layer, r.gate_family, r.index, r.probability, r.tau, r.expected_cost_fraction
        );
    }
}

fn metrics_line(out: &mut String, m: &MetricsRow) {
    let _ = writeln!(
        out,
        "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        m.step, m.epoch, m.tau, m.task_loss, m.l_macro, m.l_micro, m.l_feas, m.expected_cost_fraction, m.val_acc
    );
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: GatedCheckpoint,
    pub metrics: Vec<MetricsRow>,
    pub trace_csv: String,
    pub metrics_csv: String,
    /// Hardened (θ = 0.5) architecture, or the fixed mask.
    pub mask: ArchitectureMask,
    pub hardened_cost: u64,
    pub hardened_cost_fraction: f64,
    pub val_acc: f64,
    pub skipped_steps: u64,
}

#[derive(Serialize)]
struct Summary<'a> {
    val_acc: f64,
    hardened_cost: u64,
    hardened_cost_fraction: f64,
    hardened_cost_halved: u64,
    dense_prunable_total: u64,
    skipped_steps: u64,
    steps: u64,
    lambda_macro: f64,
    lambda_micro: f64,
    heads_per_layer: Vec<usize>,
    checkpoint: &'a str,
}

pub const CHECKPOINT_FILE: &str = "gated.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Training run with optional overrides used by baselines and tests.
pub struct Trainer {
    pub config: TrainConfig,
    /// Train weights only, under this fixed hard mask.
    pub fixed_mask: Option<ArchitectureMask>,
    /// Write artifacts into `config.output_dir`.
    pub write_artifacts: bool,
    /// Start from these weights instead of a fresh initialization.
    pub initial_weights: Option<VitWeights<f32>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            fixed_mask: None,
            write_artifacts: true,
            initial_weights: None,
        }
    }

    pub fn run(self) -> Result<TrainOutcome> {
        self.config.validate()?;
        let (train, val) = load_datasets(&self.config)?;
        self.run_on(&train, &val)
    }

    pub fn run_on(self, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
        let cfg = &self.config;
        cfg.validate()?;
        let model = cfg.model;
        let arch = Architecture::dense(&model);
        let k = cost_constants(&model);
        let dense = k.dense_prunable_total as f64;

        let mut weights = match &self.initial_weights {
            Some(w) => {
                w.check_shapes(&arch)?;
                w.clone()
            }
            None => VitWeights::<f32>::init(&arch, &mut SeededRng::stream(cfg.seed, 0)),
        };
        let mut gates = GateBank::<f32>::new(&model, cfg.init_logit);
        if self.fixed_mask.is_some() {
            for t in gates.tensors_mut() {
                t.set_requires_grad(false);
            }
        }
        let teacher = match &cfg.teacher_checkpoint {
            Some(p) => {
                let t = GatedCheckpoint::load(p)?;
                if t.config != model {
                    return Err(Error::invalid("teacher_checkpoint", "teacher config differs from model"));
                }
                Some(t.weights)
            }
            None => None,
        };

        let mut data_rng = SeededRng::stream(cfg.seed, 1);
        let mut gate_rng = SeededRng::stream(cfg.seed, 2);
        let mut wopt = AdamW::new(AdamConfig::new(cfg.learning_rate, cfg.weight_decay));
        let mut gopt = AdamW::new(AdamConfig::new(cfg.learning_rate * cfg.gate_lr_multiplier, 0.0));

        let steps_per_epoch = cfg.steps_per_epoch(train.len()) as u64;
        let total_steps = steps_per_epoch * cfg.epochs as u64;
        let schedule = AnnealSchedule {
            tau0: cfg.anneal.tau0,
            tau_min: cfg.anneal.tau_min,
            total_steps,
        };
        let switch_step = (cfg.ste_switch_fraction * total_steps as f64).round() as u64;

        let out_dir = cfg.output_dir.clone();
        let mut trace_csv = format!("{TRACE_HEADER}\n");
        let mut metrics_csv = format!("{METRICS_HEADER}\n");
        let mut metrics = Vec::new();
        let mut step = 0u64;
        let mut skipped = 0u64;
        let mut nan_streak = 0usize;
        let mut last_traced = None;
        let cost_fraction = |gates: &GateBank<f32>| -> Result<f64> { Ok(expected_cost_value(gates, &k)? / dense) };

        for epoch in 0..cfg.epochs {
            let mut sums = [0.0f64; 4];
            let mut counted = 0usize;
            for batch in epoch_batches(train.len(), cfg.batch_size, &mut data_rng) {
                let tau = schedule.temperature(step);
                let mode = match cfg.gate_schedule {
                    GateSchedule::Soft => GateMode::Soft,
                    GateSchedule::HardSte => GateMode::HardSte,
                    GateSchedule::SoftThenHardSte if step < switch_step => GateMode::Soft,
                    GateSchedule::SoftThenHardSte => GateMode::HardSte,
                };
                let (mut x, y) = train.batch(&batch);
                if cfg.augment {
                    let n = train.image_len();
                    for img in x.data_mut().chunks_mut(n) {
                        augment(img, model.channels, model.image_size, AUGMENT_PAD, &mut data_rng);
                    }
                }
                let teacher_logits = match &teacher {
                    Some(tw) => Some(predict(tw, &arch, None, &x)?.data().iter().map(|&v| v as f64).collect::<Vec<_>>()),
                    None => None,
                };

                let mut g = Graph::<f32>::new();
                let wv = weights.bind(&mut g);
                let bv = gates.bind(&mut g);
                let gate_values = match &self.fixed_mask {
                    Some(m) => m.bind(&mut g)?,
                    None => bv.sample(&mut g, tau, &mut gate_rng, mode)?.values,
                };
                let out = forward(&mut g, &arch, &wv, &x, Some(&gate_values))?;
                let task = task_loss(&mut g, out.logits, &y, teacher_logits.as_deref(), &cfg.penalty)?;
                let probs = bv.probabilities(&mut g);
                let (macro_cost, micro_cost) = cost_penalties(&mut g, &probs, &k)?;
                let counted_gates = match cfg.penalty.quota_source {
                    QuotaSource::Probabilities => &probs,
                    QuotaSource::Samples => &gate_values,
                };
                let feas = feasibility_penalty(&mut g, counted_gates, &cfg.penalty, &model)?;
                let parts = LossParts {
                    task,
                    macro_cost,
                    micro_cost,
                    feasibility: feas.total,
                };
                let total = match total_loss(&mut g, &parts, &cfg.penalty) {
                    Ok(t) => Some(t),
                    Err(Error::NonFinite(term)) => {
                        log::warn!("step {step}: non-finite {term}");
                        None
                    }
                    Err(e) => return Err(e),
                };
                let grads = match total {
                    Some(t) => Some(g.backward(t)?),
                    None => None,
                };
                match grads {
                    Some(grads) if grads.all_finite() => {
                        nan_streak = 0;
                        weights.zero_grad();
                        weights.accumulate_grads(&wv, &grads);
                        wopt.step(&mut weights.leaves_mut());
                        if self.fixed_mask.is_none() {
                            for t in gates.tensors_mut() {
                                t.zero_grad();
                            }
                            grads.accumulate_into(bv.head, &mut gates.head);
                            grads.accumulate_into(bv.block, &mut gates.block);
                            grads.accumulate_into(bv.dim, &mut gates.dim);
                            grads.accumulate_into(bv.neuron, &mut gates.neuron);
                            gopt.step(&mut gates.tensors_mut());
                            gates.clip();
                        }
                        sums[0] += g.item(task) as f64;
                        sums[1] += g.item(macro_cost) as f64;
                        sums[2] += g.item(micro_cost) as f64;
                        sums[3] += g.item(feas.total) as f64;
                        counted += 1;
                    }
                    _ => {
                        skipped += 1;
                        nan_streak += 1;
                        if nan_streak >= NAN_ABORT_STEPS {
                            let msg = format!("loss non-finite for {NAN_ABORT_STEPS} consecutive steps at step {step}");
                            if self.write_artifacts {
                                self.dump_diagnostics(&out_dir, step, epoch, &gates, &weights, &msg)?;
                            }
                            return Err(Error::Aborted(msg));
                        }
                    }
                }
                step += 1;
                if cfg.trace_interval > 0 && step % cfg.trace_interval as u64 == 0 {
                    let snap = trace_snapshot(&gates, step, schedule.temperature(step), cost_fraction(&gates)?);
                    trace_lines(&mut trace_csv, &snap);
                    last_traced = Some(step);
                }
            }

            let tau = schedule.temperature(step);
            let frac = cost_fraction(&gates)?;
            if cfg.trace_interval == 0 || (epoch + 1 == cfg.epochs && last_traced != Some(step)) {
                trace_lines(&mut trace_csv, &trace_snapshot(&gates, step, tau, frac));
                last_traced = Some(step);
            }
            let mask = match &self.fixed_mask {
                Some(m) => m.clone(),
                None => harden(&gates, 0.5)?,
            };
            let val_acc = evaluate(&weights, &arch, Some(&mask), val)?;
            let n = counted.max(1) as f64;
            let row = MetricsRow {
                step,
                epoch,
                tau,
                task_loss: sums[0] / n,
                l_macro: sums[1] / n,
                l_micro: sums[2] / n,
                l_feas: sums[3] / n,
                expected_cost_fraction: frac,
                val_acc,
            };
            log::info!(
                "epoch {epoch}: task {:.4} cost {:.3} val_acc {:.4} tau {:.3}",
                row.task_loss,
                frac,
                val_acc,
                tau
            );
            metrics_line(&mut metrics_csv, &row);
            metrics.push(row);
            if self.write_artifacts {
                atomic_write(&out_dir.join(METRICS_FILE), metrics_csv.as_bytes())?;
                atomic_write(&out_dir.join(TRACE_FILE), trace_csv.as_bytes())?;
            }
        }

        let mask = match &self.fixed_mask {
            Some(m) => m.clone(),
            None => harden(&gates, 0.5)?,
        };
        let hardened_cost = oracle_count(&mask, &k);
        weights.visit_mut(|_, t| t.clear_grad());
        for t in gates.tensors_mut() {
            t.clear_grad();
            t.set_requires_grad(true);
        }
        let val_acc = metrics.last().map_or(0.0, |m| m.val_acc);
        let checkpoint = GatedCheckpoint {
            config: model,
            weights,
            gates,
            step,
        };
        let outcome = TrainOutcome {
            checkpoint,
            metrics,
            trace_csv,
            metrics_csv,
            hardened_cost,
            hardened_cost_fraction: hardened_cost as f64 / dense,
            mask,
            val_acc,
            skipped_steps: skipped,
        };
        if self.write_artifacts {
            outcome.checkpoint.save(&out_dir.join(CHECKPOINT_FILE))?;
            let summary = Summary {
                val_acc,
                hardened_cost,
                hardened_cost_fraction: outcome.hardened_cost_fraction,
                hardened_cost_halved: hardened_cost / 2,
                dense_prunable_total: k.dense_prunable_total,
                skipped_steps: skipped,
                steps: step,
                lambda_macro: cfg.penalty.lambda_macro,
                lambda_micro: cfg.penalty.lambda_micro,
                heads_per_layer: (0..model.layers).map(|l| outcome.mask.live_heads(l).len()).collect(),
                checkpoint: CHECKPOINT_FILE,
            };
            atomic_write(&out_dir.join(SUMMARY_FILE), &serde_json::to_vec_pretty(&summary)?)?;
        }
        Ok(outcome)
    }

    fn dump_diagnostics(
        &self,
        dir: &Path,
        step: u64,
        epoch: usize,
        gates: &GateBank<f32>,
        weights: &VitWeights<f32>,
        msg: &str,
    ) -> Result<()> {
        let family_stats = |f: GateFamily| {
            let p = gates.probabilities(f);
            let finite = p.iter().filter(|v| v.is_finite()).count();
            serde_json::json!({"count": p.len(), "finite": finite,
                "mean": p.iter().copied().filter(|v| v.is_finite()).sum::<f64>() / finite.max(1) as f64})
        };
        let mut non_finite = Vec::new();
        weights.map(|name, t| {
            if !t.is_finite() {
                non_finite.push(name.to_string());
            }
        });
        let dump = serde_json::json!({
            "message": msg,
            "step": step,
            "epoch": epoch,
            "gates": GateFamily::ALL.iter().map(|&f| (f.name().to_string(), family_stats(f))).collect::<serde_json::Map<_, _>>(),
            "non_finite_weights": non_finite,
        });
        atomic_write(&dir.join("diagnostic.json"), &serde_json::to_vec_pretty(&dump)?)
    }
}

/// Convenience wrapper: validate, load data, train and write artifacts.
pub fn train(config: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(config).run()
}

/// Cost constants of a training configuration.
pub fn constants(cfg: &TrainConfig) -> CostConstants {
    cost_constants(&cfg.model)
}
