//! Hardening a gated checkpoint into a physically smaller dense model.
//!
//! Dead heads lose their Q/K/V projections and their `W_O` rows. Live heads
//! keep Q/K at full head width and lose only the value columns (and `W_O`
//! rows) of dead dimensions. Dead FFN blocks disappear; live ones lose the
//! `W1` columns, `b1` entries and `W2` rows of dead neurons. Layer norms,
//! the attention scale and all residual paths are untouched.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{atomic_write, weight_entries, write_tensor_file, GatedCheckpoint, TensorFile};
use crate::cost::{cost_constants, oracle_count};
use crate::error::{Error, Result};
use crate::gating::{harden, ArchitectureMask, SeededRng};
use crate::model::{
    forward, AttentionParams, Architecture, BlockParams, FfnArch, FfnParams, HeadArch, HeadParams, LayerArch, ModelConfig,
    NormParams, VitParams, VitWeights,
};
use crate::tensor::{Graph, Tensor};

/// Logit tolerance of the equivalence check.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-4;

pub const DESCRIPTOR_FILE: &str = "architecture.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    pub formula_units: u64,
    pub formula_units_halved: u64,
}

impl CostSummary {
    pub fn of(arch: &Architecture) -> Self {
        let units = oracle_count(&mask_from_architecture(arch), &cost_constants(&arch.config));
        Self {
            formula_units: units,
            formula_units_halved: units / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the serialized gated checkpoint.
    pub source_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrunedCheckpoint {
    pub architecture: Architecture,
    pub weights: VitWeights<f32>,
    pub threshold: f64,
    pub provenance: Provenance,
    pub cost: CostSummary,
}

/// `architecture.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Descriptor {
    pub config: ModelConfig,
    pub threshold: f64,
    pub per_layer: Vec<LayerArch>,
    pub cost: CostSummary,
    pub provenance: Provenance,
}

/// Surviving structure of a hard mask. A head whose dimensions are all dead
/// outputs zeros and is dropped.
pub fn architecture_from_mask(config: &ModelConfig, mask: &ArchitectureMask) -> Architecture {
    let per_layer = (0..config.layers)
        .map(|l| LayerArch {
            heads: mask
                .live_heads(l)
                .into_iter()
                .map(|h| HeadArch {
                    index: h,
                    dims: mask.live_dims(l, h),
                })
                .filter(|h| !h.dims.is_empty())
                .collect(),
            ffn: FfnArch {
                present: mask.block_bit(l),
                neurons: mask.live_neurons(l),
            },
        })
        .collect();
    Architecture {
        config: *config,
        per_layer,
    }
}

/// The mask that keeps exactly the units listed in `arch`.
pub fn mask_from_architecture(arch: &Architecture) -> ArchitectureMask {
    let cfg = &arch.config;
    let mut m = ArchitectureMask::filled(cfg, false);
    for (l, layer) in arch.per_layer.iter().enumerate() {
        for h in &layer.heads {
            m.head[l * cfg.heads + h.index] = true;
            for &j in &h.dims {
                m.dim[(l * cfg.heads + h.index) * cfg.head_dim + j] = true;
            }
        }
        m.block[l] = layer.ffn.present;
        for &k in &layer.ffn.neurons {
            m.neuron[l * cfg.ffn_dim + k] = true;
        }
    }
    m
}

fn select_columns(t: &Tensor<f32>, cols: &[usize]) -> Tensor<f32> {
    let (rows, width) = (t.shape()[0], t.shape()[1]);
    let mut out = Vec::with_capacity(rows * cols.len());
    for r in 0..rows {
        let row = &t.data()[r * width..(r + 1) * width];
        out.extend(cols.iter().map(|&c| row[c]));
    }
    Tensor::new([rows, cols.len()], out).expect("consistent shape").with_grad()
}

fn select_rows(t: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let width = t.shape()[1];
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
    }
    Tensor::new([rows.len(), width], out).expect("consistent shape").with_grad()
}

fn select(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let out = idx.iter().map(|&i| t.data()[i]).collect();
    Tensor::new([idx.len()], out).expect("consistent shape").with_grad()
}

fn fresh(t: &Tensor<f32>) -> Tensor<f32> {
    let mut t = t.clone();
    t.clear_grad();
    t
}

fn fresh_norm(n: &NormParams<Tensor<f32>>) -> NormParams<Tensor<f32>> {
    NormParams {
        gamma: fresh(&n.gamma),
        beta: fresh(&n.beta),
    }
}

/// Slices dense weights down to `arch`.
pub fn slice_weights(dense: &VitWeights<f32>, arch: &Architecture) -> Result<VitWeights<f32>> {
    dense.check_shapes(&Architecture::dense(&arch.config))?;
    arch.validate()?;
    let dh = arch.config.head_dim;
    let blocks = dense
        .blocks
        .iter()
        .zip(&arch.per_layer)
        .map(|(block, layer)| {
            let attn = &block.attn;
            let heads = layer
                .heads
                .iter()
                .map(|h| {
                    let src = &attn.heads[h.index];
                    HeadParams {
                        wq: fresh(&src.wq),
                        bq: fresh(&src.bq),
                        wk: fresh(&src.wk),
                        bk: fresh(&src.bk),
                        wv: select_columns(&src.wv, &h.dims),
                        bv: select(&src.bv, &h.dims),
                    }
                })
                .collect();
            let wo_rows: Vec<usize> = layer.heads.iter().flat_map(|h| h.dims.iter().map(move |&j| h.index * dh + j)).collect();
            let ffn = match (&block.ffn, layer.ffn.present) {
                (Some(f), true) => Some(FfnParams {
                    norm: fresh_norm(&f.norm),
                    w1: select_columns(&f.w1, &layer.ffn.neurons),
                    b1: select(&f.b1, &layer.ffn.neurons),
                    w2: select_rows(&f.w2, &layer.ffn.neurons),
                    b2: fresh(&f.b2),
                }),
                _ => None,
            };
            BlockParams {
                attn: AttentionParams {
                    norm: fresh_norm(&attn.norm),
                    heads,
                    wo: select_rows(&attn.wo, &wo_rows),
                    bo: fresh(&attn.bo),
                },
                ffn,
            }
        })
        .collect();
    Ok(VitParams {
        patch_w: fresh(&dense.patch_w),
        patch_b: fresh(&dense.patch_b),
        cls: fresh(&dense.cls),
        pos: fresh(&dense.pos),
        blocks,
        norm: fresh_norm(&dense.norm),
        head_w: fresh(&dense.head_w),
        head_b: fresh(&dense.head_b),
    })
}

pub fn checkpoint_sha256(ck: &GatedCheckpoint) -> Result<String> {
    Ok(hex::encode(Sha256::digest(ck.to_bytes()?)))
}

/// Hardens the gates at `threshold` and physically removes dead structure.
pub fn extract(ck: &GatedCheckpoint, threshold: f64) -> Result<PrunedCheckpoint> {
    let mask = harden(&ck.gates, threshold)?;
    let architecture = architecture_from_mask(&ck.config, &mask);
    let weights = slice_weights(&ck.weights, &architecture)?;
    Ok(PrunedCheckpoint {
        cost: CostSummary::of(&architecture),
        architecture,
        weights,
        threshold,
        provenance: Provenance {
            source_sha256: checkpoint_sha256(ck)?,
        },
    })
}

impl PrunedCheckpoint {
    pub fn descriptor(&self) -> Descriptor {
        Descriptor {
            config: self.architecture.config,
            threshold: self.threshold,
            per_layer: self.architecture.per_layer.clone(),
            cost: self.cost,
            provenance: self.provenance.clone(),
        }
    }

    /// Writes `architecture.json` and `weights.bin` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut json = serde_json::to_vec_pretty(&self.descriptor())?;
        json.push(b'\n');
        atomic_write(&dir.join(DESCRIPTOR_FILE), &json)?;
        let meta = serde_json::json!({"kind": "pruned"});
        write_tensor_file(&dir.join(WEIGHTS_FILE), &meta, &weight_entries(&self.weights))
    }

    /// Reads a directory written by [`export`](Self::export).
    pub fn import(dir: &Path) -> Result<Self> {
        let desc = read_descriptor(&dir.join(DESCRIPTOR_FILE))?;
        let architecture = Architecture {
            config: desc.config,
            per_layer: desc.per_layer,
        };
        let wpath = dir.join(WEIGHTS_FILE);
        let mut file = TensorFile::read(&wpath)?;
        let weights = file.take_weights(&architecture).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(&wpath, reason),
            other => other,
        })?;
        let cost = CostSummary::of(&architecture);
        if cost != desc.cost {
            return Err(Error::format(
                dir.join(DESCRIPTOR_FILE),
                format!("stored cost {:?} disagrees with the listed structure ({:?})", desc.cost, cost),
            ));
        }
        Ok(Self {
            architecture,
            weights,
            threshold: desc.threshold,
            provenance: desc.provenance,
            cost,
        })
    }
}

/// Reads and validates an architecture descriptor.
pub fn read_descriptor(path: &Path) -> Result<Descriptor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let desc: Descriptor = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    Architecture {
        config: desc.config,
        per_layer: desc.per_layer.clone(),
    }
    .validate()
    .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(desc)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_abs_diff: f64,
    /// Largest residual-stream difference after each block.
    pub per_layer_diff: Vec<f64>,
    /// First block whose output disagrees beyond tolerance; `None` on a
    /// failure means every block agrees and the classifier differs.
    pub offending_layer: Option<usize>,
    pub passed: bool,
}

/// Standard-normal images of the model's input shape.
pub fn random_images(cfg: &ModelConfig, count: usize, rng: &mut SeededRng) -> Tensor<f32> {
    let n = count * cfg.channels * cfg.image_size * cfg.image_size;
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new([count, cfg.channels, cfg.image_size, cfg.image_size], data).expect("consistent shape")
}

/// Compares the gated model under its hardened mask with the extracted
/// model on `trials` random inputs.
pub fn verify_equivalence(
    ck: &GatedCheckpoint,
    pruned: &PrunedCheckpoint,
    trials: usize,
    rng: &mut SeededRng,
) -> Result<EquivalenceReport> {
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    if pruned.architecture.config != ck.config {
        return Err(Error::invalid("pruned", "model config differs from the gated checkpoint"));
    }
    let sha = checkpoint_sha256(ck)?;
    if pruned.provenance.source_sha256 != sha {
        return Err(Error::invalid(
            "pruned",
            format!("extracted from checkpoint {}, not {sha}", pruned.provenance.source_sha256),
        ));
    }
    let mask = harden(&ck.gates, pruned.threshold)?;
    if architecture_from_mask(&ck.config, &mask) != pruned.architecture {
        return Err(Error::invalid("pruned", "structure does not match the hardened gates"));
    }
    pruned.weights.check_shapes(&pruned.architecture)?;

    let images = random_images(&ck.config, trials, rng);
    let dense_arch = ck.architecture();
    let mut g = Graph::<f32>::new();
    let gated_vars = ck.weights.bind_frozen(&mut g);
    let gates = mask.bind(&mut g)?;
    let a = forward(&mut g, &dense_arch, &gated_vars, &images, Some(&gates))?;
    let pruned_vars = pruned.weights.bind_frozen(&mut g);
    let b = forward(&mut g, &pruned.architecture, &pruned_vars, &images, None)?;

    let max_diff = |x: &[f32], y: &[f32]| {
        x.iter()
            .zip(y)
            .map(|(p, q)| (*p as f64 - *q as f64).abs())
            .fold(0.0, f64::max)
    };
    let per_layer_diff: Vec<f64> = a
        .block_outputs
        .iter()
        .zip(&b.block_outputs)
        .map(|(&x, &y)| max_diff(g.value(x), g.value(y)))
        .collect();
    let max_abs_diff = max_diff(g.value(a.logits), g.value(b.logits));
    let passed = max_abs_diff <= EQUIVALENCE_TOLERANCE;
    let offending_layer = if passed {
        None
    } else {
        per_layer_diff.iter().position(|&d| d > EQUIVALENCE_TOLERANCE)
    };
    Ok(EquivalenceReport {
        trials,
        max_abs_diff,
        per_layer_diff,
        offending_layer,
        passed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub runs: usize,
    pub median_ms: f64,
    pub p90_ms: f64,
}

/// Wall-clock time of single forwards, after `warmup` untimed runs.
pub fn benchmark_latency(
    weights: &VitWeights<f32>,
    arch: &Architecture,
    batch: usize,
    runs: usize,
    warmup: usize,
    rng: &mut SeededRng,
) -> Result<LatencyStats> {
    if runs < 10 {
        return Err(Error::invalid("runs", format!("need at least 10, got {runs}")));
    }
    if batch == 0 {
        return Err(Error::invalid("batch", "must be at least 1"));
    }
    let images = random_images(&arch.config, batch, rng);
    let run = || -> Result<f64> {
        let start = Instant::now();
        let mut g = Graph::<f32>::new();
        let vars = weights.bind_frozen(&mut g);
        let out = forward(&mut g, arch, &vars, &images, None)?;
        std::hint::black_box(g.value(out.logits));
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut times = (0..runs).map(|_| run()).collect::<Result<Vec<_>>>()?;
    times.sort_by(f64::total_cmp);
    let pick = |q: f64| times[((q * (runs - 1) as f64).round() as usize).min(runs - 1)];
    Ok(LatencyStats {
        runs,
        median_ms: pick(0.5),
        p90_ms: pick(0.9),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::GateBank;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 3,
            heads: 2,
            embed_dim: 8,
            head_dim: 4,
            ffn_dim: 6,
            image_size: 8,
            patch_size: 4,
            channels: 3,
            num_classes: 3,
        }
    }

    fn checkpoint(seed: u64) -> GatedCheckpoint {
        let c = cfg();
        let mut rng = SeededRng::new(seed);
        let arch = Architecture::dense(&c);
        GatedCheckpoint {
            config: c,
            weights: VitWeights::random_uniform(&arch, 0.5, &mut rng),
            gates: GateBank::new(&c, 3.0),
            step: 0,
        }
    }

    fn close(ck: &mut GatedCheckpoint, f: crate::gating::GateFamily, idx: usize) {
        ck.gates.family_mut(f).data_mut()[idx] = -3.0;
    }

    #[test]
    fn open_gates_extract_the_dense_model() {
        let ck = checkpoint(1);
        let p = extract(&ck, 0.5).unwrap();
        assert!(p.architecture.is_dense());
        assert_eq!(p.weights, ck.weights.map(|_, t| fresh(t)));
        let r = verify_equivalence(&ck, &p, 8, &mut SeededRng::new(2)).unwrap();
        assert_eq!(r.max_abs_diff, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn closed_block_removes_ffn() {
        use crate::gating::GateFamily::*;
        let mut ck = checkpoint(2);
        close(&mut ck, Block, 1);
        let p = extract(&ck, 0.5).unwrap();
        assert!(p.weights.blocks[1].ffn.is_none());
        assert!(!p.descriptor().per_layer[1].ffn.present);
        assert!(p.weights.blocks[0].ffn.is_some());
        assert!(verify_equivalence(&ck, &p, 8, &mut SeededRng::new(3)).unwrap().passed);
    }

    #[test]
    fn partial_head_keeps_queries_and_keys() {
        use crate::gating::GateFamily::*;
        let mut ck = checkpoint(3);
        // head 1 of layer 0 keeps dims {1, 3}
        close(&mut ck, Dim, 4);
        close(&mut ck, Dim, 6);
        let p = extract(&ck, 0.5).unwrap();
        let h = &p.weights.blocks[0].attn.heads[1];
        assert_eq!(h.wv.shape(), &[8, 2]);
        assert_eq!(h.wq.shape(), &[8, 4]);
        assert_eq!(h.wk.shape(), &[8, 4]);
        assert_eq!(p.weights.blocks[0].attn.wo.shape(), &[6, 8]);
        assert_eq!(p.architecture.per_layer[0].heads[1].dims, vec![1, 3]);
        let src = &ck.weights.blocks[0].attn.heads[1].wv;
        assert_eq!(h.wv.data()[1], src.data()[3]);
        assert!(verify_equivalence(&ck, &p, 8, &mut SeededRng::new(4)).unwrap().passed);
    }

    #[test]
    fn head_without_dims_is_dropped() {
        use crate::gating::GateFamily::*;
        let mut ck = checkpoint(4);
        for j in 0..4 {
            close(&mut ck, Dim, 2 * 4 + j);
        }
        let p = extract(&ck, 0.5).unwrap();
        let heads: Vec<usize> = p.architecture.per_layer[1].heads.iter().map(|h| h.index).collect();
        assert_eq!(heads, vec![1]);
        assert!(verify_equivalence(&ck, &p, 8, &mut SeededRng::new(5)).unwrap().passed);
    }

    #[test]
    fn layer_with_nothing_left_keeps_residual() {
        use crate::gating::GateFamily::*;
        let mut ck = checkpoint(5);
        close(&mut ck, Head, 2);
        close(&mut ck, Head, 3);
        close(&mut ck, Block, 1);
        for k in 0..6 {
            close(&mut ck, Neuron, k);
        }
        let p = extract(&ck, 0.5).unwrap();
        assert!(p.weights.blocks[1].attn.heads.is_empty());
        assert_eq!(p.weights.blocks[0].ffn.as_ref().unwrap().w1.shape(), &[8, 0]);
        assert!(verify_equivalence(&ck, &p, 8, &mut SeededRng::new(6)).unwrap().passed);
    }

    #[test]
    fn corrupted_weight_fails_at_its_layer() {
        use crate::gating::GateFamily::*;
        let mut ck = checkpoint(6);
        close(&mut ck, Neuron, 6 + 2);
        let mut p = extract(&ck, 0.5).unwrap();
        p.weights.blocks[1].ffn.as_mut().unwrap().w2.data_mut()[0] += 1.0;
        let r = verify_equivalence(&ck, &p, 8, &mut SeededRng::new(7)).unwrap();
        assert!(!r.passed);
        assert_eq!(r.offending_layer, Some(1));
        assert!(r.per_layer_diff[0] == 0.0);
    }

    #[test]
    fn verify_rejects_foreign_checkpoint() {
        let p = extract(&checkpoint(7), 0.5).unwrap();
        let err = verify_equivalence(&checkpoint(8), &p, 4, &mut SeededRng::new(0)).unwrap_err();
        assert!(err.to_string().contains("extracted from"));
    }

    #[test]
    fn threshold_out_of_range() {
        assert!(extract(&checkpoint(1), 1.0).is_err());
        assert!(extract(&checkpoint(1), 0.0).is_err());
    }

    #[test]
    fn export_import_roundtrip_is_exact_and_deterministic() {
        use crate::gating::GateFamily::*;
        let mut ck = checkpoint(9);
        close(&mut ck, Head, 1);
        close(&mut ck, Neuron, 3);
        let p = extract(&ck, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.export(dir.path()).unwrap();
        let back = PrunedCheckpoint::import(dir.path()).unwrap();
        assert_eq!(back, p);

        let x = random_images(&cfg(), 4, &mut SeededRng::new(1));
        let logits = |w: &VitWeights<f32>, a: &Architecture| {
            let mut g = Graph::<f32>::new();
            let v = w.bind_frozen(&mut g);
            let out = forward(&mut g, a, &v, &x, None).unwrap();
            g.tensor(out.logits)
        };
        assert_eq!(logits(&p.weights, &p.architecture), logits(&back.weights, &back.architecture));

        let again = tempfile::tempdir().unwrap();
        extract(&ck, 0.5).unwrap().export(again.path()).unwrap();
        for f in [DESCRIPTOR_FILE, WEIGHTS_FILE] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
        }
    }

    #[test]
    fn descriptor_cost_matches_oracle() {
        use crate::gating::GateFamily::*;
        let mut ck = checkpoint(10);
        close(&mut ck, Head, 0);
        close(&mut ck, Dim, 13);
        let p = extract(&ck, 0.5).unwrap();
        let k = cost_constants(&cfg());
        assert_eq!(p.cost.formula_units, oracle_count(&harden(&ck.gates, 0.5).unwrap(), &k));
        let heads: usize = p.architecture.per_layer.iter().map(|l| l.heads.len()).sum();
        assert_eq!(heads, 5);

        let dense = extract(&checkpoint(1), 0.5).unwrap();
        assert_eq!(dense.cost.formula_units, k.dense_prunable_total);
        assert!(dense.architecture.per_layer.iter().all(|l| l.heads.len() == 2));
    }

    #[test]
    fn tampered_descriptor_cost_is_rejected() {
        let p = extract(&checkpoint(1), 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.export(dir.path()).unwrap();
        let path = dir.path().join(DESCRIPTOR_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let units = p.cost.formula_units.to_string();
        fs::write(&path, text.replacen(&units, "1", 1)).unwrap();
        assert!(PrunedCheckpoint::import(dir.path()).is_err());
    }

    #[test]
    fn mask_architecture_roundtrip() {
        use crate::gating::GateFamily::*;
        let mut ck = checkpoint(11);
        close(&mut ck, Head, 5);
        close(&mut ck, Neuron, 0);
        close(&mut ck, Block, 0);
        let mask = harden(&ck.gates, 0.5).unwrap();
        let arch = architecture_from_mask(&cfg(), &mask);
        assert_eq!(architecture_from_mask(&cfg(), &mask_from_architecture(&arch)), arch);
    }

    #[test]
    fn latency_needs_ten_runs() {
        let ck = checkpoint(1);
        let arch = ck.architecture();
        assert!(benchmark_latency(&ck.weights, &arch, 1, 9, 0, &mut SeededRng::new(0)).is_err());
        let s = benchmark_latency(&ck.weights, &arch, 1, 10, 2, &mut SeededRng::new(0)).unwrap();
        assert!(s.median_ms > 0.0 && s.p90_ms >= s.median_ms);
    }
}
