//! Vision Transformer with head, block, dimension and neuron gates.
//!
//! The same forward pass serves the gated search model (dense
//! [`Architecture`] plus [`GateValues`](crate::gating::GateValues)) and the
//! physically truncated model produced by extraction (sparse
//! [`Architecture`], no gates).

mod forward;
mod params;

pub use forward::{forward, patchify, ForwardOutput};
pub use params::{AttentionParams, BlockParams, FfnParams, HeadParams, NormParams, VitParams, VitVars, VitWeights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub num_classes: usize,
}

fn default_channels() -> usize {
    3
}

impl ModelConfig {
    /// DeiT-Small on 224×224 ImageNet.
    pub fn deit_small() -> Self {
        Self {
            layers: 12,
            heads: 6,
            embed_dim: 384,
            head_dim: 64,
            ffn_dim: 1536,
            image_size: 224,
            patch_size: 16,
            channels: 3,
            num_classes: 1000,
        }
    }

    /// Six-layer ViT-Tiny variant for 32×32 CIFAR-10.
    pub fn vit_tiny() -> Self {
        Self {
            layers: 6,
            heads: 3,
            embed_dim: 192,
            head_dim: 64,
            ffn_dim: 768,
            image_size: 32,
            patch_size: 4,
            channels: 3,
            num_classes: 10,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "deit-small" => Some(Self::deit_small()),
            "vit-tiny" => Some(Self::vit_tiny()),
            _ => None,
        }
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(
                "patch_size",
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            ));
        }
        Ok(())
    }
}

/// Surviving structure of one attention head.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadArch {
    pub index: usize,
    /// Surviving value-path dimensions, ascending.
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FfnArch {
    pub present: bool,
    /// Surviving hidden neurons, ascending. Empty when `present` is false.
    pub neurons: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerArch {
    pub heads: Vec<HeadArch>,
    pub ffn: FfnArch,
}

/// Which heads, dimensions, blocks and neurons physically exist.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub config: ModelConfig,
    pub per_layer: Vec<LayerArch>,
}

impl Architecture {
    pub fn dense(config: &ModelConfig) -> Self {
        let layer = LayerArch {
            heads: (0..config.heads)
                .map(|index| HeadArch {
                    index,
                    dims: (0..config.head_dim).collect(),
                })
                .collect(),
            ffn: FfnArch {
                present: true,
                neurons: (0..config.ffn_dim).collect(),
            },
        };
        Self {
            config: *config,
            per_layer: vec![layer; config.layers],
        }
    }

    pub fn is_dense(&self) -> bool {
        *self == Self::dense(&self.config)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.per_layer.len() != cfg.layers {
            return Err(Error::invalid(
                "per_layer",
                format!("{} layers listed, config has {}", self.per_layer.len(), cfg.layers),
            ));
        }
        let ascending = |v: &[usize], bound: usize| v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|&x| x < bound);
        for (l, layer) in self.per_layer.iter().enumerate() {
            let idx: Vec<usize> = layer.heads.iter().map(|h| h.index).collect();
            if !ascending(&idx, cfg.heads) {
                return Err(Error::invalid("per_layer", format!("layer {l}: bad head indices {idx:?}")));
            }
            for h in &layer.heads {
                if h.dims.is_empty() || !ascending(&h.dims, cfg.head_dim) {
                    return Err(Error::invalid(
                        "per_layer",
                        format!("layer {l} head {}: bad dims {:?}", h.index, h.dims),
                    ));
                }
            }
            if !ascending(&layer.ffn.neurons, cfg.ffn_dim) || (!layer.ffn.present && !layer.ffn.neurons.is_empty()) {
                return Err(Error::invalid("per_layer", format!("layer {l}: bad neuron list")));
            }
        }
        Ok(())
    }
}
