//! Parameter containers, generic over the leaf type.
//!
//! `VitParams<Tensor<T>>` owns weights, `VitParams<Var>` holds the same
//! weights bound to a graph and `VitParams<Vec<usize>>` is a shape skeleton.
//! [`VitParams::try_map`] and [`VitParams::visit_mut`] walk the leaves in the
//! same fixed order, which is also the checkpoint tensor order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Architecture;
use crate::error::{Error, Result};
use crate::gating::SeededRng;
use crate::tensor::{Gradients, Graph, Scalar, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P> {
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    pub norm: NormParams<P>,
    /// Surviving heads in ascending original index.
    pub heads: Vec<HeadParams<P>>,
    /// Rows are the concatenated value widths of `heads`.
    pub wo: P,
    pub bo: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<P> {
    pub norm: NormParams<P>,
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub attn: AttentionParams<P>,
    /// `None` when the whole FFN block was removed.
    pub ffn: Option<FfnParams<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitParams<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub cls: P,
    pub pos: P,
    pub blocks: Vec<BlockParams<P>>,
    pub norm: NormParams<P>,
    pub head_w: P,
    pub head_b: P,
}

pub type VitWeights<T = f32> = VitParams<Tensor<T>>;
pub type VitVars = VitParams<Var>;

impl<P> NormParams<P> {
    fn try_map<'a, Q>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a P) -> Result<Q>) -> Result<NormParams<Q>> {
        Ok(NormParams {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma)?,
            beta: f(&format!("{prefix}.beta"), &self.beta)?,
        })
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(&str, &'a mut P)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

impl<P> VitParams<P> {
    /// Rebuilds the container leaf by leaf, in checkpoint order.
    pub fn try_map<'a, Q>(&'a self, f: &mut impl FnMut(&str, &'a P) -> Result<Q>) -> Result<VitParams<Q>> {
        let patch_w = f("embed.patch_w", &self.patch_w)?;
        let patch_b = f("embed.patch_b", &self.patch_b)?;
        let cls = f("embed.cls", &self.cls)?;
        let pos = f("embed.pos", &self.pos)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{l}.attn");
            let norm = b.attn.norm.try_map(&format!("{p}.norm"), f)?;
            let mut heads = Vec::with_capacity(b.attn.heads.len());
            for (i, h) in b.attn.heads.iter().enumerate() {
                let hp = format!("{p}.heads.{i}");
                heads.push(HeadParams {
                    wq: f(&format!("{hp}.wq"), &h.wq)?,
                    bq: f(&format!("{hp}.bq"), &h.bq)?,
                    wk: f(&format!("{hp}.wk"), &h.wk)?,
                    bk: f(&format!("{hp}.bk"), &h.bk)?,
                    wv: f(&format!("{hp}.wv"), &h.wv)?,
                    bv: f(&format!("{hp}.bv"), &h.bv)?,
                });
            }
            let wo = f(&format!("{p}.wo"), &b.attn.wo)?;
            let bo = f(&format!("{p}.bo"), &b.attn.bo)?;
            let ffn = match &b.ffn {
                None => None,
                Some(ffn) => {
                    let p = format!("blocks.{l}.ffn");
                    Some(FfnParams {
                        norm: ffn.norm.try_map(&format!("{p}.norm"), f)?,
                        w1: f(&format!("{p}.w1"), &ffn.w1)?,
                        b1: f(&format!("{p}.b1"), &ffn.b1)?,
                        w2: f(&format!("{p}.w2"), &ffn.w2)?,
                        b2: f(&format!("{p}.b2"), &ffn.b2)?,
                    })
                }
            };
            blocks.push(BlockParams {
                attn: AttentionParams { norm, heads, wo, bo },
                ffn,
            });
        }
        Ok(VitParams {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm: self.norm.try_map("norm", f)?,
            head_w: f("classifier.w", &self.head_w)?,
            head_b: f("classifier.b", &self.head_b)?,
        })
    }

    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> VitParams<Q> {
        self.try_map(&mut |name, p| Ok(f(name, p))).expect("infallible map")
    }

    /// Mutable walk in the same order as [`VitParams::try_map`].
    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(&str, &'a mut P)) {
        let f = &mut f;
        let VitParams {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm,
            head_w,
            head_b,
        } = self;
        f("embed.patch_w", patch_w);
        f("embed.patch_b", patch_b);
        f("embed.cls", cls);
        f("embed.pos", pos);
        for (l, b) in blocks.iter_mut().enumerate() {
            let p = format!("blocks.{l}.attn");
            let AttentionParams { norm, heads, wo, bo } = &mut b.attn;
            norm.visit_mut(&format!("{p}.norm"), f);
            for (i, h) in heads.iter_mut().enumerate() {
                let hp = format!("{p}.heads.{i}");
                let HeadParams { wq, bq, wk, bk, wv, bv } = h;
                f(&format!("{hp}.wq"), wq);
                f(&format!("{hp}.bq"), bq);
                f(&format!("{hp}.wk"), wk);
                f(&format!("{hp}.bk"), bk);
                f(&format!("{hp}.wv"), wv);
                f(&format!("{hp}.bv"), bv);
            }
            f(&format!("{p}.wo"), wo);
            f(&format!("{p}.bo"), bo);
            if let Some(ffn) = b.ffn.as_mut() {
                let p = format!("blocks.{l}.ffn");
                let FfnParams { norm, w1, b1, w2, b2 } = ffn;
                norm.visit_mut(&format!("{p}.norm"), f);
                f(&format!("{p}.w1"), w1);
                f(&format!("{p}.b1"), b1);
                f(&format!("{p}.w2"), w2);
                f(&format!("{p}.b2"), b2);
            }
        }
        norm.visit_mut("norm", f);
        f("classifier.w", head_w);
        f("classifier.b", head_b);
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.visit_mut(|_, p| out.push(p));
        out
    }

    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.map(|_, p| out.push(p));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.map(|n, _| out.push(n.to_string()));
        out
    }
}

impl VitParams<Vec<usize>> {
    /// Shape of every tensor for the given architecture.
    pub fn shapes(arch: &Architecture) -> Self {
        let cfg = &arch.config;
        let d = cfg.embed_dim;
        let norm = || NormParams {
            gamma: vec![d],
            beta: vec![d],
        };
        let blocks = arch
            .per_layer
            .iter()
            .map(|layer| {
                let heads = layer
                    .heads
                    .iter()
                    .map(|h| HeadParams {
                        wq: vec![d, cfg.head_dim],
                        bq: vec![cfg.head_dim],
                        wk: vec![d, cfg.head_dim],
                        bk: vec![cfg.head_dim],
                        wv: vec![d, h.dims.len()],
                        bv: vec![h.dims.len()],
                    })
                    .collect();
                let width: usize = layer.heads.iter().map(|h| h.dims.len()).sum();
                let n = layer.ffn.neurons.len();
                BlockParams {
                    attn: AttentionParams {
                        norm: norm(),
                        heads,
                        wo: vec![width, d],
                        bo: vec![d],
                    },
                    ffn: layer.ffn.present.then(|| FfnParams {
                        norm: norm(),
                        w1: vec![d, n],
                        b1: vec![n],
                        w2: vec![n, d],
                        b2: vec![d],
                    }),
                }
            })
            .collect();
        VitParams {
            patch_w: vec![cfg.patch_dim(), d],
            patch_b: vec![d],
            cls: vec![d],
            pos: vec![cfg.seq_len(), d],
            blocks,
            norm: norm(),
            head_w: vec![d, cfg.num_classes],
            head_b: vec![cfg.num_classes],
        }
    }
}

enum InitKind {
    Zero,
    One,
    Normal,
}

fn init_kind(name: &str) -> InitKind {
    let last = name.rsplit('.').next().unwrap_or(name);
    match last {
        "gamma" => InitKind::One,
        "beta" | "bq" | "bk" | "bv" | "bo" | "b1" | "b2" | "b" | "patch_b" => InitKind::Zero,
        _ => InitKind::Normal,
    }
}

impl<T: Scalar> VitWeights<T> {
    /// Truncated-normal weights (std 0.02, cut at 2 std), zero biases,
    /// unit layer-norm gains.
    pub fn init(arch: &Architecture, rng: &mut SeededRng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        VitParams::shapes(arch).map(|name, shape| {
            let n: usize = shape.iter().product();
            let data = match init_kind(name) {
                InitKind::Zero => vec![T::zero(); n],
                InitKind::One => vec![T::one(); n],
                InitKind::Normal => (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * INIT_STD {
                            break T::from_f64(v);
                        }
                    })
                    .collect(),
            };
            Tensor::new(shape.clone(), data).expect("shape matches").with_grad()
        })
    }

    /// Every tensor filled with `value` (layer-norm gains included).
    pub fn constant(arch: &Architecture, value: f64) -> Self {
        VitParams::shapes(arch).map(|_, shape| Tensor::full(shape.clone(), T::from_f64(value)).with_grad())
    }

    /// Random values in `[-scale, scale]` for every tensor, useful for tests
    /// that need non-degenerate biases and norms.
    pub fn random_uniform(arch: &Architecture, scale: f64, rng: &mut SeededRng) -> Self {
        VitParams::shapes(arch).map(|name, shape| {
            let n: usize = shape.iter().product();
            let offset = if matches!(init_kind(name), InitKind::One) { 1.0 } else { 0.0 };
            let data = (0..n).map(|_| T::from_f64(offset + rng.random_range(-scale..=scale))).collect();
            Tensor::new(shape.clone(), data).expect("shape matches").with_grad()
        })
    }

    /// Checks every tensor against the shapes implied by `arch`.
    pub fn check_shapes(&self, arch: &Architecture) -> Result<()> {
        let expected = VitParams::shapes(arch);
        let names = expected.names();
        if names.len() != self.leaves().len() {
            return Err(Error::invalid("weights", "tensor count does not match architecture"));
        }
        for ((name, want), have) in names.iter().zip(expected.leaves()).zip(self.leaves()) {
            if have.shape() != want.as_slice() {
                return Err(Error::invalid(
                    name.as_str(),
                    format!("shape {:?}, expected {:?}", have.shape(), want),
                ));
            }
        }
        Ok(())
    }

    /// Binds every tensor as a leaf, keeping its `requires_grad` flag.
    pub fn bind(&self, g: &mut Graph<T>) -> VitVars {
        self.map(|_, t| g.param(t))
    }

    /// Binds every tensor as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> VitVars {
        self.map(|_, t| g.constant(t))
    }

    pub fn accumulate_grads(&mut self, vars: &VitVars, grads: &Gradients<T>) {
        let vars = vars.leaves();
        let mut i = 0;
        self.visit_mut(|_, t| {
            grads.accumulate_into(*vars[i], t);
            i += 1;
        });
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(|_, t| t.zero_grad());
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.visit_mut(|_, t| t.set_requires_grad(on));
    }

    pub fn num_params(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> VitWeights<U> {
        self.map(|_, t| t.cast())
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|t| t.is_finite())
    }
}
