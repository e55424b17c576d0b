use super::{Architecture, ModelConfig, VitVars};
use crate::error::{Error, Result};
use crate::gating::GateValues;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Logits plus the residual stream after each block.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub block_outputs: Vec<Var>,
}

/// `[B, C, H, W]` images to `[B, P, C·p·p]` flattened patches, row-major
/// over the patch grid; each patch vector is laid out channel, row, column.
pub fn patchify<T: Scalar>(images: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let s = images.shape();
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::Shape {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: want.to_vec(),
        });
    }
    let b = s[0];
    if b == 0 {
        return Err(Error::invalid("images", "batch dimension is 0"));
    }
    let (c, img, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    let side = img / p;
    let pd = cfg.patch_dim();
    let src = images.data();
    let mut out = Vec::with_capacity(b * side * side * pd);
    for n in 0..b {
        for py in 0..side {
            for px in 0..side {
                for ch in 0..c {
                    for y in 0..p {
                        let row = ((n * c + ch) * img + py * p + y) * img + px * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new([b, side * side, pd], out)
}

/// Full forward pass.
///
/// With `gates`, the architecture must be dense: values are multiplied by
/// the joint head·dim gate, FFN hidden units by the neuron gate and the FFN
/// output by the block gate. Without gates the forward runs whatever
/// structure `arch` describes.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    arch: &Architecture,
    params: &VitVars,
    images: &Tensor<T>,
    gates: Option<&GateValues>,
) -> Result<ForwardOutput> {
    let cfg = &arch.config;
    if gates.is_some() && !arch.is_dense() {
        return Err(Error::invalid("gates", "gated forward needs the dense architecture"));
    }
    if params.blocks.len() != arch.per_layer.len() {
        return Err(Error::invalid("weights", "block count does not match architecture"));
    }
    let patches = patchify(images, cfg)?;
    let b = patches.shape()[0];
    let (n, d) = (cfg.seq_len(), cfg.embed_dim);
    let patches = g.constant(&patches);

    let tokens = g.matmul(patches, params.patch_w)?;
    let tokens = g.add(tokens, params.patch_b)?;
    let cls = g.broadcast_to(params.cls, [b, 1, d])?;
    let x = g.concat(&[cls, tokens], 1)?;
    let mut x = g.add(x, params.pos)?;

    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let mut block_outputs = Vec::with_capacity(params.blocks.len());
    for (l, (block, layer)) in params.blocks.iter().zip(&arch.per_layer).enumerate() {
        if block.attn.heads.len() != layer.heads.len() {
            return Err(Error::invalid("weights", format!("layer {l}: head count does not match architecture")));
        }
        let layer_gates = match gates {
            Some(gv) => Some((
                g.select(gv.head, 0, l)?,
                g.select(gv.dim, 0, l)?,
                g.select(gv.block, 0, l)?,
                g.select(gv.neuron, 0, l)?,
            )),
            None => None,
        };

        // attention
        let attn = &block.attn;
        let h = g.layer_norm(x, attn.norm.gamma, attn.norm.beta)?;
        let mut outs = Vec::with_capacity(attn.heads.len());
        for (i, head) in attn.heads.iter().enumerate() {
            let q = g.matmul(h, head.wq)?;
            let q = g.add(q, head.bq)?;
            let k = g.matmul(h, head.wk)?;
            let k = g.add(k, head.bk)?;
            let v = g.matmul(h, head.wv)?;
            let mut v = g.add(v, head.bv)?;
            if let Some((gh, gd, _, _)) = layer_gates {
                let gate = g.select(gh, 0, i)?;
                let dims = g.select(gd, 0, i)?;
                let joint = g.mul(gate, dims)?;
                v = g.mul(v, joint)?;
            }
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let a = g.softmax(scores)?;
            outs.push(g.matmul(a, v)?);
        }
        let y = if outs.is_empty() {
            attn.bo
        } else {
            let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 2)? };
            let y = g.matmul(cat, attn.wo)?;
            g.add(y, attn.bo)?
        };
        x = g.add(x, y)?;

        // feed-forward
        if let Some(ffn) = &block.ffn {
            let h = g.layer_norm(x, ffn.norm.gamma, ffn.norm.beta)?;
            let u = g.matmul(h, ffn.w1)?;
            let u = g.add(u, ffn.b1)?;
            let mut u = g.gelu(u);
            if let Some((_, _, _, gc)) = layer_gates {
                u = g.mul(u, gc)?;
            }
            let y = g.matmul(u, ffn.w2)?;
            let mut y = g.add(y, ffn.b2)?;
            if let Some((_, _, gb, _)) = layer_gates {
                y = g.mul(y, gb)?;
            }
            x = g.add(x, y)?;
        }
        debug_assert_eq!(g.shape(x), &[b, n, d]);
        block_outputs.push(x);
    }

    let x = g.layer_norm(x, params.norm.gamma, params.norm.beta)?;
    let cls = g.select(x, 1, 0)?;
    let logits = g.matmul(cls, params.head_w)?;
    let logits = g.add(logits, params.head_b)?;
    Ok(ForwardOutput { logits, block_outputs })
}
