//! Encoder and decoder stacks. Batches are stacked along rows: `B` sequences
//! of length `L` form a `[B·L, d]` matrix and attention runs per sequence.

use super::params::{Attn, Graph, Linear, Mlp, Norm};
use crate::data::ImageSample;
use crate::error::Result;
use crate::tensor::{Tensor, TensorError, Var};

pub(crate) fn linear(g: &mut Graph, x: Var, l: Linear) -> Result<Var> {
    let (w, b) = (g.p(l.w), g.p(l.b));
    let y = g.tape.matmul(x, w)?;
    Ok(g.tape.add_row(y, b)?)
}

pub(crate) fn norm(g: &mut Graph, x: Var, n: Norm) -> Result<Var> {
    let (gain, bias) = (g.p(n.gain), g.p(n.bias));
    Ok(g.tape.layer_norm(x, gain, bias)?)
}

fn attend(g: &mut Graph, x: Var, kv: Var, a: Attn, groups: usize, causal: bool) -> Result<Var> {
    let heads = g.params().config().heads;
    let q = linear(g, x, a.q)?;
    let k = linear(g, kv, a.k)?;
    let v = linear(g, kv, a.v)?;
    let o = g.tape.attention(q, k, v, heads, groups, causal)?;
    linear(g, o, a.o)
}

fn mlp(g: &mut Graph, x: Var, m: Mlp) -> Result<Var> {
    let h = linear(g, x, m.fc1)?;
    let h = g.tape.gelu(h)?;
    linear(g, h, m.fc2)
}

/// Stacks `v` on top of itself `times` times.
pub(crate) fn tile(g: &mut Graph, v: Var, times: usize) -> Result<Var> {
    if times == 1 {
        return Ok(v);
    }
    Ok(g.tape.concat(&vec![v; times])?)
}

/// Flattens images into `[B·T, p·p·3]` patch rows, pixels mapped to [-1, 1].
pub(crate) fn patchify(images: &[&ImageSample], size: usize, patch: usize) -> Result<Tensor> {
    if images.is_empty() {
        return Err(TensorError::dim("encode_image", "empty batch").into());
    }
    if size % patch != 0 {
        return Err(TensorError::dim(
            "encode_image",
            format!("image size {size} not divisible by patch {patch}"),
        )
        .into());
    }
    let per_side = size / patch;
    let pd = patch * patch * 3;
    let mut data = Vec::with_capacity(images.len() * per_side * per_side * pd);
    for img in images {
        if img.height != size || img.width != size {
            return Err(TensorError::dim(
                "encode_image",
                format!("expected {size}x{size} image, got {}x{}", img.height, img.width),
            )
            .into());
        }
        for py in 0..per_side {
            for px in 0..per_side {
                for dy in 0..patch {
                    let row = (py * patch + dy) * size + px * patch;
                    data.extend(img.pixels[row * 3..(row + patch) * 3].iter().map(|&v| (v as f64 - 0.5) * 2.0));
                }
            }
        }
    }
    Ok(Tensor::new(vec![images.len() * per_side * per_side, pd], data)?)
}

/// Image embeddings `[B·T, d]`.
pub(crate) fn encoder(g: &mut Graph, images: &[&ImageSample]) -> Result<Var> {
    let cfg = g.params().config().clone();
    let layout = g.params().layout.clone();
    let patches = patchify(images, cfg.image_size, cfg.patch)?;
    let x = g.tape.constant(patches);
    let mut x = linear(g, x, layout.patch)?;
    let pos = g.p(layout.enc_pos);
    let pos = tile(g, pos, images.len())?;
    x = g.tape.add(x, pos)?;
    for blk in &layout.enc_blocks {
        let h = norm(g, x, blk.ln1)?;
        let a = attend(g, h, h, blk.attn, images.len(), false)?;
        x = g.tape.add(x, a)?;
        let h = norm(g, x, blk.ln2)?;
        let m = mlp(g, h, blk.mlp)?;
        x = g.tape.add(x, m)?;
    }
    norm(g, x, layout.enc_ln)
}

/// Decoder position rows `0..len`, tiled over `groups` sequences.
pub(crate) fn positions(g: &mut Graph, len: usize, groups: usize) -> Result<Var> {
    let pos = g.p(g.params().layout.dec_pos);
    let max = g.params().config().max_positions;
    if len > max {
        return Err(TensorError::dim("decoder", format!("sequence of {len} exceeds {max} positions")).into());
    }
    let p = g.tape.slice_rows(pos, 0, len)?;
    tile(g, p, groups)
}

/// Runs the decoder over `groups` input sequences stacked in `inputs`
/// (`[groups·L, d]`, positions already added). With `memory`
/// (`[groups·T, d]`) every block cross-attends to the image; without it the
/// cross-attention sublayers are skipped. Returns next-token logits
/// `[groups·L, V]` from the output projection tied to the word embeddings.
pub(crate) fn decoder(g: &mut Graph, inputs: Var, groups: usize, memory: Option<Var>) -> Result<Var> {
    let layout = g.params().layout.clone();
    let d = g.params().config().d_model;
    let mut x = inputs;
    for blk in &layout.dec_blocks {
        let h = norm(g, x, blk.ln1)?;
        let a = attend(g, h, h, blk.self_attn, groups, true)?;
        x = g.tape.add(x, a)?;
        if let Some(mem) = memory {
            let h = norm(g, x, blk.ln2)?;
            let c = attend(g, h, mem, blk.cross, groups, false)?;
            x = g.tape.add(x, c)?;
        }
        let h = norm(g, x, blk.ln3)?;
        let m = mlp(g, h, blk.mlp)?;
        x = g.tape.add(x, m)?;
    }
    let h = norm(g, x, layout.dec_ln)?;
    let e = g.p(layout.embed);
    let logits = g.tape.matmul_nt(h, e)?;
    Ok(g.tape.scale(logits, 1.0 / (d as f64).sqrt())?)
}
