//! Iterative audio-visual transformer decoder.
//!
//! An interaction unit is one audio block followed by visual blocks over
//! `V5`, `V4` and `V3`. The unit is repeated `D` times and a final audio
//! block closes the stack, giving `4·D + 1` blocks. Every block is
//! cross-attention → self-attention → FFN, each post-normed with a residual.
//! Visual cross-attention is masked by the previous prediction.

use super::config::ModelConfig;
use super::heads::{predict, LayerOutput};
use super::nn::{Ctx, Init};
use crate::error::{Error, Result};
use crate::tensor::{kernels, lit, sigmoid, Real, Tensor, Var};

/// Which memory a block attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Audio,
    /// Visual level `i` (`V_i`), one of 5, 4, 3.
    Visual(usize),
}

/// Block kinds in execution order for depth `d`.
pub fn block_schedule(depth: usize) -> Vec<BlockKind> {
    let mut out = Vec::with_capacity(4 * depth + 1);
    for _ in 0..depth {
        out.extend([BlockKind::Audio, BlockKind::Visual(5), BlockKind::Visual(4), BlockKind::Visual(3)]);
    }
    out.push(BlockKind::Audio);
    out
}

pub(crate) fn init_params<T: Real>(init: &mut Init<'_, T>, cfg: &ModelConfig, visual_channels: &[usize; 4], audio_channels: usize) {
    let ch = cfg.hidden;
    init.linear("dec.audio_proj", audio_channels, ch);
    for level in 3..=5 {
        init.linear(&format!("dec.level{level}.proj"), visual_channels[level - 2], ch);
    }
    init.normal("dec.level_embed", &[3, ch], 1.0);
    for j in 0..cfg.num_blocks() {
        let p = format!("dec.block{j}");
        init.attention(&format!("{p}.cross"), ch);
        init.layer_norm(&format!("{p}.norm1"), ch);
        init.attention(&format!("{p}.self"), ch);
        init.layer_norm(&format!("{p}.norm2"), ch);
        init.ffn(&format!("{p}.ffn"), ch, cfg.ffn_width);
        init.layer_norm(&format!("{p}.norm3"), ch);
    }
}

/// Fixed 2-D sine/cosine encoding, `[h·w × dim]`: the first half of the
/// channels encode the row, the second half the column, with positions
/// normalised to `(0, 2π]`.
pub fn sine_position_encoding<T: Real>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let freq = |j: usize| 10000f64.powf(2.0 * (j / 2) as f64 / half as f64);
    let enc = |pos: f64, j: usize| {
        let v = pos / freq(j);
        if j % 2 == 0 { v.sin() } else { v.cos() }
    };
    Tensor::from_fn([h * w, dim], |i| {
        let (p, c) = (i / dim, i % dim);
        let (y, x) = (p / w, p % w);
        if c < half {
            lit(enc((y + 1) as f64 / h as f64 * two_pi, c))
        } else {
            lit(enc((x + 1) as f64 / w as f64 * two_pi, c - half))
        }
    })
}

/// Allowed-position mask `[N × h·w]` for visual cross-attention: the
/// sigmoid of each query's mask logits, bilinearly resized to `(h, w)` and
/// thresholded at 0.5. A query with no allowed position may attend
/// everywhere.
pub fn compute_attention_mask<T: Real>(mask_logits: &Tensor<T>, src: (usize, usize), target: (usize, usize)) -> Result<Vec<bool>> {
    let (h2, w2) = src;
    let (n, hw) = mask_logits.shape2()?;
    if hw != h2 * w2 {
        return Err(Error::shape(format!("mask logits have {hw} columns, expected {h2}×{w2}")));
    }
    let probs: Vec<T> = mask_logits.data().iter().map(|&v| sigmoid(v)).collect();
    let (h, w) = target;
    let resized = kernels::bilinear_resize(&probs, n, h2, w2, h, w);
    let half = lit::<T>(0.5);
    let mut allowed: Vec<bool> = resized.iter().map(|&p| p >= half).collect();
    for row in allowed.chunks_mut(h * w) {
        if !row.iter().any(|&a| a) {
            row.iter_mut().for_each(|a| *a = true);
        }
    }
    Ok(allowed)
}

/// `0` where allowed, `-inf` elsewhere.
pub fn additive_mask<T: Real>(allowed: &[bool], n: usize, l: usize) -> Tensor<T> {
    Tensor::from_fn([n, l], |i| if allowed[i] { T::zero() } else { T::neg_infinity() })
}

/// Keys and values for one memory.
pub struct Memory {
    pub key: Var,
    pub value: Var,
    /// Spatial size for visual memories.
    pub size: Option<(usize, usize)>,
}

/// Build memories for the audio feature and `V3..V5`.
pub fn build_memories<T: Real>(ctx: &mut Ctx<'_, T>, audio: Var, visual: &[Var; 4]) -> Result<(Memory, [Memory; 3])> {
    let a = ctx.linear(audio, "dec.audio_proj")?;
    let audio_mem = Memory { key: a, value: a, size: None };
    let embed = ctx.p("dec.level_embed")?;
    let mut levels = Vec::with_capacity(3);
    for level in 3..=5 {
        let v = visual[level - 2];
        let d = ctx.g.dims(v).to_vec();
        let (h, w, c) = (d[0], d[1], d[2]);
        let flat = ctx.g.reshape(v, &[h * w, c])?;
        let mem = ctx.linear(flat, &format!("dec.level{level}.proj"))?;
        let e = ctx.g.select_rows(embed, &[level - 3])?;
        let ch = ctx.g.dims(e)[1];
        let e = ctx.g.reshape(e, &[ch])?;
        let mem = ctx.g.add_row(mem, e)?;
        let key = ctx.g.add_const(mem, &sine_position_encoding(h, w, ch))?;
        levels.push(Memory { key, value: mem, size: Some((h, w)) });
    }
    Ok((audio_mem, levels.try_into().ok().expect("three levels")))
}

/// One decoder block. `mask` is an additive `[N × L]` mask for the
/// cross-attention.
pub fn decoder_block<T: Real>(
    ctx: &mut Ctx<'_, T>,
    queries: Var,
    memory: &Memory,
    mask: Option<&Tensor<T>>,
    heads: usize,
    name: &str,
) -> Result<Var> {
    let (c, _) = ctx.attention(queries, memory.key, memory.value, heads, mask, &format!("{name}.cross"))?;
    let x = ctx.g.add(queries, c)?;
    let x = ctx.layer_norm(x, &format!("{name}.norm1"))?;
    let (s, _) = ctx.attention(x, x, x, heads, None, &format!("{name}.self"))?;
    let x = ctx.g.add(x, s)?;
    let x = ctx.layer_norm(x, &format!("{name}.norm2"))?;
    let f = ctx.ffn(x, &format!("{name}.ffn"))?;
    let x = ctx.g.add(x, f)?;
    ctx.layer_norm(x, &format!("{name}.norm3"))
}

/// Run the block stack from `queries`, emitting the initial prediction and
/// one prediction after every block.
pub fn decoder_forward<T: Real>(
    ctx: &mut Ctx<'_, T>,
    queries: Var,
    audio: &Memory,
    levels: &[Memory; 3],
    pixel_embed: Var,
    mask_size: (usize, usize),
    cfg: &ModelConfig,
) -> Result<Vec<LayerOutput>> {
    let mut outputs = Vec::with_capacity(cfg.num_blocks() + 1);
    outputs.push(predict(ctx, queries, pixel_embed)?);
    let mut q = queries;
    for (j, kind) in block_schedule(cfg.decoder_depth).into_iter().enumerate() {
        let name = format!("dec.block{j}");
        q = match kind {
            BlockKind::Audio => decoder_block(ctx, q, audio, None, cfg.heads, &name)?,
            BlockKind::Visual(level) => {
                let mem = &levels[level - 3];
                let size = mem.size.expect("visual memory has a size");
                let prev = ctx.g.value(outputs[j].mask_logits).clone();
                let allowed = compute_attention_mask(&prev, mask_size, size)?;
                let n = ctx.g.dims(q)[0];
                let mask = additive_mask(&allowed, n, size.0 * size.1);
                decoder_block(ctx, q, mem, Some(&mask), cfg.heads, &name)?
            }
        };
        outputs.push(predict(ctx, q, pixel_embed)?);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_has_4d_plus_1_blocks() {
        for d in 0..5 {
            let s = block_schedule(d);
            assert_eq!(s.len(), 4 * d + 1);
            assert_eq!(*s.last().unwrap(), BlockKind::Audio);
        }
        assert_eq!(
            block_schedule(1),
            vec![BlockKind::Audio, BlockKind::Visual(5), BlockKind::Visual(4), BlockKind::Visual(3), BlockKind::Audio]
        );
    }

    #[test]
    fn saturated_masks() {
        let pos = Tensor::<f64>::full([2, 16], 50.0);
        assert!(compute_attention_mask(&pos, (4, 4), (2, 2)).unwrap().iter().all(|&a| a));
        let neg = Tensor::<f64>::full([2, 16], -50.0);
        assert!(compute_attention_mask(&neg, (4, 4), (2, 2)).unwrap().iter().all(|&a| a));
    }

    #[test]
    fn checkerboard_matches_block_average() {
        // Checkerboard with unequal magnitudes so block means sit away from 0.5.
        let (h, w) = (8, 8);
        let logits: Vec<f64> = (0..h * w)
            .map(|p| {
                let (y, x) = (p / w, p % w);
                let on = (y + x) % 2 == 0;
                match (on, (y / 2 + x / 2) % 3) {
                    (true, 0) => 3.0,
                    (true, _) => 0.4,
                    (false, 1) => -0.2,
                    (false, _) => -4.0,
                }
            })
            .collect();
        let t = Tensor::new([1, h * w], logits.clone()).unwrap();
        let got = compute_attention_mask(&t, (h, w), (4, 4)).unwrap();
        let s = |y: usize, x: usize| sigmoid(logits[y * w + x]);
        let mut expected = Vec::new();
        for by in 0..4 {
            for bx in 0..4 {
                let avg = (s(2 * by, 2 * bx) + s(2 * by, 2 * bx + 1) + s(2 * by + 1, 2 * bx) + s(2 * by + 1, 2 * bx + 1)) / 4.0;
                expected.push(avg >= 0.5);
            }
        }
        assert!(expected.iter().any(|&e| e) && expected.iter().any(|&e| !e));
        assert_eq!(got, expected);
    }

    #[test]
    fn position_encoding_is_bounded_and_distinct() {
        let pe = sine_position_encoding::<f64>(4, 4, 16);
        assert_eq!(pe.dims(), &[16, 16]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        let rows: Vec<&[f64]> = pe.data().chunks(16).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }
}
