//! Attention primitives: standard multi-head attention (used by the
//! decoupled self-attention passes) and deformable attention with
//! box-relative sampling.

use crate::error::Result;
use candle_core::{DType, Tensor};
use candle_nn::{linear, Linear, Module, VarBuilder};
use std::cell::Cell;

thread_local! {
    static MAX_ATTN_DIM: Cell<usize> = const { Cell::new(0) };
}

/// Reset the per-thread record of the largest attention matrix side built.
pub fn reset_attention_stats() {
    MAX_ATTN_DIM.with(|c| c.set(0));
}

/// Largest side of any score matrix materialized since the last reset.
pub fn max_attention_dim() -> usize {
    MAX_ATTN_DIM.with(|c| c.get())
}

fn note_attention(rows: usize, cols: usize) {
    MAX_ATTN_DIM.with(|c| c.set(c.get().max(rows).max(cols)));
}

pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(d: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: linear(d, d, vb.pp("q"))?,
            k: linear(d, d, vb.pp("k"))?,
            v: linear(d, d, vb.pp("v"))?,
            o: linear(d, d, vb.pp("o"))?,
            heads,
        })
    }

    /// `queries`/`keys` are `[batch, n, d]`; `values_in` defaults to `keys`.
    /// `mask` is an optional additive `[n_q, n_k]` bias (use a large
    /// negative value to block a pair).
    pub fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        values_in: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, n_q, d) = queries.dims3()?;
        let n_k = keys.dims3()?.1;
        let dh = d / self.heads;
        let split = |t: &Tensor, lin: &Linear, n: usize| -> Result<Tensor> {
            Ok(lin
                .forward(t)?
                .reshape((b, n, self.heads, dh))?
                .transpose(1, 2)?
                .reshape((b * self.heads, n, dh))?
                .contiguous()?)
        };
        let q = split(queries, &self.q, n_q)?;
        let k = split(keys, &self.k, n_k)?;
        let v = split(values_in, &self.v, n_k)?;
        note_attention(n_q, n_k);
        let mut scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(&m.unsqueeze(0)?)?;
        }
        let attn = candle_nn::ops::softmax(&scores, 2)?;
        let out = attn
            .matmul(&v)?
            .reshape((b, self.heads, n_q, dh))?
            .transpose(1, 2)?
            .reshape((b, n_q, d))?;
        Ok(self.o.forward(&out)?)
    }
}

/// One flattened feature level: `tokens` is `[batch, h*w, d]`.
pub struct FeatureLevel {
    pub tokens: Tensor,
    pub h: usize,
    pub w: usize,
}

/// Deformable attention whose sampling locations are offsets from a
/// reference box center, scaled by the box half-extent. Zero offsets sample
/// exactly the center; shrinking the box collapses all samples toward it.
pub struct DeformableAttention {
    value_proj: Linear,
    offset_head: Linear,
    weight_head: Linear,
    out_proj: Linear,
    heads: usize,
    points: usize,
    levels: usize,
}

impl DeformableAttention {
    pub fn new(d: usize, heads: usize, points: usize, levels: usize, vb: VarBuilder) -> Result<Self> {
        let k = heads * levels * points;
        // zero-init the offset head so training starts sampling at box
        // centers; also what the exact-center contract expects for fresh
        // weights
        let offset_head = Linear::new(
            vb.pp("offsets")
                .get_with_hints((2 * k, d), "weight", candle_nn::Init::Const(0.0))?,
            Some(vb.pp("offsets").get_with_hints(2 * k, "bias", candle_nn::Init::Const(0.0))?),
        );
        Ok(DeformableAttention {
            value_proj: linear(d, d, vb.pp("value"))?,
            offset_head,
            weight_head: linear(d, k, vb.pp("weights"))?,
            out_proj: linear(d, d, vb.pp("out"))?,
            heads,
            points,
            levels,
        })
    }

    /// Normalized sampling locations `[b, n, heads, levels, points, 2]` for
    /// the given queries and reference boxes (`[b, n, 4]`, center-size).
    pub fn sampling_locations(&self, queries: &Tensor, boxes: &Tensor) -> Result<Tensor> {
        let (b, n, _) = queries.dims3()?;
        let off = self
            .offset_head
            .forward(queries)?
            .reshape((b, n, self.heads, self.levels, self.points, 2))?;
        let center = boxes.narrow(2, 0, 2)?.reshape((b, n, 1, 1, 1, 2))?;
        let half = (boxes.narrow(2, 2, 2)?.reshape((b, n, 1, 1, 1, 2))? * 0.5)?;
        Ok(center.broadcast_add(&off.broadcast_mul(&half)?)?)
    }

    /// Bilinear sample of per-head values at `loc` (normalized coords) on
    /// one level, differentiable through the fractional weights.
    fn sample_level(&self, level: &FeatureLevel, loc: &Tensor) -> Result<Tensor> {
        let (b, n, heads, points, _) = loc.dims5()?;
        let d = level.tokens.dims3()?.2;
        let dh = d / heads;
        let (h, w) = (level.h, level.w);
        let value = self
            .value_proj
            .forward(&level.tokens)?
            .reshape((b, h * w, heads, dh))?
            .permute((0, 2, 1, 3))?
            .reshape((b * heads, h * w, dh))?
            .reshape((b * heads * h * w, dh))?
            .contiguous()?;

        // pixel-space coordinates; [b, heads, n, points]
        let px = loc
            .narrow(4, 0, 1)?
            .squeeze(4)?
            .affine(w as f64, -0.5)?
            .permute((0, 2, 1, 3))?
            .contiguous()?;
        let py = loc
            .narrow(4, 1, 1)?
            .squeeze(4)?
            .affine(h as f64, -0.5)?
            .permute((0, 2, 1, 3))?
            .contiguous()?;
        let x0f = px.floor()?;
        let y0f = py.floor()?;
        let fx = (&px - &x0f)?;
        let fy = (&py - &y0f)?;
        let clamp_x = |t: &Tensor| t.clamp(0.0, (w - 1) as f64);
        let clamp_y = |t: &Tensor| t.clamp(0.0, (h - 1) as f64);
        let x0 = clamp_x(&x0f)?;
        let x1 = clamp_x(&(x0f + 1.0)?)?;
        let y0 = clamp_y(&y0f)?;
        let y1 = clamp_y(&(y0f + 1.0)?)?;

        // row offsets so each (batch, head) pair indexes its own value block
        let dtype = loc.dtype();
        let device = loc.device();
        let base = Tensor::arange(0u32, (b * heads) as u32, device)?
            .to_dtype(dtype)?
            .reshape((b, heads, 1, 1))?
            .affine((h * w) as f64, 0.0)?;
        let gather = |xs: &Tensor, ys: &Tensor| -> Result<Tensor> {
            let idx = base
                .broadcast_add(&(ys.affine(w as f64, 0.0)? + xs)?)?
                .reshape(b * heads * n * points)?
                .to_dtype(DType::U32)?;
            Ok(value
                .index_select(&idx, 0)?
                .reshape((b, heads, n, points, dh))?)
        };
        let v00 = gather(&x0, &y0)?;
        let v10 = gather(&x1, &y0)?;
        let v01 = gather(&x0, &y1)?;
        let v11 = gather(&x1, &y1)?;
        let fx = fx.unsqueeze(4)?;
        let fy = fy.unsqueeze(4)?;
        let one_fx = (fx.neg()? + 1.0)?;
        let one_fy = (fy.neg()? + 1.0)?;
        let top = (v00.broadcast_mul(&one_fx)? + v10.broadcast_mul(&fx)?)?;
        let bottom = (v01.broadcast_mul(&one_fx)? + v11.broadcast_mul(&fx)?)?;
        Ok((top.broadcast_mul(&one_fy)? + bottom.broadcast_mul(&fy)?)?)
    }

    /// `queries` `[b, n, d]`, `boxes` `[b, n, 4]` center-size normalized.
    pub fn forward(
        &self,
        queries: &Tensor,
        boxes: &Tensor,
        levels: &[FeatureLevel],
    ) -> Result<Tensor> {
        assert_eq!(levels.len(), self.levels);
        let (b, n, d) = queries.dims3()?;
        let dh = d / self.heads;
        let loc = self.sampling_locations(queries, boxes)?;
        let weights = candle_nn::ops::softmax(
            &self
                .weight_head
                .forward(queries)?
                .reshape((b, n, self.heads, self.levels * self.points))?,
            3,
        )?
        .reshape((b, n, self.heads, self.levels, self.points))?
        // [b, heads, n, levels, points]
        .permute((0, 2, 1, 3, 4))?
        .contiguous()?;

        let mut acc: Option<Tensor> = None;
        for (l, level) in levels.iter().enumerate() {
            let loc_l = loc.narrow(3, l, 1)?.squeeze(3)?.contiguous()?;
            let sampled = self.sample_level(level, &loc_l)?; // [b,heads,n,points,dh]
            let w_l = weights.narrow(3, l, 1)?.squeeze(3)?.unsqueeze(4)?;
            let term = sampled.broadcast_mul(&w_l)?.sum(3)?; // [b,heads,n,dh]
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        let out = acc
            .unwrap()
            .permute((0, 2, 1, 3))?
            .reshape((b, n, self.heads * dh))?;
        Ok(self.out_proj.forward(&out)?)
    }
}
