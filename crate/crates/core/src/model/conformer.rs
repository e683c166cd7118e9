use std::collections::HashMap;

use super::{Model, ModelError};
use crate::numerics::{Bound, Tape, Var};

const LN_EPS: f64 = 1e-5;

impl Model {
    pub(crate) fn layer_norm(&self, t: &mut Tape, p: &mut Bound, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let g = p.get(t, &format!("{prefix}_g"))?;
        let b = p.get(t, &format!("{prefix}_b"))?;
        Ok(t.layer_norm(x, g, b, LN_EPS)?)
    }

    fn affine(&self, t: &mut Tape, p: &mut Bound, x: Var, w: &str, b: &str) -> Result<Var, ModelError> {
        let wv = p.get(t, w)?;
        let bv = p.get(t, b)?;
        let y = t.matmul(x, wv)?;
        Ok(t.add_row(y, bv)?)
    }

    fn feed_forward(&self, t: &mut Tape, p: &mut Bound, x: Var, pre: &str) -> Result<Var, ModelError> {
        let h = self.layer_norm(t, p, x, &format!("{pre}.ln"))?;
        let h = self.affine(t, p, h, &format!("{pre}.w1"), &format!("{pre}.b1"))?;
        let h = t.swish(h);
        let h = self.affine(t, p, h, &format!("{pre}.w2"), &format!("{pre}.b2"))?;
        let h = t.scale(h, 0.5);
        Ok(t.add(x, h)?)
    }

    /// Multi-head self-attention with a learned relative-position bias,
    /// restricted to each segment of the packed rows.
    fn attention(&self, t: &mut Tape, p: &mut Bound, x: Var, pre: &str, segs: &[usize]) -> Result<Var, ModelError> {
        let h = self.layer_norm(t, p, x, &format!("{pre}.ln"))?;
        let wq = p.get(t, &format!("{pre}.wq"))?;
        let wk = p.get(t, &format!("{pre}.wk"))?;
        let wv = p.get(t, &format!("{pre}.wv"))?;
        let rel = p.get(t, &format!("{pre}.rel"))?;
        let q = t.matmul(h, wq)?;
        let k = t.matmul(h, wk)?;
        let v = t.matmul(h, wv)?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut bias_cache: HashMap<(usize, usize), Var> = HashMap::new();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for head in 0..self.cfg.n_heads {
            let (qh, kh, vh) = if self.cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    t.slice_cols(q, head * dh, dh)?,
                    t.slice_cols(k, head * dh, dh)?,
                    t.slice_cols(v, head * dh, dh)?,
                )
            };
            let mut outs = Vec::with_capacity(segs.len());
            let mut start = 0;
            for &len in segs {
                let (qs, ks, vs) = if segs.len() == 1 {
                    (qh, kh, vh)
                } else {
                    (
                        t.slice_rows(qh, start, len)?,
                        t.slice_rows(kh, start, len)?,
                        t.slice_rows(vh, start, len)?,
                    )
                };
                let s = t.matmul_t(qs, ks)?;
                let s = t.scale(s, scale);
                let bias = match bias_cache.get(&(head, len)) {
                    Some(&b) => b,
                    None => {
                        let b = t.rel_pos_bias(rel, head, len)?;
                        bias_cache.insert((head, len), b);
                        b
                    }
                };
                let s = t.add(s, bias)?;
                let a = t.softmax(s);
                outs.push(t.matmul(a, vs)?);
                start += len;
            }
            heads.push(if outs.len() == 1 { outs[0] } else { t.concat_rows(&outs)? });
        }
        let cat = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads)? };
        let o = self.affine(t, p, cat, &format!("{pre}.wo"), &format!("{pre}.bo"))?;
        Ok(t.add(x, o)?)
    }

    /// LN → pointwise → GLU → depthwise (per segment) → LN → swish →
    /// pointwise, with a residual connection.
    fn conv_module(&self, t: &mut Tape, p: &mut Bound, x: Var, pre: &str, segs: &[usize]) -> Result<Var, ModelError> {
        let h = self.layer_norm(t, p, x, &format!("{pre}.ln"))?;
        let h = self.affine(t, p, h, &format!("{pre}.pw1"), &format!("{pre}.pw1_b"))?;
        let h = t.glu(h)?;
        let dw = p.get(t, &format!("{pre}.dw"))?;
        let dwb = p.get(t, &format!("{pre}.dw_b"))?;
        let h = if segs.len() == 1 {
            t.depthwise_conv(h, dw, dwb)?
        } else {
            let mut parts = Vec::with_capacity(segs.len());
            let mut start = 0;
            for &len in segs {
                let s = t.slice_rows(h, start, len)?;
                parts.push(t.depthwise_conv(s, dw, dwb)?);
                start += len;
            }
            t.concat_rows(&parts)?
        };
        let h = self.layer_norm(t, p, h, &format!("{pre}.ln2"))?;
        let h = t.swish(h);
        let h = self.affine(t, p, h, &format!("{pre}.pw2"), &format!("{pre}.pw2_b"))?;
        Ok(t.add(x, h)?)
    }

    /// One Conformer layer over packed rows `x [Σ segs, D]`.
    pub(crate) fn conformer_layer(
        &self,
        t: &mut Tape,
        p: &mut Bound,
        x: Var,
        prefix: &str,
        segs: &[usize],
    ) -> Result<Var, ModelError> {
        let x = self.feed_forward(t, p, x, &format!("{prefix}.ff1"))?;
        let x = self.attention(t, p, x, &format!("{prefix}.att"), segs)?;
        let x = self.conv_module(t, p, x, &format!("{prefix}.conv"), segs)?;
        let x = self.feed_forward(t, p, x, &format!("{prefix}.ff2"))?;
        self.layer_norm(t, p, x, &format!("{prefix}.out.ln"))
    }
}
