use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{encode_on_tape, frozen_features, EvalError, Input};
use crate::losses::mlm_loss;
use crate::model::{Modality, Model};
use crate::numerics::{Bound, ParamStore, Tape, Tensor, Var};
use crate::trainer::{clip_global_norm, lr_schedule, Adam};
use crate::vocab::{BOS, EOS};

/// A source (speech frames and/or character ids) with a target id string.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqExample {
    pub lang: String,
    pub frames: Option<Tensor>,
    pub source_ids: Option<Vec<u32>>,
    pub target: Vec<u32>,
}

impl SeqExample {
    fn input(&self, m: Modality, index: usize) -> Result<Input<'_>, EvalError> {
        match m {
            Modality::Speech => self.frames.as_ref().map(Input::Speech),
            Modality::Text => self.source_ids.as_deref().map(Input::Text),
        }
        .ok_or(EvalError::MissingModality { index, modality: m })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Seq2SeqConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Longest target, excluding the end marker.
    pub max_len: usize,
    pub dropout_st: f64,
    pub dropout_joint: f64,
    pub mt_weight: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub train_encoder: bool,
    pub seed: u64,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            dim: 512,
            heads: 8,
            ff_dim: 2048,
            max_len: 64,
            dropout_st: 0.3,
            dropout_joint: 0.1,
            mt_weight: 5.0,
            steps: 1000,
            batch: 32,
            lr: 1e-3,
            warmup: 100,
            train_encoder: true,
            seed: 0,
        }
    }
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("decoder needs layers ≥ 1 and dim divisible by heads");
        }
        if !(0.0..1.0).contains(&self.dropout_st) || !(0.0..1.0).contains(&self.dropout_joint) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch == 0 || self.max_len == 0 || !(self.lr > 0.0) || self.mt_weight < 0.0 {
            return bad("batch, max_len, lr must be positive and mt_weight ≥ 0");
        }
        Ok(())
    }
}

/// Corpus-level scores of greedy decodes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DecodeScore {
    /// Position-wise matches over the longer of hypothesis and reference,
    /// summed over the corpus.
    pub token_accuracy: f64,
    pub exact_match: f64,
}

/// An encoder with an attached autoregressive decoder. `params` holds
/// both the encoder and the `dec.*` weights.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub model: Model,
    pub cfg: Seq2SeqConfig,
    pub params: ParamStore,
}

struct Dropout<'r> {
    p: f64,
    rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, t: &mut Tape, x: Var) -> Result<Var, EvalError> {
        if self.p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let n = t.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = t.constant(t.shape(x).to_vec(), mask)?;
        Ok(t.mul(x, m)?)
    }
}

fn sinusoid(t: &mut Tape, rows: usize, dim: usize) -> Result<Var, EvalError> {
    let mut v = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        for j in 0..dim {
            let freq = 10000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
            let a = r as f64 * freq;
            v.push(if j % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Ok(t.constant(vec![rows, dim], v)?)
}

impl Seq2Seq {
    pub fn new(model: Model, encoder: &ParamStore, cfg: Seq2SeqConfig) -> Result<Self, EvalError> {
        cfg.validate()?;
        let mut params = encoder.clone();
        let (d, dd, v, f) = (model.cfg.model_dim, cfg.dim, model.cfg.vocab_size, cfg.ff_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDEC0DE);
        let mut normal = |shape: Vec<usize>, fan: usize| {
            let nd = Normal::new(0.0, 1.0 / (fan as f64).sqrt()).expect("finite std");
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| nd.sample(&mut rng)).collect()).expect("shape")
        };
        let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n]).expect("shape");
        params.insert("dec.emb", normal(vec![v, dd], dd));
        params.insert("dec.pos", normal(vec![cfg.max_len + 1, dd], dd));
        params.insert("dec.mem.w", normal(vec![d, dd], d));
        params.insert("dec.mem.b", Tensor::zeros(vec![dd]));
        for l in 0..cfg.layers {
            for a in ["self", "cross"] {
                let pre = format!("dec.l{l}.{a}");
                params.insert(format!("{pre}.ln_g"), ones(dd));
                params.insert(format!("{pre}.ln_b"), Tensor::zeros(vec![dd]));
                for w in ["wq", "wk", "wv", "wo"] {
                    params.insert(format!("{pre}.{w}"), normal(vec![dd, dd], dd));
                }
                params.insert(format!("{pre}.bo"), Tensor::zeros(vec![dd]));
            }
            let pre = format!("dec.l{l}.ff");
            params.insert(format!("{pre}.ln_g"), ones(dd));
            params.insert(format!("{pre}.ln_b"), Tensor::zeros(vec![dd]));
            params.insert(format!("{pre}.w1"), normal(vec![dd, f], dd));
            params.insert(format!("{pre}.b1"), Tensor::zeros(vec![f]));
            params.insert(format!("{pre}.w2"), normal(vec![f, dd], f));
            params.insert(format!("{pre}.b2"), Tensor::zeros(vec![dd]));
        }
        params.insert("dec.out.ln_g", ones(dd));
        params.insert("dec.out.ln_b", Tensor::zeros(vec![dd]));
        params.insert("dec.out.w", normal(vec![dd, v], dd));
        params.insert("dec.out.b", Tensor::zeros(vec![v]));
        Ok(Self { model, cfg, params })
    }

    fn ln(t: &mut Tape, p: &mut Bound, x: Var, pre: &str) -> Result<Var, EvalError> {
        let g = p.get(t, &format!("{pre}_g"))?;
        let b = p.get(t, &format!("{pre}_b"))?;
        Ok(t.layer_norm(x, g, b, 1e-5)?)
    }

    fn attention(
        &self,
        t: &mut Tape,
        p: &mut Bound,
        x: Var,
        memory: Option<Var>,
        pre: &str,
        drop: &mut Dropout,
    ) -> Result<Var, EvalError> {
        let h = Self::ln(t, p, x, &format!("{pre}.ln"))?;
        let kv = memory.unwrap_or(h);
        let wq = p.get(t, &format!("{pre}.wq"))?;
        let wk = p.get(t, &format!("{pre}.wk"))?;
        let wv = p.get(t, &format!("{pre}.wv"))?;
        let q = t.matmul(h, wq)?;
        let k = t.matmul(kv, wk)?;
        let v = t.matmul(kv, wv)?;
        let (lq, lk) = (t.rows(q), t.rows(k));
        let heads = self.cfg.heads;
        let dh = self.cfg.dim / heads;
        let causal: Option<Vec<bool>> = memory
            .is_none()
            .then(|| (0..lq * lk).map(|i| i % lk <= i / lk).collect());
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    t.slice_cols(q, hd * dh, dh)?,
                    t.slice_cols(k, hd * dh, dh)?,
                    t.slice_cols(v, hd * dh, dh)?,
                )
            };
            let s = t.matmul_t(qh, kh)?;
            let s = t.scale(s, 1.0 / (dh as f64).sqrt());
            let a = match &causal {
                Some(allowed) => t.masked_softmax(s, allowed)?,
                None => t.softmax(s),
            };
            outs.push(t.matmul(a, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { t.concat_cols(&outs)? };
        let wo = p.get(t, &format!("{pre}.wo"))?;
        let bo = p.get(t, &format!("{pre}.bo"))?;
        let o = t.matmul(cat, wo)?;
        let o = t.add_row(o, bo)?;
        let o = drop.apply(t, o)?;
        Ok(t.add(x, o)?)
    }

    /// Next-token logits `[L, V]` for every prefix position of `prefix`
    /// given encoder rows `memory` `[S, D]`.
    fn logits(
        &self,
        t: &mut Tape,
        p: &mut Bound,
        memory: Var,
        prefix: &[u32],
        drop: &mut Dropout,
    ) -> Result<Var, EvalError> {
        let n = prefix.len();
        if n == 0 || n > self.cfg.max_len + 1 {
            return Err(EvalError::InvalidConfig(format!("decoder prefix of length {n}")));
        }
        let mw = p.get(t, "dec.mem.w")?;
        let mb = p.get(t, "dec.mem.b")?;
        let m = t.matmul(memory, mw)?;
        let m = t.add_row(m, mb)?;
        // encoder rows carry only relative positions; the decoder needs absolute ones
        let rows = t.shape(m)[0];
        let sin = sinusoid(t, rows, self.cfg.dim)?;
        let m = t.add(m, sin)?;
        let emb = p.get(t, "dec.emb")?;
        let ids: Vec<usize> = prefix.iter().map(|&c| c as usize).collect();
        let x = t.embedding(emb, &ids)?;
        let pos = p.get(t, "dec.pos")?;
        let pos = t.slice_rows(pos, 0, n)?;
        let x = t.add(x, pos)?;
        let mut x = drop.apply(t, x)?;
        for l in 0..self.cfg.layers {
            x = self.attention(t, p, x, None, &format!("dec.l{l}.self"), drop)?;
            x = self.attention(t, p, x, Some(m), &format!("dec.l{l}.cross"), drop)?;
            let pre = format!("dec.l{l}.ff");
            let h = Self::ln(t, p, x, &format!("{pre}.ln"))?;
            let w1 = p.get(t, &format!("{pre}.w1"))?;
            let b1 = p.get(t, &format!("{pre}.b1"))?;
            let w2 = p.get(t, &format!("{pre}.w2"))?;
            let b2 = p.get(t, &format!("{pre}.b2"))?;
            let h = t.matmul(h, w1)?;
            let h = t.add_row(h, b1)?;
            let h = t.swish(h);
            let h = t.matmul(h, w2)?;
            let h = t.add_row(h, b2)?;
            let h = drop.apply(t, h)?;
            x = t.add(x, h)?;
        }
        let x = Self::ln(t, p, x, "dec.out.ln")?;
        let w = p.get(t, "dec.out.w")?;
        let b = p.get(t, "dec.out.b")?;
        let z = t.matmul(x, w)?;
        Ok(t.add_row(z, b)?)
    }

    /// Teacher-forced mean token cross-entropy over `examples`, with
    /// `memory[i]` holding example `i`'s encoder rows.
    fn cross_entropy(
        &self,
        t: &mut Tape,
        p: &mut Bound,
        memory: &[Var],
        examples: &[&SeqExample],
        drop: &mut Dropout,
    ) -> Result<Var, EvalError> {
        let mut rows = Vec::with_capacity(examples.len());
        let mut targets = Vec::new();
        for (e, &m) in examples.iter().zip(memory) {
            if e.target.len() > self.cfg.max_len {
                return Err(EvalError::InvalidConfig(format!(
                    "target of length {} exceeds max_len {}",
                    e.target.len(),
                    self.cfg.max_len
                )));
            }
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&e.target);
            rows.push(self.logits(t, p, m, &prefix, drop)?);
            targets.extend(e.target.iter().map(|&c| c as usize));
            targets.push(EOS as usize);
        }
        let z = if rows.len() == 1 { rows[0] } else { t.concat_rows(&rows)? };
        let lp = t.log_softmax(z);
        Ok(mlm_loss(t, lp, &targets)?)
    }

    /// Loss of one batch on `params` (no dropout) and its gradients.
    pub fn loss_and_grads(
        &self,
        params: &ParamStore,
        examples: &[&SeqExample],
        modality: Modality,
    ) -> Result<(f64, BTreeMap<String, Vec<f64>>), EvalError> {
        let mut t = Tape::new();
        let mut p = params.bind(&[]);
        let inputs: Vec<Input> = examples
            .iter()
            .enumerate()
            .map(|(i, e)| e.input(modality, i))
            .collect::<Result<_, _>>()?;
        let mem = encode_on_tape(&self.model, &mut t, &mut p, &inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut drop = Dropout { p: 0.0, rng: &mut rng };
        let loss = self.cross_entropy(&mut t, &mut p, &mem, examples, &mut drop)?;
        let g = p.gradients(&t.backward(loss)?);
        Ok((t.scalar(loss), g))
    }

    /// Greedy decode: argmax (ties to the lowest id) until the end marker
    /// or `max_len` tokens.
    pub fn decode(&self, memory: &Tensor) -> Result<Vec<u32>, EvalError> {
        let mut prefix = vec![BOS];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        while prefix.len() <= self.cfg.max_len {
            let mut t = Tape::new();
            let mut p = self.params.bind(&[""]);
            let m = t.leaf(memory);
            let mut drop = Dropout { p: 0.0, rng: &mut rng };
            let z = self.logits(&mut t, &mut p, m, &prefix, &mut drop)?;
            let v = t.cols(z);
            let last = &t.value(z)[(prefix.len() - 1) * v..prefix.len() * v];
            let mut best = 0;
            for j in 1..v {
                if last[j] > last[best] {
                    best = j;
                }
            }
            if best as u32 == EOS {
                break;
            }
            prefix.push(best as u32);
        }
        prefix.remove(0);
        Ok(prefix)
    }

    pub fn decode_all(&self, data: &[SeqExample], modality: Modality) -> Result<Vec<Vec<u32>>, EvalError> {
        let inputs: Vec<Input> = data
            .iter()
            .enumerate()
            .map(|(i, e)| e.input(modality, i))
            .collect::<Result<_, _>>()?;
        let feats = frozen_features(&self.model, &self.params, &inputs)?;
        feats.iter().map(|f| self.decode(f)).collect()
    }

    pub fn score(&self, data: &[SeqExample], modality: Modality) -> Result<DecodeScore, EvalError> {
        if data.is_empty() {
            return Err(EvalError::NoData("evaluation"));
        }
        let hyps = self.decode_all(data, modality)?;
        let (mut hit, mut total, mut exact) = (0usize, 0usize, 0usize);
        for (h, e) in hyps.iter().zip(data) {
            hit += h.iter().zip(&e.target).filter(|(a, b)| a == b).count();
            total += h.len().max(e.target.len()).max(1);
            exact += usize::from(*h == e.target);
        }
        Ok(DecodeScore {
            token_accuracy: hit as f64 / total as f64,
            exact_match: exact as f64 / data.len() as f64,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Seq2SeqOutcome {
    pub model: Seq2Seq,
    /// `(st, mt)` losses per step; `mt` is 0 without MT data.
    pub losses: Vec<(f64, f64)>,
}

/// Cycles through a shuffled index order, reshuffling every epoch.
struct Cycler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Speech and text examples per step: an even split in joint mode.
pub fn joint_split(batch: usize, joint: bool) -> (usize, usize) {
    if joint {
        ((batch + 1) / 2, batch / 2)
    } else {
        (batch, 0)
    }
}

/// Teacher-forced fine-tuning on speech→target pairs, optionally joint
/// with text→target pairs. Joint steps split the batch evenly and weight
/// the text term by `mt_weight`; joint training is active only with MT
/// examples and a positive weight.
pub fn finetune_seq2seq(
    model: &Model,
    encoder: &ParamStore,
    st_data: &[SeqExample],
    mt_data: Option<&[SeqExample]>,
    cfg: &Seq2SeqConfig,
) -> Result<Seq2SeqOutcome, EvalError> {
    if st_data.is_empty() {
        return Err(EvalError::NoData("speech translation"));
    }
    let mt = mt_data.filter(|m| !m.is_empty() && cfg.mt_weight > 0.0);
    let mut s2s = Seq2Seq::new(model.clone(), encoder, *cfg)?;
    let st_inputs: Vec<Input> = st_data
        .iter()
        .enumerate()
        .map(|(i, e)| e.input(Modality::Speech, i))
        .collect::<Result<_, _>>()?;
    let mt_inputs: Vec<Input> = match mt {
        Some(m) => m
            .iter()
            .enumerate()
            .map(|(i, e)| e.input(Modality::Text, i))
            .collect::<Result<_, _>>()?,
        None => Vec::new(),
    };
    let frozen = if cfg.train_encoder {
        None
    } else {
        Some((
            frozen_features(model, encoder, &st_inputs)?,
            frozen_features(model, encoder, &mt_inputs)?,
        ))
    };
    let (n_st, n_mt) = joint_split(cfg.batch, mt.is_some());
    let p_drop = if mt.is_some() { cfg.dropout_joint } else { cfg.dropout_st };
    let mut st_draw = Cycler::new(st_data.len(), cfg.seed ^ 0x5354);
    let mut mt_draw = Cycler::new(mt_inputs.len(), cfg.seed ^ 0x4D54);
    let mut adam = Adam::new(0.9, 0.98, 1e-9);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps as u64 {
        let st_idx = st_draw.take(n_st);
        let mt_idx = if n_mt > 0 { mt_draw.take(n_mt) } else { Vec::new() };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut drop = Dropout { p: p_drop, rng: &mut rng };
        let mut t = Tape::new();
        let mut p = s2s.params.bind(&[]);
        let memory = |t: &mut Tape, p: &mut Bound, feats: Option<&Vec<Tensor>>, ins: &[Input], idx: &[usize]| {
            match feats {
                Some(f) => Ok(idx.iter().map(|&i| t.leaf(&f[i])).collect()),
                None => {
                    let sel: Vec<Input> = idx.iter().map(|&i| ins[i]).collect();
                    encode_on_tape(model, t, p, &sel)
                }
            }
        };
        let st_mem = memory(&mut t, &mut p, frozen.as_ref().map(|f| &f.0), &st_inputs, &st_idx)?;
        let st_ex: Vec<&SeqExample> = st_idx.iter().map(|&i| &st_data[i]).collect();
        let st_loss = s2s.cross_entropy(&mut t, &mut p, &st_mem, &st_ex, &mut drop)?;
        let (root, mt_val) = match mt {
            Some(m) => {
                let mt_mem = memory(&mut t, &mut p, frozen.as_ref().map(|f| &f.1), &mt_inputs, &mt_idx)?;
                let mt_ex: Vec<&SeqExample> = mt_idx.iter().map(|&i| &m[i]).collect();
                let mt_loss = s2s.cross_entropy(&mut t, &mut p, &mt_mem, &mt_ex, &mut drop)?;
                let v = t.scalar(mt_loss);
                let w = t.scale(mt_loss, cfg.mt_weight);
                (t.add(st_loss, w)?, v)
            }
            None => (st_loss, 0.0),
        };
        losses.push((t.scalar(st_loss), mt_val));
        let mut g = p.gradients(&t.backward(root)?);
        clip_global_norm(&mut g, 1.0);
        adam.update(&mut s2s.params, &g, lr_schedule(step, cfg.warmup, cfg.lr))?;
    }
    Ok(Seq2SeqOutcome { model: s2s, losses })
}
