//! Pre-training objectives and the CTC path-enumeration oracle.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::masking::MaskPlan;
use crate::model::{EncoderOutput, Model, ModelError};
use crate::numerics::{log_sum_exp, Bound, NumericsError, Tape, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}: no masked positions")]
    NoMaskedPositions(&'static str),
    #[error("target id {id} invalid for vocabulary of size {vocab} with blank {blank}")]
    InvalidTarget { id: usize, vocab: usize, blank: usize },
    #[error("loss weight {name} = {value} must be finite and ≥ 0")]
    BadWeight { name: &'static str, value: f64 },
    #[error("paired output lacks a speech/text boundary")]
    NoBoundary,
}

/// Coefficients combining the objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub speech: f64,
    pub text: f64,
    pub paired_ctc: f64,
    /// Weight of masked prediction on paired input.
    pub tlm: f64,
    /// Translation-task weight during joint fine-tuning.
    pub mt_weight: f64,
    pub diversity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            speech: 1.0,
            text: 0.3,
            paired_ctc: 0.03,
            tlm: 1.0,
            mt_weight: 5.0,
            diversity: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("speech", self.speech),
            ("text", self.text),
            ("paired_ctc", self.paired_ctc),
            ("tlm", self.tlm),
            ("mt_weight", self.mt_weight),
            ("diversity", self.diversity),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LossError::BadWeight { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtcStatus {
    Ok,
    /// Too few frames for the target; the loss is +∞.
    Infeasible,
}

/// Log-alpha lattice over the blank-interleaved target.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcTable {
    pub frames: usize,
    pub ext_len: usize,
    /// Row-major `[frames, ext_len]`.
    pub log_alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcResult {
    pub loss: f64,
    /// Derivative of the loss with respect to each log-probability,
    /// `[frames, vocab]`: minus the posterior state occupancy.
    pub grad: Vec<f64>,
    pub status: CtcStatus,
    pub table: CtcTable,
}

fn check_target(target: &[usize], vocab: usize, blank: usize) -> Result<(), LossError> {
    if blank >= vocab {
        return Err(LossError::InvalidTarget { id: blank, vocab, blank });
    }
    match target.iter().find(|&&c| c >= vocab || c == blank) {
        Some(&id) => Err(LossError::InvalidTarget { id, vocab, blank }),
        None => Ok(()),
    }
}

/// Minimum frames needed: one per label plus one blank between repeats.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Forward–backward over `log_probs [frames, vocab]`.
pub fn ctc_forward_backward(
    log_probs: &[f64],
    vocab: usize,
    target: &[usize],
    blank: usize,
) -> Result<CtcResult, LossError> {
    check_target(target, vocab, blank)?;
    let t_len = log_probs.len() / vocab;
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&c| [c, blank]))
        .collect();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let lp = |t: usize, k: usize| log_probs[t * vocab + k];
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    if t_len > 0 {
        alpha[0] = lp(0, blank);
        if s_len > 1 {
            alpha[1] = lp(0, ext[1]);
        }
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = [prev[s], ninf, ninf];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if skip(s) {
                terms[2] = prev[s - 2];
            }
            alpha[t * s_len + s] = log_sum_exp(&terms) + lp(t, ext[s]);
        }
    }
    let table = CtcTable {
        frames: t_len,
        ext_len: s_len,
        log_alpha: alpha.clone(),
    };
    let infeasible = |table| {
        Ok(CtcResult {
            loss: f64::INFINITY,
            grad: vec![0.0; log_probs.len()],
            status: CtcStatus::Infeasible,
            table,
        })
    };
    if t_len == 0 || t_len < ctc_min_frames(target) {
        return infeasible(table);
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 {
        log_sum_exp(&[last[s_len - 1], last[s_len - 2]])
    } else {
        last[0]
    };
    if log_p == ninf {
        return infeasible(table);
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| lp(t + 1, ext[s2]) + beta[(t + 1) * s_len + s2];
            let mut terms = [next(s), ninf, ninf];
            if s + 1 < s_len {
                terms[1] = next(s + 1);
            }
            if s + 2 < s_len && skip(s + 2) {
                terms[2] = next(s + 2);
            }
            beta[t * s_len + s] = log_sum_exp(&terms);
        }
    }
    let mut grad = vec![0.0; log_probs.len()];
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s] + beta[t * s_len + s];
            if a > ninf {
                grad[t * vocab + ext[s]] -= (a - log_p).exp();
            }
        }
    }
    Ok(CtcResult {
        loss: -log_p,
        grad,
        status: CtcStatus::Ok,
        table,
    })
}

/// CTC negative log-likelihood recorded on the tape.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, target: &[usize], blank: usize) -> Result<(Var, CtcStatus), LossError> {
    let vocab = tape.cols(log_probs);
    let r = ctc_forward_backward(tape.value(log_probs), vocab, target, blank)?;
    let v = tape.scalar_jacobian(log_probs, r.loss, r.grad)?;
    Ok((v, r.status))
}

/// Merges adjacent repeats, then removes blanks.
pub fn ctc_collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Visits every length-`frames` path with its log-probability.
fn for_each_path(log_probs: &[f64], vocab: usize, mut f: impl FnMut(&[usize], f64)) {
    let t_len = log_probs.len() / vocab;
    let mut path = vec![0usize; t_len];
    loop {
        let lp: f64 = path.iter().enumerate().map(|(t, &k)| log_probs[t * vocab + k]).sum();
        f(&path, lp);
        let mut i = 0;
        loop {
            if i == t_len {
                return;
            }
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Enumerates all `vocab^frames` paths; returns `−log Σ p(path)` over the
/// paths collapsing to `target` (+∞ when none do).
pub fn ctc_brute_force(log_probs: &[f64], vocab: usize, target: &[usize], blank: usize) -> Result<f64, LossError> {
    check_target(target, vocab, blank)?;
    let mut terms = Vec::new();
    for_each_path(log_probs, vocab, |path, lp| {
        if ctc_collapse(path, blank) == target {
            terms.push(lp);
        }
    });
    if terms.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(-log_sum_exp(&terms))
}

/// Probability mass of every collapsed labeling, by enumeration.
pub fn collapsed_mass(log_probs: &[f64], vocab: usize, blank: usize) -> BTreeMap<Vec<usize>, f64> {
    let mut out: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for_each_path(log_probs, vocab, |path, lp| {
        *out.entry(ctc_collapse(path, blank)).or_default() += lp.exp();
    });
    out
}

/// For each of `m` anchors, up to `k` distinct other indices drawn
/// uniformly. The flag reports that fewer than `k` were available.
pub fn sample_distractors<R: Rng>(m: usize, k: usize, rng: &mut R) -> (Vec<Vec<usize>>, bool) {
    let avail = m.saturating_sub(1);
    let k_eff = k.min(avail);
    let rows = (0..m)
        .map(|i| {
            sample(rng, avail, k_eff)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect()
        })
        .collect();
    (rows, k_eff < k)
}

/// Mean over rows of `−log softmax_j(cos(c_i, q_j)/τ)` at the positive
/// `j = i`, against the rows listed in `distractors[i]`.
pub fn contrastive_loss(
    tape: &mut Tape,
    context: Var,
    targets: Var,
    distractors: &[Vec<usize>],
    temperature: f64,
) -> Result<Var, LossError> {
    let m = tape.rows(context);
    if m == 0 {
        return Err(LossError::NoMaskedPositions("contrastive"));
    }
    if tape.shape(context) != tape.shape(targets) || distractors.len() != m {
        return Err(NumericsError::ShapeMismatch {
            op: "contrastive_loss",
            lhs: tape.shape(context).to_vec(),
            rhs: tape.shape(targets).to_vec(),
        }
        .into());
    }
    let k = distractors.iter().map(Vec::len).min().unwrap_or(0);
    let c = tape.l2_normalize_rows(context, 1e-8);
    let q = tape.l2_normalize_rows(targets, 1e-8);
    let sim = tape.matmul_t(c, q)?;
    let sim = tape.scale(sim, 1.0 / temperature);
    let mut idx = Vec::with_capacity(m * (k + 1));
    for (i, d) in distractors.iter().enumerate() {
        idx.push(i * m + i);
        idx.extend(d[..k].iter().map(|&j| i * m + j));
    }
    let cand = tape.gather(sim, &idx, vec![m, k + 1])?;
    let ls = tape.log_softmax(cand);
    let pos: Vec<usize> = (0..m).map(|i| i * (k + 1)).collect();
    let picked = tape.gather(ls, &pos, vec![m])?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / m as f64))
}

/// `(G − exp(H(p̄)))/G` for the batch-mean codebook distribution `p̄`.
pub fn diversity_loss(tape: &mut Tape, probs: Var) -> Result<Var, LossError> {
    let g = tape.cols(probs) as f64;
    let mean = tape.mean_rows(probs)?;
    let logm = tape.log(mean);
    let plogp = tape.mul(mean, logm)?;
    let neg_h = tape.sum(plogp);
    let h = tape.scale(neg_h, -1.0);
    let perplexity = tape.exp(h);
    let scaled = tape.scale(perplexity, -1.0 / g);
    let one = tape.constant(vec![1], vec![1.0])?;
    Ok(tape.add(one, scaled)?)
}

/// Mean negative log-likelihood of `targets` under `log_probs [M, V]`.
pub fn mlm_loss(tape: &mut Tape, log_probs: Var, targets: &[usize]) -> Result<Var, LossError> {
    let (m, v) = (tape.rows(log_probs), tape.cols(log_probs));
    if m == 0 || targets.is_empty() {
        return Err(LossError::NoMaskedPositions("mlm"));
    }
    if targets.len() != m {
        return Err(NumericsError::ShapeMismatch {
            op: "mlm_loss",
            lhs: tape.shape(log_probs).to_vec(),
            rhs: vec![targets.len()],
        }
        .into());
    }
    if let Some(&id) = targets.iter().find(|&&t| t >= v) {
        return Err(LossError::InvalidTarget { id, vocab: v, blank: usize::MAX });
    }
    let idx: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * v + t).collect();
    let g = tape.gather(log_probs, &idx, vec![m])?;
    let s = tape.sum(g);
    Ok(tape.scale(s, -1.0 / m as f64))
}

fn rows_at(tape: &mut Tape, x: Var, rows: &[usize]) -> Result<Var, LossError> {
    Ok(tape.select_rows(x, rows)?)
}

fn cat(tape: &mut Tape, parts: &[Var]) -> Result<Var, LossError> {
    Ok(if parts.len() == 1 { parts[0] } else { tape.concat_rows(parts)? })
}

/// Batch speech objectives; `None` terms had no masked positions.
#[derive(Clone, Debug, Default)]
pub struct SpeechTerms {
    pub contrastive: Option<Var>,
    pub mlm: Option<Var>,
    pub diversity: Option<Var>,
    pub distractor_shortfall: bool,
}

/// Contrastive, masked codebook prediction and diversity terms over every
/// output that carries quantized targets. Distractors come from the other
/// masked positions of the batch.
#[allow(clippy::too_many_arguments)]
pub fn speech_losses<R: Rng>(
    tape: &mut Tape,
    p: &mut Bound,
    model: &Model,
    outputs: &[&EncoderOutput],
    n_distractors: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<SpeechTerms, LossError> {
    let mut ctx = Vec::new();
    let mut vecs = Vec::new();
    let mut hid = Vec::new();
    let mut probs = Vec::new();
    let mut ids = Vec::new();
    for o in outputs {
        let Some(side) = &o.speech else { continue };
        let Some(q) = &side.quant else { continue };
        probs.push(q.probs);
        let pos = side.plan.positions();
        if pos.is_empty() {
            continue;
        }
        ctx.push(rows_at(tape, side.context, pos)?);
        vecs.push(rows_at(tape, q.vectors, pos)?);
        hid.push(rows_at(tape, o.hidden, pos)?);
        ids.extend(pos.iter().map(|&i| q.ids[i]));
    }
    let mut out = SpeechTerms::default();
    if !probs.is_empty() {
        let all = cat(tape, &probs)?;
        out.diversity = Some(diversity_loss(tape, all)?);
    }
    if ids.is_empty() {
        return Ok(out);
    }
    let c = cat(tape, &ctx)?;
    let w = p.get(tape, "contrast.w")?;
    let b = p.get(tape, "contrast.b")?;
    let c = tape.matmul(c, w)?;
    let c = tape.add_row(c, b)?;
    let q = cat(tape, &vecs)?;
    let (distractors, short) = sample_distractors(ids.len(), n_distractors, rng);
    out.contrastive = Some(contrastive_loss(tape, c, q, &distractors, temperature)?);
    out.distractor_shortfall = short;
    let h = cat(tape, &hid)?;
    let lp = model.speech_head().log_probs(tape, p, h)?;
    out.mlm = Some(mlm_loss(tape, lp, &ids)?);
    Ok(out)
}

/// Masked character prediction through the shared softmax over a batch
/// of text outputs; `ids[i]` and `plans[i]` index the same positions as
/// `outputs[i]`. `None` when nothing is masked.
pub fn text_mlm_loss(
    tape: &mut Tape,
    p: &mut Bound,
    model: &Model,
    outputs: &[&EncoderOutput],
    ids: &[&[u32]],
    plans: &[&MaskPlan],
) -> Result<Option<Var>, LossError> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for ((o, ids), plan) in outputs.iter().zip(ids).zip(plans) {
        let pos: Vec<usize> = plan.positions().iter().copied().filter(|&i| o.valid[i]).collect();
        if pos.is_empty() {
            continue;
        }
        rows.push(rows_at(tape, o.hidden, &pos)?);
        targets.extend(pos.iter().map(|&i| ids[i] as usize));
    }
    if targets.is_empty() {
        return Ok(None);
    }
    let h = cat(tape, &rows)?;
    let lp = model.mlm_head().log_probs(tape, p, h)?;
    Ok(Some(mlm_loss(tape, lp, &targets)?))
}

/// Paired-input objectives over a batch.
#[derive(Clone, Debug, Default)]
pub struct PairedTerms {
    /// Masked transcript prediction (shared softmax).
    pub tlm_text: Option<Var>,
    /// Masked prediction of quantized targets on the speech half.
    pub tlm_speech: Option<Var>,
    /// Mean CTC over feasible examples, from every speech position.
    pub ctc: Option<Var>,
    pub ctc_infeasible: usize,
    /// Speech positions fed to CTC per example.
    pub ctc_frames: Vec<usize>,
}

/// `transcripts[i]` are the valid (unpadded) ids of example `i`;
/// `text_plans[i]` index into them.
pub fn paired_loss(
    tape: &mut Tape,
    p: &mut Bound,
    model: &Model,
    outputs: &[&EncoderOutput],
    transcripts: &[&[u32]],
    text_plans: &[&MaskPlan],
    speech_prediction: bool,
    blank: usize,
) -> Result<PairedTerms, LossError> {
    let mut out = PairedTerms::default();
    let mut text_rows = Vec::new();
    let mut text_targets = Vec::new();
    let mut speech_rows = Vec::new();
    let mut speech_targets = Vec::new();
    let mut ctc_rows = Vec::new();
    for ((o, ids), plan) in outputs.iter().zip(transcripts).zip(text_plans) {
        let b = o.boundary.ok_or(LossError::NoBoundary)?;
        let pos: Vec<usize> = plan.positions().iter().map(|&i| b + i).collect();
        if !pos.is_empty() {
            text_rows.push(rows_at(tape, o.hidden, &pos)?);
            text_targets.extend(plan.positions().iter().map(|&i| ids[i] as usize));
        }
        if speech_prediction {
            if let Some(side) = &o.speech {
                if let Some(q) = &side.quant {
                    let sp = side.plan.positions();
                    if !sp.is_empty() {
                        speech_rows.push(rows_at(tape, o.hidden, sp)?);
                        speech_targets.extend(sp.iter().map(|&i| q.ids[i]));
                    }
                }
            }
        }
        ctc_rows.push(tape.slice_rows(o.hidden, 0, b)?);
        out.ctc_frames.push(b);
    }
    if !text_targets.is_empty() {
        let h = cat(tape, &text_rows)?;
        let lp = model.mlm_head().log_probs(tape, p, h)?;
        out.tlm_text = Some(mlm_loss(tape, lp, &text_targets)?);
    }
    if !speech_targets.is_empty() {
        let h = cat(tape, &speech_rows)?;
        let lp = model.speech_head().log_probs(tape, p, h)?;
        out.tlm_speech = Some(mlm_loss(tape, lp, &speech_targets)?);
    }
    if !ctc_rows.is_empty() {
        let h = cat(tape, &ctc_rows)?;
        let lp = model.ctc_head().log_probs(tape, p, h)?;
        let mut terms = Vec::new();
        let mut start = 0;
        for (ids, &n) in transcripts.iter().zip(&out.ctc_frames) {
            let rows = if ctc_rows.len() == 1 { lp } else { tape.slice_rows(lp, start, n)? };
            start += n;
            let target: Vec<usize> = ids.iter().map(|&c| c as usize).collect();
            let (l, status) = ctc_loss(tape, rows, &target, blank)?;
            match status {
                CtcStatus::Ok => terms.push(l),
                CtcStatus::Infeasible => out.ctc_infeasible += 1,
            }
        }
        if !terms.is_empty() {
            let n = terms.len() as f64;
            let all = cat(tape, &terms)?;
            let s = tape.sum(all);
            out.ctc = Some(tape.scale(s, 1.0 / n));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
