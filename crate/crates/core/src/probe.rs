//! CTC probe over a frozen encoder: fit a fresh character softmax on
//! speech, then decode speech (ASR) or text (character auto-encoding).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::PairedExample;
use crate::losses::{ctc_loss, CtcStatus, LossError};
use crate::model::{Modality, Model, ModelError};
use crate::numerics::{NumericsError, ParamStore, Tape, Tensor};
use crate::trainer::adam_step;
use crate::vocab::{CharVocab, VocabError, BLANK, DEFAULT_TEXT_CAP};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("encoder parameters changed during probing")]
    EncoderMutated,
    #[error("empty reference string")]
    EmptyReference,
    #[error("no probe data")]
    NoData,
}

/// One evaluation or training utterance with both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeExample {
    pub lang: String,
    pub frames: Tensor,
    pub ids: Vec<u32>,
    pub transcript: String,
}

impl ProbeExample {
    pub fn from_paired(p: &PairedExample, vocab: &CharVocab) -> Self {
        Self {
            lang: p.lang.clone(),
            frames: p.frames.clone(),
            ids: vocab.encode(&p.transcript, DEFAULT_TEXT_CAP),
            transcript: p.transcript.clone(),
        }
    }
}

/// A CTC softmax over frozen encoder outputs: `[model_dim, vocab]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl ProbeHead {
    pub fn zeros(model_dim: usize, vocab: usize) -> Self {
        Self {
            w: Tensor::zeros(vec![model_dim, vocab]),
            b: Tensor::zeros(vec![vocab]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w.rows(), self.w.cols())
    }

    /// Row-normalized log-probabilities for encoder features `[T, D]`.
    pub fn log_probs(&self, feats: &Tensor) -> Result<Tensor, NumericsError> {
        let mut t = Tape::new();
        let x = t.leaf(feats);
        let w = t.leaf(&self.w);
        let b = t.leaf(&self.b);
        let z = t.matmul(x, w)?;
        let z = t.add_row(z, b)?;
        let lp = t.log_softmax(z);
        Ok(t.to_tensor(lp))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-2,
            batch: 16,
            seed: 0,
        }
    }
}

/// Trains only the probe softmax with CTC on speech input; the encoder
/// parameters are checked to be bit-identical afterwards. Returns the
/// head and the per-step mean loss.
pub fn fit_ctc_probe(
    model: &Model,
    encoder: &ParamStore,
    data: &[ProbeExample],
    cfg: &ProbeConfig,
) -> Result<(ProbeHead, Vec<f64>), ProbeError> {
    if data.is_empty() {
        return Err(ProbeError::NoData);
    }
    let before = encoder.fingerprint();
    let frames: Vec<&Tensor> = data.iter().map(|e| &e.frames).collect();
    let mut feats = Vec::with_capacity(data.len());
    for chunk in frames.chunks(64) {
        feats.extend(model.speech_features(encoder, chunk)?);
    }

    let (d, v) = (model.cfg.model_dim, model.cfg.vocab_size);
    let mut head = ProbeHead::zeros(d, v);
    let (mut mw, mut vw) = (vec![0.0; d * v], vec![0.0; d * v]);
    let (mut mb, mut vb) = (vec![0.0; v], vec![0.0; v]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut t = Tape::new();
        let w = t.leaf(&head.w.clone().with_requires_grad(true));
        let b = t.leaf(&head.b.clone().with_requires_grad(true));
        let mut terms = Vec::new();
        for &i in &batch {
            let x = t.leaf(&feats[i]);
            let z = t.matmul(x, w)?;
            let z = t.add_row(z, b)?;
            let lp = t.log_softmax(z);
            let target: Vec<usize> = data[i].ids.iter().map(|&c| c as usize).collect();
            let (l, status) = ctc_loss(&mut t, lp, &target, BLANK as usize)?;
            if status == CtcStatus::Ok {
                terms.push(l);
            }
        }
        if terms.is_empty() {
            losses.push(f64::INFINITY);
            continue;
        }
        let n = terms.len() as f64;
        let all = if terms.len() == 1 { terms[0] } else { t.concat_rows(&terms)? };
        let s = t.sum(all);
        let loss = t.scale(s, 1.0 / n);
        losses.push(t.scalar(loss));
        let g = t.backward(loss)?;
        let gw = g.get_or_zeros(w, d * v);
        let gb = g.get_or_zeros(b, v);
        let betas = (0.9, 0.98);
        adam_step(head.w.data_mut(), &gw, &mut mw, &mut vw, cfg.lr, betas, 1e-9, step as u64);
        adam_step(head.b.data_mut(), &gb, &mut mb, &mut vb, cfg.lr, betas, 1e-9, step as u64);
    }
    if encoder.fingerprint() != before {
        return Err(ProbeError::EncoderMutated);
    }
    Ok((head, losses))
}

/// Per-frame argmax (ties to the lowest id), then collapse repeats and
/// drop blanks.
pub fn greedy_ctc_ids(log_probs: &Tensor, blank: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for r in 0..log_probs.rows() {
        let row = log_probs.row(r);
        let mut best = 0;
        for (i, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = i;
            }
        }
        let id = best as u32;
        if Some(id) != prev && id != blank {
            out.push(id);
        }
        prev = Some(id);
    }
    out
}

pub fn greedy_ctc_decode(log_probs: &Tensor, blank: u32, vocab: &CharVocab) -> Result<String, VocabError> {
    vocab.decode(&greedy_ctc_ids(log_probs, blank))
}

/// Character-level Levenshtein distance over reference length.
pub fn cer(hypothesis: &str, reference: &str) -> Result<f64, ProbeError> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(ProbeError::EmptyReference);
    }
    Ok(strsim::levenshtein(hypothesis, reference) as f64 / n as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeResult {
    pub modality: Option<Modality>,
    /// Corpus-level CER per language: total edits over total reference
    /// characters.
    pub cer: BTreeMap<String, f64>,
    /// `(lang, reference, hypothesis)` in evaluation order.
    pub samples: Vec<(String, String, String)>,
}

impl ProbeResult {
    /// Character-weighted CER over every language.
    pub fn overall(&self) -> f64 {
        let (mut e, mut n) = (0.0, 0.0);
        for (_, r, h) in &self.samples {
            let len = r.chars().count() as f64;
            e += strsim::levenshtein(h, r) as f64;
            n += len;
        }
        if n == 0.0 {
            0.0
        } else {
            e / n
        }
    }
}

/// Decodes every example through the probe with speech or text input.
pub fn run_probe(
    head: &ProbeHead,
    model: &Model,
    encoder: &ParamStore,
    eval: &[ProbeExample],
    modality: Modality,
    vocab: &CharVocab,
) -> Result<ProbeResult, ProbeError> {
    let mut feats = Vec::with_capacity(eval.len());
    for chunk in eval.chunks(64) {
        match modality {
            Modality::Speech => {
                let f: Vec<&Tensor> = chunk.iter().map(|e| &e.frames).collect();
                feats.extend(model.speech_features(encoder, &f)?);
            }
            Modality::Text => {
                let ids: Vec<&[u32]> = chunk.iter().map(|e| e.ids.as_slice()).collect();
                feats.extend(model.text_features(encoder, &ids)?);
            }
        }
    }
    let mut edits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut out = ProbeResult {
        modality: Some(modality),
        ..ProbeResult::default()
    };
    for (e, f) in eval.iter().zip(&feats) {
        let hyp = greedy_ctc_decode(&head.log_probs(f)?, BLANK, vocab)?;
        if e.transcript.is_empty() {
            return Err(ProbeError::EmptyReference);
        }
        let slot = edits.entry(e.lang.clone()).or_default();
        slot.0 += strsim::levenshtein(&hyp, &e.transcript);
        slot.1 += e.transcript.chars().count();
        out.samples.push((e.lang.clone(), e.transcript.clone(), hyp));
    }
    out.cer = edits
        .into_iter()
        .map(|(k, (e, n))| (k, e as f64 / n as f64))
        .collect();
    Ok(out)
}

/// `lang<TAB>asr_cer<TAB>cae_cer` rows followed by up to `n_samples`
/// decode examples per language.
pub fn report(asr: &ProbeResult, cae: &ProbeResult, n_samples: usize) -> String {
    let mut s = String::from("lang\tasr_cer\tcae_cer\n");
    let langs: std::collections::BTreeSet<&String> = asr.cer.keys().chain(cae.cer.keys()).collect();
    let fmt = |v: Option<&f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for l in &langs {
        let _ = writeln!(s, "{l}\t{}\t{}", fmt(asr.cer.get(*l)), fmt(cae.cer.get(*l)));
    }
    s.push_str("\nlang\treference\tasr\tcae\n");
    for l in &langs {
        let a = asr.samples.iter().filter(|x| &&x.0 == l);
        let c = cae.samples.iter().filter(|x| &&x.0 == l);
        for (x, y) in a.zip(c).take(n_samples) {
            let _ = writeln!(s, "{l}\t{}\t{}\t{}", x.1, x.2, y.2);
        }
    }
    s
}
