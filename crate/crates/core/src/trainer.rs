//! Joint pre-training loop: loss combination, Adam with warmup and
//! inverse square root decay, clipping, checkpoints and ablations.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{SpeechUtterance, SynthCorpus};
use crate::losses::{paired_loss, speech_losses, text_mlm_loss, LossError, LossWeights};
use crate::masking::{
    mask_speech_frames, mask_text_spans, MaskPlan, DEFAULT_SPEECH_SPAN, DEFAULT_SPEECH_START_PROB, DEFAULT_TEXT_RATIO,
    DEFAULT_TEXT_SPAN,
};
use crate::model::{init_params, Model, ModelConfig, ModelError, PairedIn, QuantMode, SpeechIn, TextIn};
use crate::numerics::{read_container, write_container, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::sampler::{
    compose_batch, group_by_language, language_weights, valid_len, LanguageStream, PairedItem, SamplerError,
    StreamState, TextItem, TriModalBatch,
};
use crate::vocab::{CharVocab, BLANK, DEFAULT_TEXT_CAP};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("non-finite loss at step {step}: {components}")]
    NonFinite { step: u64, components: StepLog },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Pre-training ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Speech, text and paired data with masked prediction and CTC.
    MslamCtc,
    /// As `MslamCtc` without the CTC term.
    MslamTlm,
    /// Unlabeled speech only; the speech batch doubles.
    SpeechOnly,
    /// As `MslamCtc` without the unlabeled text stream.
    MslamCtcNoText,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::MslamCtc, Self::MslamTlm, Self::SpeechOnly, Self::MslamCtcNoText];

    pub fn name(self) -> &'static str {
        match self {
            Self::MslamCtc => "mslam-ctc",
            Self::MslamTlm => "mslam-tlm",
            Self::SpeechOnly => "speech-only",
            Self::MslamCtcNoText => "mslam-ctc-no-text",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TrainError> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| TrainError::InvalidConfig(format!("unknown variant {s:?}")))
    }

    /// Per-stream batch sizes after applying the ablation.
    pub fn batch_sizes(self, base: (usize, usize, usize)) -> (usize, usize, usize) {
        let (s, t, p) = base;
        match self {
            Self::MslamCtc | Self::MslamTlm => (s, t, p),
            Self::SpeechOnly => (2 * s, 0, 0),
            Self::MslamCtcNoText => (s, 0, p),
        }
    }

    pub fn weights(self, base: LossWeights) -> LossWeights {
        match self {
            Self::MslamTlm => LossWeights { paired_ctc: 0.0, ..base },
            Self::SpeechOnly => LossWeights {
                text: 0.0,
                tlm: 0.0,
                paired_ctc: 0.0,
                ..base
            },
            Self::MslamCtcNoText => LossWeights { text: 0.0, ..base },
            Self::MslamCtc => base,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub text_span: usize,
    pub text_ratio: f64,
    pub speech_start_prob: f64,
    pub speech_span: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            text_span: DEFAULT_TEXT_SPAN,
            text_ratio: DEFAULT_TEXT_RATIO,
            speech_start_prob: DEFAULT_SPEECH_START_PROB,
            speech_span: DEFAULT_SPEECH_SPAN,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub total_steps: u64,
    /// `(speech, text, paired)` sequences per step before the variant.
    pub batch: (usize, usize, usize),
    pub weights: LossWeights,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub variant: Variant,
    pub n_distractors: usize,
    pub contrastive_temperature: f64,
    pub masking: MaskConfig,
    /// Language sampling temperature.
    pub sampling_temperature: f64,
    /// Masked prediction of quantized targets on the paired speech half.
    pub tlm_speech_prediction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 40_000,
            peak_lr: 6e-4,
            total_steps: 1_300_000,
            batch: (2048, 8192, 256),
            weights: LossWeights::default(),
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: Some(1.0),
            variant: Variant::MslamCtc,
            n_distractors: 8,
            contrastive_temperature: 0.1,
            masking: MaskConfig::default(),
            sampling_temperature: 3.0,
            tlm_speech_prediction: true,
        }
    }
}

impl TrainConfig {
    /// The 2B model lowers the peak learning rate.
    pub fn for_preset(preset: &str) -> Self {
        let mut c = Self::default();
        if preset == "paper-2b" {
            c.peak_lr = 3.6e-4;
        }
        c
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be ≥ 1");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be > 0");
        }
        if !(self.contrastive_temperature > 0.0) || !(self.sampling_temperature > 0.0) {
            return bad("temperatures must be > 0");
        }
        let (s, t, p) = self.variant.batch_sizes(self.batch);
        if s + t + p == 0 {
            return bad("empty batch");
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Applies one `key = value` setting; keys keep their namespace
    /// (`train.*`, `loss.*`, `mask.*`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let err = || TrainError::InvalidConfig(format!("bad value {value:?} for {key}"));
        let u = || value.parse::<u64>().map_err(|_| err());
        let z = || value.parse::<usize>().map_err(|_| err());
        let f = || value.parse::<f64>().map_err(|_| err());
        match key {
            "train.warmup_steps" => self.warmup_steps = u()?,
            "train.peak_lr" => self.peak_lr = f()?,
            "train.total_steps" | "train.steps" => self.total_steps = u()?,
            "train.batch_speech" => self.batch.0 = z()?,
            "train.batch_text" => self.batch.1 = z()?,
            "train.batch_paired" => self.batch.2 = z()?,
            "train.seed" => self.seed = u()?,
            "train.adam_beta1" => self.adam_beta1 = f()?,
            "train.adam_beta2" => self.adam_beta2 = f()?,
            "train.adam_eps" => self.adam_eps = f()?,
            "train.clip_norm" => {
                self.clip_norm = if value == "none" { None } else { Some(f()?) };
            }
            "train.variant" => self.variant = Variant::parse(value)?,
            "train.n_distractors" => self.n_distractors = z()?,
            "train.contrastive_temperature" => self.contrastive_temperature = f()?,
            "train.sampling_temperature" => self.sampling_temperature = f()?,
            "train.tlm_speech_prediction" => self.tlm_speech_prediction = value.parse().map_err(|_| err())?,
            "loss.speech" => self.weights.speech = f()?,
            "loss.text" => self.weights.text = f()?,
            "loss.paired_ctc" => self.weights.paired_ctc = f()?,
            "loss.tlm" => self.weights.tlm = f()?,
            "loss.mt_weight" => self.weights.mt_weight = f()?,
            "loss.diversity" => self.weights.diversity = f()?,
            "mask.text_span" => self.masking.text_span = z()?,
            "mask.text_ratio" => self.masking.text_ratio = f()?,
            "mask.speech_start_prob" => self.masking.speech_start_prob = f()?,
            "mask.speech_span" => self.masking.speech_span = z()?,
            _ => return Err(TrainError::InvalidConfig(format!("unknown key {key}"))),
        }
        Ok(())
    }
}

/// `peak · min(step/warmup, sqrt(warmup/step))` for `step ≥ 1`.
pub fn lr_schedule(step: u64, warmup: u64, peak: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    if step <= warmup {
        peak * s / w
    } else {
        peak * (w / s).sqrt()
    }
}

/// One bias-corrected Adam update at 1-based step `t`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    t: u64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            ..Self::default()
        }
    }

    /// Updates every parameter named in `grads`.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<(), NumericsError> {
        self.t += 1;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            adam_step(p.data_mut(), g, m, v, lr, (self.beta1, self.beta2), self.eps, self.t);
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Loss components of one step (unweighted) and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    /// Contrastive term plus weighted diversity.
    pub contrastive: f64,
    pub speech_mlm: f64,
    pub text_mlm: f64,
    pub tlm: f64,
    pub ctc: f64,
}

impl StepLog {
    pub const HEADER: &'static str = "step\tlr\ttotal\tcontrastive\tspeech_mlm\ttext_mlm\ttlm\tctc";

    pub fn components(&self) -> [f64; 6] {
        [self.total, self.contrastive, self.speech_mlm, self.text_mlm, self.tlm, self.ctc]
    }
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.lr, self.total, self.contrastive, self.speech_mlm, self.text_mlm, self.tlm, self.ctc
        )
    }
}

/// Training inputs grouped by stream.
#[derive(Clone, Debug, Default)]
pub struct PretrainData {
    pub speech: Vec<SpeechUtterance>,
    pub text: Vec<TextItem>,
    pub paired: Vec<PairedItem>,
}

impl PretrainData {
    pub fn from_synth(corpus: &SynthCorpus, vocab: &CharVocab) -> Self {
        Self {
            speech: corpus.speech.clone(),
            text: corpus
                .text
                .iter()
                .map(|t| TextItem {
                    lang: t.lang.clone(),
                    ids: vocab.encode(&t.text, DEFAULT_TEXT_CAP),
                })
                .collect(),
            paired: corpus
                .paired
                .iter()
                .map(|p| PairedItem {
                    example: p.clone(),
                    ids: vocab.encode(&p.transcript, DEFAULT_TEXT_CAP),
                })
                .collect(),
        }
    }
}

fn build_stream<T: Clone>(
    items: &[T],
    lang: impl Fn(&T) -> &str,
    temperature: f64,
    seed: u64,
) -> Result<Option<LanguageStream<T>>, TrainError> {
    if items.is_empty() {
        return Ok(None);
    }
    let grouped = group_by_language(items.to_vec(), lang);
    let counts = grouped.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let dist = language_weights(&counts, temperature)?;
    Ok(Some(LanguageStream::new(grouped, &dist, seed)?))
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

/// Everything a resumed run needs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub params: ParamStore,
    pub adam: Adam,
    pub speech_stream: Option<StreamState>,
    pub text_stream: Option<StreamState>,
    pub paired_stream: Option<StreamState>,
}

pub struct Pretrainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub params: ParamStore,
    pub adam: Adam,
    pub step: u64,
    speech: Option<LanguageStream<SpeechUtterance>>,
    text: Option<LanguageStream<TextItem>>,
    paired: Option<LanguageStream<PairedItem>>,
}

const CKPT_STEP: &str = "state/step";
const CKPT_STREAMS: [&str; 3] = ["sampler/speech", "sampler/text", "sampler/paired"];

impl Pretrainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, data: &PretrainData) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = Model::new(model_cfg)?;
        let params = init_params(&model.cfg, cfg.seed)?;
        let (ns, nt, np) = cfg.variant.batch_sizes(cfg.batch);
        let t = cfg.sampling_temperature;
        let speech = if ns > 0 {
            build_stream(&data.speech, |u| u.lang.as_str(), t, cfg.seed.wrapping_add(1))?
        } else {
            None
        };
        let text = if nt > 0 {
            build_stream(&data.text, |u| u.lang.as_str(), t, cfg.seed.wrapping_add(2))?
        } else {
            None
        };
        let paired = if np > 0 {
            build_stream(&data.paired, |u| u.example.lang.as_str(), t, cfg.seed.wrapping_add(3))?
        } else {
            None
        };
        let adam = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Ok(Self {
            model,
            cfg,
            params,
            adam,
            step: 0,
            speech,
            text,
            paired,
        })
    }

    pub fn next_batch(&mut self) -> Result<TriModalBatch, TrainError> {
        let sizes = self.cfg.variant.batch_sizes(self.cfg.batch);
        Ok(compose_batch(
            self.speech.as_mut(),
            self.text.as_mut(),
            self.paired.as_mut(),
            sizes,
        )?)
    }

    /// Draws a batch and applies one update.
    pub fn step(&mut self) -> Result<StepLog, TrainError> {
        let batch = self.next_batch()?;
        self.train_step(&batch)
    }

    /// Runs `n` steps, writing one log line per step to `log` if given.
    pub fn run(&mut self, n: u64, mut log: Option<&mut dyn Write>) -> Result<Vec<StepLog>, TrainError> {
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let l = self.step()?;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{l}")?;
            }
            out.push(l);
        }
        Ok(out)
    }

    /// Forward, weighted loss, backward, clip and Adam update on `batch`.
    pub fn train_step(&mut self, batch: &TriModalBatch) -> Result<StepLog, TrainError> {
        let step = self.step + 1;
        let cfg = &self.cfg;
        let weights = cfg.variant.weights(cfg.weights);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, step));
        let lr = lr_schedule(step, cfg.warmup_steps, cfg.peak_lr);
        let (log, grads) = {
            let (loss, log, mut tape_grads) = self.loss_and_grads(batch, &weights, step, &mut rng, false)?;
            let _ = loss;
            if let Some(c) = self.cfg.clip_norm {
                clip_global_norm(&mut tape_grads, c);
            }
            (log, tape_grads)
        };
        let mut all = grads;
        for (name, t) in self.params.iter() {
            all.entry(name.to_string()).or_insert_with(|| vec![0.0; t.numel()]);
        }
        self.adam.update(&mut self.params, &all, lr)?;
        self.step = step;
        Ok(StepLog { lr, ..log })
    }

    /// Total loss and its parameter gradients on `batch` at `step`,
    /// without updating anything. `soft_quantizer` swaps the
    /// straight-through codebook selection for its smooth surrogate.
    pub fn loss_and_grads(
        &self,
        batch: &TriModalBatch,
        weights: &LossWeights,
        step: u64,
        rng: &mut ChaCha8Rng,
        soft_quantizer: bool,
    ) -> Result<(f64, StepLog, BTreeMap<String, Vec<f64>>), TrainError> {
        let mut tape = Tape::new();
        let mut bound = self.params.bind(&[]);
        let (root, log) = self.build_loss(&mut tape, &mut bound, batch, weights, step, rng, soft_quantizer)?;
        let grads = bound.gradients(&tape.backward(root)?);
        Ok((log.total, log, grads))
    }

    /// Total loss only, evaluated on an arbitrary parameter store.
    pub fn loss_with(
        &self,
        params: &ParamStore,
        batch: &TriModalBatch,
        step: u64,
        rng_seed: u64,
        soft_quantizer: bool,
    ) -> Result<f64, TrainError> {
        let weights = self.cfg.variant.weights(self.cfg.weights);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut tape = Tape::new();
        let mut bound = params.bind(&[]);
        let (_, log) = self.build_loss(&mut tape, &mut bound, batch, &weights, step, &mut rng, soft_quantizer)?;
        Ok(log.total)
    }

    #[allow(clippy::too_many_arguments)]
    fn build_loss(
        &self,
        tape: &mut Tape,
        p: &mut crate::numerics::Bound,
        batch: &TriModalBatch,
        w: &LossWeights,
        step: u64,
        rng: &mut ChaCha8Rng,
        soft_quantizer: bool,
    ) -> Result<(Var, StepLog), TrainError> {
        let cfg = &self.cfg;
        let mcfg = &self.model.cfg;
        let mk = &cfg.masking;
        let use_speech = w.speech > 0.0 && !batch.speech.is_empty();
        let use_text = w.text > 0.0 && !batch.text.is_empty();
        let use_paired = (w.tlm > 0.0 || w.paired_ctc > 0.0) && !batch.paired.is_empty();

        let speech_plans: Vec<MaskPlan> = batch
            .speech_mask
            .iter()
            .map(|m| mask_speech_frames(mcfg.subsampled_len(valid_len(m)), mk.speech_start_prob, mk.speech_span, rng))
            .collect();
        let text_plans: Vec<MaskPlan> = batch
            .text_mask
            .iter()
            .map(|m| mask_text_spans(valid_len(m), mk.text_span, mk.text_ratio, rng))
            .collect();
        let paired_speech_plans: Vec<MaskPlan> = batch
            .paired_speech_mask
            .iter()
            .map(|m| mask_speech_frames(mcfg.subsampled_len(valid_len(m)), mk.speech_start_prob, mk.speech_span, rng))
            .collect();
        let transcripts: Vec<&[u32]> = batch
            .paired_ids
            .iter()
            .zip(&batch.paired_text_mask)
            .map(|(ids, m)| &ids[..valid_len(m)])
            .collect();
        let paired_text_plans: Vec<MaskPlan> = transcripts
            .iter()
            .map(|ids| mask_text_spans(ids.len(), mk.text_span, mk.text_ratio, rng))
            .collect();
        let temperature = mcfg.quant_temperature(step);
        let qseed: u64 = rng.gen();
        let quant = if soft_quantizer {
            QuantMode::Soft { temperature, seed: qseed }
        } else {
            QuantMode::Train { temperature, seed: qseed }
        };

        let speech_in: Vec<SpeechIn> = if use_speech {
            batch
                .speech
                .iter()
                .zip(&batch.speech_mask)
                .zip(&speech_plans)
                .map(|((u, m), plan)| SpeechIn {
                    frames: &u.frames,
                    valid_frames: valid_len(m),
                    plan,
                })
                .collect()
        } else {
            Vec::new()
        };
        let text_in: Vec<TextIn> = if use_text {
            batch
                .text
                .iter()
                .zip(&text_plans)
                .map(|(ids, plan)| TextIn { ids, plan })
                .collect()
        } else {
            Vec::new()
        };
        let paired_in: Vec<PairedIn> = if use_paired {
            (0..batch.paired.len())
                .map(|i| PairedIn {
                    speech: SpeechIn {
                        frames: &batch.paired[i].frames,
                        valid_frames: valid_len(&batch.paired_speech_mask[i]),
                        plan: &paired_speech_plans[i],
                    },
                    text: TextIn {
                        ids: transcripts[i],
                        plan: &paired_text_plans[i],
                    },
                })
                .collect()
        } else {
            Vec::new()
        };
        let fwd = self.model.forward(tape, p, &speech_in, &text_in, &paired_in, &quant)?;

        let mut log = StepLog {
            step,
            ..StepLog::default()
        };
        let mut terms: Vec<Var> = Vec::new();
        let mut add = |tape: &mut Tape, v: Option<Var>, weight: f64, slot: &mut f64| {
            if let Some(v) = v {
                *slot += tape.scalar(v);
                if weight > 0.0 {
                    terms.push(tape.scale(v, weight));
                }
            }
        };
        if use_speech {
            let outs: Vec<_> = fwd.speech.iter().collect();
            let s = speech_losses(
                tape,
                p,
                &self.model,
                &outs,
                cfg.n_distractors,
                cfg.contrastive_temperature,
                rng,
            )?;
            let div = s.diversity.map(|d| tape.scale(d, w.diversity));
            add(tape, s.contrastive, w.speech, &mut log.contrastive);
            add(tape, div, w.speech, &mut log.contrastive);
            add(tape, s.mlm, w.speech, &mut log.speech_mlm);
        }
        if use_text {
            let outs: Vec<_> = fwd.text.iter().collect();
            let ids: Vec<&[u32]> = batch.text.iter().map(Vec::as_slice).collect();
            let plans: Vec<&MaskPlan> = text_plans.iter().collect();
            let t = text_mlm_loss(tape, p, &self.model, &outs, &ids, &plans)?;
            add(tape, t, w.text, &mut log.text_mlm);
        }
        if use_paired {
            let outs: Vec<_> = fwd.paired.iter().collect();
            let plans: Vec<&MaskPlan> = paired_text_plans.iter().collect();
            let pt = paired_loss(
                tape,
                p,
                &self.model,
                &outs,
                &transcripts,
                &plans,
                cfg.tlm_speech_prediction,
                BLANK as usize,
            )?;
            if w.tlm > 0.0 {
                add(tape, pt.tlm_text, w.tlm, &mut log.tlm);
                add(tape, pt.tlm_speech, w.tlm, &mut log.tlm);
            }
            if w.paired_ctc > 0.0 {
                add(tape, pt.ctc, w.paired_ctc, &mut log.ctc);
            }
        }
        let root = if terms.is_empty() {
            tape.constant(vec![1], vec![0.0])?
        } else {
            let all = if terms.len() == 1 { terms[0] } else { tape.concat_rows(&terms)? };
            tape.sum(all)
        };
        log.total = tape.scalar(root);
        if !log.total.is_finite() {
            return Err(TrainError::NonFinite { step, components: log });
        }
        Ok((root, log))
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            params: self.params.clone(),
            adam: self.adam.clone(),
            speech_stream: self.speech.as_ref().map(|s| s.state().clone()),
            text_stream: self.text.as_ref().map(|s| s.state().clone()),
            paired_stream: self.paired.as_ref().map(|s| s.state().clone()),
        }
    }

    /// Writes parameters, Adam moments, the step and sampler positions.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let mut owned: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.params.iter() {
            owned.push((name.to_string(), t.clone()));
            let n = t.numel();
            let m = self.adam.m.get(name).cloned().unwrap_or_else(|| vec![0.0; n]);
            let v = self.adam.v.get(name).cloned().unwrap_or_else(|| vec![0.0; n]);
            owned.push((format!("adam.m/{name}"), Tensor::new(t.shape().to_vec(), m)?));
            owned.push((format!("adam.v/{name}"), Tensor::new(t.shape().to_vec(), v)?));
        }
        owned.push((CKPT_STEP.into(), Tensor::vector(vec![self.step as f64, self.adam.t as f64])));
        let streams = [
            self.speech.as_ref().map(|s| s.state()),
            self.text.as_ref().map(|s| s.state()),
            self.paired.as_ref().map(|s| s.state()),
        ];
        for (key, st) in CKPT_STREAMS.iter().zip(streams) {
            if let Some(st) = st {
                owned.push((key.to_string(), st.to_tensor()));
            }
        }
        let entries: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let tmp = path.with_extension("tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(f);
            write_container(&mut w, &entries)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Restores a checkpoint written by a run with the same configuration.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<(), TrainError> {
        let f = std::fs::File::open(path)?;
        let entries = read_container(std::io::BufReader::new(f))?;
        let mut map: BTreeMap<String, Tensor> = entries.into_iter().collect();
        let bad = |m: String| TrainError::Checkpoint(m);
        let mut params = ParamStore::new();
        let mut adam = Adam::new(self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps);
        for (name, t) in self.params.iter() {
            let loaded = map.remove(name).ok_or_else(|| bad(format!("missing parameter {name}")))?;
            if loaded.shape() != t.shape() {
                return Err(bad(format!("shape mismatch for {name}")));
            }
            let m = map
                .remove(&format!("adam.m/{name}"))
                .ok_or_else(|| bad(format!("missing moments for {name}")))?;
            let v = map
                .remove(&format!("adam.v/{name}"))
                .ok_or_else(|| bad(format!("missing moments for {name}")))?;
            adam.m.insert(name.to_string(), m.into_data());
            adam.v.insert(name.to_string(), v.into_data());
            params.insert(name, loaded);
        }
        let st = map.remove(CKPT_STEP).ok_or_else(|| bad("missing step".into()))?;
        if st.numel() != 2 {
            return Err(bad("malformed step entry".into()));
        }
        let step = st.data()[0] as u64;
        adam.t = st.data()[1] as u64;
        let streams: [Option<&mut dyn StreamHolder>; 3] = [
            self.speech.as_mut().map(|s| s as &mut dyn StreamHolder),
            self.text.as_mut().map(|s| s as &mut dyn StreamHolder),
            self.paired.as_mut().map(|s| s as &mut dyn StreamHolder),
        ];
        for (key, s) in CKPT_STREAMS.iter().zip(streams) {
            if let Some(s) = s {
                let t = map.remove(*key).ok_or_else(|| bad(format!("missing {key}")))?;
                let state = StreamState::from_tensor(&t).ok_or_else(|| bad(format!("malformed {key}")))?;
                s.restore_state(state)?;
            }
        }
        self.params = params;
        self.adam = adam;
        self.step = step;
        Ok(())
    }
}

trait StreamHolder {
    fn restore_state(&mut self, s: StreamState) -> Result<(), SamplerError>;
}

impl<T> StreamHolder for LanguageStream<T> {
    fn restore_state(&mut self, s: StreamState) -> Result<(), SamplerError> {
        self.restore(s)
    }
}

/// Parameters reached only through text prediction, CTC or the text
/// embedding; speech-only training must leave them untouched.
pub fn text_side_params(cfg: &ModelConfig) -> Vec<&'static str> {
    let mut v = vec!["softmax.w", "softmax.b"];
    if !cfg.tie_text_embedding {
        v.push("text.emb");
    }
    v
}

/// Character vocabulary over every text and transcript of a corpus.
pub fn corpus_vocab(corpus: &SynthCorpus, size: usize) -> Result<CharVocab, crate::vocab::VocabError> {
    let text = corpus.text.iter().map(|t| (t.lang.as_str(), t.text.as_str()));
    let paired = corpus.paired.iter().map(|p| (p.lang.as_str(), p.transcript.as_str()));
    CharVocab::build(text.chain(paired), size)
}
