//! Finite-difference checks of every training objective, shared by the
//! `grad-check` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{gen_synth, CorpusError, SynthSpec};
use crate::evalkit::{synth_translation, EvalError, Seq2Seq, Seq2SeqConfig, SeqExample};
use crate::losses::{contrastive_loss, ctc_loss, mlm_loss, paired_loss, sample_distractors, LossError};
use crate::masking::{MaskPlan, Replacement};
use crate::model::{init_params, Modality, Model, ModelConfig, ModelError, PairedIn, QuantMode, SpeechIn, TextIn};
use crate::numerics::{grad_check, grad_check_params, sample_coords, NumericsError, ParamStore, Tape, Tensor};
use crate::trainer::{corpus_vocab, MaskConfig, PretrainData, Pretrainer, TrainConfig, TrainError};
use crate::vocab::{VocabError, BLANK};

pub const FD_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("{0} produced no loss term")]
    Missing(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub coords: usize,
    /// Coordinates whose analytic derivative is not exactly zero.
    pub nonzero: usize,
}

fn nonzero(a: &[f64]) -> usize {
    a.iter().filter(|&&v| v != 0.0).count()
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

fn lossy(name: &'static str) -> impl Fn(LossError) -> NumericsError {
    move |_| NumericsError::Empty(name)
}

pub fn check_ctc(seed: u64) -> Result<GradCheck, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, vec![8, 5], 2.0);
    let target = [1usize, 2, 2, 4];
    let err = grad_check(
        |t, x| {
            let lp = t.log_softmax(x);
            Ok(ctc_loss(t, lp, &target, 0).map_err(lossy("ctc"))?.0)
        },
        &x,
        FD_EPS,
    )?;
    Ok(GradCheck { name: "ctc", max_rel_err: err, coords: x.numel(), nonzero: x.numel() })
}

pub fn check_contrastive(seed: u64) -> Result<GradCheck, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, vec![6, 8], 1.0);
    let (d, _) = sample_distractors(6, 3, &mut rng);
    let err = grad_check(
        |t, x| {
            let c = t.slice_cols(x, 0, 4)?;
            let q = t.slice_cols(x, 4, 4)?;
            contrastive_loss(t, c, q, &d, 0.1).map_err(lossy("contrastive"))
        },
        &x,
        FD_EPS,
    )?;
    Ok(GradCheck { name: "contrastive", max_rel_err: err, coords: x.numel(), nonzero: x.numel() })
}

pub fn check_mlm(seed: u64) -> Result<GradCheck, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, vec![5, 7], 2.0);
    let err = grad_check(
        |t, x| {
            let lp = t.log_softmax(x);
            mlm_loss(t, lp, &[1, 6, 0, 3, 3]).map_err(lossy("mlm"))
        },
        &x,
        FD_EPS,
    )?;
    Ok(GradCheck { name: "mlm", max_rel_err: err, coords: x.numel(), nonzero: x.numel() })
}

fn small_model() -> Result<ModelConfig, ModelError> {
    let mut c = ModelConfig::desk();
    for (k, v) in [
        ("model_dim", "16"),
        ("ff_dim", "32"),
        ("n_heads", "2"),
        ("n_layers_contrastive", "1"),
        ("n_layers_mlm", "1"),
        ("subsample_factor", "2"),
        ("codebook_size", "8"),
        ("codebook_dim", "8"),
        ("frame_dim", "6"),
        ("vocab_size", "20"),
    ] {
        c.set(k, v)?;
    }
    Ok(c)
}

/// TLM on both halves plus CTC, through the whole encoder.
pub fn check_paired(seed: u64, n: usize) -> Result<GradCheck, SuiteError> {
    let cfg = small_model()?;
    let model = Model::new(cfg.clone())?;
    let store = init_params(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, vec![12, 6], 1.0);
    let ids = [7u32, 8, 9];
    let sp = MaskPlan::from_positions(vec![2], Replacement::MaskEmbedding);
    let tp = MaskPlan::from_positions(vec![1], Replacement::MaskToken);
    let objective = |s: &ParamStore, grads: bool| -> Result<(f64, Option<_>), SuiteError> {
        let mut t = Tape::new();
        let mut p = s.bind(&[]);
        let input = PairedIn {
            speech: SpeechIn::new(&x, &sp),
            text: TextIn { ids: &ids, plan: &tp },
        };
        let o = model.encode_paired(&mut t, &mut p, input, &QuantMode::Soft { temperature: 1.5, seed })?;
        let terms = paired_loss(&mut t, &mut p, &model, &[&o], &[&ids], &[&tp], true, BLANK as usize)?;
        let parts = [terms.tlm_text, terms.tlm_speech, terms.ctc];
        if parts.iter().any(Option::is_none) {
            return Err(SuiteError::Missing("paired"));
        }
        let parts: Vec<_> = parts.into_iter().flatten().collect();
        let all = t.concat_rows(&parts)?;
        let root = t.sum(all);
        let g = if grads { Some(p.gradients(&t.backward(root)?)) } else { None };
        Ok((t.scalar(root), g))
    };
    let (_, g) = objective(&store, true)?;
    let g = g.expect("gradients requested");
    let coords = sample_coords(&store, n, seed, |_| true);
    let analytic: Vec<f64> = coords.iter().map(|(k, i)| g.get(k).map_or(0.0, |v| v[*i])).collect();
    let err = grad_check_params(&store, &coords, &analytic, FD_EPS, |s| objective(s, false).map(|r| r.0))?;
    Ok(GradCheck { name: "paired", max_rel_err: err, coords: coords.len(), nonzero: nonzero(&analytic) })
}

/// Teacher-forced decoder cross-entropy, encoder included, on both input
/// modalities.
pub fn check_seq2seq(seed: u64, n: usize) -> Result<GradCheck, SuiteError> {
    let mut mc = ModelConfig::desk();
    for (k, v) in [("model_dim", "16"), ("ff_dim", "32"), ("n_heads", "2"), ("n_layers_contrastive", "1"), ("n_layers_mlm", "1")] {
        mc.set(k, v)?;
    }
    let model = Model::new(mc.clone())?;
    let enc = init_params(&mc, seed)?;
    let corpus = gen_synth(&SynthSpec::default(), 4, seed)?;
    let vocab = corpus_vocab(&corpus, mc.vocab_size)?;
    let data = synth_translation(&corpus.world, "aa", None, 3, &vocab, seed)?;
    let cfg = Seq2SeqConfig {
        layers: 1,
        dim: 16,
        heads: 2,
        ff_dim: 32,
        max_len: 12,
        seed,
        ..Seq2SeqConfig::default()
    };
    let s2s = Seq2Seq::new(model, &enc, cfg)?;
    let refs: Vec<&SeqExample> = data.iter().collect();
    let mut worst = 0.0f64;
    let mut total = 0;
    let mut nz = 0;
    for modality in [Modality::Speech, Modality::Text] {
        let (_, grads) = s2s.loss_and_grads(&s2s.params, &refs, modality)?;
        let coords = sample_coords(&s2s.params, n, seed, |k| grads.contains_key(k));
        let analytic: Vec<f64> = coords.iter().map(|(k, i)| grads[k][*i]).collect();
        let err = grad_check_params(&s2s.params, &coords, &analytic, FD_EPS, |q| {
            s2s.loss_and_grads(q, &refs, modality).map(|r| r.0)
        })?;
        worst = worst.max(err);
        total += coords.len();
        nz += nonzero(&analytic);
    }
    Ok(GradCheck { name: "seq2seq", max_rel_err: worst, coords: total, nonzero: nz })
}

/// Total weighted loss of one desk-preset pre-training step, all five
/// terms active, against `n` uniformly drawn parameter coordinates.
pub fn check_pretrain_step(seed: u64, n: usize) -> Result<GradCheck, SuiteError> {
    let mc = ModelConfig::desk();
    let corpus = gen_synth(&SynthSpec::default(), 6, seed)?;
    let vocab = corpus_vocab(&corpus, mc.vocab_size)?;
    let data = PretrainData::from_synth(&corpus, &vocab);
    let tc = TrainConfig {
        batch: (2, 2, 2),
        seed,
        masking: MaskConfig {
            text_span: 2,
            text_ratio: 0.3,
            speech_start_prob: 0.2,
            speech_span: 2,
        },
        ..TrainConfig::default()
    };
    let mut tr = Pretrainer::new(mc, tc, &data)?;
    let batch = tr.next_batch()?;
    let weights = tr.cfg.variant.weights(tr.cfg.weights);
    let rng_seed = seed ^ 0x9c;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (_, log, grads) = tr.loss_and_grads(&batch, &weights, 1, &mut rng, true)?;
    if log.components().iter().any(|&c| c == 0.0) {
        return Err(SuiteError::Missing("pre-training step"));
    }
    let coords = sample_coords(&tr.params, n, seed, |_| true);
    let analytic: Vec<f64> = coords.iter().map(|(k, i)| grads.get(k).map_or(0.0, |g| g[*i])).collect();
    let err = grad_check_params(&tr.params, &coords, &analytic, FD_EPS, |s| tr.loss_with(s, &batch, 1, rng_seed, true))?;
    Ok(GradCheck { name: "pretrain-step", max_rel_err: err, coords: coords.len(), nonzero: nonzero(&analytic) })
}

/// Every check in order: ctc, contrastive, mlm, paired, seq2seq and a
/// full pre-training step over `n` parameters.
pub fn grad_suite(seed: u64, n: usize) -> Result<Vec<GradCheck>, SuiteError> {
    Ok(vec![
        check_ctc(seed)?,
        check_contrastive(seed)?,
        check_mlm(seed)?,
        check_paired(seed, n)?,
        check_seq2seq(seed, n)?,
        check_pretrain_step(seed, n)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_objective_passes() {
        for c in grad_suite(5, 20).unwrap() {
            assert!(c.max_rel_err < 1e-4, "{c:?}");
            assert!(c.nonzero > 0, "{c:?}");
        }
    }
}
