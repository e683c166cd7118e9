//! Fine-tuning harnesses and cross-modal evaluation: a max-pool
//! classifier, an attached sequence decoder, and the transfer matrix.

mod classifier;
mod seq2seq;
mod tasks;

pub use classifier::{
    classifier_accuracy, finetune_classifier, train_classifier, ClassifierConfig, ClassifierOutcome, Grid, GridPoint,
};
pub use seq2seq::{finetune_seq2seq, joint_split, DecodeScore, Seq2Seq, Seq2SeqConfig, Seq2SeqOutcome, SeqExample};
pub use tasks::{class_chars, synth_classification, synth_translation, TranslationMap};

use std::fmt;

use thiserror::Error;

use crate::model::{Modality, Model, ModelError, QuantMode, SpeechIn, TextIn};
use crate::masking::{MaskPlan, Replacement};
use crate::numerics::{Bound, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::losses::LossError;
use crate::vocab::VocabError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error("no {0} examples")]
    NoData(&'static str),
    #[error("example {index} lacks {modality:?} input")]
    MissingModality { index: usize, modality: Modality },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("label {label} outside {classes} classes")]
    BadLabel { label: usize, classes: usize },
}

/// A labeled example that may carry speech, text or both.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub lang: String,
    pub frames: Option<Tensor>,
    pub ids: Option<Vec<u32>>,
    pub label: usize,
}

impl LabeledExample {
    pub fn has(&self, m: Modality) -> bool {
        match m {
            Modality::Speech => self.frames.is_some(),
            Modality::Text => self.ids.is_some(),
        }
    }
}

/// Encoder input for one sequence.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Speech(&'a Tensor),
    Text(&'a [u32]),
}

impl<'a> Input<'a> {
    pub fn of(e: &'a LabeledExample, m: Modality, index: usize) -> Result<Self, EvalError> {
        match m {
            Modality::Speech => e.frames.as_ref().map(Input::Speech),
            Modality::Text => e.ids.as_deref().map(Input::Text),
        }
        .ok_or(EvalError::MissingModality { index, modality: m })
    }
}

/// Encodes inputs on `tape` and returns each sequence's valid output rows.
pub fn encode_on_tape(
    model: &Model,
    tape: &mut Tape,
    p: &mut Bound,
    inputs: &[Input],
) -> Result<Vec<Var>, EvalError> {
    let speech_plan = MaskPlan::empty(Replacement::MaskEmbedding);
    let text_plan = MaskPlan::empty(Replacement::MaskToken);
    let mut speech = Vec::new();
    let mut text = Vec::new();
    for i in inputs {
        match i {
            Input::Speech(f) => speech.push(SpeechIn::new(f, &speech_plan)),
            Input::Text(ids) => text.push(TextIn { ids, plan: &text_plan }),
        }
    }
    let fwd = model.forward(tape, p, &speech, &text, &[], &QuantMode::Off)?;
    let (mut si, mut ti) = (fwd.speech.into_iter(), fwd.text.into_iter());
    let mut out = Vec::with_capacity(inputs.len());
    for i in inputs {
        let o = match i {
            Input::Speech(_) => si.next(),
            Input::Text(_) => ti.next(),
        }
        .expect("one output per input");
        let rows: Vec<usize> = (0..o.len()).filter(|&r| o.valid[r]).collect();
        out.push(if rows.len() == o.len() {
            o.hidden
        } else {
            tape.select_rows(o.hidden, &rows)?
        });
    }
    Ok(out)
}

/// Frozen encoder features for every input, valid rows only.
pub fn frozen_features(model: &Model, params: &ParamStore, inputs: &[Input]) -> Result<Vec<Tensor>, EvalError> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        let mut tape = Tape::new();
        let mut p = params.bind(&[""]);
        let vars = encode_on_tape(model, &mut tape, &mut p, chunk)?;
        out.extend(vars.into_iter().map(|v| tape.to_tensor(v)));
    }
    Ok(out)
}

/// Scores indexed by fine-tuning modality × evaluation modality. Every
/// cell comes from the same pre-trained checkpoint and evaluation set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TransferMatrix {
    pub s2s: f64,
    pub s2t: f64,
    pub t2s: f64,
    pub t2t: f64,
}

impl TransferMatrix {
    pub fn get(&self, train: Modality, eval: Modality) -> f64 {
        match (train, eval) {
            (Modality::Speech, Modality::Speech) => self.s2s,
            (Modality::Speech, Modality::Text) => self.s2t,
            (Modality::Text, Modality::Speech) => self.t2s,
            (Modality::Text, Modality::Text) => self.t2t,
        }
    }

    pub fn set(&mut self, train: Modality, eval: Modality, v: f64) {
        match (train, eval) {
            (Modality::Speech, Modality::Speech) => self.s2s = v,
            (Modality::Speech, Modality::Text) => self.s2t = v,
            (Modality::Text, Modality::Speech) => self.t2s = v,
            (Modality::Text, Modality::Text) => self.t2t = v,
        }
    }

    /// Tab-separated 2×2 table with a row label per fine-tuning modality.
    pub fn to_tsv(&self, label: &str) -> String {
        format!(
            "{label}\tS\tT\nS\t{:.4}\t{:.4}\nT\t{:.4}\t{:.4}\n",
            self.s2s, self.s2t, self.t2s, self.t2t
        )
    }
}

impl fmt::Display for TransferMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "S→S {:.4}  S→T {:.4}  T→S {:.4}  T→T {:.4}",
            self.s2s, self.s2t, self.t2s, self.t2t
        )
    }
}

/// Fine-tunes a classifier on each modality and scores it on both. The
/// evaluation set must carry both modalities for every example.
#[allow(clippy::too_many_arguments)]
pub fn zero_shot_eval(
    model: &Model,
    encoder: &ParamStore,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    test: &[LabeledExample],
    grid: &Grid,
    base: &ClassifierConfig,
) -> Result<TransferMatrix, EvalError> {
    for (i, e) in test.iter().enumerate() {
        for m in [Modality::Speech, Modality::Text] {
            if !e.has(m) {
                return Err(EvalError::MissingModality { index: i, modality: m });
            }
        }
    }
    let mut out = TransferMatrix::default();
    for train_m in [Modality::Speech, Modality::Text] {
        let fit = finetune_classifier(model, encoder, train, dev, &[], train_m, grid, base)?;
        for eval_m in [Modality::Speech, Modality::Text] {
            let acc = classifier_accuracy(model, &fit.params, test, eval_m, base.n_classes)?;
            out.set(train_m, eval_m, acc);
        }
    }
    Ok(out)
}
